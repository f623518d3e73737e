"""Random 2.5D views of a candidate VOI.

Every candidate is observed ``len(scales) * n_translations * n_rotations`` times.
Each observation is a (scale, translation, rotation) triple and yields one
three-channel patch made of the three coordinate planes of the rotated frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .volume import SOFT_TISSUE, Volume, WindowLevel, apply_window, sample_points

POSITIVE = 1
NEGATIVE = 0

# (in-plane column axis, in-plane row axis) as columns of the rotation
CHANNEL_AXES = ((0, 1), (0, 2), (1, 2))  # axial, coronal, sagittal


@dataclass(frozen=True)
class Candidate:
    patient_id: str
    center_mm: tuple[float, float, float]
    label: int = NEGATIVE

    def __post_init__(self):
        center = tuple(float(c) for c in self.center_mm)
        if len(center) != 3 or not all(math.isfinite(c) for c in center):
            raise ValueError(f"candidate center must be 3 finite coordinates, got {self.center_mm}")
        if self.label not in (POSITIVE, NEGATIVE):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        object.__setattr__(self, "center_mm", center)
        object.__setattr__(self, "patient_id", str(self.patient_id))


@dataclass(frozen=True)
class SamplerConfig:
    scales_mm: tuple[float, ...] = (30.0, 35.0, 40.0, 45.0)
    n_translations: int = 5
    n_rotations: int = 5
    max_translation_mm: float = 3.0
    patch_pixels: int = 32
    window: WindowLevel = field(default_factory=lambda: SOFT_TISSUE)
    seed: int = 0

    def __post_init__(self):
        scales = tuple(float(s) for s in self.scales_mm)
        object.__setattr__(self, "scales_mm", scales)
        if not scales or any(not s > 0 for s in scales):
            raise ValueError(f"scales must be non-empty and positive, got {scales}")
        if self.n_translations < 1 or self.n_rotations < 1:
            raise ValueError("n_translations and n_rotations must be >= 1")
        if self.max_translation_mm < 0:
            raise ValueError("max_translation_mm must be >= 0")
        if self.patch_pixels < 8:
            raise ValueError("patch_pixels must be >= 8")

    @property
    def n_views(self) -> int:
        return len(self.scales_mm) * self.n_translations * self.n_rotations


@dataclass(frozen=True, eq=False)
class Observation:
    scale_mm: float
    translation_mm: np.ndarray
    rotation: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, Observation):
            return NotImplemented
        return (
            self.scale_mm == other.scale_mm
            and np.array_equal(self.translation_mm, other.translation_mm)
            and np.array_equal(self.rotation, other.rotation)
        )


def random_unit_vector(rng: np.random.Generator) -> np.ndarray:
    # normalized Gaussian triples are uniform on the sphere
    while True:
        v = rng.standard_normal(3)
        norm = np.linalg.norm(v)
        if norm > 1e-12:
            return v / norm


def rotation_from_axis_angle(axis, angle_rad: float) -> np.ndarray:
    """Rodrigues: ``R = I + sin(a) K + (1 - cos(a)) K^2`` with ``K`` the cross-product matrix."""
    k = np.asarray(axis, dtype=np.float64)
    if k.shape != (3,) or abs(np.linalg.norm(k) - 1.0) > 1e-9:
        raise ValueError(f"rotation axis must be a unit 3-vector, got {axis}")
    K = np.array([
        [0.0, -k[2], k[1]],
        [k[2], 0.0, -k[0]],
        [-k[1], k[0], 0.0],
    ])
    return np.eye(3) + math.sin(angle_rad) * K + (1.0 - math.cos(angle_rad)) * (K @ K)


def random_ball_point(rng: np.random.Generator, radius: float) -> np.ndarray:
    if radius == 0:
        return np.zeros(3)
    r = radius * rng.random() ** (1.0 / 3.0)
    return r * random_unit_vector(rng)


def generate_observations(candidate: Candidate, config: SamplerConfig, rng: np.random.Generator) -> list[Observation]:
    """Scale-major list of observations; the candidate itself only fixes order, not values."""
    obs = []
    for scale in config.scales_mm:
        for _ in range(config.n_translations):
            shift = random_ball_point(rng, config.max_translation_mm)
            for _ in range(config.n_rotations):
                axis = random_unit_vector(rng)
                angle = rng.uniform(0.0, 2.0 * math.pi)
                obs.append(Observation(scale, shift, rotation_from_axis_angle(axis, angle)))
    return obs


def candidate_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream per (seed, candidate index), so chunking never changes results."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def _pixel_offsets(scale_mm: float, pixels: int) -> np.ndarray:
    return scale_mm * ((np.arange(pixels) + 0.5) / pixels - 0.5)


def plane_points(center_mm, obs: Observation, pixels: int) -> np.ndarray:
    """World sample points of shape ``(pixels, pixels, 3, 3)``: row, column, channel, xyz."""
    c = np.asarray(center_mm, dtype=np.float64) + obs.translation_mm
    off = _pixel_offsets(obs.scale_mm, pixels)
    pts = np.empty((pixels, pixels, 3, 3))
    for ch, (ia, ib) in enumerate(CHANNEL_AXES):
        a = obs.rotation[:, ia]
        b = obs.rotation[:, ib]
        pts[:, :, ch, :] = c + off[None, :, None] * a + off[:, None, None] * b
    return pts


def extract_patch(volume: Volume, candidate: Candidate, obs: Observation, config: SamplerConfig) -> np.ndarray:
    """Return a ``(P, P, 3)`` float64 patch in [0, 1]; rows follow the second in-plane axis."""
    pts = plane_points(candidate.center_mm, obs, config.patch_pixels)
    return apply_window(sample_points(volume, pts), config.window)


def candidate_patches(volume: Volume, candidate: Candidate, index: int, config: SamplerConfig) -> np.ndarray:
    """All ``N`` patches of one candidate, stacked ``(N, P, P, 3)``, in observation order."""
    observations = generate_observations(candidate, config, candidate_rng(config.seed, index))
    pts = np.stack([plane_points(candidate.center_mm, o, config.patch_pixels) for o in observations])
    return apply_window(sample_points(volume, pts), config.window)


def extract_all_patches(volume: Volume, candidates, config: SamplerConfig, start_index: int = 0):
    """``(candidate index, patch)`` pairs; ``start_index`` offsets indices for chunked calls."""
    out = []
    for offset, cand in enumerate(candidates):
        idx = start_index + offset
        for patch in candidate_patches(volume, cand, idx, config):
            out.append((idx, patch))
    return out
