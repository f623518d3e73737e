"""Synthetic CT-like phantoms: compact ellipsoid nodes and elongated tube distractors.

Nodes and tubes share the same intensity, so a single slice through a tube
cross-section looks like a node; only the 3D extent tells them apart.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .views import NEGATIVE, POSITIVE, Candidate, random_unit_vector
from .volume import Volume

NEGATIVE_MIN_DISTANCE_MM = 15.0
_MAX_TRIES = 2000


class PlacementError(RuntimeError):
    """The requested objects do not fit in the volume."""


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple[int, int, int] = (80, 80, 48)
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.5)
    n_nodes: int = 5
    node_radius_mm: tuple[float, float] = (4.0, 10.0)
    n_distractors: int = 5
    tube_radius_mm: tuple[float, float] = (2.5, 5.0)
    min_tube_length_mm: float = 30.0
    negatives_per_distractor: int = 3
    n_background_negatives: int = 0
    count_jitter: int = 1
    background_hu: float = 20.0
    noise_hu: float = 15.0
    node_hu: float = 70.0
    margin_mm: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if len(self.dims) != 3 or min(self.dims) < 2:
            raise ValueError(f"dims must be >= 2 per axis, got {self.dims}")
        if min(self.spacing_mm) <= 0:
            raise ValueError("spacing must be positive")
        for lo, hi in (self.node_radius_mm, self.tube_radius_mm):
            if not 0 < lo <= hi:
                raise ValueError("radius ranges must satisfy 0 < lo <= hi")
        counts = (self.n_nodes, self.n_distractors, self.negatives_per_distractor,
                  self.n_background_negatives, self.count_jitter)
        if min(counts) < 0:
            raise ValueError("counts must be >= 0")
        if self.noise_hu < 0:
            raise ValueError("noise_hu must be >= 0")

    @property
    def extent_mm(self) -> np.ndarray:
        return (np.asarray(self.dims) - 1) * np.asarray(self.spacing_mm)


@dataclass
class Phantom:
    volume: Volume
    candidates: list[Candidate]
    node_centers: np.ndarray
    node_axes_mm: np.ndarray
    tube_points: np.ndarray
    tube_directions: np.ndarray
    tube_radii: np.ndarray


def _grid(config: PhantomConfig) -> np.ndarray:
    axes = [np.arange(n) * s for n, s in zip(config.dims, config.spacing_mm)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def _falloff(signed_depth_mm: np.ndarray) -> np.ndarray:
    # 1 mm linear ramp centered on the surface
    return np.clip(signed_depth_mm + 0.5, 0.0, 1.0)


def _random_rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _chord(p: np.ndarray, d: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> tuple[float, float]:
    """Parameter interval of the line ``p + t d`` inside the box ``[lo, hi]``."""
    t_lo, t_hi = -np.inf, np.inf
    for a in range(3):
        if abs(d[a]) < 1e-12:
            if not lo[a] <= p[a] <= hi[a]:
                return 0.0, 0.0
            continue
        t1, t2 = (lo[a] - p[a]) / d[a], (hi[a] - p[a]) / d[a]
        t_lo, t_hi = max(t_lo, min(t1, t2)), min(t_hi, max(t1, t2))
    return (float(t_lo), float(t_hi)) if t_hi > t_lo else (0.0, 0.0)


def _line_distance(points: np.ndarray, origin: np.ndarray, direction: np.ndarray) -> np.ndarray:
    d = points - origin
    along = d @ direction
    return np.linalg.norm(d - along[..., None] * direction, axis=-1)


def generate_phantom(config: PhantomConfig = PhantomConfig(), patient_id: str = "P000") -> Phantom:
    rng = np.random.default_rng(config.seed)
    extent = config.extent_mm
    lo = np.full(3, config.margin_mm)
    hi = extent - config.margin_mm
    if np.any(hi <= lo) and (config.n_nodes or config.n_distractors or config.n_background_negatives):
        raise PlacementError(f"margin {config.margin_mm} mm leaves no room in extent {extent}")

    def uniform_point():
        return lo + rng.random(3) * (hi - lo)

    # nodes: non-overlapping ellipsoids
    centers, axes_mm, frames = [], [], []
    for _ in range(config.n_nodes):
        for _ in range(_MAX_TRIES):
            r = rng.uniform(*config.node_radius_mm)
            semi = r * rng.uniform(0.75, 1.0, 3)
            semi[0] = r
            c = uniform_point()
            if all(np.linalg.norm(c - c2) > semi.max() + a2.max() + 3.0 for c2, a2 in zip(centers, axes_mm)):
                centers.append(c)
                axes_mm.append(semi)
                frames.append(_random_rotation(rng))
                break
        else:
            raise PlacementError(f"could not place {config.n_nodes} nodes")
    centers_arr = np.array(centers).reshape(-1, 3)

    # tubes: infinite lines through the box that stay clear of every node
    t_points, t_dirs, t_radii = [], [], []
    for _ in range(config.n_distractors):
        for _ in range(_MAX_TRIES):
            p = uniform_point()
            d = random_unit_vector(rng)
            rad = rng.uniform(*config.tube_radius_mm)
            t0, t1 = _chord(p, d, np.zeros(3), extent)
            if t1 - t0 < config.min_tube_length_mm:
                continue
            if not all(_line_distance(c, p, d) > a.max() + rad + 3.0 for c, a in zip(centers, axes_mm)):
                continue
            # negatives go on the tube, so part of it must be far enough from every node
            m0, m1 = _chord(p, d, lo, hi)
            probe = p + np.linspace(m0, m1, 64)[:, None] * d
            far = np.ones(len(probe), dtype=bool)
            for c in centers:
                far &= np.linalg.norm(probe - c, axis=1) > NEGATIVE_MIN_DISTANCE_MM + 1.0
            if config.negatives_per_distractor == 0 or far.any():
                t_points.append(p)
                t_dirs.append(d)
                t_radii.append(rad)
                break
        else:
            raise PlacementError(f"could not place {config.n_distractors} distractors clear of nodes")

    grid = _grid(config)
    weight = np.zeros(config.dims)
    for c, semi, frame in zip(centers, axes_mm, frames):
        local = (grid - c) @ frame
        rho = np.sqrt(np.sum((local / semi) ** 2, axis=-1))
        weight = np.maximum(weight, _falloff((1.0 - rho) * semi.min()))
    for p, d, rad in zip(t_points, t_dirs, t_radii):
        weight = np.maximum(weight, _falloff(rad - _line_distance(grid, p, d)))
    noise = rng.normal(0.0, config.noise_hu, config.dims) if config.noise_hu > 0 else 0.0
    hu = config.background_hu + weight * (config.node_hu - config.background_hu) + noise
    volume = Volume(hu.astype(np.float32), config.spacing_mm, (0.0, 0.0, 0.0))

    def far_from_nodes(q):
        return all(np.linalg.norm(q - c) > NEGATIVE_MIN_DISTANCE_MM for c in centers)

    def inside(q):
        return bool(np.all(q >= lo) and np.all(q <= hi))

    candidates = [Candidate(patient_id, tuple(c), POSITIVE) for c in centers]
    for p, d in zip(t_points, t_dirs):
        t_lo, t_hi = _chord(p, d, lo, hi)
        for _ in range(config.negatives_per_distractor):
            for _ in range(_MAX_TRIES):
                q = p + rng.uniform(t_lo, t_hi) * d
                if inside(q) and far_from_nodes(q):
                    candidates.append(Candidate(patient_id, tuple(q), NEGATIVE))
                    break
            else:
                raise PlacementError("could not place a distractor negative > 15 mm from every node")
    for _ in range(config.n_background_negatives):
        for _ in range(_MAX_TRIES):
            q = uniform_point()
            if far_from_nodes(q):
                candidates.append(Candidate(patient_id, tuple(q), NEGATIVE))
                break
        else:
            raise PlacementError("could not place a background negative > 15 mm from every node")

    return Phantom(
        volume=volume,
        candidates=candidates,
        node_centers=centers_arr,
        node_axes_mm=np.array(axes_mm).reshape(-1, 3),
        tube_points=np.array(t_points).reshape(-1, 3),
        tube_directions=np.array(t_dirs).reshape(-1, 3),
        tube_radii=np.array(t_radii),
    )


def patient_ids(n_patients: int) -> list[str]:
    width = max(3, len(str(n_patients - 1)))
    return [f"P{i:0{width}d}" for i in range(n_patients)]


def generate_cohort(n_patients: int, config: PhantomConfig = PhantomConfig(), seed: int = 0) -> dict[str, Phantom]:
    """Independent phantoms keyed by patient id; counts jitter by up to ``count_jitter`` per patient."""
    if n_patients < 1:
        raise ValueError("n_patients must be >= 1")
    cohort = {}
    for i, pid in enumerate(patient_ids(n_patients)):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), i]))
        jit = config.count_jitter
        sub = replace(
            config,
            seed=int(rng.integers(2**63)),
            n_nodes=max(0, config.n_nodes + int(rng.integers(-jit, jit + 1))),
            n_distractors=max(0, config.n_distractors + int(rng.integers(-jit, jit + 1))),
        )
        cohort[pid] = generate_phantom(sub, pid)
    return cohort


def principal_axis_ratio(mask: np.ndarray, spacing_mm=(1.0, 1.0, 1.0)) -> float:
    """Ratio of largest to smallest principal standard deviation of a voxel set."""
    pts = np.argwhere(mask) * np.asarray(spacing_mm)
    if len(pts) < 4:
        return math.inf
    eig = np.linalg.eigvalsh(np.cov(pts.T))
    return float(math.sqrt(max(eig[-1], 0.0) / max(eig[0], 1e-12)))
