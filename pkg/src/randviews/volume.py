"""CT volume container, raw+sidecar IO, HU windowing and trilinear sampling."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

AIR_HU = -1000.0
DEFAULT_ISO_SPACING_MM = 1.0


class VolumeError(ValueError):
    """Raised for malformed volumes or volume files."""


@dataclass(frozen=True)
class WindowLevel:
    lo_hu: float = -100.0
    hi_hu: float = 200.0

    def __post_init__(self):
        if not self.lo_hu < self.hi_hu:
            raise ValueError(f"window lo ({self.lo_hu}) must be below hi ({self.hi_hu})")


SOFT_TISSUE = WindowLevel(-100.0, 200.0)


@dataclass(frozen=True, eq=False)
class Volume:
    """Scalar HU grid indexed ``voxels[x, y, z]``.

    Voxel ``(i, j, k)`` sits at world position ``origin_mm + (i, j, k) * spacing_mm``.
    """

    voxels: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin_mm: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        vox = np.asarray(self.voxels, dtype=np.float32)
        if vox.ndim != 3:
            raise VolumeError(f"voxels must be 3D, got shape {vox.shape}")
        if min(vox.shape) < 2:
            raise VolumeError(f"dims must be >= 2 along every axis, got {vox.shape}")
        spacing = tuple(float(s) for s in self.spacing_mm)
        origin = tuple(float(o) for o in self.origin_mm)
        if len(spacing) != 3 or any(not s > 0 for s in spacing):
            raise VolumeError(f"spacing must be three positive values, got {spacing}")
        if len(origin) != 3 or not all(math.isfinite(o) for o in origin):
            raise VolumeError(f"origin must be three finite values, got {origin}")
        vox.flags.writeable = False
        object.__setattr__(self, "voxels", vox)
        object.__setattr__(self, "spacing_mm", spacing)
        object.__setattr__(self, "origin_mm", origin)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.voxels.shape)

    def index_to_world(self, ijk) -> np.ndarray:
        return np.asarray(self.origin_mm) + np.asarray(ijk, dtype=np.float64) * np.asarray(self.spacing_mm)

    def world_to_index(self, points_mm) -> np.ndarray:
        return (np.asarray(points_mm, dtype=np.float64) - np.asarray(self.origin_mm)) / np.asarray(self.spacing_mm)


# --------------------------------------------------------------------------
# file IO

_RAW_SUFFIX = ".raw"


def save_volume(volume: Volume, path) -> None:
    """Write ``path`` (text sidecar) and a sibling little-endian float32 raw file."""
    path = Path(path)
    raw_path = path.with_suffix(_RAW_SUFFIX)
    nx, ny, nz = volume.dims
    lines = [
        f"dims = {nx} {ny} {nz}",
        "spacing_mm = " + " ".join(repr(s) for s in volume.spacing_mm),
        "origin_mm = " + " ".join(repr(o) for o in volume.origin_mm),
        "element_type = float32",
        "byte_order = little",
        f"data_file = {raw_path.name}",
    ]
    # x-fastest on disk
    data = volume.voxels.astype("<f4").ravel(order="F")
    with open(raw_path, "wb") as fh:
        fh.write(data.tobytes())
    path.write_text("\n".join(lines) + "\n")


def _parse_sidecar(text: str) -> dict[str, str]:
    meta = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise VolumeError(f"malformed metadata line {lineno}: {line!r}")
        key, value = line.split("=", 1)
        meta[key.strip()] = value.strip()
    return meta


def load_volume(path) -> Volume:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"volume metadata not found: {path}")
    meta = _parse_sidecar(path.read_text())
    try:
        dims = tuple(int(v) for v in meta["dims"].split())
        spacing = tuple(float(v) for v in meta["spacing_mm"].split())
        origin = tuple(float(v) for v in meta.get("origin_mm", "0 0 0").split())
        data_file = meta["data_file"]
    except (KeyError, ValueError) as exc:
        raise VolumeError(f"malformed metadata in {path}: {exc}") from exc
    if len(dims) != 3:
        raise VolumeError(f"dims must have 3 entries in {path}")
    if meta.get("element_type", "float32") != "float32":
        raise VolumeError(f"unsupported element_type {meta['element_type']!r}")
    if meta.get("byte_order", "little") != "little":
        raise VolumeError(f"unsupported byte_order {meta['byte_order']!r}")
    raw_path = path.parent / data_file
    if not raw_path.is_file():
        raise FileNotFoundError(f"raw voxel file not found: {raw_path}")
    raw = np.fromfile(raw_path, dtype="<f4")
    expected = dims[0] * dims[1] * dims[2]
    if raw.size != expected or os.path.getsize(raw_path) != 4 * expected:
        raise VolumeError(f"size mismatch: {raw_path} holds {raw.size} values, dims require {expected}")
    return Volume(raw.reshape(dims, order="F"), spacing, origin)


# --------------------------------------------------------------------------
# intensity + interpolation

def apply_window(value_hu, window: WindowLevel = SOFT_TISSUE):
    """Map HU to [0, 1] linearly between the window bounds, clamping outside.

    Works on scalars and arrays alike.
    """
    scaled = (np.asarray(value_hu, dtype=np.float64) - window.lo_hu) / (window.hi_hu - window.lo_hu)
    out = np.clip(scaled, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def sample_points(volume: Volume, points_mm, fill: float = AIR_HU) -> np.ndarray:
    """Trilinear interpolation at world points of shape ``(..., 3)``.

    Points outside the voxel-center support ``[0, n-1]`` on any axis get ``fill``.
    """
    pts = np.asarray(points_mm, dtype=np.float64)
    lead = pts.shape[:-1]
    idx = volume.world_to_index(pts.reshape(-1, 3))
    dims = np.asarray(volume.dims)
    inside = np.all((idx >= 0.0) & (idx <= dims - 1), axis=1)
    out = np.full(idx.shape[0], fill, dtype=np.float64)
    if inside.any():
        q = idx[inside]
        # the upper corner of the last cell is dims-2 so that q == n-1 stays in range
        base = np.minimum(np.floor(q).astype(np.intp), dims - 2)
        frac = q - base
        vox = volume.voxels
        x0, y0, z0 = base.T
        fx, fy, fz = frac.T
        acc = np.zeros(q.shape[0], dtype=np.float64)
        for dx in (0, 1):
            wx = fx if dx else 1.0 - fx
            for dy in (0, 1):
                wy = fy if dy else 1.0 - fy
                for dz in (0, 1):
                    wz = fz if dz else 1.0 - fz
                    acc += wx * wy * wz * vox[x0 + dx, y0 + dy, z0 + dz]
        out[inside] = acc
    return out.reshape(lead)


def sample_trilinear(volume: Volume, point_mm) -> float:
    return float(sample_points(volume, np.asarray(point_mm, dtype=np.float64).reshape(1, 3))[0])


def resample_isotropic(volume: Volume, target_spacing_mm: float = DEFAULT_ISO_SPACING_MM) -> Volume:
    """Resample onto an isotropic grid sharing the input origin.

    The extent per axis is the voxel-center support ``(n - 1) * spacing``, so every
    output voxel lies inside the input and no fill values leak in.
    """
    t = float(target_spacing_mm)
    if not t > 0:
        raise ValueError(f"target spacing must be positive, got {target_spacing_mm}")
    extent = (np.asarray(volume.dims) - 1) * np.asarray(volume.spacing_mm)
    new_dims = tuple(int(math.ceil(e / t - 1e-9)) for e in extent)
    if min(new_dims) < 2:
        raise VolumeError(f"resampled dims {new_dims} degenerate (< 2) at spacing {t}")
    axes = [volume.origin_mm[a] + t * np.arange(new_dims[a]) for a in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    values = sample_points(volume, grid)
    return Volume(values.astype(np.float32), (t, t, t), volume.origin_mm)
