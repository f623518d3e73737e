"""On-disk formats: candidate/score CSVs, the patch dataset file and per-view scores."""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from .views import Candidate

PATCH_MAGIC = b"RVPATCH\x00"
PATCH_VERSION = 1
_PATCH_HEADER = struct.Struct("<8sIIIQ")

CANDIDATE_COLUMNS = ["patient_id", "x_mm", "y_mm", "z_mm", "label"]
SCORE_COLUMNS = ["patient_id", "candidate_index", "label", "n_views", "probability"]


class FormatError(ValueError):
    pass


def write_candidates(path, candidates) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CANDIDATE_COLUMNS)
        for c in candidates:
            w.writerow([c.patient_id, *(repr(v) for v in c.center_mm), c.label])


def read_candidates(path) -> list[Candidate]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"candidate file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(CANDIDATE_COLUMNS) - set(reader.fieldnames or [])
        if missing:
            raise FormatError(f"{path}: missing columns {sorted(missing)}")
        out = []
        for line, row in enumerate(reader, 2):
            try:
                center = (float(row["x_mm"]), float(row["y_mm"]), float(row["z_mm"]))
                out.append(Candidate(row["patient_id"], center, int(row["label"])))
            except (TypeError, ValueError) as exc:
                raise FormatError(f"{path}:{line}: {exc}") from exc
    return out


def write_scores(path, scores) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCORE_COLUMNS)
        for s in scores:
            w.writerow([s.patient_id, s.candidate_index, s.label, s.n_views, repr(float(s.probability))])


def read_scores(path):
    from .scoring import CandidateScore

    with open(path, newline="") as fh:
        return [
            CandidateScore(r["patient_id"], int(r["candidate_index"]), float(r["probability"]),
                           int(r["n_views"]), int(r["label"]))
            for r in csv.DictReader(fh)
        ]


def write_view_scores(path, indices, view_probs) -> None:
    """One row per candidate: index followed by its per-view probabilities in observation order."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["candidate_index", "view_probabilities"])
        for idx, probs in zip(indices, view_probs):
            w.writerow([int(idx), " ".join(repr(float(p)) for p in probs)])


def read_view_scores(path) -> dict[int, np.ndarray]:
    with open(path, newline="") as fh:
        return {
            int(r["candidate_index"]): np.array([float(v) for v in r["view_probabilities"].split()])
            for r in csv.DictReader(fh)
        }


# --------------------------------------------------------------------------
# patch dataset

def patch_record_dtype(patch_pixels: int) -> np.dtype:
    return np.dtype([("index", "<i4"), ("label", "u1"), ("pixels", "<f4", (patch_pixels, patch_pixels, 3))])


class PatchWriter:
    """Streams records; the header count is patched in on close."""

    def __init__(self, path, patch_pixels: int):
        self.path = Path(path)
        self.patch_pixels = patch_pixels
        self.dtype = patch_record_dtype(patch_pixels)
        self.count = 0
        self._fh = open(self.path, "wb")
        self._fh.write(_PATCH_HEADER.pack(PATCH_MAGIC, PATCH_VERSION, patch_pixels, 3, 0))

    def write(self, index: int, label: int, patches: np.ndarray) -> None:
        patches = np.asarray(patches)
        rec = np.zeros(len(patches), dtype=self.dtype)
        rec["index"] = index
        rec["label"] = label
        rec["pixels"] = patches
        self._fh.write(rec.tobytes())
        self.count += len(patches)

    def close(self) -> None:
        self._fh.seek(0)
        self._fh.write(_PATCH_HEADER.pack(PATCH_MAGIC, PATCH_VERSION, self.patch_pixels, 3, self.count))
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_patch_file(path) -> np.ndarray:
    """Memory-mapped structured array with fields ``index``, ``label``, ``pixels``."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"patch file not found: {path}")
    with open(path, "rb") as fh:
        head = fh.read(_PATCH_HEADER.size)
    if len(head) < _PATCH_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, pixels, channels, count = _PATCH_HEADER.unpack(head)
    if magic != PATCH_MAGIC or version != PATCH_VERSION or channels != 3:
        raise FormatError(f"{path}: not a version-{PATCH_VERSION} patch file")
    dtype = patch_record_dtype(pixels)
    expected = _PATCH_HEADER.size + count * dtype.itemsize
    if path.stat().st_size != expected:
        raise FormatError(f"{path}: size mismatch, header declares {count} records")
    if count == 0:
        return np.zeros(0, dtype=dtype)
    return np.memmap(path, dtype=dtype, mode="r", offset=_PATCH_HEADER.size, shape=(count,))
