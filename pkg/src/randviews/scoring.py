"""Per-candidate probabilities as the plain mean of per-view CNN probabilities."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .views import Candidate, SamplerConfig, candidate_patches
from .volume import Volume


@dataclass(frozen=True)
class CandidateScore:
    patient_id: str
    candidate_index: int
    probability: float
    n_views: int
    label: int

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"probability {self.probability} outside [0, 1]")
        if self.n_views < 1:
            raise ValueError("n_views must be >= 1")


def aggregate(view_probs: Sequence[float]) -> float:
    p = np.asarray(view_probs, dtype=np.float64).reshape(-1)
    if p.size == 0:
        raise ValueError("cannot aggregate an empty set of view probabilities")
    if np.any((p < 0) | (p > 1)) or not np.all(np.isfinite(p)):
        raise ValueError("view probabilities must lie in [0, 1]")
    # fsum keeps the mean exact to rounding and independent of view order
    mean = math.fsum(p.tolist()) / p.size
    return min(max(mean, float(p.min())), float(p.max()))


def running_means(view_probs: Sequence[float]) -> np.ndarray:
    """``out[n-1]`` is the aggregate of the first ``n`` views."""
    p = np.asarray(view_probs, dtype=np.float64).reshape(-1)
    return np.array([aggregate(p[:n]) for n in range(1, p.size + 1)])


def view_probabilities(model, volume: Volume, candidate: Candidate, index: int, config: SamplerConfig) -> np.ndarray:
    """CNN node probability for each of the candidate's views, in observation order.

    All views of one candidate go through the network as a single batch so the
    floating-point result never depends on how candidates are grouped.
    """
    patches = candidate_patches(volume, candidate, index, config)
    return model.predict_batch(patches, batch_size=len(patches))


def score_candidate(model, volume: Volume, candidate: Candidate, config: SamplerConfig, index: int = 0) -> CandidateScore:
    probs = view_probabilities(model, volume, candidate, index, config)
    return CandidateScore(candidate.patient_id, index, aggregate(probs), len(probs), candidate.label)


def score_views(model, volumes: Mapping[str, Volume], candidates: Sequence[Candidate], config: SamplerConfig,
                indices: Sequence[int] | None = None, threads: int = 1) -> list[np.ndarray]:
    """Per-view probabilities for every candidate; ``indices`` default to list positions."""
    if indices is None:
        indices = range(len(candidates))
    indices = list(indices)
    for cand in candidates:
        if cand.patient_id not in volumes:
            raise KeyError(f"no volume for patient {cand.patient_id!r}")

    def work(pair):
        idx, cand = pair
        return view_probabilities(model, volumes[cand.patient_id], cand, idx, config)

    jobs = list(zip(indices, candidates))
    if threads <= 1:
        return [work(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(work, jobs))


def score_all(model, volumes: Mapping[str, Volume], candidates: Sequence[Candidate], config: SamplerConfig,
              indices: Sequence[int] | None = None, threads: int = 1) -> list[CandidateScore]:
    if indices is None:
        indices = list(range(len(candidates)))
    views = score_views(model, volumes, candidates, config, indices, threads)
    return [
        CandidateScore(c.patient_id, int(i), aggregate(v), len(v), c.label)
        for c, i, v in zip(candidates, indices, views)
    ]
