"""Detection metrics and cross-validation helpers."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

MATCH_RADIUS_MM = 15.0


@dataclass(frozen=True)
class FrocPoint:
    threshold: float
    sensitivity: float
    fp_per_volume: float


def _scores_labels(scores) -> tuple[np.ndarray, np.ndarray]:
    """Accept CandidateScore-like objects or ``(probability, label)`` pairs."""
    probs, labels = [], []
    for s in scores:
        if hasattr(s, "probability"):
            probs.append(s.probability)
            labels.append(s.label)
        else:
            p, lab = s
            probs.append(p)
            labels.append(lab)
    return np.asarray(probs, dtype=np.float64), np.asarray(labels, dtype=np.intp)


def froc_curve(scores, n_volumes: int) -> list[FrocPoint]:
    """One point per distinct score, descending; a candidate scoring exactly the threshold counts as detected."""
    probs, labels = _scores_labels(scores)
    if n_volumes <= 0:
        raise ValueError("n_volumes must be positive")
    n_pos = int(np.sum(labels == 1))
    if n_pos == 0:
        raise ValueError("FROC needs at least one positive candidate")
    thresholds = np.unique(probs)[::-1]
    order = np.argsort(-probs, kind="stable")
    sorted_p = probs[order]
    cum_pos = np.cumsum(labels[order] == 1)
    cum_neg = np.cumsum(labels[order] == 0)
    points = []
    for t in thresholds:
        # number of candidates with score >= t
        k = int(np.searchsorted(-sorted_p, -t, side="right"))
        points.append(FrocPoint(float(t), float(cum_pos[k - 1] / n_pos), float(cum_neg[k - 1] / n_volumes)))
    return points


def sensitivity_at_fp(curve: Sequence[FrocPoint], fp_per_vol: float) -> float:
    qualifying = [p.sensitivity for p in curve if p.fp_per_volume <= fp_per_vol]
    return float(max(qualifying)) if qualifying else 0.0


def roc_auc(scores) -> float:
    """Mann-Whitney AUC with ties counted as one half, via midranks."""
    probs, labels = _scores_labels(scores)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative candidates")
    order = np.argsort(probs, kind="stable")
    sorted_p = probs[order]
    ranks = np.empty(len(probs))
    # midranks for tied groups (1-based)
    _, starts, counts = np.unique(sorted_p, return_index=True, return_counts=True)
    mid = starts + (counts + 1) / 2.0
    ranks[order] = np.repeat(mid, counts)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(scores) -> list[tuple[float, float, float]]:
    """``(threshold, false positive rate, true positive rate)`` per distinct score, descending."""
    probs, labels = _scores_labels(scores)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both positive and negative candidates")
    out = [(math.inf, 0.0, 0.0)]
    for t in np.unique(probs)[::-1]:
        hit = probs >= t
        out.append((float(t), float(np.sum(hit & (labels == 0)) / n_neg), float(np.sum(hit & (labels == 1)) / n_pos)))
    return out


# --------------------------------------------------------------------------
# Fisher's exact test

def _log_hypergeom(a: int, row1: int, col1: int, n: int) -> float:
    """log P(top-left = a) for a 2x2 table with the given margins."""
    b = row1 - a
    c = col1 - a
    d = n - row1 - col1 + a
    lf = math.lgamma
    return (lf(row1 + 1) + lf(n - row1 + 1) + lf(col1 + 1) + lf(n - col1 + 1)
            - lf(n + 1) - lf(a + 1) - lf(b + 1) - lf(c + 1) - lf(d + 1))


def fisher_exact(table) -> float:
    """Two-sided p-value: total probability of margin-preserving tables no likelier than the observed one."""
    (a, b), (c, d) = [[int(v) for v in row] for row in table]
    if min(a, b, c, d) < 0:
        raise ValueError("table counts must be non-negative")
    row1, col1, n = a + b, a + c, a + b + c + d
    if row1 == 0 or col1 == 0 or row1 == n or col1 == n:
        return 1.0
    lo = max(0, row1 + col1 - n)
    hi = min(row1, col1)
    logs = np.array([_log_hypergeom(x, row1, col1, n) for x in range(lo, hi + 1)])
    observed = logs[a - lo]
    # relative tolerance guards against rounding in tables of equal probability
    keep = logs <= observed + 1e-12 * max(1.0, abs(observed)) + 1e-12
    top = logs.max()
    p = math.exp(top) * float(np.sum(np.exp(logs[keep] - top)))
    return min(1.0, p)


def operating_point_table(scores_a, scores_b, n_volumes: int, fp_per_vol: float) -> list[list[int]]:
    """Detected / missed positives at the operating point, system A (row 0) vs system B (row 1)."""
    rows = []
    for scores in (scores_a, scores_b):
        _, labels = _scores_labels(scores)
        n_pos = int(np.sum(labels == 1))
        sens = sensitivity_at_fp(froc_curve(scores, n_volumes), fp_per_vol)
        hit = int(round(sens * n_pos))
        rows.append([hit, n_pos - hit])
    return rows


# --------------------------------------------------------------------------
# folds, balancing, ground-truth matching

def make_folds(patient_ids, k: int = 3, seed: int = 0) -> dict[str, int]:
    """Seeded shuffle, then round-robin; fold sizes differ by at most one."""
    ids = list(dict.fromkeys(patient_ids))
    if k < 2:
        raise ValueError("k must be >= 2")
    if len(ids) < k:
        raise ValueError(f"{len(ids)} patients cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    return {ids[j]: pos % k for pos, j in enumerate(order)}


def fold_sizes(assignment: dict, k: int) -> list[int]:
    sizes = [0] * k
    for f in assignment.values():
        sizes[f] += 1
    return sizes


def balance_indices(labels, rng: np.random.Generator) -> np.ndarray:
    """Indices giving equal class counts: majority kept whole, minority drawn with replacement.

    The minority class is kept whole and topped up with random repeats, so no
    example is lost.
    """
    y = np.asarray(labels, dtype=np.intp)
    pos = np.flatnonzero(y == 1)
    neg = np.flatnonzero(y == 0)
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("balancing needs both classes")
    major, minor = (pos, neg) if len(pos) >= len(neg) else (neg, pos)
    extra = rng.choice(minor, size=len(major) - len(minor), replace=True)
    return np.concatenate([major, minor, extra]) if len(extra) else np.concatenate([major, minor])


def balance_training_set(patches, labels, rng: np.random.Generator):
    idx = balance_indices(labels, rng)
    return np.asarray(patches)[idx], np.asarray(labels)[idx]


def match_to_truth(points_mm, truth_mm, radius_mm: float = MATCH_RADIUS_MM) -> np.ndarray:
    """Label 1 for each point within ``radius_mm`` (Euclidean, world mm) of a true center."""
    pts = np.asarray(points_mm, dtype=np.float64).reshape(-1, 3)
    truth = np.asarray(truth_mm, dtype=np.float64).reshape(-1, 3)
    if len(truth) == 0:
        return np.zeros(len(pts), dtype=np.intp)
    dist = np.linalg.norm(pts[:, None, :] - truth[None, :, :], axis=-1)
    return (dist.min(axis=1) <= radius_mm).astype(np.intp)
