"""Disk-backed pipeline stages: phantom -> extract -> train -> score -> eval.

Every stage reads its inputs from and writes its outputs to the locations in
``PipelineConfig.paths``; reruns with the same config reproduce the same bytes.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .cnn import CnnModel, train
from .config import PipelineConfig
from .formats import (
    PatchWriter, read_candidates, read_patch_file, read_scores, read_view_scores,
    write_candidates, write_scores, write_view_scores,
)
from .phantom import generate_cohort
from .report import froc_csv, froc_svg, roc_csv
from .scoring import CandidateScore, aggregate, score_views
from .views import candidate_patches
from .volume import load_volume, save_volume

log = logging.getLogger(__name__)

VOLUME_SUFFIX = ".vol"


class DataError(ValueError):
    """Inputs on disk are missing or inconsistent."""


def _pmap(fn, items, threads: int):
    if threads <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def volume_path(cfg: PipelineConfig, patient_id: str) -> Path:
    return cfg.paths.resolve("volumes") / f"{patient_id}{VOLUME_SUFFIX}"


def load_candidates(cfg: PipelineConfig):
    return read_candidates(cfg.paths.resolve("candidates"))


def load_volumes(cfg: PipelineConfig, patient_ids) -> dict:
    vols = {}
    for pid in dict.fromkeys(patient_ids):
        path = volume_path(cfg, pid)
        if not path.is_file():
            raise DataError(f"no volume for patient {pid!r} at {path}")
        vols[pid] = load_volume(path)
    return vols


def patient_folds(cfg: PipelineConfig, candidates) -> dict[str, int]:
    return ev.make_folds([c.patient_id for c in candidates], cfg.eval.k_folds, cfg.seed)


# --------------------------------------------------------------------------

def run_phantom(cfg: PipelineConfig) -> None:
    cohort = generate_cohort(cfg.cohort.n_patients, cfg.phantom, cfg.seed)
    vol_dir = cfg.paths.resolve("volumes")
    vol_dir.mkdir(parents=True, exist_ok=True)
    candidates = []
    for pid, ph in cohort.items():
        save_volume(ph.volume, volume_path(cfg, pid))
        candidates.extend(ph.candidates)
    cand_path = cfg.paths.resolve("candidates")
    cand_path.parent.mkdir(parents=True, exist_ok=True)
    write_candidates(cand_path, candidates)
    n_pos = sum(c.label for c in candidates)
    log.info("phantom: %d patients, %d positives, %d negatives", len(cohort), n_pos, len(candidates) - n_pos)


def run_extract(cfg: PipelineConfig) -> int:
    candidates = load_candidates(cfg)
    volumes = load_volumes(cfg, [c.patient_id for c in candidates])
    sampler = cfg.extract_sampler_config()
    out = cfg.paths.resolve("patches")
    out.parent.mkdir(parents=True, exist_ok=True)

    def work(idx):
        cand = candidates[idx]
        return candidate_patches(volumes[cand.patient_id], cand, idx, sampler)

    with PatchWriter(out, sampler.patch_pixels) as writer:
        # bounded chunks keep memory flat while preserving record order
        chunk = max(1, 4 * cfg.threads)
        for start in range(0, len(candidates), chunk):
            idxs = list(range(start, min(start + chunk, len(candidates))))
            for idx, patches in zip(idxs, _pmap(work, idxs, cfg.threads)):
                writer.write(idx, candidates[idx].label, patches)
        count = writer.count
    log.info("extract: %d candidates x %d views -> %d patches", len(candidates), sampler.n_views, count)
    return count


def _write_folds(cfg: PipelineConfig, folds: dict[str, int]) -> None:
    path = cfg.paths.resolve("models") / "folds.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "fold"])
        for pid, f in folds.items():
            w.writerow([pid, f])


def model_path(cfg: PipelineConfig, fold: int) -> Path:
    return cfg.paths.resolve("models") / f"fold{fold}.model"


def run_train(cfg: PipelineConfig) -> list[str]:
    """Train one model per fold on the other folds' patches; returns the model checksums."""
    candidates = load_candidates(cfg)
    records = read_patch_file(cfg.paths.resolve("patches"))
    if len(records) == 0:
        raise DataError("patch file holds no records")
    folds = patient_folds(cfg, candidates)
    model_dir = cfg.paths.resolve("models")
    model_dir.mkdir(parents=True, exist_ok=True)
    _write_folds(cfg, folds)
    cand_fold = np.array([folds[c.patient_id] for c in candidates])
    rec_index = np.asarray(records["index"])
    if rec_index.min() < 0 or rec_index.max() >= len(candidates):
        raise DataError("patch file references candidates missing from the candidate list")
    rec_fold = cand_fold[rec_index]
    rec_label = np.asarray(records["label"], dtype=np.intp)
    checksums = []
    for fold in range(cfg.eval.k_folds):
        sel = np.flatnonzero(rec_fold != fold)
        labels = rec_label[sel]
        if len(np.unique(labels)) < 2:
            raise DataError(f"fold {fold}: training patches contain a single class")
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, fold, 1]))
        take = np.sort(sel[ev.balance_indices(labels, rng)])
        x = np.asarray(records["pixels"][take])
        y = rec_label[take]
        log.info("train fold %d: %d patches (%d positive)", fold, len(y), int(y.sum()))
        result = train(
            x, y, cfg.train_config(fold), cfg.architecture,
            progress=lambda e, l, a: log.info("  epoch %d loss %.4f acc %.3f", e, l, a),
        )
        checksums.append(result.model.save(model_path(cfg, fold)))
        (model_dir / f"fold{fold}_train_log.csv").write_text(result.log_csv())
    return checksums


def run_score(cfg: PipelineConfig) -> list[CandidateScore]:
    candidates = load_candidates(cfg)
    volumes = load_volumes(cfg, [c.patient_id for c in candidates])
    folds = patient_folds(cfg, candidates)
    sampler = cfg.sampler_config()
    views: list = [None] * len(candidates)
    for fold in range(cfg.eval.k_folds):
        path = model_path(cfg, fold)
        if not path.is_file():
            raise DataError(f"missing model for fold {fold}: {path}")
        model = CnnModel.load(path)
        idxs = [i for i, c in enumerate(candidates) if folds[c.patient_id] == fold]
        probs = score_views(model, volumes, [candidates[i] for i in idxs], sampler, idxs, cfg.threads)
        for i, p in zip(idxs, probs):
            views[i] = p
    scores = [
        CandidateScore(c.patient_id, i, aggregate(v), len(v), c.label)
        for i, (c, v) in enumerate(zip(candidates, views))
    ]
    out = cfg.paths.resolve("scores")
    out.mkdir(parents=True, exist_ok=True)
    write_scores(out / "scores.csv", scores)
    write_view_scores(out / "view_scores.csv", range(len(candidates)), views)
    log.info("score: %d candidates x %d views", len(candidates), sampler.n_views)
    return scores


def _fmt(v: float) -> str:
    return "nan" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def _safe_auc(scores) -> float:
    labels = {s.label for s in scores}
    return ev.roc_auc(scores) if labels == {0, 1} else math.nan


def _sens(scores, n_volumes, fp):
    if not any(s.label == 1 for s in scores):
        return math.nan
    return ev.sensitivity_at_fp(ev.froc_curve(scores, n_volumes), fp)


def run_eval(cfg: PipelineConfig) -> dict:
    """Writes pooled and per-fold FROC/ROC CSVs, varying-N curves, SVG plots and the summary."""
    candidates = load_candidates(cfg)
    folds = patient_folds(cfg, candidates)
    score_dir = cfg.paths.resolve("scores")
    scores = read_scores(score_dir / "scores.csv")
    views = read_view_scores(score_dir / "view_scores.csv")
    if len(scores) != len(candidates):
        raise DataError("score file does not match the candidate list")
    out = cfg.paths.resolve("reports")
    out.mkdir(parents=True, exist_ok=True)
    ops = cfg.eval.fp_per_volume
    n_patients = len(folds)
    k = cfg.eval.k_folds

    pooled = ev.froc_curve(scores, n_patients)
    (out / "froc_pooled.csv").write_text(froc_csv(pooled))
    (out / "roc_pooled.csv").write_text(roc_csv(ev.roc_curve(scores)))

    rows = [["scope", "n_views", "n_volumes", "auc"] + [f"sens_at_{fp:g}_fp" for fp in ops]]
    fold_rows = []
    for fold in range(k):
        fs = [s for s in scores if folds[s.patient_id] == fold]
        n_vol = sum(1 for f in folds.values() if f == fold)
        if any(s.label == 1 for s in fs):
            (out / f"froc_fold{fold}.csv").write_text(froc_csv(ev.froc_curve(fs, n_vol)))
        vals = [_safe_auc(fs)] + [_sens(fs, n_vol, fp) for fp in ops]
        fold_rows.append(vals)
        rows.append([f"fold{fold}", scores[0].n_views, n_vol] + [_fmt(v) for v in vals])
    fold_mean = [float(np.nanmean(col)) if not all(math.isnan(v) for v in col) else math.nan
                 for col in zip(*fold_rows)]
    rows.append(["fold_mean", scores[0].n_views, n_patients] + [_fmt(v) for v in fold_mean])
    pooled_vals = [ev.roc_auc(scores)] + [ev.sensitivity_at_fp(pooled, fp) for fp in ops]
    rows.append(["pooled", scores[0].n_views, n_patients] + [_fmt(v) for v in pooled_vals])

    # varying N from prefixes of each candidate's view list
    available = min(len(v) for v in views.values())
    n_list = [n for n in cfg.eval.n_views_list if n <= available]
    skipped = [n for n in cfg.eval.n_views_list if n > available]
    if skipped:
        log.warning("eval: skipping N=%s, only %d views scored", skipped, available)
    curves = {}
    by_n = {}
    for n in n_list:
        sn = [CandidateScore(s.patient_id, s.candidate_index, aggregate(views[s.candidate_index][:n]), n, s.label)
              for s in scores]
        curve = ev.froc_curve(sn, n_patients)
        curves[f"N={n}"] = curve
        by_n[n] = (sn, curve)
        (out / f"froc_pooled_n{n}.csv").write_text(froc_csv(curve))
        rows.append([f"pooled_n{n}", n, n_patients, _fmt(ev.roc_auc(sn))]
                    + [_fmt(ev.sensitivity_at_fp(curve, fp)) for fp in ops])
    if curves:
        (out / "froc_n_views.svg").write_text(
            froc_svg(curves, "FROC, pooled over folds", x_max=max(max(ops), 1.0) * 2))
    (out / "froc_pooled.svg").write_text(froc_svg({"CNN": pooled}, "FROC, pooled over folds"))
    with open(out / "cv_report.csv", "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)

    # baseline: every candidate gets the same score, i.e. no false-positive reduction
    baseline = [CandidateScore(s.patient_id, s.candidate_index, cfg.eval.baseline_score, 1, s.label) for s in scores]
    lines = [
        f"patients = {n_patients}",
        f"folds = {k}",
        f"candidates = {len(scores)}",
        f"positives = {sum(s.label for s in scores)}",
        f"views_per_candidate = {scores[0].n_views}",
        f"pooled_auc = {_fmt(pooled_vals[0])}",
        f"fold_mean_auc = {_fmt(fold_mean[0])}",
    ]
    summary = {"pooled_auc": pooled_vals[0], "sensitivity": {}, "fisher_p": {}, "by_n": {}}
    for j, fp in enumerate(ops):
        table = ev.operating_point_table(scores, baseline, n_patients, fp)
        p = ev.fisher_exact(table)
        summary["sensitivity"][fp] = pooled_vals[1 + j]
        summary["fisher_p"][fp] = p
        lines += [
            f"pooled_sensitivity_at_{fp:g}_fp = {_fmt(pooled_vals[1 + j])}",
            f"fold_mean_sensitivity_at_{fp:g}_fp = {_fmt(fold_mean[1 + j])}",
            f"baseline_sensitivity_at_{fp:g}_fp = {_fmt(ev.sensitivity_at_fp(ev.froc_curve(baseline, n_patients), fp))}",
            f"fisher_table_at_{fp:g}_fp = {table}",
            f"fisher_p_at_{fp:g}_fp = {p:.6g}",
        ]
    for n, (sn, curve) in by_n.items():
        summary["by_n"][n] = {"auc": ev.roc_auc(sn), **{fp: ev.sensitivity_at_fp(curve, fp) for fp in ops}}
        lines.append(f"n{n}_pooled_auc = {_fmt(summary['by_n'][n]['auc'])}")
        for fp in ops:
            lines.append(f"n{n}_pooled_sensitivity_at_{fp:g}_fp = {_fmt(summary['by_n'][n][fp])}")
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    return summary


def run_all(cfg: PipelineConfig) -> dict:
    run_phantom(cfg)
    run_extract(cfg)
    run_train(cfg)
    run_score(cfg)
    return run_eval(cfg)
