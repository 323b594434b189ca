"""Overlap metrics, per-scan aggregation, k-fold protocol and threshold sweeps."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from . import ccomp, imgcore, pipeline, preproc
from .segmenter import ConfigurationError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: ConfusionCounts) -> ConfusionCounts:
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class Metrics:
    dice: float
    iou: float
    precision: float
    recall: float
    empty: bool  # both prediction and truth empty; every ratio is 0/0 -> 1.0


def confusion(pred, truth) -> ConfusionCounts:
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    return ConfusionCounts(tp, fp, fn, pred.size - tp - fp - fn)


def _ratio(num: int, den: int) -> float:
    return 1.0 if den == 0 else num / den


def metrics_from_counts(c: ConfusionCounts) -> Metrics:
    return Metrics(
        dice=_ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn),
        iou=_ratio(c.tp, c.tp + c.fp + c.fn),
        precision=_ratio(c.tp, c.tp + c.fp),
        recall=_ratio(c.tp, c.tp + c.fn),
        empty=(c.tp + c.fp + c.fn) == 0,
    )


def dice_iou_consistent(c: ConfusionCounts) -> bool:
    """dice == 2 iou / (1 + iou), checked in exact rational arithmetic."""
    den = c.tp + c.fp + c.fn
    if den == 0:
        return True
    iou = Fraction(c.tp, den)
    return Fraction(2 * c.tp, 2 * c.tp + c.fp + c.fn) == 2 * iou / (1 + iou)


@dataclass(frozen=True)
class FoldPlan:
    assignments: dict  # scan_id -> fold index
    fold_count: int = 3

    def held_out(self, fold: int) -> list[str]:
        return sorted(s for s, f in self.assignments.items() if f == fold)

    def training(self, fold: int) -> list[str]:
        return sorted(s for s, f in self.assignments.items() if f != fold)


def make_fold_plan(scan_ids, fold_count: int = 3, seed: int = 0) -> FoldPlan:
    """Sort, permute with ``seed``, then deal round-robin; fold sizes differ by <= 1."""
    ids = sorted(scan_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("scan ids must be unique")
    if not 1 <= fold_count <= max(len(ids), 1):
        raise ValueError(f"cannot split {len(ids)} scans into {fold_count} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    return FoldPlan({ids[j]: i % fold_count for i, j in enumerate(order)}, fold_count)


def mean_sd(values) -> tuple[float, float]:
    """Mean and sample standard deviation (n - 1); sd is 0 for a single value."""
    values = [float(v) for v in values]
    if not values:
        return float("nan"), float("nan")
    mean = math.fsum(values) / len(values)
    if len(values) < 2:
        return mean, 0.0
    var = math.fsum((v - mean) ** 2 for v in values) / (len(values) - 1)
    return mean, math.sqrt(var)


def box_stats(values) -> dict:
    """Tukey box-plot summary with linear-interpolation quartiles."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = v[(v >= lo_fence) & (v <= hi_fence)]
    return {
        "min": float(v[0]), "q1": float(q1), "median": float(med), "q3": float(q3), "max": float(v[-1]),
        "whisker_low": float(inside[0]), "whisker_high": float(inside[-1]),
        "outliers": [float(x) for x in v[(v < lo_fence) | (v > hi_fence)]],
    }


@dataclass
class ScanResult:
    scan_id: str
    fold: int
    final: ConfusionCounts
    rough: ConfusionCounts
    slice_mean_dice: float
    slice_mean_iou: float
    global_mean: float
    slices: list = field(default_factory=list, repr=False)  # SliceResult, kept for sweeps
    truth: np.ndarray | None = field(default=None, repr=False)  # preprocessed-frame truth

    @property
    def metrics(self) -> Metrics:
        return metrics_from_counts(self.final)

    @property
    def rough_metrics(self) -> Metrics:
        return metrics_from_counts(self.rough)


def evaluate_scan(scan, cart_backend, polar_backend, fusion: pipeline.FusionConfig,
                  prep: preproc.PreprocessConfig, fold: int = 0, workers: int = 1) -> ScanResult:
    """Segment a raw (HU) scan and score it against its own truth in the original frame."""
    if scan.truth is None:
        raise ValueError(f"scan {scan.scan_id!r} has no ground truth to evaluate against")
    pre = preproc.preprocess_scan(scan, prep)
    results = pipeline.segment_scan(pre, cart_backend, polar_backend, fusion, workers)
    h, w = scan.slice_shape
    final = ConfusionCounts()
    rough = ConfusionCounts()
    slice_dice, slice_iou = [], []
    for res, truth in zip(results, scan.truth):
        fm = imgcore.resize(res.final_mask, h, w, "nearest")
        rm = imgcore.resize(res.rough_mask, h, w, "nearest")
        c = confusion(fm, truth)
        final += c
        rough += confusion(rm, truth)
        m = metrics_from_counts(c)
        slice_dice.append(m.dice)
        slice_iou.append(m.iou)
    return ScanResult(scan.scan_id, fold, final, rough, mean_sd(slice_dice)[0], mean_sd(slice_iou)[0],
                      prep.global_mean, results, pre.truth)


REPORT_COLUMNS = ("scan_id", "fold", "dice", "iou", "precision", "recall",
                  "slice_mean_dice", "slice_mean_iou", "rough_dice", "rough_iou",
                  "rough_precision", "rough_recall", "tp", "fp", "fn", "tn", "empty", "global_mean")
METRIC_NAMES = ("dice", "iou", "precision", "recall")


@dataclass
class CVReport:
    rows: list[ScanResult]
    fold_count: int

    def summary(self) -> dict:
        out = {"scans": len(self.rows), "folds": self.fold_count}
        for prefix, attr in (("", "metrics"), ("rough_", "rough_metrics")):
            for name in METRIC_NAMES:
                mean, sd = mean_sd(getattr(getattr(r, attr), name) for r in self.rows)
                out[f"{prefix}mean_{name}"] = mean
                out[f"{prefix}sd_{name}"] = sd
        for name in ("slice_mean_dice", "slice_mean_iou"):
            out[f"mean_{name}"] = mean_sd(getattr(r, name) for r in self.rows)[0]
        for f in range(self.fold_count):
            fold_rows = [r for r in self.rows if r.fold == f]
            if fold_rows:
                out[f"fold{f}_mean_dice"] = mean_sd(r.metrics.dice for r in fold_rows)[0]
        out["empty_scans"] = sum(r.metrics.empty for r in self.rows)
        out["empty_convention"] = "0/0=1.0"
        return out

    def table_rows(self) -> list[dict]:
        rows = []
        for r in self.rows:
            m, rm = r.metrics, r.rough_metrics
            rows.append({
                "scan_id": r.scan_id, "fold": r.fold, "dice": m.dice, "iou": m.iou,
                "precision": m.precision, "recall": m.recall,
                "slice_mean_dice": r.slice_mean_dice, "slice_mean_iou": r.slice_mean_iou,
                "rough_dice": rm.dice, "rough_iou": rm.iou, "rough_precision": rm.precision,
                "rough_recall": rm.recall, "tp": r.final.tp, "fp": r.final.fp, "fn": r.final.fn,
                "tn": r.final.tn, "empty": int(m.empty), "global_mean": r.global_mean,
            })
        return rows

    def box_plot(self) -> dict:
        return {
            "final_dice": box_stats([r.metrics.dice for r in self.rows]),
            "rough_dice": box_stats([r.rough_metrics.dice for r in self.rows]),
        }


def cross_validate(scans, plan: FoldPlan, backends, fusion=pipeline.FusionConfig(),
                   prep=preproc.PreprocessConfig(), mean_source: str = "train",
                   workers: int = 1) -> CVReport:
    """Evaluate every held-out scan of every fold.

    ``backends`` maps fold index to a ``(cart_backend, polar_backend)`` pair,
    or is a callable taking the fold index. ``mean_source`` picks the slices
    the zero-centring mean comes from: ``train`` (other folds), ``validation``
    (the held-out fold itself) or ``fixed`` (``prep.global_mean`` as given).
    """
    by_id = {s.scan_id: s for s in scans}
    if set(by_id) != set(plan.assignments):
        raise ConfigurationError("fold plan does not cover exactly the given scans")
    rows = []
    for fold in range(plan.fold_count):
        test_ids = plan.held_out(fold)
        if not test_ids:
            continue
        try:
            pair = backends(fold) if callable(backends) else backends[fold]
        except (KeyError, IndexError):
            raise ConfigurationError(f"no backends configured for fold {fold}") from None
        if pair is None:
            raise ConfigurationError(f"no backends configured for fold {fold}")
        cart, polar = pair
        fold_prep = _fold_prep(prep, mean_source, [by_id[i] for i in plan.training(fold)],
                               [by_id[i] for i in test_ids])
        for sid in test_ids:
            rows.append(evaluate_scan(by_id[sid], cart, polar, fusion, fold_prep, fold, workers))
    rows.sort(key=lambda r: r.scan_id)
    return CVReport(rows, plan.fold_count)


def _fold_prep(prep, mean_source, train, test):
    if mean_source == "fixed":
        return prep
    if mean_source == "train":
        source = train or test
    elif mean_source == "validation":
        source = test
    else:
        raise ConfigurationError(f"unknown mean source {mean_source!r}")
    return replace(prep, global_mean=preproc.scan_global_mean(source, prep))


def sweep_hysteresis(confidence_maps, truths, grid, low: float = 0.0, connectivity: int = 8):
    """Re-threshold stored fused maps at each ``high`` in ``grid``.

    Dice is pooled over all maps. Returns ``(best_high, [(high, dice), ...])``;
    ties go to the larger threshold.
    """
    grid = [float(g) for g in grid]
    if not grid or any(not 0.0 <= g <= 1.0 for g in grid):
        raise ValueError("sweep grid must be non-empty and inside [0, 1]")
    curve = []
    for high in grid:
        total = ConfusionCounts()
        for conf, truth in zip(confidence_maps, truths):
            mask = ccomp.hysteresis_threshold(conf, min(low, high), high, connectivity)
            total += confusion(mask, truth)
        curve.append((high, metrics_from_counts(total).dice))
    best = max(curve, key=lambda hd: (hd[1], hd[0]))[0]
    return best, curve
