"""Salient object detection metrics: MAE, max F-measure, S-measure, max E-measure.

Predictions are float maps in [0, 1]; ground truths are binary. F and E are
swept over the 256 thresholds of the 8-bit-quantized prediction
(``pred_u8 >= tau`` for ``tau = 0..255``), using per-level histograms so each
sweep is O(pixels + 256).
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .data import load_mask, worker_count
from .errors import EmptyGroundTruth, MissingPair, ShapeMismatch

log = logging.getLogger(__name__)

EPS = np.finfo(np.float64).eps
BETA2 = 0.3
FIELDS = ("s_alpha", "f_max", "e_max", "mae")


def _check(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs ground truth {gt.shape}")
    gt = gt.astype(bool) if gt.dtype == bool else np.asarray(gt, dtype=np.float64) > 0.5
    return pred, gt


def quantize(pred: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(pred) * 255.0), 0, 255).astype(np.int64)


def mae(pred, gt) -> float:
    pred, gt = _check(pred, gt)
    return float(np.mean(np.abs(pred - gt)))


def _cumulative_counts(pred, gt):
    """TP(tau) and FP(tau) for tau = 0..255 with prediction ``q >= tau``."""
    q = quantize(pred)
    fg = np.bincount(q[gt], minlength=256)
    bg = np.bincount(q[~gt], minlength=256)
    tp = np.cumsum(fg[::-1])[::-1].astype(np.float64)
    fp = np.cumsum(bg[::-1])[::-1].astype(np.float64)
    return tp, fp


def f_measure_curve(pred, gt, beta2: float = BETA2) -> np.ndarray:
    pred, gt = _check(pred, gt)
    n_fg = int(gt.sum())
    if n_fg == 0:
        raise EmptyGroundTruth("F-measure is undefined for an all-background ground truth")
    tp, fp = _cumulative_counts(pred, gt)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(tp + fp > 0, tp / (tp + fp), 0.0)
        recall = tp / n_fg
        denom = beta2 * precision + recall
        f = np.where(denom > 0, (1 + beta2) * precision * recall / denom, 0.0)
    return f


def f_measure_max(pred, gt, beta2: float = BETA2) -> float:
    return float(f_measure_curve(pred, gt, beta2).max())


def e_measure_curve(pred, gt) -> np.ndarray:
    pred, gt = _check(pred, gt)
    n = gt.size
    n_fg = int(gt.sum())
    tp, fp = _cumulative_counts(pred, gt)
    n_pred = tp + fp
    if n_fg == 0:
        return (n - n_pred) / n
    if n_fg == n:
        return n_pred / n
    fn = n_fg - tp
    tn = (n - n_fg) - fp
    mp = n_pred / n
    mg = n_fg / n

    def enhanced(pv, gv):
        a = pv - mp
        b = gv - mg
        denom = a * a + b * b
        with np.errstate(divide="ignore", invalid="ignore"):
            align = np.where(denom > 0, 2.0 * a * b / denom, 0.0)
        return (align + 1.0) ** 2 / 4.0

    total = tp * enhanced(1.0, 1.0) + fp * enhanced(1.0, 0.0) + fn * enhanced(0.0, 1.0) + tn * enhanced(0.0, 0.0)
    return total / n


def e_measure_max(pred, gt) -> float:
    return float(e_measure_curve(pred, gt).max())


# -- S-measure ----------------------------------------------------------------

def _object_score(values: np.ndarray) -> float:
    x = values.mean()
    sigma = values.std(ddof=1) if values.size > 1 else 0.0
    return 2.0 * x / (x * x + 1.0 + sigma)


def _s_object(pred, gt) -> float:
    u = gt.mean()
    o_fg = _object_score(pred[gt])
    o_bg = _object_score(1.0 - pred[~gt])
    return u * o_fg + (1.0 - u) * o_bg


def _centroid(gt) -> tuple[int, int]:
    """1-based (x, y) centroid of the foreground, rounded half away from zero."""
    h, w = gt.shape
    total = gt.sum()
    if total == 0:
        return int(math.floor(w / 2 + 0.5)), int(math.floor(h / 2 + 0.5))
    cols = gt.sum(axis=0)
    rows = gt.sum(axis=1)
    x = (cols * np.arange(1, w + 1)).sum() / total
    y = (rows * np.arange(1, h + 1)).sum() / total
    return int(math.floor(x + 0.5)), int(math.floor(y + 0.5))


def _ssim(pred, gt) -> float:
    n = pred.size
    if n == 0:
        return 0.0
    g = gt.astype(np.float64)
    x = pred.mean()
    y = g.mean()
    sx = ((pred - x) ** 2).sum() / (n - 1 + EPS)
    sy = ((g - y) ** 2).sum() / (n - 1 + EPS)
    sxy = ((pred - x) * (g - y)).sum() / (n - 1 + EPS)
    alpha = 4.0 * x * y * sxy
    beta = (x * x + y * y) * (sx + sy)
    if alpha != 0:  # implies beta > 0
        return alpha / beta
    if beta == 0:
        return 1.0
    return 0.0


def _s_region(pred, gt) -> float:
    h, w = gt.shape
    x, y = _centroid(gt)
    area = h * w
    w1 = x * y / area
    w2 = (w - x) * y / area
    w3 = x * (h - y) / area
    w4 = 1.0 - w1 - w2 - w3
    quads = (
        (w1, pred[:y, :x], gt[:y, :x]),
        (w2, pred[:y, x:], gt[:y, x:]),
        (w3, pred[y:, :x], gt[y:, :x]),
        (w4, pred[y:, x:], gt[y:, x:]),
    )
    return sum(wt * _ssim(p, g) for wt, p, g in quads if wt > 0)


def s_measure(pred, gt, alpha: float = 0.5) -> float:
    pred, gt = _check(pred, gt)
    y = gt.mean()
    if y == 0:
        return float(1.0 - pred.mean())
    if y == 1:
        return float(pred.mean())
    score = alpha * _s_object(pred, gt) + (1.0 - alpha) * _s_region(pred, gt)
    return float(max(score, 0.0))


# -- aggregation ----------------------------------------------------------------

def score_pair(pred, gt) -> dict:
    """All four metrics for one image; ``f_max`` is NaN for an empty ground truth."""
    pred, gt = _check(pred, gt)
    try:
        f = f_measure_max(pred, gt)
    except EmptyGroundTruth:
        f = float("nan")
    return {"s_alpha": s_measure(pred, gt), "f_max": f, "e_max": e_measure_max(pred, gt), "mae": mae(pred, gt)}


@dataclass
class MetricReport:
    names: list
    records: list = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.records)

    @property
    def means(self) -> dict:
        out = {}
        for key in FIELDS:
            vals = np.array([r[key] for r in self.records], dtype=np.float64)
            ok = vals[~np.isnan(vals)]
            out[key] = float(ok.mean()) if ok.size else float("nan")
        return out

    def table(self) -> str:
        m = self.means
        head = f"{'images':>8s}  {'S_alpha':>8s}  {'F_max':>8s}  {'E_max':>8s}  {'MAE':>8s}"
        row = f"{self.count:>8d}  {m['s_alpha']:8.4f}  {m['f_max']:8.4f}  {m['e_max']:8.4f}  {m['mae']:8.4f}"
        return head + "\n" + row

    def to_lines(self) -> list[str]:
        lines = []
        for name, rec in zip(self.names, self.records):
            lines.append(json.dumps({"name": name, **{k: _jsonable(rec[k]) for k in FIELDS}}))
        lines.append(json.dumps({"name": "__mean__", "count": self.count,
                                 **{k: _jsonable(v) for k, v in self.means.items()}}))
        return lines

    def write(self, path) -> None:
        Path(path).write_text("\n".join(self.to_lines()) + "\n")


def _jsonable(v):
    return None if isinstance(v, float) and math.isnan(v) else v


def evaluate_arrays(preds, gts, names=None) -> MetricReport:
    """Score stacked or listed prediction/ground-truth maps in order."""
    names = list(names) if names is not None else [str(i) for i in range(len(preds))]
    with ThreadPoolExecutor(worker_count()) as pool:
        records = list(pool.map(lambda pg: score_pair(np.squeeze(pg[0]), np.squeeze(pg[1])), zip(preds, gts)))
    empty = [n for n, r in zip(names, records) if math.isnan(r["f_max"])]
    if empty:
        log.warning("F-measure undefined for %d empty ground truth(s), excluded from mean: %s",
                    len(empty), ", ".join(empty[:10]))
    return MetricReport(names=names, records=records)


def _index(directory) -> dict:
    return {p.stem: p for p in sorted(Path(directory).iterdir()) if p.suffix.lower() == ".png"}


def evaluate_dataset(pred_dir, gt_dir) -> MetricReport:
    """Pair PNGs by filename stem and score every pair.

    Predictions are bilinearly resized to the ground-truth resolution when the
    sizes differ; ground truths are binarized at 0.5.
    """
    preds, gts = _index(pred_dir), _index(gt_dir)
    unpaired = set(preds) ^ set(gts)
    if unpaired:
        raise MissingPair(unpaired)
    names = sorted(gts)

    def load(name):
        gt = load_mask(gts[name]) > 0.5
        pred = load_mask(preds[name])
        if pred.shape != gt.shape:
            pred = _kernels.resize_numpy(pred[None, None], *gt.shape)[0, 0]
        return pred, gt

    pairs = [load(n) for n in names]
    return evaluate_arrays([p for p, _ in pairs], [g for _, g in pairs], names)
