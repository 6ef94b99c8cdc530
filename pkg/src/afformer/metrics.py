"""Saliency metrics for affordance heatmaps: KLD, SIM and AUC-Judd."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .heatmaps import SUM_TOL, AffordanceAnnotation, round_half_down

EPS = 1e-12


@dataclass
class MetricReport:
    kld: float
    sim: float
    auc_j: float
    resolution: tuple[int, int]

    def to_json(self) -> str:
        d = asdict(self)
        d["resolution"] = list(self.resolution)
        return json.dumps(d)


def _as_distribution(m, name: str) -> np.ndarray:
    v = np.asarray(m, dtype=np.float64)
    if v.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {v.shape}")
    if np.any(v < 0) or abs(v.sum() - 1.0) > SUM_TOL:
        raise ValueError(f"{name} is not a sum-normalized heatmap (sum={v.sum()})")
    return v


def _check_shapes(gt: np.ndarray, pred: np.ndarray) -> None:
    if gt.shape != pred.shape:
        raise ValueError(f"shape mismatch: gt {gt.shape} vs pred {pred.shape}")


def kld(gt, pred, eps: float = EPS) -> float:
    """KL(gt || pred) summed over the ground-truth support, with ``pred`` floored at ``eps``."""
    g = _as_distribution(gt, "gt")
    p = _as_distribution(pred, "pred")
    _check_shapes(g, p)
    support = g > 0
    gs = g[support]
    return float(np.sum(gs * np.log(gs / np.maximum(p[support], eps))))


def sim(gt, pred) -> float:
    """Histogram intersection of two distributions."""
    g = _as_distribution(gt, "gt")
    p = _as_distribution(pred, "pred")
    _check_shapes(g, p)
    return float(np.minimum(g, p).sum())


def _point_pixels(points, h: int, w: int) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    cols = np.clip(round_half_down(pts[:, 0]), 0, w - 1)
    rows = np.clip(round_half_down(pts[:, 1]), 0, h - 1)
    return np.unique(rows * w + cols)


def auc_judd(gt_points, pred) -> float:
    """Judd ROC area with annotated pixels as positives and every other pixel as negative.

    Thresholds are the distinct prediction values at positive pixels; a pixel is
    salient at threshold ``t`` when its value is ``>= t``.
    """
    if isinstance(gt_points, AffordanceAnnotation):
        gt_points = gt_points.points
    if len(gt_points) == 0:
        raise ValueError("auc_judd needs at least one ground-truth point")
    p = np.asarray(pred, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise ValueError("prediction contains non-finite values")
    h, w = p.shape
    flat = p.ravel()
    pos_idx = _point_pixels(gt_points, h, w)
    is_pos = np.zeros(flat.size, dtype=bool)
    is_pos[pos_idx] = True
    pos = np.sort(flat[is_pos])
    neg = np.sort(flat[~is_pos])
    thresholds = np.unique(pos)[::-1]
    # counts of values >= t via searchsorted on ascending arrays
    tp = (pos.size - np.searchsorted(pos, thresholds, side="left")) / pos.size
    if neg.size:
        fp = (neg.size - np.searchsorted(neg, thresholds, side="left")) / neg.size
    else:
        fp = np.zeros_like(tp)
    tp = np.concatenate([[0.0], tp, [1.0]])
    fp = np.concatenate([[0.0], fp, [1.0]])
    return float(np.trapezoid(tp, fp))


def auc_judd_from_heatmap(gt, pred, rel_threshold: float = 0.5) -> float:
    """AUC-Judd with positives taken from the ground-truth heatmap's half-max region."""
    g = np.asarray(gt, dtype=np.float64)
    rows, cols = np.nonzero(g >= rel_threshold * g.max())
    return auc_judd(np.stack([cols, rows], axis=1), pred)


def bilinear_resize(m, out_hw: Sequence[int]) -> np.ndarray:
    """Bilinear resize with half-pixel centers (``align_corners=False``, no antialiasing).

    Output pixel ``i`` samples the source at ``(i + 0.5) * in / out - 0.5``, clamped
    below at 0; the two neighbouring source pixels are ``floor`` of that and the
    next one (clamped to the last index).
    """
    v = np.asarray(m, dtype=np.float64)
    oh, ow = int(out_hw[0]), int(out_hw[1])
    if oh <= 0 or ow <= 0:
        raise ValueError(f"resize target {out_hw} has a zero dimension")
    if (oh, ow) == v.shape:
        return v.copy()

    def axis_weights(n_in: int, n_out: int):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.maximum(src, 0.0)
        i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
        i1 = np.minimum(i0 + 1, n_in - 1)
        frac = src - i0
        return i0, i1, frac

    r0, r1, fr = axis_weights(v.shape[0], oh)
    c0, c1, fc = axis_weights(v.shape[1], ow)
    top = v[r0][:, c0] * (1 - fc) + v[r0][:, c1] * fc
    bot = v[r1][:, c0] * (1 - fc) + v[r1][:, c1] * fc
    return top * (1 - fr)[:, None] + bot * fr[:, None]


def rescale_points(points, src_hw: Sequence[int], dst_hw: Sequence[int]) -> list[tuple[float, float]]:
    """Map pixel-index points to a different resolution, deduplicating collisions."""
    sy = dst_hw[0] / src_hw[0]
    sx = dst_hw[1] / src_hw[1]
    seen = []
    for x, y in points:
        q = (int(min(max(round_half_down(x * sx), 0), dst_hw[1] - 1)),
             int(min(max(round_half_down(y * sy), 0), dst_hw[0] - 1)))
        if q not in seen:
            seen.append(q)
    return [(float(x), float(y)) for x, y in seen]


def evaluate_at(gt, pred, res: Sequence[int], points=None, auc_mode: str = "points") -> MetricReport:
    """Resize both maps to ``res``, renormalize, and compute KLD, SIM and AUC-J.

    ``auc_mode="points"`` scores AUC-J against the annotation ``points`` rescaled
    to ``res``; ``"heatmap"`` uses the resized ground truth's half-max region.
    """
    res = (int(res[0]), int(res[1]))
    if res[0] <= 0 or res[1] <= 0:
        raise ValueError(f"resolution {res} has a zero dimension")
    g = np.asarray(gt, dtype=np.float64)
    p = np.asarray(pred, dtype=np.float64)
    _check_shapes(g, p)
    if res[0] > g.shape[0] or res[1] > g.shape[1]:
        raise ValueError(f"resolution {res} exceeds native resolution {g.shape}")
    g_r = bilinear_resize(g, res)
    p_r = bilinear_resize(p, res)
    g_r = g_r / g_r.sum()
    p_r = p_r / p_r.sum()
    if auc_mode == "points":
        if points is None:
            raise ValueError("auc_mode='points' needs annotation points")
        if isinstance(points, AffordanceAnnotation):
            points = points.points
        auc = auc_judd(rescale_points(points, g.shape, res), p_r)
    elif auc_mode == "heatmap":
        auc = auc_judd_from_heatmap(g_r, p_r)
    else:
        raise ValueError(f"unknown auc_mode {auc_mode!r}")
    return MetricReport(kld=kld(g_r, p_r), sim=sim(g_r, p_r), auc_j=auc, resolution=res)
