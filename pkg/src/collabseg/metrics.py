"""Evaluation metrics for binary segmentation probability maps.

Six measures, computed per image and averaged over the dataset: Dice and IoU
at a fixed 0.5 threshold, mean absolute error, the structure measure S, the
weighted F-measure Fw (beta^2 = 1), and the maximal enhanced-alignment
measure E over 256 evenly spaced thresholds.

Conventions shared with the published origins of S, Fw, and E, pinned here
because the test oracles must match them bit for bit:

* S-measure object scores use the sample standard deviation (ddof=1, zero for
  a single-pixel region); the region centroid is 1-based with half-up
  rounding; empty quadrants carry zero weight and are skipped; the final
  score is clamped below at 0.
* Fw follows the error-dependency construction (distance transform to the
  nearest foreground pixel, 7x7 Gaussian with sigma 5, zero padding).
* E divides by (H*W - 1); that can exceed 1 on small perfect maps, so the
  per-map score is clipped into [0, 1]. Degenerate ground truth scores
  1 - mean(map) (all background) or mean(map) (all foreground).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import SizingError

EPS = float(np.finfo(np.float64).eps)


def _check_pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt)
    if pred.ndim != 2:
        raise SizingError(f"prediction must be 2-D, got shape {pred.shape}")
    if pred.shape != g.shape:
        raise SizingError(f"prediction shape {pred.shape} != ground truth shape {g.shape}")
    if pred.min() < 0.0 or pred.max() > 1.0:
        raise ValueError(f"prediction values outside [0, 1]: [{pred.min()}, {pred.max()}]")
    return pred, g > 0.5


def dice_iou(pred, gt, threshold=0.5) -> tuple[float, float]:
    """Dice and IoU of the thresholded prediction; both 1.0 when pred and gt are empty."""
    pred, g = _check_pair(pred, gt)
    p = pred >= threshold
    inter = int((p & g).sum())
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0, 1.0
    union = total - inter
    return 2.0 * inter / total, inter / union


def mae(pred, gt) -> float:
    pred, g = _check_pair(pred, gt)
    return float(np.abs(pred - g.astype(np.float64)).mean())


# ---------------------------------------------------------------------------
# structure measure


def _object_score(values) -> float:
    if values.size == 0:
        return 0.0
    x = float(values.mean())
    sigma = float(values.std(ddof=1)) if values.size > 1 else 0.0
    return 2.0 * x / (x * x + 1.0 + sigma + EPS)


def _s_object(pred, g) -> float:
    mu = float(g.mean())
    fg = _object_score(pred[g])
    bg = _object_score((1.0 - pred)[~g])
    return mu * fg + (1.0 - mu) * bg


def _centroid(g) -> tuple[int, int]:
    # 1-based column/row of the mass centroid, rounded half up
    rows, cols = g.shape
    total = g.sum()
    col_mass = g.sum(axis=0) @ np.arange(1, cols + 1)
    row_mass = g.sum(axis=1) @ np.arange(1, rows + 1)
    x = int(np.floor(col_mass / total + 0.5))
    y = int(np.floor(row_mass / total + 0.5))
    return x, y


def _region_ssim(pred, g) -> float:
    n = pred.size
    gd = g.astype(np.float64)
    x = float(pred.mean())
    y = float(gd.mean())
    sx = float(((pred - x) ** 2).sum()) / (n - 1 + EPS)
    sy = float(((gd - y) ** 2).sum()) / (n - 1 + EPS)
    sxy = float(((pred - x) * (gd - y)).sum()) / (n - 1 + EPS)
    a = 4.0 * x * y * sxy
    b = (x * x + y * y) * (sx + sy)
    if a != 0.0:
        return a / (b + EPS)
    return 1.0 if b == 0.0 else 0.0


def _s_region(pred, g) -> float:
    x, y = _centroid(g)
    rows, cols = g.shape
    area = rows * cols
    quads = (
        (slice(0, y), slice(0, x)),
        (slice(0, y), slice(x, cols)),
        (slice(y, rows), slice(0, x)),
        (slice(y, rows), slice(x, cols)),
    )
    score = 0.0
    for rs, cs in quads:
        gq = g[rs, cs]
        if gq.size == 0:
            continue  # zero-weight quadrant when the centroid sits on a border
        score += (gq.size / area) * _region_ssim(pred[rs, cs], gq)
    return score


def s_measure(pred, gt, alpha=0.5) -> float:
    """Structure measure: alpha * object term + (1 - alpha) * region term."""
    pred, g = _check_pair(pred, gt)
    mu = float(g.mean())
    if mu == 0.0:
        return 1.0 - float(pred.mean())
    if mu == 1.0:
        return float(pred.mean())
    s = alpha * _s_object(pred, g) + (1.0 - alpha) * _s_region(pred, g)
    return max(0.0, s)


# ---------------------------------------------------------------------------
# weighted F-measure


def _gaussian_kernel(shape=(7, 7), sigma=5.0) -> np.ndarray:
    m, n = [(s - 1.0) / 2.0 for s in shape]
    y, x = np.ogrid[-m:m + 1, -n:n + 1]
    h = np.exp(-(x * x + y * y) / (2.0 * sigma * sigma))
    h[h < np.finfo(h.dtype).eps * h.max()] = 0.0
    return h / h.sum()


def weighted_f(pred, gt, beta2=1.0) -> float:
    """Weighted F-measure with error dependency and position-decayed weights."""
    pred, g = _check_pair(pred, gt)
    if not g.any():
        return 1.0 if pred.max() == 0.0 else 0.0
    e = np.abs(pred - g.astype(np.float64))
    bg = ~g
    dst, (iy, ix) = ndimage.distance_transform_edt(bg, return_indices=True)
    et = e.copy()
    et[bg] = et[iy[bg], ix[bg]]  # background error inherits the nearest foreground error
    ea = ndimage.correlate(et, _gaussian_kernel(), mode="constant")
    min_e_ea = e.copy()
    swap = g & (ea < e)
    min_e_ea[swap] = ea[swap]
    b = np.ones_like(e)
    b[bg] = 2.0 - np.exp(np.log(0.5) / 5.0 * dst[bg])
    ew = min_e_ea * b
    tpw = float(g.sum()) - float(ew[g].sum())
    fpw = float(ew[bg].sum())
    rec = 1.0 - float(ew[g].mean())
    prec = tpw / (EPS + tpw + fpw)
    return float((1.0 + beta2) * rec * prec / (EPS + rec + beta2 * prec))


# ---------------------------------------------------------------------------
# enhanced-alignment measure


def e_measure_binary(fm, gt) -> float:
    """E of one binarized map against binary ground truth, clipped into [0, 1]."""
    fm = np.asarray(fm, dtype=bool)
    g = np.asarray(gt, dtype=bool)
    if fm.shape != g.shape:
        raise SizingError(f"map shape {fm.shape} != ground truth shape {g.shape}")
    dfm = fm.astype(np.float64)
    dgt = g.astype(np.float64)
    if not g.any():
        enhanced = 1.0 - dfm
    elif g.all():
        enhanced = dfm
    else:
        afm = dfm - dfm.mean()
        agt = dgt - dgt.mean()
        align = 2.0 * agt * afm / (agt * agt + afm * afm + EPS)
        enhanced = (align + 1.0) ** 2 / 4.0
    score = float(enhanced.sum()) / (g.size - 1 + EPS)
    return min(1.0, max(0.0, score))


def e_measure_max(pred, gt, n_thresholds=256) -> float:
    """Maximum E over n_thresholds evenly spaced binarization levels in [0, 1]."""
    pred, g = _check_pair(pred, gt)
    best = 0.0
    for t in np.linspace(0.0, 1.0, n_thresholds):
        best = max(best, e_measure_binary(pred >= t, g))
    return best


# ---------------------------------------------------------------------------
# dataset aggregation


@dataclass(frozen=True)
class MetricReport:
    mdice: float
    miou: float
    s: float
    fw: float
    emax: float
    mae: float
    n_images: int

    CSV_HEADER = "mdice,miou,s_measure,wf_measure,e_measure_max,mae,n_images"

    def to_csv(self) -> str:
        return (
            f"{self.CSV_HEADER}\n"
            f"{self.mdice:.6f},{self.miou:.6f},{self.s:.6f},{self.fw:.6f},"
            f"{self.emax:.6f},{self.mae:.6f},{self.n_images}\n"
        )

    def to_markdown(self) -> str:
        return (
            "| mDice | mIoU | S | Fw | Emax | MAE |\n"
            "| ----- | ---- | - | -- | ---- | --- |\n"
            f"| {self.mdice:.4f} | {self.miou:.4f} | {self.s:.4f} "
            f"| {self.fw:.4f} | {self.emax:.4f} | {self.mae:.4f} |\n"
        )


def evaluate_pair(pred, gt) -> dict:
    d, i = dice_iou(pred, gt)
    return {
        "dice": d,
        "iou": i,
        "s": s_measure(pred, gt),
        "fw": weighted_f(pred, gt),
        "emax": e_measure_max(pred, gt),
        "mae": mae(pred, gt),
    }


def evaluate_dataset(pairs) -> MetricReport:
    """Mean of the per-image metrics over an iterable of (pred, gt) pairs."""
    rows = [evaluate_pair(p, g) for p, g in pairs]
    if not rows:
        raise ValueError("evaluate_dataset needs at least one (pred, gt) pair")
    mean = {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}
    return MetricReport(
        mdice=mean["dice"], miou=mean["iou"], s=mean["s"], fw=mean["fw"],
        emax=mean["emax"], mae=mean["mae"], n_images=len(rows),
    )
