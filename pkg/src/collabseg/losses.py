"""Loss suite: partial cross-entropy on scribbles, scale consistency,
boundary-weighted segmentation loss on guided masks, and their combination.

The combined objective over the four side outputs S1..S4 (all at input
resolution) is

    L = pce(S1) + alpha * seg(S1, M) + ss
      + sum_i lambda_i * (pce(Si) + alpha * seg(Si, M)),  i = 2, 3, 4

where seg terms are gated per sample by the reliability indicator and
renormalized by the number of reliable samples (zero when there are none).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .data import FOREGROUND, UNLABELED
from .errors import AnnotationError, SizingError


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.5        # weight of the guided segmentation terms
    lambda2: float = 0.8      # auxiliary head weights, shallow to deep
    lambda3: float = 0.6
    lambda4: float = 0.4
    wmap_radius: int = 15     # boundary weight map: mean pool over (2r+1)^2
    wmap_gain: float = 5.0
    eps: float = 1e-7         # probability clipping for the log terms

    def __post_init__(self):
        if self.alpha <= 0 or min(self.lambda2, self.lambda3, self.lambda4) <= 0:
            raise ValueError("loss weights must be positive")
        if self.wmap_radius < 0:
            raise ValueError(f"wmap_radius must be >= 0, got {self.wmap_radius}")
        if not 0.0 < self.eps < 1e-3:
            raise ValueError(f"eps must lie in (0, 1e-3), got {self.eps}")

    @property
    def lambdas(self) -> tuple:
        return (self.lambda2, self.lambda3, self.lambda4)


def _map4(x) -> torch.Tensor:
    # normalize a logit/mask map to (B, 1, H, W)
    x = torch.as_tensor(x)
    if x.dim() == 2:
        x = x.unsqueeze(0)
    if x.dim() == 3:
        x = x.unsqueeze(1)
    if x.dim() != 4 or x.shape[1] != 1:
        raise SizingError(f"expected a single-channel map, got shape {tuple(x.shape)}")
    return x


def _scribble3(scribble) -> torch.Tensor:
    s = torch.as_tensor(scribble)
    if s.dim() == 2:
        s = s.unsqueeze(0)
    if s.dim() != 3:
        raise SizingError(f"expected (B, H, W) scribble, got shape {tuple(s.shape)}")
    return s.long()


def partial_ce(pred_logits, scribble, eps=1e-7):
    """Binary cross-entropy averaged over labeled scribble pixels only.

    Unlabeled pixels contribute neither value nor gradient. Probabilities are
    clipped to [eps, 1 - eps] before the logs. Raises when nothing is labeled.
    """
    logits = _map4(pred_logits)
    scr = _scribble3(scribble)
    if logits.shape[0] != scr.shape[0] or logits.shape[-2:] != scr.shape[-2:]:
        raise SizingError(
            f"logits shape {tuple(logits.shape)} does not match scribble shape {tuple(scr.shape)}"
        )
    labeled = scr != UNLABELED
    if not labeled.any():
        raise AnnotationError("scribble batch has no labeled pixels")
    y = (scr == FOREGROUND).to(logits.dtype)
    p = torch.sigmoid(logits.squeeze(1)).clamp(eps, 1.0 - eps)
    ce = -(y * p.log() + (1.0 - y) * (1.0 - p).log())
    return ce[labeled].mean()


def structure_consistency(full_logits, down_logits):
    """MSE between the reduced-scale probability map and the downsampled full map.

    Both arguments are logits of the dominant head; the full-resolution map is
    converted to probabilities, bilinearly resized to the reduced map's size,
    and compared in probability space. Gradients flow through both branches.
    """
    full = _map4(full_logits)
    down = _map4(down_logits)
    if full.shape[0] != down.shape[0]:
        raise SizingError(f"batch mismatch: {full.shape[0]} vs {down.shape[0]}")
    h, w = down.shape[-2:]
    if h > full.shape[-2] or w > full.shape[-1]:
        raise SizingError(
            f"reduced map {(h, w)} larger than full map {tuple(full.shape[-2:])}"
        )
    target = F.interpolate(torch.sigmoid(full), size=(h, w), mode="bilinear",
                           align_corners=False)
    return ((torch.sigmoid(down) - target) ** 2).mean()


def boundary_weight_map(mask, radius=15, gain=5.0):
    """w = 1 + gain * |meanpool(mask) - mask| with same-size mean pooling.

    Pooling excludes padding from the divisor, so a constant mask yields
    w == 1 everywhere, border included.
    """
    k = 2 * radius + 1
    pooled = F.avg_pool2d(mask, k, stride=1, padding=radius, count_include_pad=False)
    return 1.0 + gain * (pooled - mask).abs()


def weighted_seg_loss(pred_logits, mask, radius=15, gain=5.0, eps=1e-7, reduction="mean"):
    """Boundary-weighted BCE plus boundary-weighted IoU against a binary mask.

    Both terms are ratios of weighted sums over each sample:
    wBCE = sum(w * bce) / sum(w) and wIoU = 1 - sum(w*p*g) / sum(w*(p+g-p*g)),
    with no additive smoothing beyond an eps guard on the IoU denominator.
    """
    logits = _map4(pred_logits)
    m = _map4(mask).to(logits.dtype)
    if m.shape != logits.shape:
        raise SizingError(f"mask shape {tuple(m.shape)} != logits shape {tuple(logits.shape)}")
    if not torch.all((m == 0) | (m == 1)):
        raise ValueError("segmentation mask must be binary")
    w = boundary_weight_map(m, radius, gain)
    p = torch.sigmoid(logits)
    ph = p.clamp(eps, 1.0 - eps)
    bce = -(m * ph.log() + (1.0 - m) * (1.0 - ph).log())
    dims = (1, 2, 3)
    wbce = (w * bce).sum(dims) / w.sum(dims)
    inter = (w * p * m).sum(dims)
    denom = (w * (p + m - p * m)).sum(dims)
    wiou = 1.0 - inter / (denom + eps)
    per_sample = wbce + wiou
    if reduction == "none":
        return per_sample
    if reduction == "mean":
        return per_sample.mean()
    raise ValueError(f"unknown reduction {reduction!r}")


@dataclass
class GuidedMaskBatch:
    """Guided masks plus the per-sample reliability indicator."""

    masks: torch.Tensor      # (B, 1, H, W), binary
    indicator: torch.Tensor  # (B,), values in {0, 1}

    def __post_init__(self):
        self.masks = _map4(self.masks).float()
        self.indicator = torch.as_tensor(self.indicator).long().reshape(-1)
        if self.indicator.shape[0] != self.masks.shape[0]:
            raise SizingError(
                f"indicator length {self.indicator.shape[0]} != batch {self.masks.shape[0]}"
            )
        if not torch.all((self.indicator == 0) | (self.indicator == 1)):
            raise ValueError("indicator entries must be 0 or 1")
        if not torch.all((self.masks == 0) | (self.masks == 1)):
            raise ValueError("guided masks must be binary")

    @property
    def reliable_fraction(self) -> float:
        return float(self.indicator.float().mean())


def combine_components(pce, seg, ss, weights: LossWeights | None = None):
    """Assemble the scalar objective from its per-head components.

    pce and seg are length-4 sequences ordered shallow to deep; ss is the
    scale-consistency term. Works on floats or tensors.
    """
    weights = weights or LossWeights()
    if len(pce) != 4 or len(seg) != 4:
        raise ValueError("expected 4 pce and 4 seg components")
    total = pce[0] + weights.alpha * seg[0] + ss
    for lam, p_i, s_i in zip(weights.lambdas, pce[1:], seg[1:]):
        total = total + lam * (p_i + weights.alpha * s_i)
    return total


def total_loss(preds, scribble, guided: GuidedMaskBatch | None = None,
               weights: LossWeights | None = None):
    """Combined objective over a PredictionSet; returns (loss, components).

    Samples with indicator 0 contribute neither value nor gradient to the
    seg terms; each seg term is the mean over reliable samples only, and is
    exactly zero (independent of mask contents) when no sample is reliable.
    components holds detached floats keyed pce1..4, seg1..4, ss, total, and
    reliable_fraction.
    """
    weights = weights or LossWeights()
    sides = [_map4(s) for s in preds.side_logits]
    if preds.down_logits is None:
        raise SizingError("prediction set lacks the reduced-scale map")
    pce = [partial_ce(s, scribble, weights.eps) for s in sides]
    ss = structure_consistency(sides[0], preds.down_logits)

    zero = sides[0].new_zeros(())
    reliable = 0.0
    seg = [zero] * 4
    if guided is not None:
        keep = guided.indicator.bool()
        if keep.any():
            masks = guided.masks[keep].to(sides[0].dtype)
            seg = [
                weighted_seg_loss(s[keep], masks, weights.wmap_radius,
                                  weights.wmap_gain, weights.eps)
                for s in sides
            ]
        reliable = guided.reliable_fraction

    total = combine_components(pce, seg, ss, weights)
    components = {f"pce{i + 1}": float(p.detach()) for i, p in enumerate(pce)}
    components.update({f"seg{i + 1}": float(s.detach()) for i, s in enumerate(seg)})
    components["ss"] = float(ss.detach())
    components["total"] = float(total.detach())
    components["reliable_fraction"] = reliable
    return total, components
