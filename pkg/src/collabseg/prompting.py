"""Box-prompt construction and guided-mask filtering.

Boxes use integer pixel coordinates with an inclusive-exclusive convention:
a box covers columns [x0, x1) and rows [y0, y1). The prompt for a sample is
the intersection of the margin-expanded scribble box with the box of the
current prediction, falling back to the expanded scribble box when the
prediction box is absent or disjoint.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import BACKGROUND, FOREGROUND, UNLABELED
from .errors import PromptError

REFERENCE_SIZE = 320  # working resolution at which margins are specified


@dataclass(frozen=True)
class Box:
    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if self.x0 < 0 or self.y0 < 0:
            raise PromptError(f"negative box corner: {self}")
        if self.x1 <= self.x0 or self.y1 <= self.y0:
            raise PromptError(f"empty box: {self}")

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def area(self) -> int:
        return self.width * self.height

    def intersect(self, other: "Box") -> "Box | None":
        """Intersection box, or None when the boxes do not overlap."""
        x0 = max(self.x0, other.x0)
        y0 = max(self.y0, other.y0)
        x1 = min(self.x1, other.x1)
        y1 = min(self.y1, other.y1)
        if x0 >= x1 or y0 >= y1:
            return None
        return Box(x0, y0, x1, y1)

    def contains(self, other: "Box") -> bool:
        return (self.x0 <= other.x0 and self.y0 <= other.y0
                and self.x1 >= other.x1 and self.y1 >= other.y1)

    def slices(self) -> tuple[slice, slice]:
        return slice(self.y0, self.y1), slice(self.x0, self.x1)


def scribble_to_box(scribble) -> Box:
    """Tight bounding box of the foreground scribble pixels."""
    ys, xs = np.nonzero(np.asarray(scribble) == FOREGROUND)
    if xs.size == 0:
        raise PromptError("scribble has no foreground pixels")
    return Box(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def prediction_to_box(prob, threshold=0.5) -> Box | None:
    """Tight bounding box of pixels with probability >= threshold, or None."""
    ys, xs = np.nonzero(np.asarray(prob) >= threshold)
    if xs.size == 0:
        return None
    return Box(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def augment_box(box: Box, margin: int, bounds) -> Box:
    """Expand a box by margin pixels on every side, clamped to (W, H) bounds."""
    if margin < 0:
        raise PromptError(f"negative margin {margin}")
    w, h = bounds
    return Box(
        max(0, box.x0 - margin),
        max(0, box.y0 - margin),
        min(w, box.x1 + margin),
        min(h, box.y1 + margin),
    )


def scaled_margin(margin_px: int, size: int, reference: int = REFERENCE_SIZE) -> int:
    """Margin in pixels at the given working size; margins are specified at 320."""
    return int(round(margin_px * size / reference))


def make_prompt_box(scribble, prob=None, margin=0, bounds=None, threshold=0.5,
                    return_source=False):
    """Combined prompt: expanded scribble box intersected with the prediction box.

    Falls back to the expanded scribble box when the prediction box is absent
    or the intersection is empty. The result is always contained in the
    expanded scribble box and never empty. With return_source=True also
    returns "intersection" or "fallback".
    """
    scribble = np.asarray(scribble)
    if bounds is None:
        bounds = (scribble.shape[1], scribble.shape[0])
    expanded = augment_box(scribble_to_box(scribble), margin, bounds)
    out, source = expanded, "fallback"
    if prob is not None:
        pred_box = prediction_to_box(prob, threshold)
        if pred_box is not None:
            inter = expanded.intersect(pred_box)
            if inter is not None:
                out, source = inter, "intersection"
    return (out, source) if return_source else out


def mask_scribble_agreement(mask, scribble) -> float:
    """Fraction of labeled scribble pixels the binary mask agrees with.

    A foreground scribble pixel agrees when the mask is 1 there, a background
    scribble pixel when the mask is 0. Unlabeled pixels never contribute.
    """
    mask = np.asarray(mask)
    scribble = np.asarray(scribble)
    if mask.shape != scribble.shape:
        raise PromptError(f"mask shape {mask.shape} != scribble shape {scribble.shape}")
    labeled = scribble != UNLABELED
    n = int(labeled.sum())
    if n == 0:
        raise PromptError("scribble has no labeled pixels")
    m = mask.astype(bool)
    agree = ((scribble == FOREGROUND) & m) | ((scribble == BACKGROUND) & ~m)
    return float(agree.sum() / n)


def build_indicator(masks, scribbles, tau=0.5) -> np.ndarray:
    """Per-sample reliability indicator: 1 iff agreement >= tau (boundary kept)."""
    if not 0.0 <= tau <= 1.0:
        raise PromptError(f"tau must lie in [0, 1], got {tau}")
    if len(masks) != len(scribbles):
        raise PromptError(f"{len(masks)} masks vs {len(scribbles)} scribbles")
    return np.array(
        [1 if mask_scribble_agreement(m, s) >= tau else 0 for m, s in zip(masks, scribbles)],
        dtype=np.int64,
    )
