"""Multi-level feature extraction: contract plus a small seedable encoder.

Feature levels follow the ResNet-family layout: five maps at strides
(4, 4, 8, 16, 32) relative to the input, so the first two levels share a
spatial resolution. Inputs are RGB with both sides a multiple of 32. Any
encoder honoring the FeaturePyramid contract can be plugged in; the bundled
TinyBackbone is a cheap stand-in with reproducible random weights, and the
full-size channel layout (64, 256, 512, 1024, 2048) is constructible through
the same class.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import SizingError

NUM_LEVELS = 5
LEVEL_STRIDES = (4, 4, 8, 16, 32)
FULL_CHANNELS = (64, 256, 512, 1024, 2048)
TINY_CHANNELS = (8, 16, 24, 32, 40)
MIN_INPUT_SIDE = 32


@dataclass(frozen=True)
class BackboneSpec:
    """Channel counts of the five pyramid levels."""

    channels: tuple = FULL_CHANNELS

    def __post_init__(self):
        channels = tuple(int(c) for c in self.channels)
        if len(channels) != NUM_LEVELS:
            raise ValueError(f"expected {NUM_LEVELS} channel counts, got {len(channels)}")
        if any(c <= 0 for c in channels):
            raise ValueError(f"channel counts must be positive: {channels}")
        object.__setattr__(self, "channels", channels)

    @property
    def strides(self) -> tuple:
        return LEVEL_STRIDES


def check_image(image) -> tuple[int, int]:
    """Validate an RGB input tensor; returns (H, W)."""
    if image.dim() not in (3, 4) or image.shape[-3] != 3:
        raise SizingError(
            f"expected (3, H, W) or (B, 3, H, W) RGB input, got shape {tuple(image.shape)}"
        )
    h, w = int(image.shape[-2]), int(image.shape[-1])
    if h % MIN_INPUT_SIDE or w % MIN_INPUT_SIDE:
        raise SizingError(f"input size {h}x{w} must be a multiple of {MIN_INPUT_SIDE}")
    return h, w


@dataclass
class FeaturePyramid:
    """Five (B, C_i, H/s_i, W/s_i) maps plus the source spatial size."""

    levels: tuple
    source_size: tuple

    def __post_init__(self):
        if len(self.levels) != NUM_LEVELS:
            raise SizingError(f"pyramid needs {NUM_LEVELS} levels, got {len(self.levels)}")
        self.levels = tuple(self.levels)
        self.source_size = (int(self.source_size[0]), int(self.source_size[1]))

    def validate(self, spec: BackboneSpec) -> "FeaturePyramid":
        h, w = self.source_size
        for i, (feat, c, s) in enumerate(zip(self.levels, spec.channels, LEVEL_STRIDES)):
            if feat.dim() != 4 or feat.shape[1] != c:
                raise SizingError(
                    f"level {i + 1}: expected {c} channels, got shape {tuple(feat.shape)}"
                )
            if feat.shape[-2:] != (h // s, w // s):
                raise SizingError(
                    f"level {i + 1}: expected spatial size {(h // s, w // s)} at stride {s}, "
                    f"got {tuple(feat.shape[-2:])}"
                )
        return self


class TinyBackbone(nn.Module):
    """Five plain conv stages producing the standard stride pyramid.

    Stands in for a large pretrained encoder: same output contract,
    weights reproducible from a seed, cheap enough for CPU tests.
    """

    def __init__(self, spec: BackboneSpec, seed: int = 0):
        super().__init__()
        self.spec = spec
        c = spec.channels
        self.stage1 = nn.Conv2d(3, c[0], 7, stride=4, padding=3)     # H/4
        self.stage2 = nn.Conv2d(c[0], c[1], 3, padding=1)            # H/4
        self.stage3 = nn.Conv2d(c[1], c[2], 3, stride=2, padding=1)  # H/8
        self.stage4 = nn.Conv2d(c[2], c[3], 3, stride=2, padding=1)  # H/16
        self.stage5 = nn.Conv2d(c[3], c[4], 3, stride=2, padding=1)  # H/32
        self._init_weights(seed)

    def _init_weights(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        for conv in (self.stage1, self.stage2, self.stage3, self.stage4, self.stage5):
            fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                conv.weight.uniform_(-bound, bound, generator=gen)
                conv.bias.uniform_(-bound, bound, generator=gen)

    def forward(self, image) -> FeaturePyramid:
        h, w = check_image(image)
        if image.dim() == 3:
            image = image.unsqueeze(0)
        f1 = self.stage1(image)
        f2 = self.stage2(F.relu(f1))
        f3 = self.stage3(F.relu(f2))
        f4 = self.stage4(F.relu(f3))
        f5 = self.stage5(F.relu(f4))
        return FeaturePyramid((f1, f2, f3, f4, f5), (h, w))


def make_tiny_backbone(channels=TINY_CHANNELS, seed: int = 0) -> TinyBackbone:
    return TinyBackbone(BackboneSpec(tuple(channels)), seed=seed)


def extract_features(extractor, image) -> FeaturePyramid:
    """Run an encoder and validate the output against its declared layout."""
    check_image(image)
    pyramid = extractor(image if image.dim() == 4 else image.unsqueeze(0))
    return pyramid.validate(extractor.spec)
