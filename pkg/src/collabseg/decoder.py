"""Cross-level decoder with mutual gating and deep-feature aggregation.

Adjacent pyramid levels are fused pairwise: each member of the pair is
projected to a shared width, spatially gated by a sigmoid map computed from
the other member, merged, and re-injected as residuals. Each decode stage
below the deepest additionally aggregates all deeper fused features through
a channel-attention block before its prediction head. Heads predict one
logit channel at the stage resolution; the four side outputs are upsampled
to the input resolution. All resampling is bilinear with
align_corners=False, and maps are stored pre-sigmoid.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import BackboneSpec, FeaturePyramid
from .errors import SizingError

DEFAULT_WIDTH = 64


def conv3x3(cin, cout):
    return nn.Conv2d(cin, cout, 3, padding=1)


def conv1x1(cin, cout):
    return nn.Conv2d(cin, cout, 1)


class ConvBNReLU(nn.Sequential):
    """3x3 conv -> BatchNorm -> ReLU, the normalized block used throughout."""

    def __init__(self, cin, cout):
        super().__init__(conv3x3(cin, cout), nn.BatchNorm2d(cout), nn.ReLU(inplace=True))


def _upsample_to(x, size):
    if x.shape[-2:] == tuple(size):
        return x
    return F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)


class CrossLevelFuse(nn.Module):
    """Fuse an adjacent feature pair by mutual sigmoid gating.

    forward(f_low, f_high) where f_high sits one level deeper, at the same
    resolution or exactly half of f_low's. Steps: project both to the shared
    width, gate each by a sigmoid map convolved from the other, merge the
    gated pair, then re-inject the merged map as a residual on both branches
    before the output projection.
    """

    def __init__(self, low_channels, high_channels, width=DEFAULT_WIDTH):
        super().__init__()
        self.low_proj = conv3x3(low_channels, width)
        self.high_proj = conv3x3(high_channels, width)
        self.gate_from_high = conv3x3(width, width)
        self.gate_from_low = conv3x3(width, width)
        self.merge = ConvBNReLU(2 * width, width)
        self.out_proj = conv3x3(2 * width, width)

    def forward(self, f_low, f_high):
        hl, wl = f_low.shape[-2:]
        hh, wh = f_high.shape[-2:]
        if (hh, wh) != (hl, wl) and (2 * hh, 2 * wh) != (hl, wl):
            raise SizingError(
                f"deeper feature {(hh, wh)} must match or be exactly half of {(hl, wl)}"
            )
        f_high = _upsample_to(f_high, (hl, wl))
        low = self.low_proj(f_low)                                   # bs, d, h, w
        high = self.high_proj(f_high)
        low_en = torch.sigmoid(self.gate_from_high(high)) * low
        high_en = torch.sigmoid(self.gate_from_low(low)) * high
        merged = self.merge(torch.cat([low_en, high_en], dim=1))
        return self.out_proj(torch.cat([low + merged, high + merged], dim=1))


class DeepFeatureAggregate(nn.Module):
    """Aggregate the fused features of all deeper stages into one map.

    Each input goes through its own normalized conv block, is upsampled to
    the target stage resolution, and the concatenation is reduced by a 1x1
    conv. The reduced map is refined, modulated by a sigmoid of its global
    average pool (per channel), re-added, and refined once more.
    """

    def __init__(self, num_inputs, width=DEFAULT_WIDTH):
        super().__init__()
        if num_inputs < 1:
            raise ValueError("aggregation needs at least one input feature")
        self.branches = nn.ModuleList([ConvBNReLU(width, width) for _ in range(num_inputs)])
        self.reduce = conv1x1(num_inputs * width, width)
        self.refine = ConvBNReLU(width, width)
        self.out_block = ConvBNReLU(width, width)

    def forward(self, features, size):
        if len(features) != len(self.branches):
            raise SizingError(
                f"expected {len(self.branches)} deeper features, got {len(features)}"
            )
        ups = [_upsample_to(branch(f), size) for branch, f in zip(self.branches, features)]
        cas = self.reduce(torch.cat(ups, dim=1))
        con = self.refine(cas)
        gate = torch.sigmoid(F.adaptive_avg_pool2d(con, 1))          # bs, d, 1, 1
        return self.out_block(con * gate + con)


class DecodeStage(nn.Module):
    """Fuse a stage's cross-level map with its aggregate and predict one logit channel."""

    def __init__(self, width=DEFAULT_WIDTH):
        super().__init__()
        self.fuse = ConvBNReLU(width, width)
        self.head = conv1x1(width, 1)

    def forward(self, fused_pair, aggregate=None):
        if aggregate is not None:
            if aggregate.shape != fused_pair.shape:
                raise SizingError(
                    f"aggregate shape {tuple(aggregate.shape)} != stage shape "
                    f"{tuple(fused_pair.shape)}"
                )
            fused_pair = fused_pair + aggregate
        fused = self.fuse(fused_pair)
        return fused, self.head(fused)


@dataclass
class PredictionSet:
    """Side-output maps, stored pre-sigmoid (logits=True always here).

    side_logits holds the four stage outputs upsampled to the input
    resolution, shallowest first; down_logits optionally holds the dominant
    map of a reduced-scale forward pass at its own resolution.
    """

    side_logits: tuple
    down_logits: torch.Tensor | None = None
    logits: bool = True

    def __post_init__(self):
        self.side_logits = tuple(self.side_logits)
        if len(self.side_logits) != 4:
            raise SizingError(f"expected 4 side outputs, got {len(self.side_logits)}")

    def probability(self) -> torch.Tensor:
        """Inference output: sigmoid of the dominant (shallowest) map."""
        return torch.sigmoid(self.side_logits[0])


class CrossLevelDecoder(nn.Module):
    """Full decoder: four pairwise fusions, three aggregates, four heads.

    No weights are shared between stages. The deepest stage decodes from its
    fused pair alone; stages 3, 2, 1 aggregate all deeper fused maps first.
    """

    def __init__(self, spec: BackboneSpec, width=DEFAULT_WIDTH):
        super().__init__()
        c = spec.channels
        self.width = width
        self.fuses = nn.ModuleList(
            [CrossLevelFuse(c[i], c[i + 1], width) for i in range(4)]
        )
        # aggregates[i] serves stage i+1 and consumes the 3 - i deeper fused maps
        self.aggregates = nn.ModuleList(
            [DeepFeatureAggregate(3 - i, width) for i in range(3)]
        )
        self.stages = nn.ModuleList([DecodeStage(width) for _ in range(4)])

    def forward(self, pyramid: FeaturePyramid) -> PredictionSet:
        f = pyramid.levels
        fused = [self.fuses[i](f[i], f[i + 1]) for i in range(4)]
        logits = [None] * 4
        _, logits[3] = self.stages[3](fused[3])
        for i in (2, 1, 0):
            agg = self.aggregates[i](fused[i + 1:], size=fused[i].shape[-2:])
            _, logits[i] = self.stages[i](fused[i], agg)
        side = tuple(_upsample_to(s, pyramid.source_size) for s in logits)
        return PredictionSet(side_logits=side)


def build_decoder(spec: BackboneSpec, width=DEFAULT_WIDTH, seed=0) -> CrossLevelDecoder:
    """Decoder with seed-reproducible initialization."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return CrossLevelDecoder(spec, width=width)
