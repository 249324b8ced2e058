"""Guided segmenter: the promptable model that supplies auxiliary masks.

Two modes share one interface. Stub mode is fully deterministic and needs no
weights; its policies exist to exercise the training loop (box-fill), give it
perfect masks (oracle), adversarial masks (complement), or degraded ones
(noisy-oracle). External mode hosts a real promptable backend registered by
name; only the tail of its image encoder is trained, the earlier blocks, the
prompt encoder, and the mask decoder stay frozen.

The base class counts generate_mask invocations so callers can assert the
segmenter is never consulted at inference time.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import SegmenterError
from .losses import partial_ce
from .prompting import Box

STUB_POLICIES = ("box-fill", "oracle", "complement", "noisy-oracle")


@dataclass(frozen=True)
class SegmenterConfig:
    mode: str = "stub"                  # "stub" or "external"
    encoder_layers: int = 12
    trainable_tail_layers: int = 4
    decoder_frozen: bool = True
    prompt_encoder_frozen: bool = True

    def __post_init__(self):
        if self.mode not in ("stub", "external"):
            raise ValueError(f"unknown segmenter mode {self.mode!r}")
        if not 0 <= self.trainable_tail_layers <= self.encoder_layers:
            raise ValueError(
                f"trainable tail {self.trainable_tail_layers} must lie in "
                f"[0, {self.encoder_layers}]"
            )


def rasterize_box(box: Box, shape) -> np.ndarray:
    """Binary (H, W) map with ones inside the box."""
    out = np.zeros(tuple(shape), dtype=np.float32)
    out[box.slices()] = 1.0
    return out


class GuidedSegmenter:
    """Interface: mask generation, trainable tail, and an in-loop update."""

    name = "base"

    def __init__(self):
        self.mask_calls = 0

    def generate_mask(self, image, box: Box, gt=None):
        """Binary mask and its pre-threshold map for one image and box prompt."""
        self.mask_calls += 1
        return self._generate(image, box, gt)

    def _generate(self, image, box, gt):
        raise NotImplementedError

    def trainable_parameters(self) -> list:
        return []

    def finetune_step(self, images, boxes, scribbles, indicator, lr=1e-3) -> float:
        return 0.0

    def tail_state(self) -> dict:
        return {}

    def load_tail_state(self, state) -> None:
        pass


class StubSegmenter(GuidedSegmenter):
    """Deterministic mask source; policies are listed in STUB_POLICIES.

    oracle, complement, and noisy-oracle need the sample's ground truth.
    noisy-oracle flips a fixed fraction of pixels; the flip pattern is seeded
    from a hash of the ground truth bytes, the box, and the stub seed, so it
    depends only on the inputs, never on call order.
    """

    def __init__(self, policy: str, flip_fraction: float = 0.1, seed: int = 0):
        super().__init__()
        if policy not in STUB_POLICIES:
            raise ValueError(f"unknown stub policy {policy!r}; choose from {STUB_POLICIES}")
        if not 0.0 <= flip_fraction <= 1.0:
            raise ValueError(f"flip fraction must lie in [0, 1], got {flip_fraction}")
        self.policy = policy
        self.flip_fraction = flip_fraction
        self.seed = seed
        self.name = f"stub:{policy}"

    def _generate(self, image, box, gt):
        shape = np.asarray(image).shape[-2:]
        if self.policy == "box-fill":
            mask = rasterize_box(box, shape)
        else:
            if gt is None:
                raise SegmenterError(f"stub policy {self.policy!r} needs ground truth")
            g = np.asarray(gt).astype(bool)
            if g.shape != tuple(shape):
                raise SegmenterError(
                    f"ground truth shape {g.shape} does not match image shape {tuple(shape)}"
                )
            if self.policy == "oracle":
                mask = g
            elif self.policy == "complement":
                mask = ~g
            else:  # noisy-oracle
                key = [
                    self.seed, zlib.crc32(g.tobytes()),
                    box.x0, box.y0, box.x1, box.y1,
                ]
                rng = np.random.default_rng(key)
                n_flip = int(round(self.flip_fraction * g.size))
                mask = g.copy().reshape(-1)
                if n_flip:
                    idx = rng.choice(g.size, size=n_flip, replace=False)
                    mask[idx] = ~mask[idx]
                mask = mask.reshape(g.shape)
            mask = mask.astype(np.float32)
        logits = (mask - 0.5) * 20.0  # steep pre-threshold map consistent with the mask
        return mask, logits


class TrainableSegmenter(GuidedSegmenter, nn.Module):
    """Base for external promptable backends trained in the loop.

    Subclasses build encoder_blocks (an nn.ModuleList with
    config.encoder_layers entries), prompt_encoder, and decoder modules,
    implement forward(images, boxes) -> (B, 1, H, W) logits, and call
    apply_freeze() once the modules exist. Only the last
    config.trainable_tail_layers encoder blocks remain trainable.
    """

    def __init__(self, config: SegmenterConfig):
        nn.Module.__init__(self)
        GuidedSegmenter.__init__(self)
        self.config = config

    def apply_freeze(self) -> None:
        n = len(self.encoder_blocks)
        if n != self.config.encoder_layers:
            raise SegmenterError(
                f"backend defines {n} encoder blocks but the config says "
                f"{self.config.encoder_layers}"
            )
        cut = n - self.config.trainable_tail_layers
        for block in self.encoder_blocks[:cut]:
            for p in block.parameters():
                p.requires_grad = False
        if self.config.prompt_encoder_frozen:
            for p in self.prompt_encoder.parameters():
                p.requires_grad = False
        if self.config.decoder_frozen:
            for p in self.decoder.parameters():
                p.requires_grad = False

    def trainable_parameters(self) -> list:
        cut = len(self.encoder_blocks) - self.config.trainable_tail_layers
        return [p for block in self.encoder_blocks[cut:] for p in block.parameters()
                if p.requires_grad]

    def _generate(self, image, box, gt=None):
        x = torch.as_tensor(np.asarray(image), dtype=torch.float32).unsqueeze(0)
        with torch.no_grad():
            logits = self.forward(x, [box])
        prob = torch.sigmoid(logits)[0, 0]
        mask = (prob >= 0.5).float().numpy()
        return mask, logits[0, 0].numpy()

    def finetune_step(self, images, boxes, scribbles, indicator, lr=1e-3) -> float:
        """One partial-CE gradient step on the trainable tail, reliable samples only."""
        keep = [k for k, o in enumerate(np.asarray(indicator).reshape(-1)) if o]
        params = self.trainable_parameters()
        if not keep or not params:
            return 0.0
        x = torch.stack([torch.as_tensor(np.asarray(images[k]), dtype=torch.float32)
                         for k in keep])
        scr = torch.stack([torch.as_tensor(np.asarray(scribbles[k])) for k in keep])
        logits = self.forward(x, [boxes[k] for k in keep])
        loss = partial_ce(logits, scr)
        grads = torch.autograd.grad(loss, params, allow_unused=True)
        with torch.no_grad():
            for p, g in zip(params, grads):
                if g is not None:
                    p -= lr * g
        return float(loss.detach())

    def tail_state(self) -> dict:
        return {name: p.detach().clone() for name, p in self.named_parameters()
                if p.requires_grad}

    def load_tail_state(self, state) -> None:
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name in state:
                    p.copy_(state[name])


# ---------------------------------------------------------------------------
# backend registry

_REGISTRY: dict = {}


def register_segmenter(name: str, factory) -> None:
    """Register an external backend factory: factory(SegmenterConfig) -> GuidedSegmenter."""
    if not name or ":" in name:
        raise ValueError(f"bad backend name {name!r}")
    _REGISTRY[name] = factory


def registered_segmenters() -> list:
    return sorted(_REGISTRY)


def resolve_segmenter(spec: str, config: SegmenterConfig | None = None) -> GuidedSegmenter:
    """Build a segmenter from a spec string.

    Accepted forms: "stub:<policy>" with policies from STUB_POLICIES,
    "stub:noisy-oracle:<flip_fraction>", and "external:<name>" for a
    registered backend.
    """
    mode, _, rest = str(spec).partition(":")
    if mode == "stub":
        parts = rest.split(":") if rest else [""]
        policy = parts[0]
        if policy not in STUB_POLICIES:
            raise ValueError(
                f"unknown stub policy {policy!r}; choose from {', '.join(STUB_POLICIES)}"
            )
        if len(parts) > 2:
            raise ValueError(f"malformed segmenter spec {spec!r}")
        if len(parts) == 2:
            if policy != "noisy-oracle":
                raise ValueError(f"policy {policy!r} takes no parameter")
            return StubSegmenter(policy, flip_fraction=float(parts[1]))
        return StubSegmenter(policy)
    if mode == "external":
        if rest not in _REGISTRY:
            raise ValueError(
                f"external segmenter backend {rest!r} is not registered; "
                f"available: {registered_segmenters() or 'none'}"
            )
        return _REGISTRY[rest](config or SegmenterConfig(mode="external"))
    raise ValueError(
        f"unknown segmenter spec {spec!r}; use stub:<policy> or external:<name>"
    )
