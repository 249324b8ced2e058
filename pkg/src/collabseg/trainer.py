"""Training loop: dual-scale forward pass, box prompting, guided-mask
filtering, the combined loss, SGD with a triangular learning-rate schedule,
checkpoints, and inference.

One train step, in order: forward at the working size, forward at the
reduced scale, build box prompts from the scribbles and the detached dominant
map, generate guided masks, build the reliability indicator, evaluate the
combined loss, update the encoder-decoder, then (external backends only) let
the segmenter take its own finetune step. Inference never touches the
segmenter.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import BackboneSpec, FULL_CHANNELS, MIN_INPUT_SIDE, extract_features, make_tiny_backbone
from .data import load_sample, resize_image, resize_nearest, sample_crop
from .decoder import CrossLevelDecoder, PredictionSet, build_decoder
from .errors import DataError, PromptError
from .losses import GuidedMaskBatch, LossWeights, total_loss
from .prompting import (build_indicator, make_prompt_box, prediction_to_box,
                        scaled_margin, scribble_to_box)
from .segmenter import GuidedSegmenter, resolve_segmenter

PROMPT_SOURCES = ("intersection", "box1", "box2")
MASK_MODES = ("online", "offline")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 12
    epochs: int = 100
    lr_min: float = 1e-5
    lr_max: float = 1e-2
    warmup_fraction: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    image_size: int = 320
    down_scale: float = 0.3
    crop_min: float = 0.75
    crop_max: float = 1.0
    margin_px: int = 25
    tau: float = 0.5
    segmenter: str = "stub:box-fill"
    prompt_source: str = "intersection"
    mask_mode: str = "online"
    collab_start_epoch: int = 0
    backbone_channels: tuple = FULL_CHANNELS
    decoder_width: int = 64
    checkpoint_every: int = 20
    seed: int = 0
    norm_mean: tuple = (0.485, 0.456, 0.406)
    norm_std: tuple = (0.229, 0.224, 0.225)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if not 0.0 < self.lr_min < self.lr_max:
            raise ValueError(f"need 0 < lr_min < lr_max, got {self.lr_min}, {self.lr_max}")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ValueError(f"warmup_fraction must lie in (0, 1), got {self.warmup_fraction}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0.0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.image_size < MIN_INPUT_SIDE or self.image_size % MIN_INPUT_SIDE:
            raise ValueError(f"image_size must be a positive multiple of {MIN_INPUT_SIDE}")
        if not 0.0 < self.down_scale <= 1.0:
            raise ValueError(f"down_scale must lie in (0, 1], got {self.down_scale}")
        if not 0.0 < self.crop_min <= self.crop_max <= 1.0:
            raise ValueError(f"need 0 < crop_min <= crop_max <= 1, got {self.crop_min}, {self.crop_max}")
        if self.margin_px < 0:
            raise ValueError(f"margin_px must be >= 0, got {self.margin_px}")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")
        if self.prompt_source not in PROMPT_SOURCES:
            raise ValueError(f"prompt_source must be one of {PROMPT_SOURCES}")
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"mask_mode must be one of {MASK_MODES}")
        if self.collab_start_epoch < 0:
            raise ValueError(f"collab_start_epoch must be >= 0, got {self.collab_start_epoch}")
        if self.checkpoint_every < 1:
            raise ValueError(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")
        if self.decoder_width < 1:
            raise ValueError(f"decoder_width must be >= 1, got {self.decoder_width}")
        object.__setattr__(self, "backbone_channels", tuple(self.backbone_channels))
        object.__setattr__(self, "norm_mean", tuple(self.norm_mean))
        object.__setattr__(self, "norm_std", tuple(self.norm_std))


def config_field_docs() -> dict:
    """Config key -> default, for CLI help and the config file round trip."""
    return {f.name: getattr(TrainConfig(), f.name) for f in fields(TrainConfig)}


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Triangular schedule: linear rise to lr_max, linear decay back to lr_min.

    The peak sits at round(warmup_fraction * total_steps), clamped so that
    both endpoints stay at lr_min and the maximum is hit exactly once.
    """
    if total_steps < 1:
        raise ValueError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside schedule of {total_steps} steps")
    if total_steps == 1:
        return cfg.lr_min
    peak = int(round(cfg.warmup_fraction * total_steps))
    peak = min(max(peak, 1), max(total_steps - 2, 1))
    span = cfg.lr_max - cfg.lr_min
    if step <= peak:
        return cfg.lr_min + span * step / peak
    return cfg.lr_min + span * (total_steps - 1 - step) / (total_steps - 1 - peak)


def scaled_input_size(size: int, factor: float) -> int:
    """Reduced-scale side length snapped to the encoder's sizing contract."""
    return max(MIN_INPUT_SIDE, int(round(size * factor / MIN_INPUT_SIDE)) * MIN_INPUT_SIDE)


@dataclass(frozen=True)
class StepLog:
    step: int
    lr: float
    pce: float
    seg: float
    ss: float
    total: float
    reliable_fraction: float

    CSV_HEADER = "step,lr,pce,seg,ss,total,reliable_fraction"

    def csv_row(self) -> str:
        return (f"{self.step},{self.lr:.10g},{self.pce:.10g},{self.seg:.10g},"
                f"{self.ss:.10g},{self.total:.10g},{self.reliable_fraction:.10g}")


@dataclass
class TrainModels:
    backbone: torch.nn.Module
    decoder: CrossLevelDecoder
    segmenter: GuidedSegmenter

    def train_mode(self):
        self.backbone.train()
        self.decoder.train()

    def eval_mode(self):
        self.backbone.eval()
        self.decoder.eval()

    def net_parameters(self):
        yield from self.backbone.parameters()
        yield from self.decoder.parameters()


def build_models(cfg: TrainConfig) -> TrainModels:
    spec = BackboneSpec(cfg.backbone_channels)
    return TrainModels(
        backbone=make_tiny_backbone(cfg.backbone_channels, seed=cfg.seed),
        decoder=build_decoder(spec, width=cfg.decoder_width, seed=cfg.seed),
        segmenter=resolve_segmenter(cfg.segmenter),
    )


def make_optimizer(models: TrainModels, cfg: TrainConfig) -> torch.optim.SGD:
    return torch.optim.SGD(models.net_parameters(), lr=cfg.lr_min,
                           momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def normalize_image(images: torch.Tensor, cfg: TrainConfig) -> torch.Tensor:
    mean = torch.tensor(cfg.norm_mean, dtype=images.dtype).view(1, 3, 1, 1)
    std = torch.tensor(cfg.norm_std, dtype=images.dtype).view(1, 3, 1, 1)
    return (images - mean) / std


def run_network(models: TrainModels, images: torch.Tensor) -> PredictionSet:
    pyramid = extract_features(models.backbone, images)
    return models.decoder(pyramid)


# ---------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    ids: list
    images: torch.Tensor        # (B, 3, S, S) raw [0, 1]
    scribbles: torch.Tensor     # (B, S, S) long
    scribbles_np: list          # uint8 (S, S) each
    gts: list                   # bool (S, S) or None, same crop as the images
    crops: list                 # CropSpec per sample
    clean: list                 # (image, scribble, gt) at working size, uncropped


def make_batch(records, indices, cfg: TrainConfig, epoch: int) -> Batch:
    ids, images, scr_np, gts, crops, clean = [], [], [], [], [], []
    size = cfg.image_size
    for i in indices:
        rec = records[int(i)]
        sample = load_sample(rec)
        image = resize_image(sample.image, size)
        scribble = resize_nearest(sample.scribble, size)
        gt = None
        if sample.gt is not None:
            gt = resize_nearest(sample.gt.astype(np.uint8), size)
        rng = np.random.default_rng([cfg.seed, epoch, int(i)])
        crop = sample_crop(scribble, size, (cfg.crop_min, cfg.crop_max), rng)
        ids.append(rec.id)
        images.append(crop.apply_to_image(image))
        scr_np.append(crop.apply_to_label(scribble))
        gts.append(crop.apply_to_label(gt).astype(bool) if gt is not None else None)
        crops.append(crop)
        clean.append((image, scribble, gt.astype(bool) if gt is not None else None))
    return Batch(
        ids=ids,
        images=torch.from_numpy(np.stack(images)),
        scribbles=torch.from_numpy(np.stack(scr_np).astype(np.int64)),
        scribbles_np=scr_np,
        gts=gts,
        crops=crops,
        clean=clean,
    )


# ---------------------------------------------------------------------------
# one step


def prompt_for_source(source, scribble, prob, margin, bounds):
    """Prompt box for one sample under the configured strategy."""
    if source == "box1":
        return scribble_to_box(scribble)
    if source == "box2":
        box = prediction_to_box(prob) if prob is not None else None
        return box if box is not None else scribble_to_box(scribble)
    return make_prompt_box(scribble, prob, margin=margin, bounds=bounds)


def _guided_masks(batch: Batch, models: TrainModels, cfg: TrainConfig, s1_prob,
                  mask_cache):
    """Boxes, masks, and the indicator for one batch; None box marks a failed prompt."""
    n = len(batch.ids)
    size = cfg.image_size
    margin = scaled_margin(cfg.margin_px, size)
    bounds = (size, size)
    boxes, masks, ok = [], [], []
    for k in range(n):
        mask = np.zeros((size, size), dtype=np.float32)
        box = None
        try:
            if cfg.mask_mode == "offline":
                # one mask per sample, generated from the clean image with the
                # scribble-box prompt, then re-cropped to the batch geometry
                clean_image, clean_scribble, clean_gt = batch.clean[k]
                if batch.ids[k] not in mask_cache:
                    cbox = make_prompt_box(clean_scribble, None, margin=margin, bounds=bounds)
                    full_mask, _ = models.segmenter.generate_mask(clean_image, cbox, gt=clean_gt)
                    mask_cache[batch.ids[k]] = full_mask.astype(np.uint8)
                box = make_prompt_box(batch.scribbles_np[k], None, margin=margin, bounds=bounds)
                mask = batch.crops[k].apply_to_label(mask_cache[batch.ids[k]]).astype(np.float32)
            else:
                box = prompt_for_source(cfg.prompt_source, batch.scribbles_np[k],
                                        s1_prob[k], margin, bounds)
                mask, _ = models.segmenter.generate_mask(
                    batch.images[k].numpy(), box, gt=batch.gts[k])
        except PromptError:
            box = None
        boxes.append(box)
        masks.append(np.asarray(mask, dtype=np.float32))
        ok.append(box is not None)
    if not any(ok):
        raise DataError("every sample in the batch failed prompt construction")
    indicator = np.zeros(n, dtype=np.int64)
    ok_idx = [k for k in range(n) if ok[k]]
    sub = build_indicator([masks[k] for k in ok_idx],
                          [batch.scribbles_np[k] for k in ok_idx], cfg.tau)
    indicator[ok_idx] = sub
    return boxes, masks, indicator


def train_step(batch: Batch, models: TrainModels, optimizer, cfg: TrainConfig,
               step: int, total_steps: int, weights: LossWeights | None = None,
               mask_cache=None, collab: bool = True) -> StepLog:
    weights = weights or LossWeights()
    models.train_mode()
    lr = lr_at(step, total_steps, cfg)
    for group in optimizer.param_groups:
        group["lr"] = lr

    x = normalize_image(batch.images, cfg)
    preds_full = run_network(models, x)
    dsize = scaled_input_size(cfg.image_size, cfg.down_scale)
    x_down = F.interpolate(batch.images, size=(dsize, dsize), mode="bilinear",
                           align_corners=False)
    preds_down = run_network(models, normalize_image(x_down, cfg))
    preds = PredictionSet(preds_full.side_logits,
                          down_logits=preds_down.side_logits[0])

    guided = None
    boxes = indicator = None
    if collab:
        s1_prob = torch.sigmoid(preds.side_logits[0].detach())[:, 0].numpy()
        boxes, masks, indicator = _guided_masks(batch, models, cfg, s1_prob, mask_cache)
        guided = GuidedMaskBatch(
            masks=torch.from_numpy(np.stack(masks)).unsqueeze(1),
            indicator=torch.from_numpy(indicator),
        )

    loss, comps = total_loss(preds, batch.scribbles, guided, weights)
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()

    if collab and models.segmenter.trainable_parameters():
        models.segmenter.finetune_step(
            [im.numpy() for im in batch.images], boxes, batch.scribbles_np,
            indicator, lr=lr)

    return StepLog(step=step, lr=lr, pce=comps["pce1"], seg=comps["seg1"],
                   ss=comps["ss"], total=comps["total"],
                   reliable_fraction=comps["reliable_fraction"])


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, models: TrainModels, optimizer, cfg: TrainConfig,
                    epoch: int, step: int, mask_cache=None) -> None:
    payload = {
        "backbone": models.backbone.state_dict(),
        "decoder": models.decoder.state_dict(),
        "segmenter_tail": models.segmenter.tail_state(),
        "optimizer": optimizer.state_dict(),
        "epoch": int(epoch),
        "step": int(step),
        "config": asdict(cfg),
        "mask_cache": dict(mask_cache) if mask_cache else {},
        "torch_rng": torch.get_rng_state(),
    }
    torch.save(payload, path)


def load_checkpoint(path, models: TrainModels | None = None, optimizer=None) -> dict:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if models is not None:
        models.backbone.load_state_dict(payload["backbone"])
        models.decoder.load_state_dict(payload["decoder"])
        models.segmenter.load_tail_state(payload["segmenter_tail"])
    if optimizer is not None:
        optimizer.load_state_dict(payload["optimizer"])
    if "torch_rng" in payload:
        torch.set_rng_state(payload["torch_rng"])
    return payload


def models_from_checkpoint(path) -> tuple:
    """Rebuild models and config from a checkpoint; returns (models, cfg)."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    cfg = TrainConfig(**payload["config"])
    models = build_models(cfg)
    models.backbone.load_state_dict(payload["backbone"])
    models.decoder.load_state_dict(payload["decoder"])
    models.segmenter.load_tail_state(payload["segmenter_tail"])
    return models, cfg


# ---------------------------------------------------------------------------
# fit / predict


@dataclass
class FitResult:
    models: TrainModels
    config: TrainConfig
    history: list
    history_path: Path
    checkpoint_path: Path


def fit(records, cfg: TrainConfig, out_dir, resume_from=None,
        weights: LossWeights | None = None) -> FitResult:
    """Train over the manifest's train split and write history plus checkpoints.

    All stochastic choices derive from (seed, epoch[, sample index]), so two
    runs with identical arguments produce byte-identical histories, and
    resuming from a checkpoint reproduces the remaining steps of an
    uninterrupted run exactly.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = [r for r in records if r.split == "train"]
    if not records:
        raise DataError("no records in the train split")
    weights = weights or LossWeights()

    torch.manual_seed(cfg.seed)
    models = build_models(cfg)
    optimizer = make_optimizer(models, cfg)
    steps_per_epoch = math.ceil(len(records) / cfg.batch_size)
    total_steps = max(1, cfg.epochs * steps_per_epoch)
    start_epoch = 0
    mask_cache: dict = {}
    if resume_from is not None:
        payload = load_checkpoint(resume_from, models, optimizer)
        start_epoch = payload["epoch"]
        mask_cache = payload.get("mask_cache", {})

    history: list[StepLog] = []
    history_path = out_dir / "history.csv"
    checkpoint_path = out_dir / "checkpoint.pt"
    with open(history_path, "w") as fh:
        fh.write(StepLog.CSV_HEADER + "\n")
        for epoch in range(start_epoch, cfg.epochs):
            collab = epoch >= cfg.collab_start_epoch
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(records))
            for b in range(steps_per_epoch):
                idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                batch = make_batch(records, idx, cfg, epoch)
                step = epoch * steps_per_epoch + b
                log = train_step(batch, models, optimizer, cfg, step, total_steps,
                                 weights=weights, mask_cache=mask_cache, collab=collab)
                history.append(log)
                fh.write(log.csv_row() + "\n")
            done = epoch + 1
            if done % cfg.checkpoint_every == 0 and done < cfg.epochs:
                save_checkpoint(out_dir / f"checkpoint_ep{done:04d}.pt", models,
                                optimizer, cfg, done, done * steps_per_epoch, mask_cache)
    save_checkpoint(checkpoint_path, models, optimizer, cfg, cfg.epochs,
                    cfg.epochs * steps_per_epoch, mask_cache)
    return FitResult(models=models, config=cfg, history=history,
                     history_path=history_path, checkpoint_path=checkpoint_path)


def predict(image, models: TrainModels, cfg: TrainConfig) -> np.ndarray:
    """Probability map for one image; never consults the segmenter.

    The image is resized to the working size for the forward pass and the
    sigmoid of the dominant map is resized back to the input geometry.
    """
    models.eval_mode()
    image = np.asarray(image, dtype=np.float32)
    h, w = image.shape[-2:]
    x = resize_image(image, cfg.image_size)
    with torch.no_grad():
        preds = run_network(models, normalize_image(
            torch.from_numpy(x).unsqueeze(0), cfg))
        prob = preds.probability()[0, 0].numpy()
    if prob.shape != (h, w):
        prob = resize_image(np.stack([prob] * 3), (h, w))[0]
    return np.clip(prob.astype(np.float64), 0.0, 1.0)
