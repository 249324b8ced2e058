"""Dataset layout, scribble file formats, augmentation, and a synthetic generator.

On-disk layout::

    root/
        images/     RGB images
        scribbles/  sparse annotations, see below
        masks/      full binary ground truth (synthetic / evaluation data only)
        manifest.csv  columns: id, image, scribble, mask, split

Scribble rasters carry three values: 0 unlabeled, 1 foreground, 2 background.
Two file encodings are accepted: a single-channel image with those raw values,
or an RGB image where pure blue (0, 0, 255) marks foreground strokes and pure
green (0, 255, 0) marks background strokes; every other color is unlabeled.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage
from skimage.morphology import skeletonize

from .errors import AnnotationError, DataError

UNLABELED = 0
FOREGROUND = 1
BACKGROUND = 2

_SPLITS = ("train", "val", "test")


# ---------------------------------------------------------------------------
# file formats


def load_image(path) -> np.ndarray:
    """Load an RGB image as float32 (3, H, W) in [0, 1]."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"image file not found: {path}")
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1).copy()


def save_image(path, image) -> None:
    """Write a float (3, H, W) image in [0, 1] as an 8-bit RGB file."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    arr = (arr.transpose(1, 2, 0) * 255.0).round().astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_scribble(path) -> np.ndarray:
    """Load a scribble raster as uint8 (H, W) with values {0, 1, 2}."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"scribble file not found: {path}")
    arr = np.asarray(Image.open(path))
    if arr.ndim == 2:
        bad = np.setdiff1d(np.unique(arr), [UNLABELED, FOREGROUND, BACKGROUND])
        if bad.size:
            raise AnnotationError(
                f"scribble {path} holds values {bad.tolist()} outside {{0, 1, 2}}"
            )
        return arr.astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] in (3, 4):
        rgb = arr[..., :3]
        out = np.full(rgb.shape[:2], UNLABELED, dtype=np.uint8)
        out[(rgb == (0, 0, 255)).all(-1)] = FOREGROUND
        out[(rgb == (0, 255, 0)).all(-1)] = BACKGROUND
        return out
    raise AnnotationError(f"scribble {path} is neither single-channel nor RGB")


def save_scribble(path, scribble) -> None:
    """Write a {0, 1, 2} scribble raster; round-trips bit-exactly via load_scribble."""
    arr = np.asarray(scribble, dtype=np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def load_binary_mask(path) -> np.ndarray:
    """Load a binary mask stored as an 8-bit grayscale image (values > 127 are foreground)."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"mask file not found: {path}")
    return np.asarray(Image.open(path).convert("L")) > 127


def save_binary_mask(path, mask) -> None:
    Image.fromarray(np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8), mode="L").save(path)


def load_prediction(path) -> np.ndarray:
    """Load a probability map saved by save_prediction, as float64 (H, W) in [0, 1]."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"prediction file not found: {path}")
    return np.asarray(Image.open(path).convert("L"), dtype=np.float64) / 255.0


def save_prediction(path, prob) -> None:
    """Write a [0, 1] probability map as 8-bit grayscale (0..255)."""
    arr = np.clip(np.asarray(prob, dtype=np.float64), 0.0, 1.0)
    Image.fromarray((arr * 255.0).round().astype(np.uint8), mode="L").save(path)


# ---------------------------------------------------------------------------
# manifest


@dataclass
class SampleRecord:
    id: str
    image: Path
    scribble: Path | None
    mask: Path | None
    split: str = "train"

    def __post_init__(self):
        if self.split not in _SPLITS:
            raise DataError(f"record {self.id}: unknown split {self.split!r}")
        if self.split == "train" and self.scribble is None:
            raise DataError(f"record {self.id}: train records need a scribble path")


def write_manifest(path, records) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "image", "scribble", "mask", "split"])
        for r in records:
            writer.writerow([
                r.id,
                _relpath(r.image, path.parent),
                _relpath(r.scribble, path.parent) if r.scribble else "",
                _relpath(r.mask, path.parent) if r.mask else "",
                r.split,
            ])


def load_manifest(path) -> list[SampleRecord]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    root = path.parent
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        expected = {"id", "image", "scribble", "mask", "split"}
        if reader.fieldnames is None or set(reader.fieldnames) != expected:
            raise DataError(
                f"manifest {path}: expected columns {sorted(expected)}, got {reader.fieldnames}"
            )
        for row in reader:
            records.append(SampleRecord(
                id=row["id"],
                image=root / row["image"],
                scribble=root / row["scribble"] if row["scribble"] else None,
                mask=root / row["mask"] if row["mask"] else None,
                split=row["split"],
            ))
    if not records:
        raise DataError(f"manifest {path} lists no samples")
    return records


def _relpath(p, root):
    p = Path(p)
    try:
        return p.relative_to(root).as_posix()
    except ValueError:
        return p.as_posix()


@dataclass
class Sample:
    id: str
    image: np.ndarray              # (3, H, W) float32 in [0, 1]
    scribble: np.ndarray | None    # (H, W) uint8 {0, 1, 2}
    gt: np.ndarray | None          # (H, W) bool


def load_sample(record: SampleRecord) -> Sample:
    image = load_image(record.image)
    scribble = load_scribble(record.scribble) if record.scribble else None
    gt = load_binary_mask(record.mask) if record.mask else None
    if scribble is not None and scribble.shape != image.shape[1:]:
        raise DataError(
            f"record {record.id}: scribble size {scribble.shape} does not match "
            f"image size {image.shape[1:]}"
        )
    if gt is not None and gt.shape != image.shape[1:]:
        raise DataError(
            f"record {record.id}: mask size {gt.shape} does not match image size {image.shape[1:]}"
        )
    return Sample(record.id, image, scribble, gt)


# ---------------------------------------------------------------------------
# geometric transforms


def resize_image(image, size) -> np.ndarray:
    """Bilinear resize of a float (3, H, W) array to (3, size, size) or (3, *size)."""
    size = (size, size) if isinstance(size, int) else tuple(size)
    arr = np.asarray(image, dtype=np.float32)
    if arr.shape[1:] == size:
        return arr.copy()
    t = torch.from_numpy(arr).unsqueeze(0)
    out = F.interpolate(t, size=size, mode="bilinear", align_corners=False)
    return out.squeeze(0).numpy()


def resize_nearest(arr, size) -> np.ndarray:
    """Nearest-neighbor resize via half-pixel-center index maps.

    Never introduces values absent from the input, so label rasters stay valid.
    """
    size = (size, size) if isinstance(size, int) else tuple(size)
    arr = np.asarray(arr)
    h, w = arr.shape
    if (h, w) == size:
        return arr.copy()
    rows = np.minimum((np.arange(size[0]) + 0.5) * h / size[0], h - 1).astype(np.int64)
    cols = np.minimum((np.arange(size[1]) + 0.5) * w / size[1], w - 1).astype(np.int64)
    return arr[rows][:, cols]


@dataclass(frozen=True)
class CropSpec:
    """A square crop at working resolution, resized back to out_size.

    side == out_size is the identity. The same spec can be applied to any
    map that shares the working-size geometry (cached guided masks included),
    keeping every raster of a sample aligned.
    """

    y0: int
    x0: int
    side: int
    out_size: int

    def apply_to_image(self, image) -> np.ndarray:
        if self.side == self.out_size and (self.y0, self.x0) == (0, 0):
            return np.asarray(image, dtype=np.float32).copy()
        crop = np.asarray(image)[:, self.y0:self.y0 + self.side, self.x0:self.x0 + self.side]
        return resize_image(crop, self.out_size)

    def apply_to_label(self, arr) -> np.ndarray:
        if self.side == self.out_size and (self.y0, self.x0) == (0, 0):
            return np.asarray(arr).copy()
        crop = np.asarray(arr)[self.y0:self.y0 + self.side, self.x0:self.x0 + self.side]
        return resize_nearest(crop, self.out_size)


def sample_crop(scribble, size, crop_range, rng) -> CropSpec:
    """Draw a crop for a working-size scribble.

    The crop side is a uniform fraction of the working size drawn from
    crop_range. A crop that drops every foreground scribble pixel is
    resampled up to 10 times, then a center crop is used.
    """
    lo, hi = crop_range
    if not (0.0 < lo <= hi <= 1.0):
        raise ValueError(f"bad crop_range {crop_range}")
    side = int(round(size * rng.uniform(lo, hi)))
    side = max(1, min(size, side))
    if side == size:
        return CropSpec(0, 0, size, size)
    y0 = x0 = (size - side) // 2
    for _ in range(10):
        yc = int(rng.integers(0, size - side + 1))
        xc = int(rng.integers(0, size - side + 1))
        if (scribble[yc:yc + side, xc:xc + side] == FOREGROUND).any():
            y0, x0 = yc, xc
            break
    return CropSpec(y0, x0, side, size)


def train_transform(image, scribble, gt=None, size=320, crop_range=(0.75, 1.0), rng=0):
    """Resize to the working size, random-crop, and resize back.

    Returns (image, scribble, gt) with gt passed through the identical
    geometry when given (None otherwise). Deterministic for a given rng seed;
    with crop_range == (1.0, 1.0) and inputs already at the working size the
    transform is the identity.
    """
    if isinstance(rng, (int, np.integer, list, tuple)):
        rng = np.random.default_rng(rng)
    image = resize_image(image, size)
    scribble = resize_nearest(scribble, size)
    if gt is not None:
        gt = resize_nearest(np.asarray(gt).astype(np.uint8), size)
    crop = sample_crop(scribble, size, crop_range, rng)
    image = crop.apply_to_image(image)
    scribble = crop.apply_to_label(scribble)
    if gt is not None:
        gt = crop.apply_to_label(gt).astype(bool)
    return image, scribble, gt


# ---------------------------------------------------------------------------
# synthetic data


def _ellipse(size, cy, cx, ry, rx, angle):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    ca, sa = np.cos(angle), np.sin(angle)
    u = (xx - cx) * ca + (yy - cy) * sa
    v = -(xx - cx) * sa + (yy - cy) * ca
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def synthesize_sample(rng, size, thickness=1):
    """One synthetic sample: image, full mask, and a scribble derived from the mask.

    One or two ellipses on a darker background, Gaussian pixel noise. The
    foreground scribble is the morphological skeleton of the mask (optionally
    dilated, always kept inside the mask); the background scribble is a band at
    a fixed distance outside the mask. Guarantees at least one pixel of each.
    """
    gt = np.zeros((size, size), dtype=bool)
    for _ in range(int(rng.integers(1, 3))):
        cy, cx = rng.uniform(0.32, 0.68, 2) * size
        ry, rx = rng.uniform(0.11, 0.22, 2) * size
        gt |= _ellipse(size, cy, cx, ry, rx, rng.uniform(0.0, np.pi))
    fg_level = rng.uniform(0.60, 0.85)
    bg_level = rng.uniform(0.15, 0.40)
    base = np.where(gt, fg_level, bg_level)
    image = np.stack(
        [np.clip(base + rng.normal(0.0, 0.03, base.shape), 0.0, 1.0) for _ in range(3)]
    ).astype(np.float32)

    fg_line = skeletonize(gt)
    if thickness > 1:
        fg_line = ndimage.binary_dilation(fg_line, iterations=thickness - 1) & gt
    dist = ndimage.distance_transform_edt(~gt)
    d = min(4.0, max(1.0, dist.max() - 2.0))
    band = (dist >= d) & (dist < d + 1.5 + (thickness - 1))
    if not band.any():
        band = dist >= dist.max() - 0.5
    scribble = np.zeros((size, size), dtype=np.uint8)
    scribble[fg_line] = FOREGROUND
    scribble[band] = BACKGROUND
    if not (scribble == FOREGROUND).any() or not (scribble == BACKGROUND).any():
        raise DataError("synthetic scribble generation produced an empty class")
    return image, gt, scribble


def make_synthetic_dataset(out_dir, n=8, size=64, seed=0, thickness=1) -> list[SampleRecord]:
    """Generate n samples under out_dir and write the manifest.

    Sample i is drawn from an RNG seeded with (seed, i), so any subset of ids is
    reproducible independently of generation order; repeated runs with the same
    arguments produce byte-identical files.
    """
    out_dir = Path(out_dir)
    for sub in ("images", "scribbles", "masks"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        image, gt, scribble = synthesize_sample(rng, size, thickness)
        sid = f"sample_{i:03d}"
        paths = {
            "image": out_dir / "images" / f"{sid}.png",
            "scribble": out_dir / "scribbles" / f"{sid}.png",
            "mask": out_dir / "masks" / f"{sid}.png",
        }
        save_image(paths["image"], image)
        save_scribble(paths["scribble"], scribble)
        save_binary_mask(paths["mask"], gt)
        records.append(SampleRecord(sid, paths["image"], paths["scribble"], paths["mask"], "train"))
    write_manifest(out_dir / "manifest.csv", records)
    return records
