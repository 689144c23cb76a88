"""Directory dataset pipeline: scan labeled image trees, decode and
preprocess to 224x224 float32 RGB in [0, 1], augment, split, and batch.

On-disk layout: `<root>/infected/*.{png,jpg,jpeg,bmp}` and
`<root>/not_infected/*...` (the underscored directory name maps to the
label string "not infected"). Class indices: infected=0, not infected=1.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from pconet import tensor

log = logging.getLogger("pconet.data")

CLASS_NAMES = ("infected", "not infected")
CLASS_DIRS = ("infected", "not_infected")
IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp")
TARGET_SIZE = 224


class DatasetError(Exception):
    """Dataset layout or content problem (missing class dir, empty class,
    undecodable required input)."""


@dataclass
class LabeledImage:
    path: Path
    label: int
    pixels: np.ndarray | None = None

    def load(self) -> np.ndarray:
        if self.pixels is None:
            self.pixels = load_image(self.path)
        return self.pixels


@dataclass
class DatasetSplit:
    train: list[LabeledImage]
    validation: list[LabeledImage]
    ratio: float
    seed: int


@dataclass
class Batch:
    images: np.ndarray  # (b, 224, 224, 3) float32
    labels: np.ndarray  # (b, 2) float32 one-hot

    def __len__(self) -> int:
        return self.images.shape[0]


def scan_dataset(root) -> list[LabeledImage]:
    """List every decodable image under `<root>/infected` and
    `<root>/not_infected` in deterministic lexicographic order.
    Undecodable or unsupported files are warned about and skipped."""
    root = Path(root)
    items: list[LabeledImage] = []
    for label, dirname in enumerate(CLASS_DIRS):
        class_dir = root / dirname
        if not class_dir.is_dir():
            raise DatasetError(f"missing class directory: {class_dir}")
        count = 0
        for p in sorted(q for q in class_dir.rglob("*") if q.is_file()):
            if p.suffix.lower() not in IMAGE_EXTS:
                log.warning("skipping unsupported file %s", p)
                continue
            try:
                with Image.open(p) as im:
                    im.verify()
            except (UnidentifiedImageError, OSError) as exc:
                log.warning("skipping undecodable image %s (%s)", p, exc)
                continue
            items.append(LabeledImage(p, label))
            count += 1
        if count == 0:
            raise DatasetError(f"empty class: no decodable images under {class_dir}")
    return items


def load_image(path) -> np.ndarray:
    """Decode and preprocess one file."""
    try:
        with Image.open(path) as im:
            im.load()
            return preprocess(im)
    except (UnidentifiedImageError, OSError) as exc:
        raise DatasetError(f"cannot decode image {path}: {exc}") from exc


def preprocess(raw) -> np.ndarray:
    """Bilinear-resize to 224x224, replicate grayscale to 3 channels, drop
    alpha, and scale into [0, 1] float32. Idempotent on already-processed
    arrays (float input is treated as being in [0, 1] already)."""
    if isinstance(raw, Image.Image):
        if raw.width == 0 or raw.height == 0:
            raise DatasetError("zero-area image")
        rgb = raw.convert("RGB")
        if rgb.size != (TARGET_SIZE, TARGET_SIZE):
            rgb = rgb.resize((TARGET_SIZE, TARGET_SIZE), Image.BILINEAR)
        return np.asarray(rgb, dtype=np.float32) / 255.0

    arr = np.asarray(raw)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3, 4):
        raise DatasetError(f"expected HxW image with 1/3/4 channels, got shape {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise DatasetError("zero-area image")
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    elif arr.shape[2] == 4:
        arr = arr[:, :, :3]

    if not np.issubdtype(arr.dtype, np.floating):
        mode = "RGB" if arr.dtype == np.uint8 else None
        if mode is None:
            raise DatasetError(f"unsupported image dtype {arr.dtype}")
        return preprocess(Image.fromarray(arr, mode))

    arr = np.clip(arr, 0.0, 1.0).astype(np.float32)
    if arr.shape[:2] != (TARGET_SIZE, TARGET_SIZE):
        # per-channel 'F'-mode resize keeps the float path free of 8-bit quantization
        chans = [
            np.asarray(
                Image.fromarray(arr[:, :, c], mode="F").resize(
                    (TARGET_SIZE, TARGET_SIZE), Image.BILINEAR
                ),
                dtype=np.float32,
            )
            for c in range(3)
        ]
        arr = np.clip(np.stack(chans, axis=2), 0.0, 1.0)
    return arr


def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, ::-1, :]


def rotate_zoom(image: np.ndarray, angle_deg: float, zoom: float) -> np.ndarray:
    """Rotate about the center and zoom, bilinear with edge-replicate fill."""
    if angle_deg == 0.0 and zoom == 1.0:
        return image.copy()
    theta = math.radians(angle_deg)
    c, s = math.cos(theta) / zoom, math.sin(theta) / zoom
    matrix = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    center = np.array([(image.shape[0] - 1) / 2, (image.shape[1] - 1) / 2, 0.0])
    offset = center - matrix @ center
    return ndimage.affine_transform(image, matrix, offset=offset, order=1, mode="nearest")


def augment(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random horizontal flip (p=0.5), rotation uniform in +-10 degrees,
    zoom uniform in +-10%, each drawn independently; output clamped to
    [0, 1]. Train-time only, applied at batch assembly."""
    flip = rng.random() < 0.5
    angle = rng.uniform(-10.0, 10.0)
    zoom = rng.uniform(0.9, 1.1)
    out = hflip(image) if flip else image
    out = rotate_zoom(out, angle, zoom)
    return np.clip(out, 0.0, 1.0)


def split(items: list[LabeledImage], ratio: float = 0.8, seed: int = 0) -> DatasetSplit:
    """Stratified train/validation split, deterministic under the seed."""
    if not 0 < ratio < 1:
        raise DatasetError(f"split ratio must be in (0, 1), got {ratio}")
    if len(items) < 2:
        raise DatasetError(f"need at least 2 items to split, got {len(items)}")
    rng = np.random.default_rng(seed)
    train: list[LabeledImage] = []
    val: list[LabeledImage] = []
    for label, name in enumerate(CLASS_NAMES):
        cls = [it for it in items if it.label == label]
        if not cls:
            raise DatasetError(f"class {name!r} has no items")
        n_train = int(round(ratio * len(cls)))
        if not 1 <= n_train <= len(cls) - 1:
            raise DatasetError(
                f"class {name!r} with {len(cls)} items leaves an empty side at ratio {ratio}"
            )
        order = rng.permutation(len(cls))
        train.extend(cls[i] for i in order[:n_train])
        val.extend(cls[i] for i in order[n_train:])
    return DatasetSplit(train, val, ratio, seed)


def _decode_workers() -> int:
    return max(1, min(tensor.get_num_threads(), 8))


def _ensure_loaded(items: list[LabeledImage]) -> None:
    missing = [it for it in items if it.pixels is None]
    if not missing:
        return
    workers = _decode_workers()
    if workers == 1 or len(missing) < 2:
        for it in missing:
            it.load()
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for it, px in zip(missing, pool.map(load_image, [it.path for it in missing])):
            it.pixels = px


def batches(items: list[LabeledImage], batch_size: int = 16, shuffle_seed: int | None = None,
            epoch: int = 0, augment_rng: np.random.Generator | None = None) -> Iterator[Batch]:
    """Partition `items` into ceil(n/batch_size) batches (last may be
    short) with one-hot labels. Shuffle order is driven by
    (shuffle_seed, epoch); decoding may run in parallel but batch content
    and order are fixed by the seed alone."""
    if not items:
        raise DatasetError("no items to batch")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    _ensure_loaded(items)
    eye = np.eye(2, dtype=np.float32)
    for chunk in batch_indices(len(items), batch_size, shuffle_seed, epoch):
        imgs = []
        for i in chunk:
            px = items[i].load()
            if px.shape != (TARGET_SIZE, TARGET_SIZE, 3):
                raise DatasetError(
                    f"{items[i].path}: expected ({TARGET_SIZE},{TARGET_SIZE},3) pixels, "
                    f"got {px.shape}"
                )
            imgs.append(augment(px, augment_rng) if augment_rng is not None else px)
        labels = eye[[items[i].label for i in chunk]]
        yield Batch(np.stack(imgs).astype(np.float32, copy=False), labels)


def batch_indices(n: int, batch_size: int, shuffle_seed: int | None = None,
                  epoch: int = 0) -> list[np.ndarray]:
    order = np.arange(n)
    if shuffle_seed is not None:
        order = np.random.default_rng([shuffle_seed, epoch]).permutation(n)
    return [order[start:start + batch_size] for start in range(0, n, batch_size)]


def make_synthetic_dataset(root, per_class: int = 4, seed: int = 0,
                           size: int = TARGET_SIZE) -> Path:
    """Write a tiny deterministic PNG dataset: bright-blob "infected"
    images vs low-intensity dark-field "not infected" images. Used by the
    test suite and handy for CLI smoke runs."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    for i in range(per_class):
        cy, cx = rng.uniform(size * 0.35, size * 0.65, size=2)
        sigma = rng.uniform(size * 0.12, size * 0.18)
        blob = 0.75 * np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2)))
        img = 0.15 + 0.04 * rng.random((size, size)) + blob
        _write_gray_png(root / CLASS_DIRS[0] / f"blob_{i}.png", img)
    for i in range(per_class):
        img = 0.12 + 0.04 * rng.random((size, size))
        _write_gray_png(root / CLASS_DIRS[1] / f"field_{i}.png", img)
    return root


def _write_gray_png(path: Path, img: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    u8 = (np.clip(img, 0.0, 1.0) * 255).round().astype(np.uint8)
    Image.fromarray(np.stack([u8] * 3, axis=2), mode="RGB").save(path)
