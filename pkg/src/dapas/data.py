"""Datasets and the 8-bit boundary.

Two sources feed the toolkit: a directory in VOC-like layout
(``images/``, ``masks/``, ``splits/{train,val}.txt``) and a deterministic
in-memory synthetic-shapes generator. Both produce a :class:`DatasetHandle`.
"""

from __future__ import annotations

import colorsys
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from dapas.types import (
    DEFAULT_IGNORE_INDEX,
    ImageBatch,
    LabelRangeError,
    SegmentationMask,
    SpecError,
    ValidationError,
    check_resolution,
)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")

# Background texture colours. Shapes are drawn with saturation >= 0.5 so they
# can never coincide with one of these greys.
BACKGROUND_PALETTE = np.array(
    [
        [0.30, 0.30, 0.30],
        [0.40, 0.40, 0.40],
        [0.50, 0.50, 0.50],
        [0.60, 0.60, 0.60],
    ],
    dtype=np.float32,
)
SHAPE_KINDS = ("rectangle", "circle", "triangle")


class DatasetError(ValidationError):
    pass


class DecodeError(ValidationError):
    pass


@dataclass(frozen=True)
class DatasetHandle:
    """An in-memory dataset of (image, mask) pairs at a fixed resolution."""

    images: torch.Tensor
    labels: torch.Tensor
    num_classes: int
    ignore_index: int = DEFAULT_IGNORE_INDEX
    source: str = "synthetic"
    stems: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if len(self.images) == 0:
            raise DatasetError("dataset is empty")
        if len(self.images) != len(self.labels):
            raise DatasetError("image and mask counts differ")
        # validates the whole set once
        SegmentationMask(self.labels, self.num_classes, self.ignore_index).check_pairs_with(
            ImageBatch(self.images)
        )
        if not self.stems:
            object.__setattr__(self, "stems", tuple(f"{i:05d}" for i in range(len(self))))

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def resolution(self) -> tuple[int, int]:
        return int(self.images.shape[2]), int(self.images.shape[3])

    @property
    def channels(self) -> int:
        return int(self.images.shape[1])

    def order(self, shuffle: bool = False, seed: int = 0) -> np.ndarray:
        if not shuffle:
            return np.arange(len(self))
        return np.random.default_rng(seed).permutation(len(self))

    def pair(self, indices: Sequence[int] | np.ndarray) -> tuple[ImageBatch, SegmentationMask]:
        idx = torch.as_tensor(np.asarray(indices), dtype=torch.long)
        return (
            ImageBatch(self.images[idx]),
            SegmentationMask(self.labels[idx], self.num_classes, self.ignore_index),
        )

    def batches(
        self, batch_size: int, shuffle: bool = False, seed: int = 0
    ) -> Iterator[tuple[ImageBatch, SegmentationMask]]:
        order = self.order(shuffle, seed)
        for start in range(0, len(order), batch_size):
            yield self.pair(order[start : start + batch_size])

    def all(self) -> tuple[ImageBatch, SegmentationMask]:
        return self.pair(np.arange(len(self)))

    def subset(self, indices: Sequence[int] | np.ndarray) -> DatasetHandle:
        idx = torch.as_tensor(np.asarray(indices), dtype=torch.long)
        return DatasetHandle(
            self.images[idx],
            self.labels[idx],
            self.num_classes,
            self.ignore_index,
            self.source,
            tuple(self.stems[int(i)] for i in idx),
        )

    def with_images(self, images: torch.Tensor) -> DatasetHandle:
        """Same masks and stems, different pixels (e.g. adversarial copies)."""
        return DatasetHandle(
            images, self.labels, self.num_classes, self.ignore_index, self.source, self.stems
        )


# -- 8-bit conversions -------------------------------------------------------


def to_bytes(images: ImageBatch) -> np.ndarray:
    """Quantise to uint8 with round-half-up of ``x * 255``; layout (B, C, H, W)."""
    return np.floor(images.data.numpy().astype(np.float64) * 255.0 + 0.5).astype(np.uint8)


def from_bytes(encoded: np.ndarray) -> ImageBatch:
    encoded = np.asarray(encoded)
    if encoded.dtype != np.uint8:
        raise DecodeError(f"expected uint8 data, got {encoded.dtype}")
    return ImageBatch(torch.from_numpy(encoded.astype(np.float32) / 255.0))


def encode_png(image: np.ndarray) -> bytes:
    """Encode one uint8 (C, H, W) image as PNG bytes."""
    chw = np.asarray(image)
    hwc = chw[0] if chw.shape[0] == 1 else np.transpose(chw, (1, 2, 0))
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(hwc)).save(buf, format="PNG")
    return buf.getvalue()


def decode_png(blob: bytes) -> np.ndarray:
    """Decode PNG/JPEG bytes into a uint8 (C, H, W) array."""
    try:
        img = Image.open(io.BytesIO(blob))
        img.load()
    except (UnidentifiedImageError, OSError) as exc:
        raise DecodeError(f"not a decodable image: {exc}") from exc
    return _pil_to_chw(img)


def _pil_to_chw(img: Image.Image) -> np.ndarray:
    if img.mode == "L":
        return np.asarray(img, dtype=np.uint8)[None]
    return np.transpose(np.asarray(img.convert("RGB"), dtype=np.uint8), (2, 0, 1))


def write_images(images: ImageBatch, directory: str | Path, stems: Sequence[str]) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for stem, img in zip(stems, to_bytes(images)):
        path = directory / f"{stem}.png"
        path.write_bytes(encode_png(img))
        paths.append(path)
    return paths


def read_images(paths: Sequence[str | Path]) -> ImageBatch:
    arrays = [decode_png(Path(p).read_bytes()) for p in paths]
    return from_bytes(np.stack(arrays))


# -- VOC-like directories ----------------------------------------------------


def _find_image(images_dir: Path, stem: str) -> Path:
    for suffix in IMAGE_SUFFIXES:
        path = images_dir / f"{stem}{suffix}"
        if path.exists():
            return path
    raise DatasetError(f"missing image for stem {stem!r} in {images_dir}")


def _read_mask(path: Path, size: tuple[int, int]) -> np.ndarray:
    try:
        img = Image.open(path)
        img.load()
    except (UnidentifiedImageError, OSError) as exc:
        raise DatasetError(f"unreadable mask {path}: {exc}") from exc
    if img.mode not in ("L", "P"):
        raise LabelRangeError(f"mask {path} has mode {img.mode}; expected 8-bit class indices")
    if img.size != (size[1], size[0]):
        img = img.resize((size[1], size[0]), Image.NEAREST)
    return np.asarray(img, dtype=np.uint8)


def load_voc_dir(
    root: str | Path,
    split: str,
    resolution: tuple[int, int],
    num_classes: int = 21,
    ignore_index: int = DEFAULT_IGNORE_INDEX,
) -> DatasetHandle:
    """Load a split; images resized bilinearly, masks by nearest neighbour."""
    root = Path(root)
    h, w = resolution
    check_resolution(h, w)
    split_file = root / "splits" / f"{split}.txt"
    if not split_file.exists():
        raise DatasetError(f"missing split list {split_file}")
    stems = [s.strip() for s in split_file.read_text().splitlines() if s.strip()]
    if not stems:
        raise DatasetError(f"split {split!r} lists no images")
    images, masks = [], []
    for stem in stems:
        img_path = _find_image(root / "images", stem)
        mask_path = root / "masks" / f"{stem}.png"
        if not mask_path.exists():
            raise DatasetError(f"missing mask for stem {stem!r}")
        try:
            img = Image.open(img_path)
            img.load()
        except (UnidentifiedImageError, OSError) as exc:
            raise DatasetError(f"unreadable image {img_path}: {exc}") from exc
        img = img.convert("RGB")
        if img.size != (w, h):
            img = img.resize((w, h), Image.BILINEAR)
        images.append(np.transpose(np.asarray(img, dtype=np.uint8), (2, 0, 1)))
        masks.append(_read_mask(mask_path, (h, w)))
    return DatasetHandle(
        torch.from_numpy(np.stack(images).astype(np.float32) / 255.0),
        torch.from_numpy(np.stack(masks).astype(np.int64)),
        num_classes,
        ignore_index,
        source="voc_dir",
        stems=tuple(stems),
    )


def export_voc_dir(dataset: DatasetHandle, root: str | Path, split: str) -> Path:
    """Write ``dataset`` under ``root`` in the layout read by :func:`load_voc_dir`."""
    root = Path(root)
    write_images(ImageBatch(dataset.images), root / "images", dataset.stems)
    masks_dir = root / "masks"
    masks_dir.mkdir(parents=True, exist_ok=True)
    for stem, mask in zip(dataset.stems, dataset.labels.numpy()):
        Image.fromarray(mask.astype(np.uint8), mode="L").save(masks_dir / f"{stem}.png")
    splits = root / "splits"
    splits.mkdir(parents=True, exist_ok=True)
    (splits / f"{split}.txt").write_text("\n".join(dataset.stems) + "\n")
    return root


# -- synthetic shapes --------------------------------------------------------


def _shape_region(kind: str, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    lo, hi = max(4, min(h, w) // 8), max(6, min(h, w) // 3)
    if kind == "rectangle":
        sh, sw = rng.integers(lo, hi + 1, size=2)
        top, left = rng.integers(0, h - sh + 1), rng.integers(0, w - sw + 1)
        return (yy >= top) & (yy < top + sh) & (xx >= left) & (xx < left + sw)
    if kind == "circle":
        r = rng.integers(lo // 2 + 1, hi // 2 + 2)
        cy, cx = rng.integers(r, h - r), rng.integers(r, w - r)
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    # upright isosceles triangle with a horizontal base
    th = rng.integers(lo, hi + 1)
    half = rng.integers(lo // 2, hi // 2 + 1)
    top = rng.integers(0, h - th + 1)
    cx = rng.integers(half, w - half)
    depth = (yy - top + 1).astype(np.float64) / th
    return (yy >= top) & (yy < top + th) & (np.abs(xx - cx) <= depth * half)


def _class_layout(num_classes: int) -> tuple[list[str | None], list[int], int]:
    """Geometry (None = any) and hue sector for every foreground class."""
    n_fg = num_classes - 1
    if n_fg < len(SHAPE_KINDS):
        return [None] * n_fg, list(range(n_fg)), n_fg
    kinds = [SHAPE_KINDS[i % len(SHAPE_KINDS)] for i in range(n_fg)]
    sectors = [i // len(SHAPE_KINDS) for i in range(n_fg)]
    return kinds, sectors, math.ceil(n_fg / len(SHAPE_KINDS))


def _background(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    cell = int(rng.choice([16, 32]))
    gh, gw = -(-h // cell), -(-w // cell)
    if rng.random() < 0.5:
        ids = rng.integers(0, len(BACKGROUND_PALETTE), size=(gh, gw))
    else:
        # stripes
        a, b = rng.choice(len(BACKGROUND_PALETTE), size=2, replace=False)
        stripe = np.where(np.arange(gw) % 2 == 0, a, b)
        ids = np.broadcast_to(stripe, (gh, gw))
        if rng.random() < 0.5:
            ids = np.broadcast_to(np.where(np.arange(gh) % 2 == 0, a, b)[:, None], (gh, gw))
    ids = np.repeat(np.repeat(ids, cell, axis=0), cell, axis=1)[:h, :w]
    return BACKGROUND_PALETTE[ids].transpose(2, 0, 1).copy()


def synth_shapes(
    count: int,
    resolution: tuple[int, int] = (64, 64),
    num_classes: int = 4,
    seed: int = 0,
    channels: int = 3,
) -> DatasetHandle:
    """Deterministic shapes-on-texture dataset with pixel-exact masks.

    Each image has 1-4 rectangles, circles or triangles over a grey tiled
    background. With at least three foreground classes the class fixes the
    geometry (cycling rectangle, circle, triangle) and, past three classes,
    also a hue sector; with fewer, the class fixes only the hue sector.
    Later shapes occlude earlier ones in both image and mask.
    """
    if num_classes < 2:
        raise SpecError(f"num_classes must be >= 2, got {num_classes}")
    if num_classes > 254:
        raise SpecError("num_classes must leave room for the ignore index")
    if channels not in (1, 3):
        raise SpecError("channels must be 1 or 3")
    h, w = resolution
    check_resolution(h, w)
    rng = np.random.default_rng(seed)
    kinds, sectors, n_sectors = _class_layout(num_classes)
    images = np.empty((count, 3, h, w), dtype=np.float32)
    labels = np.zeros((count, h, w), dtype=np.int64)
    for i in range(count):
        img = _background(h, w, rng)
        mask = labels[i]
        for _ in range(int(rng.integers(1, 5))):
            cls = int(rng.integers(1, num_classes))
            kind = kinds[cls - 1] or SHAPE_KINDS[int(rng.integers(len(SHAPE_KINDS)))]
            region = _shape_region(kind, h, w, rng)
            hue = (sectors[cls - 1] + rng.random()) / n_sectors
            rgb = colorsys.hsv_to_rgb(hue, rng.uniform(0.5, 0.85), rng.uniform(0.6, 0.9))
            img[:, region] = np.asarray(rgb, dtype=np.float32)[:, None]
            mask[region] = cls
        images[i] = img
    if channels == 1:
        images = images.mean(axis=1, keepdims=True)
    return DatasetHandle(torch.from_numpy(images), torch.from_numpy(labels), num_classes)


def split_dataset(dataset: DatasetHandle, val_fraction: float, seed: int = 0) -> tuple[DatasetHandle, DatasetHandle]:
    order = dataset.order(shuffle=True, seed=seed)
    n_val = max(1, int(round(len(order) * val_fraction)))
    return dataset.subset(np.sort(order[n_val:])), dataset.subset(np.sort(order[:n_val]))
