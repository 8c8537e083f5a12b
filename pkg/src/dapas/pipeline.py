"""Segmenters, the purification front-end composition, and a desk-scale victim.

A :class:`TorchSegmenter` wraps any ``nn.Module`` that maps normalised images
to per-pixel logits. It accepts [0, 1] images and applies its own per-channel
normalisation, so both the DAE and the attacks only ever see the [0, 1] scale.
"""

from __future__ import annotations

import importlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from dapas.dae import DAE, denoise
from dapas.data import DatasetHandle
from dapas.metrics import ConfusionAccumulator, accumulate, miou
from dapas.types import (
    DEFAULT_IGNORE_INDEX,
    ImageBatch,
    SegmentationMask,
    ShapeMismatchError,
    SpecError,
)

log = logging.getLogger(__name__)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
SEGMENTER_FORMAT = "dapas-segmenter"
SEGMENTER_VERSION = 1


class GateFailure(RuntimeError):
    def __init__(self, achieved: float, gate: float):
        super().__init__(f"reference segmenter reached mIoU {achieved:.4f} < gate {gate:.2f}")
        self.achieved = achieved
        self.gate = gate


class Segmenter(Protocol):
    num_classes: int
    ignore_index: int

    def logits(self, images: ImageBatch) -> torch.Tensor: ...

    def predict(self, images: ImageBatch) -> SegmentationMask: ...

    def input_gradient(self, images: ImageBatch, labels: SegmentationMask) -> torch.Tensor: ...


def segmentation_loss(logits: torch.Tensor, labels: torch.Tensor, ignore_index: int) -> torch.Tensor:
    """Mean pixel-wise cross-entropy over non-ignored pixels (0 if none remain)."""
    total = F.cross_entropy(logits, labels, ignore_index=ignore_index, reduction="sum")
    count = (labels != ignore_index).sum().clamp_min(1)
    return total / count


class TorchSegmenter:
    """Adapter exposing a logits network as a Segmenter and GradientModel."""

    def __init__(
        self,
        net: nn.Module,
        num_classes: int,
        mean: Sequence[float] = IMAGENET_MEAN,
        std: Sequence[float] = IMAGENET_STD,
        resolution: tuple[int, int] | None = None,
        ignore_index: int = DEFAULT_IGNORE_INDEX,
    ):
        if num_classes < 2:
            raise SpecError(f"num_classes must be >= 2, got {num_classes}")
        self.net = net
        self.num_classes = num_classes
        self.mean = tuple(float(m) for m in mean)
        self.std = tuple(float(s) for s in std)
        self.resolution = tuple(resolution) if resolution is not None else None
        self.ignore_index = ignore_index
        self._mean = torch.tensor(self.mean).view(1, -1, 1, 1)
        self._std = torch.tensor(self.std).view(1, -1, 1, 1)

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        return (x - self._mean.to(x.dtype)) / self._std.to(x.dtype)

    def _forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != len(self.mean):
            raise ShapeMismatchError(f"segmenter expects {len(self.mean)} channels, got {x.shape[1]}")
        out = self.net(self.normalize(x))
        if out.shape[-2:] != x.shape[-2:] or out.shape[1] != self.num_classes:
            raise ShapeMismatchError(f"segmenter produced logits of shape {tuple(out.shape)}")
        return out

    def logits(self, images: ImageBatch) -> torch.Tensor:
        self.net.eval()
        with torch.no_grad():
            return self._forward(images.data)

    def predict(self, images: ImageBatch, batch_size: int = 32) -> SegmentationMask:
        parts = []
        for start in range(0, images.batch_size, batch_size):
            chunk = ImageBatch(images.data[start : start + batch_size], check=False)
            parts.append(self.logits(chunk).argmax(dim=1))
        return SegmentationMask(torch.cat(parts), self.num_classes, self.ignore_index)

    def input_gradient(self, images: ImageBatch, labels: SegmentationMask) -> torch.Tensor:
        self.net.eval()
        x = images.data.clone().requires_grad_(True)
        with torch.enable_grad():
            loss = segmentation_loss(self._forward(x), labels.labels, self.ignore_index)
            (grad,) = torch.autograd.grad(loss, x)
        return grad.detach()

    def metadata(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "mean": list(self.mean),
            "std": list(self.std),
            "resolution": list(self.resolution) if self.resolution else None,
            "ignore_index": self.ignore_index,
        }


# -- reference segmenter -----------------------------------------------------


def _cbr(cin: int, cout: int, stride: int = 1, dilation: int = 1, kernel: int = 3) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel, stride, padding=dilation * (kernel // 2), dilation=dilation, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class ReferenceNet(nn.Module):
    """Miniature DeepLab-V3+-style network.

    Three stride-2 stages (output stride 8), a small atrous pyramid with
    image pooling, a decoder fusing the stride-4 features, and bilinear
    upsampling of the logits back to the input size.
    """

    def __init__(self, in_channels: int = 3, num_classes: int = 4, widths: Sequence[int] = (32, 64, 128)):
        super().__init__()
        w0, w1, w2 = widths
        half = w2 // 2
        self.stem = nn.Sequential(_cbr(in_channels, w0, 2), _cbr(w0, w0))
        self.low = nn.Sequential(_cbr(w0, w1, 2), _cbr(w1, w1))
        self.high = nn.Sequential(_cbr(w1, w2, 2), _cbr(w2, w2))
        self.aspp = nn.ModuleList([_cbr(w2, half, kernel=1), _cbr(w2, half, dilation=2), _cbr(w2, half, dilation=4)])
        self.image_pool = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Conv2d(w2, half, 1), nn.ReLU())
        self.project = _cbr(4 * half, w2, kernel=1)
        self.low_project = _cbr(w1, 24, kernel=1)
        self.decoder = nn.Sequential(_cbr(w2 + 24, half), _cbr(half, half))
        self.head = nn.Conv2d(half, num_classes, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        size = x.shape[-2:]
        low = self.low(self.stem(x))
        h = self.high(low)
        pooled = self.image_pool(h).expand(-1, -1, *h.shape[-2:])
        h = self.project(torch.cat([branch(h) for branch in self.aspp] + [pooled], dim=1))
        h = F.interpolate(h, size=low.shape[-2:], mode="bilinear", align_corners=False)
        h = self.decoder(torch.cat([h, self.low_project(low)], dim=1))
        return F.interpolate(self.head(h), size=size, mode="bilinear", align_corners=False)


@dataclass(frozen=True)
class SegmenterTrainConfig:
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 2e-3
    seed: int = 0
    widths: tuple[int, ...] = (32, 64, 128)
    gate: float = 0.85
    mean: tuple[float, ...] = IMAGENET_MEAN
    std: tuple[float, ...] = IMAGENET_STD


class ReferenceSegmenter(TorchSegmenter):
    def __init__(self, num_classes: int, in_channels: int = 3, config: SegmenterTrainConfig | None = None,
                 resolution: tuple[int, int] | None = None, ignore_index: int = DEFAULT_IGNORE_INDEX):
        config = config or SegmenterTrainConfig()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            net = ReferenceNet(in_channels, num_classes, config.widths)
        mean, std = config.mean, config.std
        if in_channels == 1:
            mean, std = (float(np.mean(mean)),), (float(np.mean(std)),)
        super().__init__(net, num_classes, mean, std, resolution, ignore_index)
        self.config = config
        self.in_channels = in_channels
        self.val_miou: float | None = None

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        meta = {
            "num_classes": self.num_classes,
            "in_channels": self.in_channels,
            "resolution": list(self.resolution) if self.resolution else None,
            "ignore_index": self.ignore_index,
            "val_miou": self.val_miou,
            "config": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.config).items()},
        }
        torch.save(
            {
                "format": SEGMENTER_FORMAT,
                "version": SEGMENTER_VERSION,
                "meta": json.dumps(meta, sort_keys=True),
                "state_dict": {k: v.detach().cpu() for k, v in self.net.state_dict().items()},
            },
            path,
        )
        return path

    @classmethod
    def load(cls, path: str | Path) -> ReferenceSegmenter:
        blob = torch.load(Path(path), map_location="cpu", weights_only=True)
        if blob.get("format") != SEGMENTER_FORMAT:
            raise SpecError(f"{path} is not a segmenter checkpoint")
        meta = json.loads(blob["meta"])
        raw = meta["config"]
        config = SegmenterTrainConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()})
        seg = cls(meta["num_classes"], meta["in_channels"], config,
                  tuple(meta["resolution"]) if meta["resolution"] else None, meta["ignore_index"])
        seg.net.load_state_dict(blob["state_dict"])
        seg.net.eval()
        seg.val_miou = meta.get("val_miou")
        return seg


def evaluate_predictions(
    predict: Callable[[ImageBatch], SegmentationMask], dataset: DatasetHandle, batch_size: int = 32
) -> ConfusionAccumulator:
    acc = ConfusionAccumulator(dataset.num_classes, dataset.ignore_index)
    for images, masks in dataset.batches(batch_size):
        acc = accumulate(acc, predict(images), masks)
    return acc


def train_reference_segmenter(
    train_set: DatasetHandle,
    val_set: DatasetHandle,
    config: SegmenterTrainConfig | None = None,
    enforce_gate: bool = True,
) -> ReferenceSegmenter:
    """Train the desk-scale victim with pixel-wise cross-entropy; check the mIoU gate."""
    config = config or SegmenterTrainConfig()
    if train_set.num_classes < 2:
        raise SpecError("need at least two classes")
    seg = ReferenceSegmenter(
        train_set.num_classes, train_set.channels, config, train_set.resolution, train_set.ignore_index
    )
    optimizer = torch.optim.Adam(seg.net.parameters(), lr=config.learning_rate)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        for epoch in range(1, config.epochs + 1):
            seg.net.train()
            total, seen = 0.0, 0
            for images, masks in train_set.batches(config.batch_size, shuffle=True, seed=config.seed * 1000 + epoch):
                optimizer.zero_grad(set_to_none=True)
                loss = segmentation_loss(seg._forward(images.data), masks.labels, seg.ignore_index)
                loss.backward()
                optimizer.step()
                total += loss.item() * images.batch_size
                seen += images.batch_size
            log.info("segmenter epoch %d loss %.4f", epoch, total / seen)
    seg.net.eval()
    seg.val_miou = miou(evaluate_predictions(seg.predict, val_set))
    log.info("segmenter validation mIoU %.4f", seg.val_miou)
    if enforce_gate and seg.val_miou < config.gate:
        raise GateFailure(seg.val_miou, config.gate)
    return seg


def load_external_segmenter(
    factory: str,
    num_classes: int,
    mean: Sequence[float] = IMAGENET_MEAN,
    std: Sequence[float] = IMAGENET_STD,
    resolution: tuple[int, int] | None = None,
    ignore_index: int = DEFAULT_IGNORE_INDEX,
    checkpoint: str | Path | None = None,
) -> TorchSegmenter:
    """Wrap ``module:callable`` returning an ``nn.Module`` of normalised-input logits."""
    module_name, _, attr = factory.partition(":")
    if not attr:
        raise SpecError(f"factory must look like 'package.module:callable', got {factory!r}")
    net = getattr(importlib.import_module(module_name), attr)()
    if checkpoint is not None:
        net.load_state_dict(torch.load(Path(checkpoint), map_location="cpu", weights_only=True))
    net.eval()
    return TorchSegmenter(net, num_classes, mean, std, resolution, ignore_index)


# -- defended composition ----------------------------------------------------


class IdentityPurifier:
    """Stand-in front-end that returns its input unchanged."""

    def __call__(self, images: ImageBatch) -> ImageBatch:
        return images


@dataclass
class DefendedSegmenter:
    """``predict(x) == segmenter.predict(purify(x))`` with nothing in between.

    ``dae`` is a trained :class:`DAE` or any callable mapping ImageBatch to
    ImageBatch. Attacks are meant to use the bare ``segmenter``'s gradients.
    """

    dae: DAE | Callable[[ImageBatch], ImageBatch]
    segmenter: Segmenter
    batch_size: int = field(default=32)

    def purify(self, images: ImageBatch) -> ImageBatch:
        if isinstance(self.dae, DAE):
            parts = [
                denoise(self.dae, ImageBatch(images.data[s : s + self.batch_size], check=False)).data
                for s in range(0, images.batch_size, self.batch_size)
            ]
            return ImageBatch(torch.cat(parts))
        return self.dae(images)

    def predict(self, images: ImageBatch) -> SegmentationMask:
        purified = self.purify(images)
        if purified.shape != images.shape:
            raise ShapeMismatchError(f"purifier changed shape {images.shape} -> {purified.shape}")
        return self.segmenter.predict(purified)


def defended_predict(defended: DefendedSegmenter, images: ImageBatch) -> SegmentationMask:
    return defended.predict(images)
