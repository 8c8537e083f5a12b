"""Training the DAE to map clean and corrupted images back to the clean image."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Literal

import numpy as np
import torch
import torch.nn.functional as F

from dapas.dae import DAE
from dapas.data import DatasetHandle
from dapas.noise import apply_noise, derive_seed, sample_noise
from dapas.types import ImageBatch, NoiseSpec, ShapeMismatchError, SpecError

log = logging.getLogger(__name__)

LossKind = Literal["mse", "bce"]
HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "val_psnr")

# stream ids mixed into the root seed
_CHOICE_STREAM = 0
_NOISE_STREAM = 0x9E3779B97F4A7C15
_VAL_STREAM = 0x5851F42D4C957F2D
_SHUFFLE_STREAM = 0x2545F4914F6CDD1D


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    noise_spec: NoiseSpec = field(default_factory=NoiseSpec.gaussian)
    clean_probability: float = 0.5
    learning_rate: float = 5e-4
    epochs: int = 20
    batch_size: int = 8
    seed: int = 0
    loss: LossKind = "mse"

    def __post_init__(self) -> None:
        if not 0.0 <= self.clean_probability <= 1.0:
            raise SpecError("clean_probability must lie in [0, 1]")
        if self.loss not in ("mse", "bce"):
            raise SpecError(f"unknown loss {self.loss!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise SpecError("epochs and batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise SpecError("learning_rate must be > 0")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_psnr: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, record: EpochRecord) -> None:
        if self.records and record.epoch <= self.records[-1].epoch:
            raise ValueError("epochs must increase monotonically")
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(HISTORY_COLUMNS)
            for r in self.records:
                writer.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.val_psnr)])
        return path

    @classmethod
    def from_csv(cls, path: str | Path) -> TrainHistory:
        with Path(path).open() as fh:
            rows = list(csv.DictReader(fh))
        history = cls()
        for row in rows:
            history.append(
                EpochRecord(int(row["epoch"]), float(row["train_loss"]), float(row["val_loss"]), float(row["val_psnr"]))
            )
        return history


def _loss_tensor(output: torch.Tensor, target: torch.Tensor, kind: LossKind) -> torch.Tensor:
    if output.shape != target.shape:
        raise ShapeMismatchError(f"output {tuple(output.shape)} vs target {tuple(target.shape)}")
    if kind == "mse":
        return F.mse_loss(output, target)
    if kind == "bce":
        return F.binary_cross_entropy(output, target)
    raise SpecError(f"unknown loss {kind!r}")


def reconstruction_loss(output: ImageBatch, target: ImageBatch, kind: LossKind = "mse") -> float:
    return float(_loss_tensor(output.data.double(), target.data.double(), kind))


def psnr(output: ImageBatch | torch.Tensor, target: ImageBatch | torch.Tensor) -> float:
    """Mean per-image PSNR in dB for peak value 1 (per-image MSE floored at 1e-10)."""
    a = output.data if isinstance(output, ImageBatch) else output
    b = target.data if isinstance(target, ImageBatch) else target
    mse = ((a.double() - b.double()) ** 2).flatten(1).mean(dim=1).clamp_min(1e-10)
    return float((10.0 * torch.log10(1.0 / mse)).mean())


def corrupt_batch(
    images: ImageBatch, spec: NoiseSpec, clean_probability: float, seed: int
) -> tuple[ImageBatch, ImageBatch]:
    """Per-sample choice between the clean image and a noisy copy; the target is always clean."""
    if not 0.0 <= clean_probability <= 1.0:
        raise SpecError("clean_probability must lie in [0, 1]")
    rng = np.random.default_rng(derive_seed(seed, _CHOICE_STREAM))
    keep_clean = torch.from_numpy(rng.random(images.batch_size) < clean_probability)
    if bool(keep_clean.all()):
        return images, images
    noisy = apply_noise(images, sample_noise(spec, images.shape, derive_seed(seed, _NOISE_STREAM)))
    mixed = torch.where(keep_clean[:, None, None, None], images.data, noisy.data)
    return ImageBatch(mixed), images


def noisy_copy(dataset: DatasetHandle, spec: NoiseSpec, seed: int) -> ImageBatch:
    """Fixed noisy version of a whole dataset, used for validation."""
    images, _ = dataset.all()
    return apply_noise(images, sample_noise(spec, images.shape, seed))


def _predict(model: DAE, images: torch.Tensor, batch_size: int) -> torch.Tensor:
    outs = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            outs.append(model(images[start : start + batch_size]))
    return torch.cat(outs)


def evaluate_denoising(
    model: DAE, dataset: DatasetHandle, spec: NoiseSpec, seed: int, batch_size: int = 16, loss: LossKind = "mse"
) -> dict[str, float]:
    """Reconstruction loss and PSNR on a fixed noisy copy of ``dataset``."""
    clean, _ = dataset.all()
    noisy = noisy_copy(dataset, spec, seed)
    was_training = model.training
    model.eval()
    try:
        out = _predict(model, noisy.data, batch_size)
    finally:
        model.train(was_training)
    return {
        "loss": float(_loss_tensor(out.double(), clean.data.double(), loss)),
        "mse": float(F.mse_loss(out.double(), clean.data.double())),
        "psnr_denoised": psnr(out, clean),
        "psnr_noisy": psnr(noisy, clean),
    }


def train_dae(
    model: DAE,
    train_set: DatasetHandle,
    val_set: DatasetHandle,
    config: TrainConfig,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> tuple[DAE, TrainHistory]:
    """Minimise the reconstruction loss of ``model`` with Adam; trains in place.

    Single-threaded CPU runs repeat exactly for equal seeds; other backends
    may differ in the last bits of the loss sequence.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise SpecError("train and validation sets must be non-empty")
    if train_set.resolution != tuple(model.config.resolution):
        log.warning("training at %s but model configured for %s", train_set.resolution, model.config.resolution)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    history = TrainHistory()
    val_seed = derive_seed(config.seed, _VAL_STREAM)
    step = 0
    for epoch in range(1, config.epochs + 1):
        model.train()
        total, seen = 0.0, 0
        order_seed = derive_seed(config.seed ^ _SHUFFLE_STREAM, epoch)
        for images, _ in train_set.batches(config.batch_size, shuffle=True, seed=order_seed):
            inputs, target = corrupt_batch(
                images, config.noise_spec, config.clean_probability, derive_seed(config.seed, step)
            )
            step += 1
            optimizer.zero_grad(set_to_none=True)
            loss = _loss_tensor(model(inputs.data), target.data, config.loss)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss {loss.item()} at epoch {epoch}, step {step}")
            loss.backward()
            optimizer.step()
            total += loss.item() * images.batch_size
            seen += images.batch_size
        val = evaluate_denoising(model, val_set, config.noise_spec, val_seed, loss=config.loss)
        if not math.isfinite(val["loss"]):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
        record = EpochRecord(epoch, total / seen, val["loss"], val["psnr_denoised"])
        history.append(record)
        log.info("epoch %d train %.6f val %.6f psnr %.2f dB", epoch, record.train_loss, record.val_loss, record.val_psnr)
        if on_epoch is not None:
            on_epoch(record)
    model.eval()
    return model, history
