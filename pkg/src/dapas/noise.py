"""Corruption noise: seeded sampling from a NoiseSpec and clamped application."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from dapas.types import ImageBatch, NoiseSpec, ShapeMismatchError, SpecError

_SEED_MASK = (1 << 64) - 1


def derive_seed(root_seed: int, index: int) -> int:
    """Seed for the ``index``-th batch or worker under ``root_seed``."""
    return (int(root_seed) ^ int(index)) & _SEED_MASK


@dataclass(frozen=True)
class NoiseTensor:
    data: torch.Tensor
    spec: NoiseSpec
    seed: int

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)


def sample_noise(spec: NoiseSpec, shape: tuple[int, ...], seed: int) -> NoiseTensor:
    """Draw i.i.d. noise of ``shape`` from ``spec``; bit-identical for equal arguments."""
    if not isinstance(spec, NoiseSpec):
        raise SpecError(f"expected NoiseSpec, got {type(spec).__name__}")
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise ShapeMismatchError(f"invalid noise shape {shape}")
    rng = np.random.default_rng(int(seed) & _SEED_MASK)
    if spec.kind == "gaussian":
        draws = rng.normal(spec.mean, spec.std, size=shape)
    elif spec.kind == "uniform":
        draws = rng.uniform(spec.low, spec.high, size=shape)
    else:
        # per-element component choice, then a Gaussian around that center
        second = rng.random(size=shape) >= spec.mode_weights[0]
        centers = np.where(second, spec.mode_centers[1], spec.mode_centers[0])
        draws = centers + rng.normal(0.0, spec.std, size=shape)
    return NoiseTensor(torch.from_numpy(draws.astype(np.float32)), spec, int(seed))


def apply_noise(images: ImageBatch, noise: NoiseTensor) -> ImageBatch:
    """Return ``clamp(images + noise, 0, 1)``."""
    if tuple(images.shape) != noise.shape:
        raise ShapeMismatchError(f"noise shape {noise.shape} != image shape {images.shape}")
    return ImageBatch((images.data + noise.data).clamp_(0.0, 1.0))
