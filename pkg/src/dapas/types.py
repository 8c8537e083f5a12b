"""Shared value types: image batches, label masks, noise/attack specs, reports.

Intensities are on the [0, 1] scale everywhere inside the toolkit; the 0-255
scale only appears when images are encoded to or decoded from files.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Literal

import numpy as np
import torch

DIVISOR = 32
DEFAULT_IGNORE_INDEX = 255
STUDIED_EPSILON_MAX = 0.032

NoiseKind = Literal["gaussian", "uniform", "bimodal"]
AttackFamily = Literal["fgsm", "ifgsm"]


class ValidationError(ValueError):
    """Base class for value-type invariant violations."""


class RangeError(ValidationError):
    pass


class ResolutionError(ValidationError):
    pass


class LabelRangeError(ValidationError):
    pass


class ShapeMismatchError(ValidationError):
    pass


class SpecError(ValidationError):
    pass


def check_resolution(height: int, width: int) -> None:
    if height % DIVISOR or width % DIVISOR or height <= 0 or width <= 0:
        raise ResolutionError(
            f"resolution {height}x{width} is not divisible by {DIVISOR}"
        )


@dataclass(frozen=True)
class ImageBatch:
    """A channels-first float32 batch with every element in [0, 1].

    Construction validates the invariants; pass ``check=False`` only for
    intermediate tensors that are about to be re-validated.
    """

    data: torch.Tensor
    check: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self) -> None:
        data = self.data
        if not isinstance(data, torch.Tensor):
            data = torch.as_tensor(np.asarray(data))
        if data.dtype != torch.float32:
            data = data.to(torch.float32)
        object.__setattr__(self, "data", data.detach())
        if self.check:
            _check_batch(self.data)

    @property
    def resolution(self) -> tuple[int, int]:
        return int(self.data.shape[2]), int(self.data.shape[3])

    @property
    def channels(self) -> int:
        return int(self.data.shape[1])

    @property
    def batch_size(self) -> int:
        return int(self.data.shape[0])

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return tuple(self.data.shape)  # type: ignore[return-value]

    def numpy(self) -> np.ndarray:
        return self.data.numpy().copy()

    def __len__(self) -> int:
        return self.batch_size


def _check_batch(data: torch.Tensor) -> None:
    if data.ndim != 4:
        raise ShapeMismatchError(f"expected rank-4 (B, C, H, W), got {tuple(data.shape)}")
    if data.shape[0] < 1:
        raise ShapeMismatchError("batch must hold at least one image")
    if data.shape[1] not in (1, 3):
        raise ShapeMismatchError(f"expected 1 or 3 channels, got {data.shape[1]}")
    check_resolution(int(data.shape[2]), int(data.shape[3]))
    if torch.isnan(data).any():
        raise RangeError("image batch contains NaN")
    lo, hi = float(data.min()), float(data.max())
    if lo < 0.0 or hi > 1.0:
        raise RangeError(f"intensities must lie in [0, 1], found [{lo}, {hi}]")


def validate_batch(images: ImageBatch) -> ImageBatch:
    """Return ``images`` unchanged if every invariant holds, else raise."""
    _check_batch(images.data)
    return images


@dataclass(frozen=True)
class SegmentationMask:
    """Dense integer labels of shape (B, H, W)."""

    labels: torch.Tensor
    num_classes: int
    ignore_index: int = DEFAULT_IGNORE_INDEX

    def __post_init__(self) -> None:
        labels = self.labels
        if not isinstance(labels, torch.Tensor):
            labels = torch.as_tensor(np.asarray(labels))
        if labels.dtype.is_floating_point or labels.dtype == torch.bool:
            raise LabelRangeError("mask labels must be integers")
        object.__setattr__(self, "labels", labels.to(torch.int64).detach())
        if self.num_classes < 2:
            raise SpecError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.labels.ndim != 3:
            raise ShapeMismatchError(
                f"expected rank-3 (B, H, W) labels, got {tuple(self.labels.shape)}"
            )
        valid = (self.labels >= 0) & (self.labels < self.num_classes)
        valid |= self.labels == self.ignore_index
        if not bool(valid.all()):
            bad = self.labels[~valid].unique()[:5].tolist()
            raise LabelRangeError(
                f"labels {bad} outside [0, {self.num_classes}) and != ignore {self.ignore_index}"
            )

    @property
    def resolution(self) -> tuple[int, int]:
        return int(self.labels.shape[1]), int(self.labels.shape[2])

    def check_pairs_with(self, images: ImageBatch) -> None:
        if (self.labels.shape[0],) + self.resolution != (images.batch_size,) + images.resolution:
            raise ShapeMismatchError(
                f"mask shape {tuple(self.labels.shape)} does not match images {images.shape}"
            )

    def numpy(self) -> np.ndarray:
        return self.labels.numpy().copy()


_NOISE_FIELDS = {
    "gaussian": {"mean", "std"},
    "uniform": {"low", "high"},
    "bimodal": {"std", "mode_centers", "mode_weights"},
}


@dataclass(frozen=True)
class NoiseSpec:
    """A corruption distribution. Fields not belonging to ``kind`` stay None.

    Use the ``gaussian``/``uniform``/``bimodal`` constructors; their defaults
    are the parameters the DAE was described with.
    """

    kind: NoiseKind
    mean: float | None = None
    std: float | None = None
    low: float | None = None
    high: float | None = None
    mode_centers: tuple[float, float] | None = None
    mode_weights: tuple[float, float] | None = None

    def __post_init__(self) -> None:
        if self.kind not in _NOISE_FIELDS:
            raise SpecError(f"unknown noise kind {self.kind!r}")
        for name in ("mode_centers", "mode_weights"):
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, tuple(float(v) for v in value))
        wanted = _NOISE_FIELDS[self.kind]
        for name in ("mean", "std", "low", "high", "mode_centers", "mode_weights"):
            is_set = getattr(self, name) is not None
            if is_set != (name in wanted):
                state = "missing" if name in wanted else "not allowed"
                raise SpecError(f"{self.kind} noise: field {name!r} {state}")
        if self.std is not None and not self.std > 0:
            raise SpecError(f"std must be > 0, got {self.std}")
        if self.kind == "uniform" and not self.low < self.high:  # type: ignore[operator]
            raise SpecError(f"uniform noise needs low < high, got [{self.low}, {self.high}]")
        if self.kind == "bimodal":
            if len(self.mode_centers) != 2 or len(self.mode_weights) != 2:  # type: ignore[arg-type]
                raise SpecError("bimodal noise needs exactly two centers and two weights")
            w0, w1 = self.mode_weights  # type: ignore[misc]
            if w0 < 0 or w1 < 0 or not math.isclose(w0 + w1, 1.0, abs_tol=1e-9):
                raise SpecError(f"mode weights must be non-negative and sum to 1, got {self.mode_weights}")

    @classmethod
    def gaussian(cls, mean: float = 0.0, std: float = 0.004) -> NoiseSpec:
        return cls("gaussian", mean=mean, std=std)

    @classmethod
    def uniform(cls, low: float = -0.035, high: float = 0.035) -> NoiseSpec:
        return cls("uniform", low=low, high=high)

    @classmethod
    def bimodal(
        cls,
        centers: tuple[float, float] = (-0.024, 0.024),
        std: float = 0.004,
        weights: tuple[float, float] = (0.5, 0.5),
    ) -> NoiseSpec:
        return cls("bimodal", std=std, mode_centers=centers, mode_weights=weights)

    @classmethod
    def default(cls, kind: NoiseKind) -> NoiseSpec:
        return getattr(cls, kind)()

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"kind": self.kind}
        for name in sorted(_NOISE_FIELDS[self.kind]):
            value = getattr(self, name)
            out[name] = list(value) if isinstance(value, tuple) else value
        return out

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> NoiseSpec:
        raw = dict(raw)
        kind = raw.pop("kind", None)
        if kind not in _NOISE_FIELDS:
            raise SpecError(f"unknown noise kind {kind!r}")
        unknown = set(raw) - _NOISE_FIELDS[kind]
        if unknown:
            raise SpecError(f"{kind} noise: unknown keys {sorted(unknown)}")
        base = cls.default(kind).to_dict()
        base.update(raw)
        base.pop("kind")
        return cls(kind, **base)


@dataclass(frozen=True)
class AttackSpec:
    """Attack family, budget and step schedule, all on the [0, 1] scale."""

    family: AttackFamily
    epsilon: float
    alpha: float
    targeted: bool = False
    steps: int = 1

    def __post_init__(self) -> None:
        if self.family not in ("fgsm", "ifgsm"):
            raise SpecError(f"unknown attack family {self.family!r}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise SpecError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if not self.alpha > 0:
            raise SpecError(f"alpha must be > 0, got {self.alpha}")
        if self.steps < 1:
            raise SpecError(f"steps must be >= 1, got {self.steps}")
        if self.family == "fgsm" and self.steps != 1:
            raise SpecError("fgsm is single-step; steps must be 1")

    @property
    def exceeds_studied_regime(self) -> bool:
        return self.epsilon > STUDIED_EPSILON_MAX

    @classmethod
    def create(
        cls,
        family: AttackFamily,
        epsilon: float,
        alpha: float | None = None,
        targeted: bool = False,
        steps: int | None = None,
    ) -> AttackSpec:
        """Build a spec, deriving the I-FGSM step count from ``epsilon``."""
        from dapas.attacks import DEFAULT_ALPHA, step_count

        if family not in ("fgsm", "ifgsm"):
            raise SpecError(f"unknown attack family {family!r}")
        if family == "fgsm":
            # alpha is unused by FGSM; the single step has size epsilon
            return cls("fgsm", epsilon, epsilon if epsilon > 0 else DEFAULT_ALPHA, targeted, 1)
        if steps is None:
            steps = step_count(epsilon)
        return cls("ifgsm", epsilon, DEFAULT_ALPHA if alpha is None else alpha, targeted, steps)

    def to_dict(self) -> dict[str, Any]:
        return {
            "family": self.family,
            "epsilon": self.epsilon,
            "alpha": self.alpha,
            "targeted": self.targeted,
            "steps": self.steps,
            "exceeds_studied_regime": self.exceeds_studied_regime,
        }

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> AttackSpec:
        raw = {k: v for k, v in raw.items() if k != "exceeds_studied_regime"}
        return cls(**raw)


@dataclass(frozen=True)
class IoURatio:
    """A ratio together with the two mIoU values it was computed from."""

    name: str
    value: float
    numerator_name: str
    numerator: float
    denominator_name: str
    denominator: float

    @property
    def percent(self) -> float:
        return round(100.0 * self.value, 1)

    def to_dict(self) -> dict[str, Any]:
        return {
            "value": self.value,
            "percent": self.percent,
            "numerator": {"name": self.numerator_name, "miou": self.numerator},
            "denominator": {"name": self.denominator_name, "miou": self.denominator},
        }


@dataclass(frozen=True)
class MetricsReport:
    """Confusion matrix, per-class IoU (None for absent classes), mIoU, ratios."""

    confusion: np.ndarray
    per_class_iou: tuple[float | None, ...]
    miou: float
    ratios: dict[str, IoURatio] = field(default_factory=dict)

    def flags(self) -> list[str]:
        out = []
        red = self.ratios.get("ratio_red")
        if red is not None and red.value > 1.0:
            out.append("ratio_red > 1: defended clean mIoU exceeds undefended clean mIoU")
        return out

    def to_dict(self) -> dict[str, Any]:
        return {
            "confusion": self.confusion.astype(int).tolist(),
            "per_class_iou": list(self.per_class_iou),
            "miou": self.miou,
            "ratios": {k: v.to_dict() for k, v in self.ratios.items()},
            "flags": self.flags(),
        }

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> MetricsReport:
        ratios = {
            name: IoURatio(
                name,
                r["value"],
                r["numerator"]["name"],
                r["numerator"]["miou"],
                r["denominator"]["name"],
                r["denominator"]["miou"],
            )
            for name, r in raw.get("ratios", {}).items()
        }
        return cls(
            np.asarray(raw["confusion"], dtype=np.int64),
            tuple(raw["per_class_iou"]),
            float(raw["miou"]),
            ratios,
        )
