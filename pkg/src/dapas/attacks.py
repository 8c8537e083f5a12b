"""Gradient-sign attacks (FGSM and iterative FGSM), untargeted and targeted.

Both attacks work on the [0, 1] intensity scale against any object that
exposes :meth:`GradientModel.input_gradient`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol, runtime_checkable

import torch

from dapas.types import AttackSpec, ImageBatch, SegmentationMask, SpecError

# 0.25 on the 0-255 scale
DEFAULT_ALPHA = 0.25 / 255.0
BUDGET_TOLERANCE = 1e-6


@runtime_checkable
class GradientModel(Protocol):
    """What an attack needs from its victim.

    ``logits`` returns per-pixel class scores of shape (B, K, H, W).
    ``input_gradient`` returns d(loss)/d(images) for the mean pixel-wise
    cross-entropy against ``labels`` (ignore pixels excluded), with the model
    parameters left untouched.
    """

    def logits(self, images: ImageBatch) -> torch.Tensor: ...

    def input_gradient(self, images: ImageBatch, labels: SegmentationMask) -> torch.Tensor: ...


@dataclass(frozen=True)
class AttackResult:
    adversarial: ImageBatch
    original: ImageBatch
    spec: AttackSpec
    linf_delta: float


class BudgetViolation(RuntimeError):
    """An adversarial batch left the epsilon ball; indicates an internal bug."""


def step_count(epsilon: float) -> int:
    """Number of I-FGSM iterations for budget ``epsilon`` (given on the [0, 1] scale).

    The branch is chosen on the [0, 1] scale (threshold 0.008) while the
    formula itself is evaluated on the 0-255 scale, then rounded half-up and
    floored at one step.
    """
    if not 0.0 < epsilon <= 1.0:
        raise SpecError(f"epsilon must lie in (0, 1], got {epsilon}")
    e = 255.0 * epsilon
    raw = min(e + 2.0, 4.0 * e) if epsilon <= 0.008 else min(e + 4.0, 1.24 * e)
    return max(1, math.floor(raw + 0.5))


def _gradient_sign(model: GradientModel, x: torch.Tensor, labels: SegmentationMask) -> torch.Tensor:
    grad = model.input_gradient(ImageBatch(x), labels)
    if tuple(grad.shape) != tuple(x.shape):
        raise SpecError(f"model gradient has shape {tuple(grad.shape)}, expected {tuple(x.shape)}")
    return torch.sign(grad.detach().to(x.dtype))


def _finish(adv: torch.Tensor, images: ImageBatch, spec: AttackSpec) -> AttackResult:
    linf = float((adv - images.data).abs().max())
    if linf > spec.epsilon + BUDGET_TOLERANCE:
        raise BudgetViolation(f"linf delta {linf} exceeds epsilon {spec.epsilon}")
    return AttackResult(ImageBatch(adv), images, spec, linf)


def fgsm(
    model: GradientModel,
    images: ImageBatch,
    labels: SegmentationMask,
    epsilon: float,
    targeted: bool = False,
) -> AttackResult:
    """Single gradient-sign step of size ``epsilon``, clamped to [0, 1].

    Untargeted: ascend the loss of the true labels. Targeted: descend the loss
    of the target labels (``labels`` then holds the targets).
    """
    labels.check_pairs_with(images)
    spec = AttackSpec.create("fgsm", epsilon, targeted=targeted)
    x = images.data
    if epsilon == 0:
        return _finish(x.clone(), images, spec)
    direction = -1.0 if targeted else 1.0
    step = direction * epsilon * _gradient_sign(model, x, labels)
    return _finish((x + step).clamp(0.0, 1.0), images, spec)


def ifgsm(
    model: GradientModel,
    images: ImageBatch,
    labels: SegmentationMask,
    epsilon: float,
    alpha: float = DEFAULT_ALPHA,
    targeted: bool = False,
    steps: int | None = None,
) -> AttackResult:
    """Iterative FGSM with per-step projection onto the epsilon ball, then [0, 1]."""
    labels.check_pairs_with(images)
    if steps is None:
        steps = step_count(epsilon) if epsilon > 0 else 1
    spec = AttackSpec.create("ifgsm", epsilon, alpha=alpha, targeted=targeted, steps=steps)
    x = images.data
    if epsilon == 0:
        return _finish(x.clone(), images, spec)
    lower, upper = x - epsilon, x + epsilon
    direction = -1.0 if targeted else 1.0
    x_t = x.clone()
    for _ in range(steps):
        x_t = x_t + direction * alpha * _gradient_sign(model, x_t, labels)
        x_t = torch.minimum(torch.maximum(x_t, lower), upper).clamp(0.0, 1.0)
    return _finish(x_t, images, spec)


def run_attack(
    model: GradientModel, images: ImageBatch, labels: SegmentationMask, spec: AttackSpec
) -> AttackResult:
    if spec.family == "fgsm":
        return fgsm(model, images, labels, spec.epsilon, spec.targeted)
    return ifgsm(model, images, labels, spec.epsilon, spec.alpha, spec.targeted, spec.steps)
