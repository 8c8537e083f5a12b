"""Desk-scale experiment building blocks shared by the CLI and the acceptance suite."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import torch

from dapas.attacks import BUDGET_TOLERANCE, BudgetViolation, GradientModel, run_attack
from dapas.data import DatasetHandle
from dapas.metrics import build_report, iou_ratios, miou
from dapas.pipeline import DefendedSegmenter, Segmenter, evaluate_predictions
from dapas.tables import Summary
from dapas.types import AttackSpec, ImageBatch, MetricsReport, SegmentationMask

log = logging.getLogger(__name__)

# worst-case error of an 8-bit round trip
QUANTIZATION_BOUND = 1.0 / 510.0

Purifier = Callable[[ImageBatch], ImageBatch]


@dataclass(frozen=True)
class AdversarialSet:
    spec: AttackSpec
    dataset: DatasetHandle
    linf_delta: float


def attack_labels(masks: SegmentationMask, target_class: int | None) -> SegmentationMask:
    """True labels, or a constant target label (ignore pixels kept) for targeted runs."""
    if target_class is None:
        return masks
    labels = torch.where(masks.labels == masks.ignore_index, masks.labels, torch.full_like(masks.labels, target_class))
    return SegmentationMask(labels, masks.num_classes, masks.ignore_index)


def generate_adversarial(
    model: GradientModel,
    dataset: DatasetHandle,
    specs: Sequence[AttackSpec],
    batch_size: int = 16,
    target_class: int | None = None,
) -> dict[tuple[str, float], AdversarialSet]:
    """Attack every image of ``dataset`` once per spec, batch by batch."""
    out = {}
    for spec in specs:
        parts, worst = [], 0.0
        for images, masks in dataset.batches(batch_size):
            result = run_attack(model, images, attack_labels(masks, target_class), spec)
            parts.append(result.adversarial.data)
            worst = max(worst, result.linf_delta)
        if worst > spec.epsilon + BUDGET_TOLERANCE:
            raise BudgetViolation(f"{spec.family} eps={spec.epsilon}: linf {worst}")
        out[(spec.family, spec.epsilon)] = AdversarialSet(spec, dataset.with_images(torch.cat(parts)), worst)
        log.info("%s eps=%g steps=%d linf=%.6f", spec.family, spec.epsilon, spec.steps, worst)
    return out


@dataclass
class RobustnessResult:
    reports: dict[str, MetricsReport]
    summary: Summary


def evaluate_robustness(
    segmenter: Segmenter,
    purifiers: Mapping[str, Purifier],
    clean: DatasetHandle,
    adversarial: Mapping[tuple[str, float], DatasetHandle],
    batch_size: int = 32,
) -> RobustnessResult:
    """All four mIoU conditions for every purifier and attack cell (mIoUs in percent in the summary)."""
    reports: dict[str, MetricsReport] = {}
    defended = {name: DefendedSegmenter(p, segmenter) for name, p in purifiers.items()}

    acc_co = evaluate_predictions(segmenter.predict, clean, batch_size)
    co = miou(acc_co)
    reports["clean_original"] = build_report(acc_co)
    summary = Summary(100.0 * co)

    for name, d in defended.items():
        acc = evaluate_predictions(d.predict, clean, batch_size)
        reports[f"clean_purified_{name}"] = build_report(acc, iou_ratios(co, miou_cp=miou(acc)))
        summary.clean_purified[name] = 100.0 * miou(acc)

    for (family, eps), adv in adversarial.items():
        acc = evaluate_predictions(segmenter.predict, adv, batch_size)
        reports[f"attacked_original_{family}_eps{eps:g}"] = build_report(acc, iou_ratios(co, miou_ao=miou(acc)))
        summary.attacked.setdefault(family, {})[eps] = 100.0 * miou(acc)
        for name, d in defended.items():
            acc_p = evaluate_predictions(d.predict, adv, batch_size)
            reports[f"attacked_purified_{family}_eps{eps:g}_{name}"] = build_report(
                acc_p, iou_ratios(co, miou_ao=miou(acc), miou_ap=miou(acc_p))
            )
            summary.attacked_purified.setdefault(family, {}).setdefault(name, {})[eps] = 100.0 * miou(acc_p)
    return RobustnessResult(reports, summary)
