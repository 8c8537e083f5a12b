"""Session-scoped desk-scale artifacts shared by the slow tests and the acceptance suite.

Each artifact is built at most once per session: the reference segmenter,
one DAE per default noise distribution, the attack grid and the robustness
summary. The recipe is the default experiment config except for the DAE
batch size (see DESK_DAE_BATCH).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import pytest

from dapas.attacks import DEFAULT_ALPHA
from dapas.config import ExperimentConfig
from dapas.dae import DAE, build_dae
from dapas.data import DatasetHandle, synth_shapes
from dapas.experiment import evaluate_robustness, generate_adversarial
from dapas.pipeline import ReferenceSegmenter, train_reference_segmenter
from dapas.tables import Summary
from dapas.training import TrainHistory, evaluate_denoising, train_dae
from dapas.types import AttackSpec

NOISE_KINDS = ("gaussian", "uniform", "bimodal")
# smaller batches give more optimizer steps inside the 20-epoch budget
DESK_DAE_BATCH = 4
DESK = ExperimentConfig()


@dataclass
class DeskDAE:
    model: DAE
    history: TrainHistory
    untrained: dict[str, float]
    trained: dict[str, float]
    seconds: float


def _synthetic(split: str, count: int) -> DatasetHandle:
    d = DESK.dataset
    return synth_shapes(count, d.resolution, d.num_classes, DESK.split_seed(split), d.channels)


@pytest.fixture(scope="session")
def desk_timings() -> dict[str, float]:
    return {}


@pytest.fixture(scope="session")
def desk_dae_sets() -> tuple[DatasetHandle, DatasetHandle]:
    return _synthetic("train", DESK.dataset.train_count), _synthetic("val", DESK.dataset.val_count)


@pytest.fixture(scope="session")
def desk_daes(desk_dae_sets, desk_timings) -> dict[str, DeskDAE]:
    train, val = desk_dae_sets
    out = {}
    for cfg in DESK.train_configs():
        cfg = replace(cfg, batch_size=DESK_DAE_BATCH)
        kind = cfg.noise_spec.kind
        start = time.perf_counter()
        model = build_dae(DESK.dae_config(), DESK.seed)
        # the same fixed noisy copy is used before and after training
        probe_seed = DESK.seed + 101
        untrained = evaluate_denoising(model, val, cfg.noise_spec, probe_seed)
        model, history = train_dae(model, train, val, cfg)
        trained = evaluate_denoising(model, val, cfg.noise_spec, probe_seed)
        out[kind] = DeskDAE(model, history, untrained, trained, time.perf_counter() - start)
    desk_timings["daes"] = sum(d.seconds for d in out.values())
    return out


@pytest.fixture(scope="session")
def desk_segmenter(desk_timings) -> ReferenceSegmenter:
    t = DESK.segmenter.train
    start = time.perf_counter()
    seg = train_reference_segmenter(
        _synthetic("seg_train", t.train_count),
        _synthetic("seg_val", t.val_count),
        DESK.segmenter_train_config(),
        enforce_gate=False,
    )
    desk_timings["segmenter"] = time.perf_counter() - start
    return seg


@pytest.fixture(scope="session")
def desk_eval() -> DatasetHandle:
    return _synthetic("eval", DESK.dataset.eval_count)


@pytest.fixture(scope="session")
def desk_attacks(desk_segmenter, desk_eval, desk_timings):
    start = time.perf_counter()
    specs = [AttackSpec.create(f, eps, alpha=DEFAULT_ALPHA) for f in ("fgsm", "ifgsm") for eps in DESK.attack.epsilons]
    sets = generate_adversarial(desk_segmenter, desk_eval, specs, DESK.attack.batch_size)
    desk_timings["attacks"] = time.perf_counter() - start
    return sets


@pytest.fixture(scope="session")
def desk_summary(desk_segmenter, desk_daes, desk_eval, desk_attacks, desk_timings) -> Summary:
    start = time.perf_counter()
    result = evaluate_robustness(
        desk_segmenter,
        {k: d.model for k, d in desk_daes.items()},
        desk_eval,
        {k: v.dataset for k, v in desk_attacks.items()},
        DESK.evaluation.batch_size,
    )
    desk_timings["evaluate"] = time.perf_counter() - start
    return result.summary


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
