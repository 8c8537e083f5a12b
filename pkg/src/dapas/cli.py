"""``dapas`` command line: train-segmenter, train-dae, attack, evaluate, report.

Exit codes: 0 when every declared output was written and every internal
check held, 1 on a runtime or invariant failure, 2 on a configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np
import torch

import dapas
from dapas.attacks import BudgetViolation
from dapas.config import ConfigError, ExperimentConfig, dump_config, load_config
from dapas.dae import build_dae, load_dae, save_dae
from dapas.data import DatasetHandle, load_voc_dir, read_images, synth_shapes, write_images
from dapas.experiment import QUANTIZATION_BOUND, evaluate_robustness, generate_adversarial
from dapas.metrics import report_to_json
from dapas.pipeline import GateFailure, IdentityPurifier, ReferenceSegmenter, TorchSegmenter, load_external_segmenter, train_reference_segmenter
from dapas.tables import Summary, plot_report, write_tables
from dapas.training import TrainingDiverged, train_dae
from dapas.types import AttackSpec, ValidationError

log = logging.getLogger("dapas")


class CommandError(RuntimeError):
    pass


# -- helpers -------------------------------------------------------------------


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(directory: Path, command: str, cfg: ExperimentConfig, outputs: list[Path],
                   inputs: list[Path] = (), extra: dict | None = None) -> Path:
    """Everything needed to re-run ``command``: config, its hash, seeds and artifact hashes."""
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "toolkit_version": dapas.__version__,
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "config": json.loads(cfg.canonical_json()),
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": {str(p.relative_to(directory) if p.is_relative_to(directory) else p): sha256_file(p) for p in outputs},
        "environment": {
            "python": platform.python_version(),
            "torch": torch.__version__,
            "numpy": np.__version__,
            "torch_threads": torch.get_num_threads(),
            "nondeterminism": "bit-identical on CPU with equal thread counts; other backends may differ in the last bits",
        },
    }
    if extra:
        manifest.update(extra)
    path = directory / f"manifest_{command}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def out_dir(cfg: ExperimentConfig, override: str | None) -> Path:
    return Path(override or cfg.output.directory)


def dae_datasets(cfg: ExperimentConfig) -> tuple[DatasetHandle, DatasetHandle]:
    d = cfg.dataset
    if d.source == "voc_dir":
        return (load_voc_dir(d.root, "train", d.resolution, d.num_classes, d.ignore_index),
                load_voc_dir(d.root, "val", d.resolution, d.num_classes, d.ignore_index))
    return (synth_shapes(d.train_count, d.resolution, d.num_classes, cfg.split_seed("train"), d.channels),
            synth_shapes(d.val_count, d.resolution, d.num_classes, cfg.split_seed("val"), d.channels))


def segmenter_datasets(cfg: ExperimentConfig) -> tuple[DatasetHandle, DatasetHandle]:
    d, t = cfg.dataset, cfg.segmenter.train
    if d.source == "voc_dir":
        return dae_datasets(cfg)
    return (synth_shapes(t.train_count, d.resolution, d.num_classes, cfg.split_seed("seg_train"), d.channels),
            synth_shapes(t.val_count, d.resolution, d.num_classes, cfg.split_seed("seg_val"), d.channels))


def eval_dataset(cfg: ExperimentConfig) -> DatasetHandle:
    d = cfg.dataset
    if d.source == "voc_dir":
        return load_voc_dir(d.root, "val", d.resolution, d.num_classes, d.ignore_index)
    return synth_shapes(d.eval_count, d.resolution, d.num_classes, cfg.split_seed("eval"), d.channels)


def load_segmenter(cfg: ExperimentConfig, checkpoint: str | None) -> TorchSegmenter:
    s = cfg.segmenter
    if s.kind == "external":
        return load_external_segmenter(s.factory, cfg.dataset.num_classes, s.mean, s.std,
                                       cfg.dataset.resolution, cfg.dataset.ignore_index, checkpoint)
    if checkpoint is None:
        raise CommandError("--segmenter checkpoint is required for the reference segmenter")
    return ReferenceSegmenter.load(checkpoint)


def attack_specs(cfg: ExperimentConfig) -> list[AttackSpec]:
    a = cfg.attack
    return [AttackSpec.create(f, eps, alpha=a.alpha, targeted=a.targeted) for f in a.families for eps in a.epsilons]


def cell_dir(spec: AttackSpec) -> str:
    return f"{spec.family}_eps{spec.epsilon:g}"


# -- commands ------------------------------------------------------------------


def cmd_train_segmenter(cfg: ExperimentConfig, out: Path) -> list[Path]:
    if cfg.segmenter.kind != "reference":
        raise CommandError("only the reference segmenter can be trained here")
    torch.manual_seed(cfg.seed)
    train, val = segmenter_datasets(cfg)
    seg = train_reference_segmenter(train, val, cfg.segmenter_train_config())
    path = seg.save(out / "segmenter.pt")
    metrics = out / "segmenter_val.json"
    metrics.write_text(json.dumps({"val_miou": seg.val_miou, "gate": cfg.segmenter.train.gate}, indent=2) + "\n")
    outputs = [path, metrics]
    outputs.append(write_manifest(out, "train-segmenter", cfg, outputs, extra={"val_miou": seg.val_miou}))
    print(f"segmenter val mIoU {seg.val_miou:.4f} -> {path}")
    return outputs


def cmd_train_dae(cfg: ExperimentConfig, out: Path) -> list[Path]:
    train, val = dae_datasets(cfg)
    outputs, seen = [], {}
    for tc in cfg.train_configs():
        kind = tc.noise_spec.kind
        seen[kind] = seen.get(kind, 0) + 1
        name = kind if seen[kind] == 1 else f"{kind}{seen[kind]}"
        model = build_dae(cfg.dae_config(), cfg.seed)
        model, history = train_dae(model, train, val, tc)
        ckpt = save_dae(model, out / f"dae_{name}.pt", meta={"name": name, "noise": tc.noise_spec.to_dict()})
        hist = history.to_csv(out / f"history_{name}.csv")
        outputs += [ckpt, hist]
        last = history.records[-1]
        print(f"{name}: {len(history)} epochs, val loss {last.val_loss:.6f}, val PSNR {last.val_psnr:.2f} dB -> {ckpt}")
    outputs.append(write_manifest(out, "train-dae", cfg, outputs))
    return outputs


def cmd_attack(cfg: ExperimentConfig, out: Path, segmenter_ckpt: str | None) -> list[Path]:
    seg = load_segmenter(cfg, segmenter_ckpt)
    dataset = eval_dataset(cfg)
    specs = attack_specs(cfg)
    adv_sets = generate_adversarial(seg, dataset, specs, cfg.attack.batch_size, cfg.attack.target_class)
    root = out / "attack"
    outputs, cells = [], []
    write_images(dataset.all()[0], root / "clean", dataset.stems)
    for spec in specs:
        adv = adv_sets[(spec.family, spec.epsilon)]
        paths = write_images(adv.dataset.all()[0], root / cell_dir(spec), dataset.stems)
        reloaded = read_images(paths).data
        linf_q = float((reloaded - dataset.images).abs().max())
        if linf_q > spec.epsilon + QUANTIZATION_BOUND + 1e-6:
            raise BudgetViolation(f"{cell_dir(spec)}: quantised linf {linf_q} exceeds budget")
        outputs += paths
        cells.append({**spec.to_dict(), "directory": cell_dir(spec), "count": len(paths),
                      "linf_delta": adv.linf_delta, "linf_delta_quantized": linf_q,
                      "budget_tolerance": spec.epsilon + QUANTIZATION_BOUND})
    cell_manifest = root / "cells.json"
    cell_manifest.write_text(json.dumps({"stems": list(dataset.stems), "cells": cells}, indent=2) + "\n")
    outputs.append(cell_manifest)
    inputs = [Path(segmenter_ckpt)] if segmenter_ckpt else []
    outputs.append(write_manifest(root, "attack", cfg, outputs, inputs, extra={"cells": cells}))
    for c in cells:
        print(f"{c['family']} eps={c['epsilon']:g} steps={c['steps']} linf={c['linf_delta']:.6f} ({c['count']} images)")
    return outputs


def load_adversarial_dir(root: Path, clean: DatasetHandle) -> dict[tuple[str, float], DatasetHandle]:
    meta = json.loads((root / "cells.json").read_text())
    out = {}
    for cell in meta["cells"]:
        paths = [root / cell["directory"] / f"{stem}.png" for stem in meta["stems"]]
        images = read_images(paths).data
        if tuple(images.shape) != tuple(clean.images.shape):
            raise CommandError(f"adversarial set {cell['directory']} does not match the clean evaluation set")
        linf = float((images - clean.images).abs().max())
        if linf > cell["epsilon"] + QUANTIZATION_BOUND + 1e-6:
            raise BudgetViolation(f"{cell['directory']}: reloaded linf {linf} exceeds budget")
        out[(cell["family"], float(cell["epsilon"]))] = clean.with_images(images)
    return out


def cmd_evaluate(cfg: ExperimentConfig, out: Path, dae_ckpts: list[str], segmenter_ckpt: str | None,
                 adversarial_dir: str | None) -> list[Path]:
    seg = load_segmenter(cfg, segmenter_ckpt)
    clean = eval_dataset(cfg)
    purifiers, inputs = {}, [Path(p) for p in dae_ckpts if p != "identity"]
    for ckpt in dae_ckpts:
        if ckpt == "identity":
            purifiers["identity"] = IdentityPurifier()
            continue
        model = load_dae(ckpt)
        purifiers[model.meta.get("name", Path(ckpt).stem)] = model
    if adversarial_dir:
        adversarial = load_adversarial_dir(Path(adversarial_dir), clean)
    else:
        sets = generate_adversarial(seg, clean, attack_specs(cfg), cfg.attack.batch_size, cfg.attack.target_class)
        adversarial = {k: v.dataset for k, v in sets.items()}
    result = evaluate_robustness(seg, purifiers, clean, adversarial, cfg.evaluation.batch_size)
    root = out / "evaluate"
    (root / "metrics").mkdir(parents=True, exist_ok=True)
    outputs = []
    if "json" in cfg.output.formats:
        for name, report in result.reports.items():
            path = root / "metrics" / f"{name}.json"
            report_to_json(report, path, cell=name)
            outputs.append(path)
    outputs.append(result.summary.save(root / "summary.json"))
    if "csv" in cfg.output.formats:
        outputs += write_tables(result.summary, root)
    if segmenter_ckpt:
        inputs.append(Path(segmenter_ckpt))
    outputs.append(write_manifest(root, "evaluate", cfg, outputs, inputs))
    s = result.summary
    print(f"mIoU clean/undefended {s.miou_co:.1f}%")
    for noise in s.clean_purified:
        print(f"  ratio_red[{noise}] {100 * s.ratio_red(noise):.1f}%")
    return outputs


def cmd_report(metrics: list[str], out: Path) -> list[Path]:
    if not metrics:
        raise CommandError("report needs at least one metrics file")
    summaries = [Summary.load(p) for p in metrics]
    labels = [Path(p).parent.name or Path(p).stem for p in metrics]
    paths = plot_report(summaries, out, labels if len(set(labels)) == len(labels) else None)
    for p in paths:
        print(p)
    return paths


# -- entry point -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dapas", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"dapas {dapas.__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p: argparse.ArgumentParser) -> argparse.ArgumentParser:
        p.add_argument("--config", help="YAML or JSON experiment config (defaults if omitted)")
        p.add_argument("--out", help="output directory (overrides output.directory)")
        return p

    with_config(sub.add_parser("train-segmenter", help="train the desk-scale reference segmenter"))
    with_config(sub.add_parser("train-dae", help="train one DAE per configured noise distribution"))
    p = with_config(sub.add_parser("attack", help="write adversarial PNGs for the attack grid"))
    p.add_argument("--segmenter", help="segmenter checkpoint")
    p = with_config(sub.add_parser("evaluate", help="mIoU and IoU-ratio tables"))
    p.add_argument("--dae", action="append", required=True, help="DAE checkpoint (repeatable; 'identity' for no-op)")
    p.add_argument("--segmenter", help="segmenter checkpoint")
    p.add_argument("--adversarial", help="attack output directory to reuse instead of regenerating")
    p = sub.add_parser("report", help="plot ratio-vs-epsilon curves from evaluate summaries")
    p.add_argument("metrics", nargs="*", help="summary.json files written by evaluate")
    p.add_argument("--out", required=True)
    sub.add_parser("show-config", help="print the effective default config").add_argument("--config")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        if args.command == "report":
            cmd_report(args.metrics, Path(args.out))
            return 0
        cfg = load_config(args.config)
        if args.command == "show-config":
            print(dump_config(cfg), end="")
            return 0
        out = out_dir(cfg, args.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "train-segmenter":
            cmd_train_segmenter(cfg, out)
        elif args.command == "train-dae":
            cmd_train_dae(cfg, out)
        elif args.command == "attack":
            cmd_attack(cfg, out, args.segmenter)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, out, args.dae, args.segmenter, args.adversarial)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (CommandError, BudgetViolation, GateFailure, TrainingDiverged, ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
