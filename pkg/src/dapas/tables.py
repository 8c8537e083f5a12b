"""Robustness summaries laid out like the four result tables, plus ratio-vs-epsilon plots.

A :class:`Summary` holds mIoU values in percent:

* ``miou_co`` - clean images, undefended segmenter
* ``clean_purified[noise]`` - clean images through the DAE trained on ``noise``
* ``attacked[family][eps]`` - adversarial images, undefended
* ``attacked_purified[family][noise][eps]`` - adversarial images through the DAE
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from dapas.metrics import iou_ratios, reports_to_csv

FAMILY_LABELS = {"fgsm": "FGSM", "ifgsm": "I-FGSM"}


def _eps_key(eps: float) -> str:
    return repr(float(eps))


@dataclass
class Summary:
    miou_co: float
    clean_purified: dict[str, float] = field(default_factory=dict)
    attacked: dict[str, dict[float, float]] = field(default_factory=dict)
    attacked_purified: dict[str, dict[str, dict[float, float]]] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def noises(self) -> list[str]:
        names = list(self.clean_purified)
        for per_noise in self.attacked_purified.values():
            names += [n for n in per_noise if n not in names]
        return names

    @property
    def families(self) -> list[str]:
        fams = list(self.attacked)
        fams += [f for f in self.attacked_purified if f not in fams]
        return fams

    def epsilons(self, family: str) -> list[float]:
        eps = set(self.attacked.get(family, {}))
        for per_eps in self.attacked_purified.get(family, {}).values():
            eps |= set(per_eps)
        return sorted(eps)

    def ratio_red(self, noise: str) -> float:
        return iou_ratios(self.miou_co, miou_cp=self.clean_purified[noise])["ratio_red"].value

    def ratio_att(self, family: str, eps: float) -> float:
        return iou_ratios(self.miou_co, miou_ao=self.attacked[family][eps])["ratio_att"].value

    def ratio_rob(self, family: str, noise: str, eps: float) -> float:
        return iou_ratios(self.miou_co, miou_ap=self.attacked_purified[family][noise][eps])["ratio_rob"].value

    def to_dict(self) -> dict:
        cells = []
        for noise, v in self.clean_purified.items():
            r = iou_ratios(self.miou_co, miou_cp=v)["ratio_red"]
            cells.append({"condition": "clean_purified", "noise": noise, "family": None, "epsilon": None,
                          "miou": v, "ratios": {"ratio_red": r.to_dict()}})
        for fam, per_eps in self.attacked.items():
            for eps, v in sorted(per_eps.items()):
                r = iou_ratios(self.miou_co, miou_ao=v)["ratio_att"]
                cells.append({"condition": "attacked", "noise": None, "family": fam, "epsilon": eps,
                              "miou": v, "ratios": {"ratio_att": r.to_dict()}})
        for fam, per_noise in self.attacked_purified.items():
            for noise, per_eps in per_noise.items():
                for eps, v in sorted(per_eps.items()):
                    r = iou_ratios(self.miou_co, miou_ap=v)["ratio_rob"]
                    cells.append({"condition": "attacked_purified", "noise": noise, "family": fam,
                                  "epsilon": eps, "miou": v, "ratios": {"ratio_rob": r.to_dict()}})
        return {"miou_co": self.miou_co, "units": "percent", "cells": cells, "meta": self.meta}

    @classmethod
    def from_dict(cls, raw: dict) -> Summary:
        out = cls(float(raw["miou_co"]), meta=raw.get("meta", {}))
        for cell in raw["cells"]:
            cond, v = cell["condition"], float(cell["miou"])
            if cond == "clean_purified":
                out.clean_purified[cell["noise"]] = v
            elif cond == "attacked":
                out.attacked.setdefault(cell["family"], {})[float(cell["epsilon"])] = v
            elif cond == "attacked_purified":
                out.attacked_purified.setdefault(cell["family"], {}).setdefault(cell["noise"], {})[
                    float(cell["epsilon"])
                ] = v
            else:
                raise ValueError(f"unknown cell condition {cond!r}")
        return out

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> Summary:
        return cls.from_dict(json.loads(Path(path).read_text()))


def _pct(x: float) -> str:
    return f"{100.0 * x:.1f}"


def reduction_table(s: Summary) -> tuple[list[str], list[dict[str, str]]]:
    cols = ["noise", "miou_clean", "miou_purified", "ratio_red"]
    rows = [
        {"noise": n, "miou_clean": f"{s.miou_co:.1f}", "miou_purified": f"{v:.1f}", "ratio_red": _pct(s.ratio_red(n))}
        for n, v in s.clean_purified.items()
    ]
    return cols, rows


def attack_table(s: Summary) -> tuple[list[str], list[dict[str, str]]]:
    fams = [f for f in s.families if f in s.attacked]
    cols = ["epsilon"] + [c for f in fams for c in (f"{f}_miou", f"{f}_ratio_att")]
    eps_all = sorted({e for f in fams for e in s.attacked[f]})
    rows = []
    for eps in eps_all:
        row = {"epsilon": f"{eps:g}"}
        for f in fams:
            if eps in s.attacked[f]:
                row[f"{f}_miou"] = f"{s.attacked[f][eps]:.1f}"
                row[f"{f}_ratio_att"] = _pct(s.ratio_att(f, eps))
        rows.append(row)
    return cols, rows


def robust_table(s: Summary, family: str) -> tuple[list[str], list[dict[str, str]]]:
    per_noise = s.attacked_purified.get(family, {})
    noises = list(per_noise)
    cols = ["epsilon"] + [c for n in noises for c in (f"{n}_miou", f"{n}_ratio_rob")]
    rows = []
    for eps in sorted({e for n in noises for e in per_noise[n]}):
        row = {"epsilon": f"{eps:g}"}
        for n in noises:
            if eps in per_noise[n]:
                row[f"{n}_miou"] = f"{per_noise[n][eps]:.1f}"
                row[f"{n}_ratio_rob"] = _pct(s.ratio_rob(family, n, eps))
        rows.append(row)
    return cols, rows


def write_tables(s: Summary, directory: str | Path) -> list[Path]:
    """One CSV per table: reduction, attack, and robust-per-family."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    tables = [("table1_reduction", reduction_table(s)), ("table2_attack", attack_table(s))]
    for i, fam in enumerate(s.families):
        tables.append((f"table{3 + i}_robust_{fam}", robust_table(s, fam)))
    for name, (cols, rows) in tables:
        path = directory / f"{name}.csv"
        path.write_text(reports_to_csv(rows, cols))
        written.append(path)
    return written


def ratio_curves(s: Summary, family: str) -> dict[str, list[tuple[float, float]]]:
    """Points (epsilon, ratio in %) for the undefended attack and each DAE."""
    curves: dict[str, list[tuple[float, float]]] = {}
    if family in s.attacked:
        curves["undefended"] = [
            (eps, round(100.0 * s.ratio_att(family, eps), 1)) for eps in sorted(s.attacked[family])
        ]
    for noise, per_eps in s.attacked_purified.get(family, {}).items():
        curves[noise] = [(eps, round(100.0 * s.ratio_rob(family, noise, eps), 1)) for eps in sorted(per_eps)]
    return curves


def plot_report(summaries: list[Summary], directory: str | Path, labels: list[str] | None = None) -> list[Path]:
    """Write one ratio-vs-epsilon plot per attack family plus ``summary.txt``."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not summaries:
        raise ValueError("report needs at least one metrics file")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    labels = labels or [f"run{i}" for i in range(len(summaries))]
    families = []
    for s in summaries:
        families += [f for f in s.families if f not in families]
    written, lines = [], []
    for fam in families:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ticks: set[float] = set()
        for label, s in zip(labels, summaries):
            prefix = f"{label}: " if len(summaries) > 1 else ""
            for name, pts in ratio_curves(s, fam).items():
                xs, ys = zip(*pts)
                ticks |= set(xs)
                style = "k--" if name == "undefended" else "-o"
                ax.plot(xs, ys, style, label=f"{prefix}{name}")
                lines.append(f"{prefix}{FAMILY_LABELS.get(fam, fam)} {name}: " + ", ".join(f"({x:g}, {y:.1f})" for x, y in pts))
        ax.set_xscale("log")
        ax.set_xticks(sorted(ticks))
        ax.set_xticklabels([f"{t:g}" for t in sorted(ticks)], rotation=30)
        ax.minorticks_off()
        ax.set_xlabel("epsilon")
        ax.set_ylabel("IoU ratio (%)")
        ax.set_title(f"IoU ratio under {FAMILY_LABELS.get(fam, fam)}")
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = directory / f"ratio_{fam}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    for label, s in zip(labels, summaries):
        prefix = f"{label}: " if len(summaries) > 1 else ""
        for noise in s.clean_purified:
            lines.append(f"{prefix}ratio_red {noise}: {100 * s.ratio_red(noise):.1f}")
    text = directory / "summary.txt"
    text.write_text("\n".join(lines) + "\n")
    written.append(text)
    return written
