"""Aligned text tables, CSV files and figures for robustness and metric reports."""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Mapping, Sequence as SequenceT

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .combine import RobustnessReport  # noqa: E402
from .core import ClassSet  # noqa: E402
from .metrics import UNLABELED_AS_ERROR, UNLABELED_EXCLUDED  # noqa: E402

STAGE_ORDER = ("vlm", "tim", "abc", "aug", "atc")


def _fmt(v, digits=1, scale=100.0) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "-"
    if isinstance(v, bool):
        return "yes" if v else "no"
    if isinstance(v, str):
        return v
    if isinstance(v, int):
        return f"{v:,}"
    return f"{v * scale:.{digits}f}"


def format_table(headers: SequenceT[str], rows: SequenceT[SequenceT[str]]) -> str:
    """Left-align the first column, right-align the rest."""
    cols = list(zip(headers, *rows)) if rows else [(h,) for h in headers]
    widths = [max(len(str(c)) for c in col) for col in cols]

    def line(cells):
        parts = [str(c).ljust(widths[0]) if i == 0 else str(c).rjust(widths[i]) for i, c in enumerate(cells)]
        return "  ".join(parts).rstrip()

    sep = "  ".join("-" * w for w in widths)
    return "\n".join([line(headers), sep, *(line(r) for r in rows)]) + "\n"


def write_csv(path, headers: SequenceT[str], rows: SequenceT[SequenceT]):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(headers)
        w.writerows(rows)


def _millions(n: int) -> str:
    return f"{n / 1e6:.1f}M" if n >= 100_000 else f"{n:,}"


def robustness_rows(report: RobustnessReport) -> list[list]:
    return [
        [r.name, r.n_aug, r.n_tim, r.ratio if math.isfinite(r.ratio) else "inf", r.robust] for r in report.rows
    ]


def robustness_table(report: RobustnessReport) -> str:
    rows = [
        [r.name, _millions(r.n_aug), _millions(r.n_tim), "inf" if math.isinf(r.ratio) else f"{r.ratio:.2f}",
         "yes" if r.robust else "no"]
        for r in report.rows
    ]
    head = f"robust classes (N = {report.min_points:,}, tau = {report.tau:.3g})\n"
    return head + format_table(["class", "N_aug", "N_tim", "N_aug/N_tim", "robust"], rows)


def _stage_names(stages: Mapping) -> list[str]:
    known = [s for s in STAGE_ORDER if s in stages]
    rounds = sorted((s for s in stages if s.startswith("round-")), key=lambda s: int(s.split("-")[1]))
    rest = [s for s in stages if s not in known and s not in rounds]
    return known + rounds + rest


def stage_rows(stages: Mapping[str, dict]) -> list[list]:
    return [
        [name, stages[name]["coverage"], stages[name][UNLABELED_EXCLUDED]["mIoU"], stages[name][UNLABELED_AS_ERROR]["mIoU"]]
        for name in _stage_names(stages)
    ]


def stage_table(stages: Mapping[str, dict]) -> str:
    """Quantity and quality of labels per stage (percent)."""
    rows = [[n, _fmt(c), _fmt(q), _fmt(e)] for n, c, q, e in stage_rows(stages)]
    return format_table(["labels", "coverage", "mIoU (labeled)", "mIoU (unlabeled=error)"], rows)


def per_class_table(stages: Mapping[str, dict], names: SequenceT[str], mode: str = UNLABELED_AS_ERROR) -> str:
    order = _stage_names(stages)
    rows = []
    for name in order:
        pc = stages[name][mode]["per_class"]
        rows.append([name, _fmt(stages[name][mode]["mIoU"]), *(_fmt(pc[n]["IoU"]) for n in names)])
    return format_table(["labels", "mIoU", *names], rows)


def panoptic_table(pan: Mapping[str, dict]) -> str:
    keys = ["PQ", "PQ_Th", "PQ_St", "RQ", "SQ", "mIoU_pan"]
    rows = [[level, *(_fmt(pan[level].get(k)) for k in keys)] for level in ("classes", "superclass") if level in pan]
    return format_table(["level", *keys], rows)


def panoptic_class_table(per_class: Mapping[str, dict]) -> str:
    rows = [
        [n, _fmt(v["PQ"]), _fmt(v["RQ"]), _fmt(v["SQ"]), str(v["TP"]), str(v["FP"]), str(v["FN"])]
        for n, v in per_class.items()
    ]
    return format_table(["class", "PQ", "RQ", "SQ", "TP", "FP", "FN"], rows)


def metrics_text(metrics: Mapping, classset: ClassSet) -> str:
    parts = []
    stages = metrics.get("stages", {})
    if stages:
        parts += ["Label quantity and quality per stage (%)", stage_table(stages)]
        parts += ["Per-class IoU, unlabeled counted as error (%)", per_class_table(stages, classset.names)]
    pan = metrics.get("panoptic")
    if pan:
        parts += ["Panoptic quality (%)", panoptic_table(pan), panoptic_class_table(pan["classes"]["per_class"])]
    return "\n".join(parts)


def eval_text(result: Mapping, classset: ClassSet) -> str:
    """Text rendering of a single ``eval`` report."""
    parts = []
    if "semantic" in result:
        sem = result["semantic"]
        parts += ["Semantic (%)", stage_table({result.get("provenance", "labels"): sem})]
        parts += [per_class_table({result.get("provenance", "labels"): sem}, classset.names)]
    if "panoptic" in result:
        parts += ["Panoptic (%)", panoptic_table(result["panoptic"])]
    return "\n".join(parts)


def write_metric_csvs(metrics: Mapping, out_dir, classset: ClassSet) -> list[Path]:
    out = Path(out_dir)
    paths = []
    stages = metrics.get("stages", {})
    if stages:
        p = out / "stages.csv"
        write_csv(p, ["labels", "coverage", "mIoU_labeled", "mIoU_unlabeled_as_error"], stage_rows(stages))
        paths.append(p)
        p = out / "per_class_iou.csv"
        rows = []
        for name in _stage_names(stages):
            pc = stages[name][UNLABELED_AS_ERROR]["per_class"]
            rows.append([name, *(pc[n]["IoU"] for n in classset.names)])
        write_csv(p, ["labels", *classset.names], rows)
        paths.append(p)
    return paths


# ---------------------------------------------------------------- figures


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_stages(stages: Mapping[str, dict], path) -> Path:
    names = _stage_names(stages)
    cov = [100 * stages[n]["coverage"] for n in names]
    q = [100 * (stages[n][UNLABELED_EXCLUDED]["mIoU"] or 0) for n in names]
    fig, ax = plt.subplots(figsize=(7, 3.5))
    x = range(len(names))
    ax.bar([i - 0.2 for i in x], cov, width=0.4, label="coverage")
    ax.bar([i + 0.2 for i in x], q, width=0.4, label="mIoU on labeled points")
    ax.set_xticks(list(x), names, rotation=30)
    ax.set_ylabel("%")
    ax.set_ylim(0, 105)
    ax.legend(loc="lower right")
    return _save(fig, Path(path))


def plot_rounds(stages: Mapping[str, dict], path) -> Path:
    names = [n for n in _stage_names(stages) if n.startswith("round-")]
    fig, ax = plt.subplots(figsize=(4, 3))
    vals = [100 * stages[n][UNLABELED_AS_ERROR]["mIoU"] for n in names]
    ax.plot(range(1, len(names) + 1), vals, marker="o")
    ax.set_xticks(range(1, len(names) + 1))
    ax.set_xlabel("round")
    ax.set_ylabel("mIoU (%)")
    return _save(fig, Path(path))


def plot_per_class(stages: Mapping[str, dict], names: SequenceT[str], path, which=None) -> Path:
    which = which or [n for n in ("vlm", "atc") if n in stages] + [n for n in _stage_names(stages) if n.startswith("round-")][-1:]
    which = which or list(_stage_names(stages))
    fig, ax = plt.subplots(figsize=(9, 3.5))
    width = 0.8 / max(len(which), 1)
    for j, st in enumerate(which):
        pc = stages[st][UNLABELED_AS_ERROR]["per_class"]
        vals = [100 * (pc[n]["IoU"] or 0) for n in names]
        ax.bar([i + (j - (len(which) - 1) / 2) * width for i in range(len(names))], vals, width=width, label=st)
    ax.set_xticks(range(len(names)), names, rotation=60, ha="right")
    ax.set_ylabel("IoU (%)")
    ax.legend()
    return _save(fig, Path(path))


def plot_robustness(report: RobustnessReport, path) -> Path:
    rows = [r for r in report.rows if r.n_tim > 0]
    fig, ax = plt.subplots(figsize=(7, 3.5))
    colors = ["tab:green" if r.robust else "tab:gray" for r in rows]
    ax.bar(range(len(rows)), [min(r.ratio, 1.5) for r in rows], color=colors)
    ax.axhline(report.tau, color="k", ls="--", lw=1, label=f"tau = {report.tau:.3g}")
    ax.set_xticks(range(len(rows)), [r.name for r in rows], rotation=60, ha="right")
    ax.set_ylabel("N_aug / N_tim")
    ax.legend()
    return _save(fig, Path(path))


def render_figures(metrics: Mapping, robust: RobustnessReport | None, out_dir, classset: ClassSet) -> list[Path]:
    out = Path(out_dir)
    paths = []
    stages = metrics.get("stages", {})
    if stages:
        paths.append(plot_stages(stages, out / "stages.png"))
        paths.append(plot_per_class(stages, classset.names, out / "per_class_iou.png"))
        if any(n.startswith("round-") for n in stages):
            paths.append(plot_rounds(stages, out / "rounds.png"))
        paths += write_metric_csvs(metrics, out, classset)
    if robust is not None:
        paths.append(plot_robustness(robust, out / "robustness.png"))
        write_csv(out / "robustness.csv", ["class", "N_aug", "N_tim", "N_aug/N_tim", "robust"], robustness_rows(robust))
        paths.append(out / "robustness.csv")
    return paths
