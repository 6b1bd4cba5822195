"""Configuration and stage runners shared by the CLI subcommands and ``pipeline``."""

from __future__ import annotations

import dataclasses
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import io
from .augmentation import backproject_augmented, unanimity
from .combine import RobustnessReport, combine, dataset_counts, robust_classes
from .core import IGNORE_ID, ConfigError, FormatError, Labeling, Sequence
from .dataset import Dataset, load_manifest, read_labelings, write_labelings
from .metrics import (
    MODES,
    UNLABELED_AS_ERROR,
    UNLABELED_EXCLUDED,
    ConfusionMatrix,
    coverage,
    panoptic_scores,
    remap_superclasses,
)
from .panoptic import panoptic_sequence
from .refine import KNNSegmenter, RoundRecord, iterate
from .tbc import tbc

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineConfig:
    voxel_size: float = 0.1
    depth_tolerance: float = 0.5
    N: int = 200_000
    tau: float = 1 / 3
    rounds: int = 3
    window_length: int | None = None
    weighted_vote: bool = False
    panoptic_k: int = 16
    panoptic_radius: float = 1.5
    knn_k: int = 3
    knn_max_reference_points: int = 50_000
    seed: int = 0
    workers: int = 1
    eval_mode: str = UNLABELED_AS_ERROR

    def __post_init__(self):
        checks = [
            (self.voxel_size > 0, "voxel_size must be positive"),
            (self.depth_tolerance >= 0, "depth_tolerance must be non-negative"),
            (self.N >= 0, "N must be non-negative"),
            (0 <= self.tau <= 1, "tau must lie in [0, 1]"),
            (self.rounds >= 1, "rounds must be >= 1"),
            (self.window_length is None or self.window_length >= 1, "window_length must be >= 1"),
            (self.panoptic_k >= 1, "panoptic_k must be >= 1"),
            (self.panoptic_radius > 0, "panoptic_radius must be positive"),
            (self.knn_k >= 1, "knn_k must be >= 1"),
            (self.knn_max_reference_points >= 1, "knn_max_reference_points must be >= 1"),
            (self.workers >= 1, "workers must be >= 1"),
            (self.eval_mode in MODES, f"eval_mode must be one of {MODES}"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    @classmethod
    def from_json(cls, data: Mapping) -> "PipelineConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known - {"schema"})
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**{k: v for k, v in data.items() if k != "schema"})

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_json(io.read_json(path))

    def override(self, **kwargs) -> "PipelineConfig":
        return dataclasses.replace(self, **{k: v for k, v in kwargs.items() if v is not None})

    def to_json(self) -> dict:
        return {"schema": "losc.config/1", **dataclasses.asdict(self)}


# ----------------------------------------------------------------- per sequence


def _variants(ds: Dataset, seq: Sequence, aug_ids, cfg: PipelineConfig) -> dict[str, Labeling]:
    maps = ds.load_maps(seq.seq_id, aug_ids)
    descs = [ds.descriptor(a) for a in aug_ids]
    return backproject_augmented(seq, maps, ds.rig, descs, cfg.depth_tolerance)


def agreement_weights(base: Labeling, variants: Mapping[str, Labeling]) -> list[np.ndarray]:
    """Per-point vote weight: share of augmentation variants agreeing with the base label."""
    if not variants:
        return [np.ones(n) for n in base.sizes]
    out = []
    for i, b in enumerate(base.labels):
        agree = np.zeros(b.shape[0])
        for v in variants.values():
            agree += v.labels[i] == b
        out.append(agree / len(variants))
    return out


def _tbc(seq, lab, cfg, num_classes, weights=None) -> Labeling:
    return tbc(seq, lab, cfg.voxel_size, cfg.window_length, weights=weights, num_classes=num_classes)


def vlm_for_sequence(ds: Dataset, seq: Sequence, cfg: PipelineConfig) -> Labeling:
    return _variants(ds, seq, [ds.base_augmentation], cfg)[ds.base_augmentation]


def tim_for_sequence(ds: Dataset, seq: Sequence, vlm: Labeling, cfg: PipelineConfig) -> Labeling:
    weights = None
    if cfg.weighted_vote:
        weights = agreement_weights(vlm, _variants(ds, seq, [a.aug_id for a in ds.augmentations], cfg))
    return _tbc(seq, vlm, cfg, ds.classset.num_classes, weights)


def abc_for_sequence(ds: Dataset, seq: Sequence, cfg: PipelineConfig) -> tuple[Labeling, Labeling]:
    if not ds.augmentations:
        raise ConfigError("manifest lists no augmentations; ABC needs at least one")
    variants = _variants(ds, seq, [a.aug_id for a in ds.augmentations], cfg)
    l_abc = unanimity(list(variants.values()))
    l_aug = _tbc(seq, l_abc, cfg, ds.classset.num_classes).with_provenance("aug")
    return l_abc, l_aug


def _front(ds: Dataset, seq: Sequence, cfg: PipelineConfig) -> dict[str, Labeling]:
    """vlm, tim, abc and aug for one sequence, sharing one pass over the label maps."""
    ids = list(dict.fromkeys([ds.base_augmentation, *(a.aug_id for a in ds.augmentations)]))
    variants = _variants(ds, seq, ids, cfg)
    vlm = variants[ds.base_augmentation]
    augs = {a.aug_id: variants[a.aug_id] for a in ds.augmentations}
    C = ds.classset.num_classes
    weights = agreement_weights(vlm, augs) if cfg.weighted_vote else None
    out = {"vlm": vlm, "tim": _tbc(seq, vlm, cfg, C, weights)}
    if augs:
        out["abc"] = unanimity(list(augs.values()))
        out["aug"] = _tbc(seq, out["abc"], cfg, C).with_provenance("aug")
    return out


def _front_job(args):
    manifest, seq_id, cfg = args
    ds = load_manifest(manifest)
    return seq_id, _front(ds, ds.load_sequence(seq_id), cfg)


# ----------------------------------------------------------------- whole dataset


def available_cpus() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:  # not on Linux
        return os.cpu_count() or 1


class Run:
    """Lazily loaded dataset state for one invocation."""

    def __init__(self, manifest, cfg: PipelineConfig):
        self.manifest = Path(manifest)
        self.cfg = cfg
        self.ds = load_manifest(manifest)
        self._seqs: dict[str, Sequence] = {}
        # more workers than usable CPUs only adds start-up and contention cost
        self.workers = min(cfg.workers, available_cpus())
        if self.workers < cfg.workers:
            log.info("only %d CPUs available, using %d of %d requested workers", self.workers, self.workers, cfg.workers)

    @property
    def sequence_ids(self) -> list[str]:
        return self.ds.sequence_ids

    def sequence(self, seq_id: str) -> Sequence:
        if seq_id not in self._seqs:
            self._seqs[seq_id] = self.ds.load_sequence(seq_id)
        return self._seqs[seq_id]

    def sequences(self) -> dict[str, Sequence]:
        return {s: self.sequence(s) for s in self.sequence_ids}

    def read(self, in_dir, provenance=None) -> dict[str, Labeling]:
        labs = read_labelings(in_dir, self.ds, self.sequences(), provenance)
        missing = set(self.sequence_ids) - set(labs)
        if missing:
            raise FormatError(f"{in_dir}: no labels for sequences {sorted(missing)}")
        return labs

    def front(self) -> dict[str, dict[str, Labeling]]:
        """Per sequence: vlm, tim, abc, aug. Sequences run in worker processes when requested."""
        ids = self.sequence_ids
        if self.workers > 1 and len(ids) > 1:
            jobs = [(self.manifest, s, self.cfg) for s in ids]
            with ProcessPoolExecutor(min(self.workers, len(ids))) as pool:
                return dict(pool.map(_front_job, jobs))
        return {s: _front(self.ds, self.sequence(s), self.cfg) for s in ids}

    def backproject(self) -> dict[str, Labeling]:
        return {s: vlm_for_sequence(self.ds, self.sequence(s), self.cfg) for s in self.sequence_ids}

    def tbc(self, labelings: Mapping[str, Labeling], weighted: bool | None = None) -> dict[str, Labeling]:
        weighted = self.cfg.weighted_vote if weighted is None else weighted
        out = {}
        for s in self.sequence_ids:
            seq = self.sequence(s)
            w = None
            if weighted:
                augs = _variants(self.ds, seq, [a.aug_id for a in self.ds.augmentations], self.cfg)
                w = agreement_weights(labelings[s], augs)
            out[s] = _tbc(seq, labelings[s], self.cfg, self.ds.classset.num_classes, w)
        return out

    def abc(self) -> tuple[dict[str, Labeling], dict[str, Labeling]]:
        l_abc, l_aug = {}, {}
        for s in self.sequence_ids:
            l_abc[s], l_aug[s] = abc_for_sequence(self.ds, self.sequence(s), self.cfg)
        return l_abc, l_aug

    def combine(self, l_aug, l_tim) -> tuple[dict[str, Labeling], RobustnessReport]:
        C = self.ds.classset.num_classes
        ids = self.sequence_ids
        report = robust_classes(
            dataset_counts([l_aug[s] for s in ids], C),
            dataset_counts([l_tim[s] for s in ids], C),
            self.cfg.N,
            self.cfg.tau,
            self.ds.classset.names,
        )
        return {s: combine(l_aug[s], l_tim[s], report) for s in ids}, report

    def iterate(self, initial, evaluate=None, emit=None) -> list[RoundRecord]:
        seg = KNNSegmenter(
            self.cfg.knn_k, self.cfg.knn_max_reference_points, self.cfg.seed, self.ds.classset.num_classes,
            workers=self.workers,
        )
        seqs = [self.sequence(s) for s in self.sequence_ids]
        return iterate(
            seqs, initial, seg, self.cfg.rounds, self.cfg.voxel_size, self.ds.classset.num_classes,
            self.cfg.window_length, evaluate=evaluate, emit=emit,
        )

    def panoptic(self, labelings) -> dict[str, list[np.ndarray]]:
        thing = self.ds.classset.thing_ids
        ids = self.sequence_ids
        seqs = [self.sequence(s) for s in ids]

        def one(i):
            return panoptic_sequence(seqs[i], labelings[ids[i]], thing, self.cfg.panoptic_k, self.cfg.panoptic_radius)

        if self.workers > 1:
            # the kd-tree queries release the GIL, so threads are enough here
            with ThreadPoolExecutor(self.workers) as pool:
                return dict(zip(ids, pool.map(one, range(len(ids)))))
        return {s: one(i) for i, s in enumerate(ids)}

    # evaluation

    def gt_words(self) -> dict[str, list[np.ndarray]]:
        out = {}
        for s in self.sequence_ids:
            words = self.ds.load_gt(s)
            if words is None:
                raise FormatError(f"sequence {s} has no ground-truth labels")
            if [w.shape[0] for w in words] != self.sequence(s).sizes:
                raise FormatError(f"ground truth of sequence {s} does not match the scans")
            out[s] = words
        return out

    def evaluate(self, labelings: Mapping[str, Labeling], gt=None) -> dict:
        gt = gt or self.gt_words()
        return evaluate_semantic(labelings, gt, self.ds.classset)

    def evaluate_panoptic(self, words: Mapping[str, list[np.ndarray]], gt=None) -> dict:
        gt = gt or self.gt_words()
        return evaluate_panoptic(words, gt, self.ds.classset)


def evaluate_semantic(labelings: Mapping[str, Labeling], gt: Mapping[str, list[np.ndarray]], classset) -> dict:
    """Coverage plus mIoU/mAcc in both unlabeled modes; superclass scores when defined."""
    ids = sorted(labelings)
    pred = [a for s in ids for a in labelings[s].labels]
    gsem = [(np.asarray(w) & 0xFFFF).astype(np.uint16) for s in ids for w in gt[s]]
    if [a.shape[0] for a in pred] != [g.shape[0] for g in gsem]:
        raise FormatError("prediction and ground-truth point counts differ")
    out = {"coverage": coverage(pred), "points": int(sum(a.shape[0] for a in pred))}
    for mode in MODES:
        cm = ConfusionMatrix(classset.num_classes, mode)
        for p, g in zip(pred, gsem):
            cm.update(p, g)
        out[mode] = cm.scores().to_json(classset.names)
    if classset.superclass_map is not None:
        sup = classset.superclass_set()
        cm = ConfusionMatrix(sup.num_classes, UNLABELED_AS_ERROR)
        for p, g in zip(pred, gsem):
            cm.update(remap_superclasses(p, classset), remap_superclasses(g, classset))
        out["superclass"] = cm.scores().to_json(sup.names)
    return out


def evaluate_panoptic(words: Mapping[str, list[np.ndarray]], gt: Mapping[str, list[np.ndarray]], classset) -> dict:
    ids = sorted(words)
    pred = [w for s in ids for w in words[s]]
    g = [w for s in ids for w in gt[s]]
    out = {"classes": panoptic_scores(pred, g, classset).to_json(classset.names)}
    if classset.superclass_map is not None:
        sup = classset.superclass_set()
        sp = [remap_superclasses(w, classset, panoptic=True) for w in pred]
        sg = [remap_superclasses(w, classset, panoptic=True) for w in g]
        out["superclass"] = panoptic_scores(sp, sg, sup).to_json(sup.names)
    return out


def round_dir(out_dir, n: int) -> Path:
    return Path(out_dir) / f"round-{n}"


def write_rounds(run: Run, out_dir, n: int, preds: Mapping[str, Labeling]) -> list[str]:
    return write_labelings(round_dir(out_dir, n), preds, run.ds)


def run_pipeline(manifest, cfg: PipelineConfig, out_dir, figures: bool = True) -> dict:
    """backproject -> tbc & abc -> combine -> iterate -> panoptic -> eval, writing every artifact."""
    from . import report

    out = Path(out_dir)
    run = Run(manifest, cfg)
    timings = {}
    t0 = time.perf_counter()
    front = run.front()
    timings["backproject+tbc+abc"] = time.perf_counter() - t0
    stages = {k: {s: front[s][k] for s in run.sequence_ids} for k in ("vlm", "tim", "abc", "aug")}
    if "aug" not in front[run.sequence_ids[0]]:
        raise ConfigError("manifest lists no augmentations; ABC needs at least one")
    for name, labs in stages.items():
        write_labelings(out / name, labs, run.ds)

    t = time.perf_counter()
    atc, robust = run.combine(stages["aug"], stages["tim"])
    write_labelings(out / "atc", atc, run.ds)
    io.write_json(out / "robustness.json", robust.to_json())
    (out / "robustness.txt").write_text(report.robustness_table(robust))
    timings["combine"] = time.perf_counter() - t

    has_gt = run.ds.has_gt()
    gt = run.gt_words() if has_gt else None
    evaluate = (lambda preds: run.evaluate(preds, gt)) if has_gt else None

    t = time.perf_counter()
    records = run.iterate(atc, evaluate=evaluate, emit=lambda n, p: write_rounds(run, out, n, p))
    timings["iterate"] = time.perf_counter() - t
    final = records[-1].predictions

    t = time.perf_counter()
    pan = run.panoptic(final)
    write_labelings(out / "panoptic", pan, run.ds, provenance=final[run.sequence_ids[0]].provenance, panoptic=True)
    timings["panoptic"] = time.perf_counter() - t

    summary = {
        "schema": "losc.pipeline/1",
        "config": cfg.to_json(),
        "robust_classes": sorted(run.ds.classset.names[c] for c in robust.robust_ids),
        "rounds": len(records),
        "final_labels": str(round_dir(out, len(records))),
    }
    if has_gt:
        t = time.perf_counter()
        stage_metrics = {k: run.evaluate(v, gt) for k, v in {**stages, "atc": atc}.items()}
        for r in records:
            stage_metrics[f"round-{r.round_index}"] = r.metrics
        pan_metrics = run.evaluate_panoptic(pan, gt)
        metrics = {"schema": "losc.metrics/1", "stages": stage_metrics, "panoptic": pan_metrics}
        io.write_json(out / "metrics.json", metrics)
        (out / "metrics.txt").write_text(report.metrics_text(metrics, run.ds.classset))
        if figures:
            report.render_figures(metrics, robust, out / "figures", run.ds.classset)
        timings["eval"] = time.perf_counter() - t
        summary["final_mIoU"] = stage_metrics[f"round-{len(records)}"][cfg.eval_mode]["mIoU"]
        summary["PQ"] = pan_metrics["classes"]["PQ"]
    timings["total"] = time.perf_counter() - t0
    summary["timings_s"] = {k: round(v, 3) for k, v in timings.items()}
    io.write_json(out / "summary.json", summary)
    log.info("pipeline done in %.1f s", timings["total"])
    return summary

