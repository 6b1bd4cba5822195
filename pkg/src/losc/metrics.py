"""Semantic (mIoU, mAcc, coverage) and panoptic (PQ, RQ, SQ) metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence as SequenceT

import numpy as np

from .core import IGNORE_ID, ClassSet, ConfigError, FormatError, Labeling
from .panoptic import pack_panoptic, unpack_panoptic

UNLABELED_AS_ERROR = "unlabeled-as-error"
UNLABELED_EXCLUDED = "unlabeled-excluded"
MODES = (UNLABELED_AS_ERROR, UNLABELED_EXCLUDED)


def _flat(x) -> np.ndarray:
    if isinstance(x, Labeling):
        return x.flat()
    if isinstance(x, np.ndarray):
        return x.reshape(-1)
    parts = [_flat(p) for p in x]
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.uint16)


def coverage(labeling) -> float:
    """Fraction of points carrying a non-ignore label."""
    flat = _flat(labeling)
    if flat.size == 0:
        raise ValueError("coverage of an empty labeling is undefined")
    return float(np.count_nonzero(flat != IGNORE_ID)) / flat.size


@dataclass
class ConfusionMatrix:
    """(C+1) x (C+1) counts, rows = ground truth, columns = prediction, ignore last."""

    num_classes: int
    mode: str = UNLABELED_AS_ERROR
    matrix: np.ndarray = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown evaluation mode {self.mode!r}")
        if self.matrix is None:
            self.matrix = np.zeros((self.num_classes + 1, self.num_classes + 1), dtype=np.int64)

    def update(self, pred, gt) -> "ConfusionMatrix":
        p = _flat(pred)
        g = _flat(gt)
        if p.shape != g.shape:
            raise FormatError(f"prediction has {p.size} points, ground truth {g.size}")
        keep = g != IGNORE_ID
        if self.mode == UNLABELED_EXCLUDED:
            keep &= p != IGNORE_ID
        C = self.num_classes
        pi = np.where(p[keep] == IGNORE_ID, C, p[keep]).astype(np.int64)
        gi = g[keep].astype(np.int64)
        if (pi > C).any() or (gi >= C).any():
            raise FormatError("label outside the class set")
        self.matrix += np.bincount(gi * (C + 1) + pi, minlength=(C + 1) ** 2).reshape(C + 1, C + 1)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes or other.mode != self.mode:
            raise ConfigError("cannot merge confusion matrices of different shape or mode")
        return ConfusionMatrix(self.num_classes, self.mode, self.matrix + other.matrix)

    @property
    def total(self) -> int:
        return int(self.matrix.sum())

    def scores(self) -> "SemanticScores":
        C = self.num_classes
        m = self.matrix
        tp = np.diag(m)[:C].astype(np.float64)
        gt_count = m[:C].sum(axis=1).astype(np.float64)
        pred_count = m[:C, :C].sum(axis=0).astype(np.float64)
        present = gt_count > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            iou = np.where(present, tp / (gt_count + pred_count - tp), np.nan)
            acc = np.where(present, tp / gt_count, np.nan)
        miou = float(np.nanmean(iou)) if present.any() else float("nan")
        macc = float(np.nanmean(acc)) if present.any() else float("nan")
        return SemanticScores(miou, macc, iou, acc, present, self.total)


@dataclass
class SemanticScores:
    miou: float
    macc: float
    iou: np.ndarray
    acc: np.ndarray
    present: np.ndarray
    evaluated_points: int

    def to_json(self, names: SequenceT[str] | None = None) -> dict:
        names = list(names) if names is not None else [str(i) for i in range(len(self.iou))]
        return {
            "mIoU": self.miou,
            "mAcc": self.macc,
            "evaluated_points": self.evaluated_points,
            "per_class": {
                n: {"IoU": None if np.isnan(i) else float(i), "Acc": None if np.isnan(a) else float(a)}
                for n, i, a in zip(names, self.iou, self.acc)
            },
        }


def semantic_scores(pred, gt, num_classes: int | ClassSet, mode: str = UNLABELED_AS_ERROR) -> SemanticScores:
    """mIoU/mAcc averaged over classes present in the evaluated ground truth.

    Ground-truth ignore points are never evaluated. In unlabeled-as-error
    mode a predicted ignore is a miss; in unlabeled-excluded mode those
    points are dropped.
    """
    if isinstance(num_classes, ClassSet):
        num_classes = num_classes.num_classes
    return ConfusionMatrix(num_classes, mode).update(pred, gt).scores()


@dataclass
class PanopticScore:
    num_classes: int
    thing_ids: tuple[int, ...]
    tp: np.ndarray = None
    fp: np.ndarray = None
    fn: np.ndarray = None
    iou_sum: np.ndarray = None
    semantic: ConfusionMatrix = None

    def __post_init__(self):
        for name, dt in (("tp", np.int64), ("fp", np.int64), ("fn", np.int64), ("iou_sum", np.float64)):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(self.num_classes, dtype=dt))
        if self.semantic is None:
            self.semantic = ConfusionMatrix(self.num_classes)

    @property
    def evaluated(self) -> np.ndarray:
        return (self.tp + self.fp + self.fn) > 0

    def per_class(self) -> dict[str, np.ndarray]:
        with np.errstate(divide="ignore", invalid="ignore"):
            denom = self.tp + 0.5 * self.fp + 0.5 * self.fn
            pq = np.where(self.evaluated, self.iou_sum / denom, np.nan)
            rq = np.where(self.evaluated, self.tp / denom, np.nan)
            sq = np.where(self.tp > 0, self.iou_sum / np.maximum(self.tp, 1), np.where(self.evaluated, 0.0, np.nan))
        return {"PQ": pq, "RQ": rq, "SQ": sq}

    def _mean(self, values, ids=None):
        mask = self.evaluated.copy()
        if ids is not None:
            sel = np.zeros_like(mask)
            sel[list(ids)] = True
            mask &= sel
        return float(np.mean(values[mask])) if mask.any() else float("nan")

    def summary(self) -> dict[str, float]:
        pc = self.per_class()
        stuff = [c for c in range(self.num_classes) if c not in self.thing_ids]
        return {
            "PQ": self._mean(pc["PQ"]),
            "RQ": self._mean(pc["RQ"]),
            "SQ": self._mean(pc["SQ"]),
            "PQ_Th": self._mean(pc["PQ"], self.thing_ids),
            "PQ_St": self._mean(pc["PQ"], stuff),
            "mIoU_pan": self.semantic.scores().miou,
        }

    def to_json(self, names=None) -> dict:
        names = list(names) if names is not None else [str(i) for i in range(self.num_classes)]
        pc = self.per_class()
        per = {}
        for c, n in enumerate(names):
            if self.evaluated[c]:
                per[n] = {
                    "PQ": float(pc["PQ"][c]), "RQ": float(pc["RQ"][c]), "SQ": float(pc["SQ"][c]),
                    "TP": int(self.tp[c]), "FP": int(self.fp[c]), "FN": int(self.fn[c]),
                }
        return {**self.summary(), "per_class": per}


def _segment_ids(sem: np.ndarray, inst: np.ndarray, is_thing: np.ndarray) -> np.ndarray:
    """One int64 id per point: (class << 16 | instance), instance forced to 0 for stuff; -1 for ignore."""
    sem64 = sem.astype(np.int64)
    valid = sem != IGNORE_ID
    thing = np.zeros(sem.shape, dtype=bool)
    thing[valid] = is_thing[sem64[valid]]
    seg = (sem64 << 16) | np.where(thing, inst.astype(np.int64), 0)
    seg[~valid] = -1
    return seg


def _update_scan(score: PanopticScore, pred: np.ndarray, gt: np.ndarray, is_thing: np.ndarray):
    g_sem, g_inst = unpack_panoptic(gt)
    p_sem, p_inst = unpack_panoptic(pred)
    keep = g_sem != IGNORE_ID
    C = score.num_classes
    if (g_sem[keep] >= C).any() or ((p_sem != IGNORE_ID) & (p_sem >= C)).any():
        raise FormatError("panoptic semantic id outside the class set")
    g_seg = _segment_ids(g_sem[keep], g_inst[keep], is_thing)
    p_seg = _segment_ids(p_sem[keep], p_inst[keep], is_thing)
    score.semantic.update(p_sem[keep], g_sem[keep])

    g_ids, g_area = np.unique(g_seg, return_counts=True)
    p_ids, p_area = np.unique(p_seg[p_seg >= 0], return_counts=True)
    both = p_seg >= 0
    # segment ids fit in 32 bits, so a (gt, pred) pair packs into one int64
    pair_key, inter = np.unique((g_seg[both] << 32) | p_seg[both], return_counts=True)
    pairs = np.stack([pair_key >> 32, pair_key & 0xFFFFFFFF], axis=1)
    same = (pairs[:, 0] >> 16) == (pairs[:, 1] >> 16)
    pairs, inter = pairs[same], inter[same]
    ga = g_area[np.searchsorted(g_ids, pairs[:, 0])]
    pa = p_area[np.searchsorted(p_ids, pairs[:, 1])]
    iou = inter / (ga + pa - inter)
    match = iou > 0.5
    matched_g = set(pairs[match, 0].tolist())
    matched_p = set(pairs[match, 1].tolist())
    for (g, _), v in zip(pairs[match], iou[match]):
        c = int(g >> 16)
        score.tp[c] += 1
        score.iou_sum[c] += v
    for g in g_ids:
        if int(g) not in matched_g:
            score.fn[int(g) >> 16] += 1
    for p in p_ids:
        if int(p) not in matched_p:
            score.fp[int(p) >> 16] += 1


def panoptic_scores(pred, gt, classset: ClassSet) -> PanopticScore:
    """Standard PQ with IoU > 0.5 matching, accumulated over scans.

    ``pred`` and ``gt`` are packed 32-bit words (lower 16 bits semantic,
    upper 16 bits instance), either one array or a list of per-scan arrays.
    Stuff classes form one segment per class and scan.
    """
    if isinstance(pred, np.ndarray):
        pred, gt = [pred], [gt]
    pred, gt = list(pred), list(gt)
    if len(pred) != len(gt):
        raise FormatError(f"{len(pred)} predicted scans vs {len(gt)} ground-truth scans")
    is_thing = np.zeros(classset.num_classes, dtype=bool)
    is_thing[classset.thing_ids] = True
    score = PanopticScore(classset.num_classes, tuple(classset.thing_ids))
    for p, g in zip(pred, gt):
        p = np.asarray(p).reshape(-1)
        g = np.asarray(g).reshape(-1)
        if p.shape != g.shape:
            raise FormatError(f"prediction has {p.size} points, ground truth {g.size}")
        _update_scan(score, p, g, is_thing)
    return score


def _superclass_lut(classset: ClassSet) -> np.ndarray:
    if classset.superclass_map is None:
        raise ConfigError("class set has no superclass_map")
    lut = np.full(1 << 16, -1, dtype=np.int64)
    for c, s in classset.superclass_map.items():
        lut[c] = s
    lut[IGNORE_ID] = IGNORE_ID
    return lut


def remap_superclasses(labels, classset: ClassSet, panoptic: bool = False):
    """Replace every class id by its superclass id; ignore stays ignore.

    Accepts a :class:`Labeling`, a semantic array, or (``panoptic=True``)
    packed panoptic words whose instance ids are kept.
    """
    lut = _superclass_lut(classset)
    if isinstance(labels, Labeling):
        return Labeling(tuple(remap_superclasses(a, classset) for a in labels.labels), labels.provenance)
    if panoptic:
        sem, inst = unpack_panoptic(labels)
        return pack_panoptic(remap_superclasses(sem, classset), inst)
    arr = np.asarray(labels)
    out = lut[arr.astype(np.int64)]
    if (out < 0).any():
        raise FormatError(f"class id {int(arr[out < 0][0])} has no superclass")
    return out.astype(np.uint16)
