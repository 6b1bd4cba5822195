"""Iterative refinement: fit a segmenter, predict, consolidate in time, repeat.

The 3D network is hidden behind :class:`Segmenter`. :class:`KNNSegmenter`
is a reference implementation so the loop runs without any neural network.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence as SequenceT

import numpy as np
from scipy.spatial import cKDTree

from .core import IGNORE_ID, ConfigError, FormatError, Labeling, Sequence
from .tbc import DEFAULT_VOXEL_SIZE, tbc

log = logging.getLogger(__name__)

DEFAULT_ROUNDS = 3
DEFAULT_K = 3
DEFAULT_MAX_REFERENCE_POINTS = 50_000
_PREDICT_CHUNK = 262_144


class Segmenter(Protocol):
    """A trainable 3D segmenter.

    ``fit`` receives, per sequence id, world-frame points and their
    (non-ignore) labels. ``predict`` must label every point it is given.
    """

    def fit(self, data: Mapping[str, tuple[np.ndarray, np.ndarray]]) -> None: ...

    def predict(self, seq_id: str, points: np.ndarray) -> np.ndarray: ...


@dataclass
class KNNModel:
    points: np.ndarray
    labels: np.ndarray
    k: int
    num_classes: int
    tree: cKDTree = field(repr=False, default=None)

    def __post_init__(self):
        if self.tree is None:
            self.tree = cKDTree(self.points)

    def __len__(self):
        return self.points.shape[0]


def knn_fit(
    points: np.ndarray,
    labels: np.ndarray,
    k: int = DEFAULT_K,
    max_reference_points: int = DEFAULT_MAX_REFERENCE_POINTS,
    seed: int = 0,
    num_classes: int | None = None,
) -> KNNModel:
    """Keep up to ``max_reference_points`` labeled points, drawn uniformly with a fixed seed."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    labels = np.asarray(labels)
    keep = np.flatnonzero(labels != IGNORE_ID)
    if keep.size == 0:
        raise ConfigError("cannot fit a segmenter on zero labeled points")
    if keep.size > max_reference_points:
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(keep, size=max_reference_points, replace=False))
    lab = labels[keep].astype(np.int64)
    if num_classes is None:
        num_classes = int(lab.max()) + 1
    return KNNModel(np.asarray(points, dtype=np.float64)[keep, :3].copy(), lab, k, num_classes)


def _majority(neigh: np.ndarray, num_classes: int) -> np.ndarray:
    k = neigh.shape[1]
    if k <= 8:
        # small k: count equal pairs within each sorted row instead of a (n, C) table
        s = np.sort(neigh, axis=1)
        counts = np.zeros(s.shape, dtype=np.int8)
        for i in range(k):
            for j in range(k):
                counts[:, j] += s[:, i] == s[:, j]
        # the first maximum of an ascending row is the lowest tied class id
        return s[np.arange(s.shape[0]), counts.argmax(axis=1)]
    counts = np.zeros((neigh.shape[0], num_classes), dtype=np.int32)
    rows = np.arange(neigh.shape[0])
    for j in range(k):
        counts[rows, neigh[:, j]] += 1
    return counts.argmax(axis=1)


def knn_predict(model: KNNModel, points: np.ndarray, workers: int = 1) -> np.ndarray:
    """Majority label of the k nearest references; never ignore."""
    pts = np.asarray(points, dtype=np.float64)[:, :3]
    k = min(model.k, len(model))
    out = np.empty(pts.shape[0], dtype=np.uint16)
    for a in range(0, pts.shape[0], _PREDICT_CHUNK):
        q = pts[a : a + _PREDICT_CHUNK]
        _, idx = model.tree.query(q, k=k, workers=workers)
        if k == 1:
            out[a : a + q.shape[0]] = model.labels[idx]
        else:
            out[a : a + q.shape[0]] = _majority(model.labels[idx], model.num_classes)
    return out


class KNNSegmenter:
    """Reference segmenter: one k-NN memory per sequence, in world coordinates.

    World frames of different sequences are unrelated, so references are
    never shared across sequences.
    """

    def __init__(
        self, k=DEFAULT_K, max_reference_points=DEFAULT_MAX_REFERENCE_POINTS, seed=0, num_classes=None, workers=1
    ):
        self.k = k
        self.workers = workers
        self.max_reference_points = max_reference_points
        self.seed = seed
        self.num_classes = num_classes
        self.models: dict[str, KNNModel] = {}

    def fit(self, data):
        self.models = {}
        for i, (seq_id, (pts, lab)) in enumerate(sorted(data.items())):
            self.models[seq_id] = knn_fit(
                pts, lab, self.k, self.max_reference_points, seed=self.seed + i, num_classes=self.num_classes
            )

    def predict(self, seq_id, points):
        if seq_id not in self.models:
            raise ConfigError(f"segmenter was not fitted on sequence {seq_id!r}")
        return knn_predict(self.models[seq_id], points, self.workers)


@dataclass
class RoundRecord:
    round_index: int
    predictions: dict[str, Labeling]
    pseudo_labels: dict[str, Labeling]
    metrics: dict | None = None
    paths: list[str] = field(default_factory=list)


def _fit_data(sequences, labelings):
    data = {}
    for seq in sequences:
        flat = labelings[seq.seq_id].flat()
        keep = flat != IGNORE_ID
        if keep.any():
            data[seq.seq_id] = (seq.world_xyz[keep], flat[keep])
    if not data:
        raise ConfigError("initial labeling has no labeled point")
    return data


def iterate(
    sequences: SequenceT[Sequence],
    initial: Mapping[str, Labeling],
    segmenter: Segmenter,
    rounds: int = DEFAULT_ROUNDS,
    voxel_size: float = DEFAULT_VOXEL_SIZE,
    num_classes: int | None = None,
    window_length: int | None = None,
    evaluate: Callable[[dict[str, Labeling]], dict] | None = None,
    emit: Callable[[int, dict[str, Labeling]], list[str]] | None = None,
) -> list[RoundRecord]:
    """Round 1 fits on ``initial``; round n >= 2 fits on TBC of round n-1's predictions.

    ``evaluate`` and ``emit`` are called on every round's predictions, e.g.
    to score them against ground truth and to write label files.
    """
    if rounds < 1:
        raise ConfigError("rounds must be >= 1")
    records = []
    pseudo = dict(initial)
    for n in range(1, rounds + 1):
        if n > 1:
            prev = records[-1].predictions
            pseudo = {
                s.seq_id: tbc(s, prev[s.seq_id], voxel_size, window_length, num_classes=num_classes)
                for s in sequences
            }
        segmenter.fit(_fit_data(sequences, pseudo))
        preds = {}
        for seq in sequences:
            flat = np.asarray(segmenter.predict(seq.seq_id, seq.world_xyz))
            if flat.shape[0] != seq.num_points:
                raise FormatError(f"segmenter returned {flat.shape[0]} labels for {seq.num_points} points")
            if (flat == IGNORE_ID).any():
                raise FormatError("segmenter predicted ignore; predictions must be total")
            preds[seq.seq_id] = Labeling.from_flat(flat, seq.sizes, f"model-round-{n}")
        rec = RoundRecord(n, preds, pseudo)
        if evaluate is not None:
            rec.metrics = evaluate(preds)
        if emit is not None:
            rec.paths = emit(n, preds)
        miou = [v["mIoU"] for v in (rec.metrics or {}).values() if isinstance(v, dict) and "mIoU" in v]
        log.info("round %d done%s", n, f", mIoU {miou[0]:.4f}" if miou else "")
        records.append(rec)
    return records


def import_predictions(paths: SequenceT[str | Path], sizes: SequenceT[int], round_index: int) -> Labeling:
    """Load an external network's per-scan predictions as a total labeling."""
    from .io import read_labels

    if len(paths) != len(sizes):
        raise FormatError(f"{len(paths)} prediction files for {len(sizes)} scans")
    out = []
    for p, n in zip(paths, sizes):
        sem, _ = read_labels(p)
        if sem.shape[0] != n:
            raise FormatError(f"{p}: {sem.shape[0]} labels for {n} points")
        if (sem == IGNORE_ID).any():
            raise FormatError(f"{p}: predictions contain ignore")
        out.append(sem)
    return Labeling(tuple(out), f"model-round-{round_index}")
