"""Time-based consolidation: sequence-wide voxel majority voting.

Points of a whole sequence are moved to the world frame, every point votes
for its label in the voxel it falls into (ignore is a regular candidate),
and each point then receives the winning label of its voxel.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence as SequenceT

import numpy as np

from .core import (
    IGNORE_ID,
    ConfigError,
    FormatError,
    Labeling,
    Pose,
    PointCloud,
    Sequence,
    pack_keys,
    unpack_keys,
    voxel_keys,
)

DEFAULT_VOXEL_SIZE = 0.1


@dataclass(frozen=True)
class VoxelVoteTable:
    """Sparse per-voxel vote tallies.

    ``keys`` are sorted packed voxel keys; ``votes[i]`` has one column per
    class followed by a last column for ignore.
    """

    keys: np.ndarray
    votes: np.ndarray
    voxel_size: float
    window_id: int | None = None

    @property
    def num_classes(self) -> int:
        return self.votes.shape[1] - 1

    def __len__(self):
        return self.keys.shape[0]

    def as_dict(self) -> dict[tuple[int, int, int], np.ndarray]:
        ijk = unpack_keys(self.keys)
        return {tuple(int(x) for x in k): v for k, v in zip(ijk, self.votes)}


@dataclass(frozen=True)
class VoxelLabels:
    """Winning label per voxel, sorted by packed key."""

    keys: np.ndarray
    labels: np.ndarray
    voxel_size: float

    def lookup(self, packed: np.ndarray) -> np.ndarray:
        pos = np.searchsorted(self.keys, packed)
        pos_c = np.minimum(pos, max(len(self.keys) - 1, 0))
        if len(self.keys) == 0 or not np.array_equal(self.keys[pos_c], packed):
            raise FormatError("point falls in a voxel missing from the voted map")
        return self.labels[pos_c]

    def as_dict(self) -> dict[tuple[int, int, int], int]:
        ijk = unpack_keys(self.keys)
        return {tuple(int(x) for x in k): int(v) for k, v in zip(ijk, self.labels)}


def _label_index(labels: np.ndarray, num_classes: int) -> np.ndarray:
    idx = labels.astype(np.int64)
    idx[labels == IGNORE_ID] = num_classes
    if idx.size and idx.max() > num_classes:
        raise FormatError(f"label {int(idx.max())} exceeds num_classes={num_classes}")
    return idx


def _infer_num_classes(labels: np.ndarray) -> int:
    real = labels[labels != IGNORE_ID]
    return int(real.max()) + 1 if real.size else 1


def _group(packed: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sorted unique keys and, per point, the index of its key."""
    order = np.argsort(packed)
    sk = packed[order]
    first = np.empty(sk.shape[0], dtype=bool)
    if sk.size:
        first[0] = True
        np.not_equal(sk[1:], sk[:-1], out=first[1:])
    uniq = sk[first]
    inv = np.empty(sk.shape[0], dtype=np.int64)
    inv[order] = np.cumsum(first) - 1
    return uniq, inv


def _tally(inv: np.ndarray, idx: np.ndarray, n_keys: int, num_classes: int, weights=None) -> np.ndarray:
    width = num_classes + 1
    flat = inv * width + idx
    if weights is None:
        votes = np.bincount(flat, minlength=n_keys * width)
    else:
        w = np.asarray(weights, dtype=np.float64)
        w = np.where(idx == num_classes, 1.0, w)
        votes = np.bincount(flat, weights=w, minlength=n_keys * width)
    return votes.reshape(n_keys, width)


def _flat_weights(weights, sizes) -> np.ndarray | None:
    if weights is None:
        return None
    arrs = [np.asarray(w, dtype=np.float64).reshape(-1) for w in weights]
    if [a.shape[0] for a in arrs] != list(sizes):
        raise FormatError("vote weights do not match the labeling sizes")
    flat = np.concatenate(arrs) if arrs else np.zeros(0)
    if flat.size and (flat.min() < 0 or flat.max() > 1):
        raise ConfigError("vote weights must lie in [0, 1]")
    return flat


def _packed_world_keys(seq: Sequence, voxel_size: float) -> np.ndarray:
    return pack_keys(voxel_keys(seq.world_xyz, voxel_size))


def _as_sequence(clouds, poses) -> Sequence:
    if isinstance(clouds, Sequence):
        return clouds
    return Sequence("", tuple(clouds), tuple(poses))


def accumulate(
    clouds: Sequence | SequenceT[PointCloud],
    poses: SequenceT[Pose] | None,
    labeling: Labeling,
    voxel_size: float = DEFAULT_VOXEL_SIZE,
    weights=None,
    num_classes: int | None = None,
    window_id: int | None = None,
) -> VoxelVoteTable:
    """Tally one vote per point in the voxel it falls into (world frame)."""
    if voxel_size <= 0:
        raise ConfigError("voxel_size must be positive")
    seq = _as_sequence(clouds, poses)
    if labeling.sizes != seq.sizes:
        raise FormatError(f"labeling sizes {labeling.sizes} do not match scans {seq.sizes}")
    flat = labeling.flat()
    if num_classes is None:
        num_classes = _infer_num_classes(flat)
    idx = _label_index(flat, num_classes)
    keys, inv = _group(_packed_world_keys(seq, voxel_size))
    votes = _tally(inv, idx, len(keys), num_classes, _flat_weights(weights, seq.sizes))
    return VoxelVoteTable(keys, votes, voxel_size, window_id)


def merge_tables(a: VoxelVoteTable, b: VoxelVoteTable) -> VoxelVoteTable:
    """Elementwise vote addition; associative and commutative."""
    if a.voxel_size != b.voxel_size:
        raise ConfigError("cannot merge tables with different voxel sizes")
    width = max(a.votes.shape[1], b.votes.shape[1])

    def widen(t):
        # keep ignore in the last column
        v = np.zeros((len(t), width), dtype=np.result_type(a.votes, b.votes))
        v[:, : t.votes.shape[1] - 1] = t.votes[:, :-1]
        v[:, -1] = t.votes[:, -1]
        return v

    keys = np.concatenate([a.keys, b.keys])
    votes = np.concatenate([widen(a), widen(b)])
    uniq, inv = _group(keys)
    out = np.zeros((len(uniq), width), dtype=votes.dtype)
    np.add.at(out, inv, votes)
    return VoxelVoteTable(uniq, out, a.voxel_size, a.window_id if a.window_id == b.window_id else None)


def _winners(votes: np.ndarray) -> np.ndarray:
    """Argmax with real classes winning ties against ignore, lowest id among classes."""
    num_classes = votes.shape[1] - 1
    if num_classes == 0:
        return np.full(votes.shape[0], IGNORE_ID, dtype=np.uint16)
    real = votes[:, :num_classes]
    best = real.argmax(axis=1)
    best_votes = real[np.arange(votes.shape[0]), best]
    out = best.astype(np.uint16)
    out[votes[:, num_classes] > best_votes] = IGNORE_ID
    return out


def vote(table: VoxelVoteTable) -> VoxelLabels:
    return VoxelLabels(table.keys, _winners(table.votes), table.voxel_size)


def reassign(
    clouds: Sequence | SequenceT[PointCloud],
    poses: SequenceT[Pose] | None,
    voted: VoxelLabels,
    voxel_size: float | None = None,
) -> Labeling:
    seq = _as_sequence(clouds, poses)
    size = voted.voxel_size if voxel_size is None else voxel_size
    flat = voted.lookup(_packed_world_keys(seq, size))
    return Labeling.from_flat(flat, seq.sizes, "tim")


def _tbc_window(seq: Sequence, flat: np.ndarray, weights, voxel_size, num_classes) -> np.ndarray:
    idx = _label_index(flat, num_classes)
    keys, inv = _group(_packed_world_keys(seq, voxel_size))
    votes = _tally(inv, idx, len(keys), num_classes, weights)
    return _winners(votes)[inv]


def tbc(
    seq: Sequence,
    labeling: Labeling,
    voxel_size: float = DEFAULT_VOXEL_SIZE,
    window_length: int | None = None,
    weights=None,
    num_classes: int | None = None,
) -> Labeling:
    """accumulate -> vote -> reassign, per contiguous window of scans if requested."""
    if voxel_size <= 0:
        raise ConfigError("voxel_size must be positive")
    if window_length is not None and window_length < 1:
        raise ConfigError("window_length must be >= 1")
    if labeling.sizes != seq.sizes:
        raise FormatError(f"labeling sizes {labeling.sizes} do not match scans {seq.sizes}")
    flat = labeling.flat()
    if num_classes is None:
        num_classes = _infer_num_classes(flat)
    w = _flat_weights(weights, seq.sizes)
    step = len(seq) if window_length is None else window_length
    out = []
    bounds = np.cumsum([0, *seq.sizes])
    for start in range(0, len(seq), max(step, 1)):
        stop = min(start + step, len(seq))
        a, b = bounds[start], bounds[stop]
        sub = seq if (start, stop) == (0, len(seq)) else seq.subsequence(start, stop)
        out.append(_tbc_window(sub, flat[a:b], None if w is None else w[a:b], voxel_size, num_classes))
    result = np.concatenate(out) if out else np.zeros(0, dtype=np.uint16)
    return Labeling.from_flat(result, seq.sizes, "tim")
