"""Learning-free instances: BEV projection, per-class kNN graph, connected components."""

from __future__ import annotations

from typing import Iterable

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .core import IGNORE_ID, ConfigError, FormatError, Labeling, Sequence

DEFAULT_K = 16
DEFAULT_RADIUS = 1.5


def pack_panoptic(semantic: np.ndarray, instance: np.ndarray | None = None) -> np.ndarray:
    sem = np.asarray(semantic).astype(np.uint32)
    if instance is None:
        return sem
    inst = np.asarray(instance).astype(np.int64)
    if inst.size and (inst.min() < 0 or inst.max() > 0xFFFF):
        raise FormatError("instance id does not fit in 16 bits")
    return sem | (inst.astype(np.uint32) << 16)


def unpack_panoptic(packed: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(packed)
    if p.dtype.kind not in "iu":
        raise FormatError(f"panoptic labels must be integers, got {p.dtype}")
    if p.size and (p.min() < 0 or p.max() > 0xFFFFFFFF):
        raise FormatError("panoptic word exceeds 32 bits")
    p = p.astype(np.uint32)
    return (p & 0xFFFF).astype(np.uint16), (p >> 16).astype(np.uint16)


def bev(points: np.ndarray) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    if p.size == 0:
        return np.zeros((0, 2))
    return p[:, :2].copy()


def _class_edges(xy: np.ndarray, k: int, radius: float) -> tuple[np.ndarray, np.ndarray]:
    n = xy.shape[0]
    if n < 2:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    kk = min(k + 1, n)
    # neighbours beyond the radius never become edges; the slack keeps boundary cases for the exact test below
    dist, idx = cKDTree(xy).query(xy, k=kk, distance_upper_bound=radius * (1 + 1e-9))
    dist = dist.reshape(n, kk)
    idx = idx.reshape(n, kk)
    rows = np.arange(n)[:, None]
    not_self = idx != rows
    # with duplicate points the query may not return self first; keep the first k others
    rank = np.cumsum(not_self, axis=1)
    sel = not_self & (rank <= k) & (dist <= radius)
    src = np.broadcast_to(rows, idx.shape)[sel]
    return src, idx[sel]


def cluster(
    points2d: np.ndarray,
    semantic: np.ndarray,
    thing_ids: Iterable[int],
    k: int = DEFAULT_K,
    radius: float = DEFAULT_RADIUS,
) -> np.ndarray:
    """Instance id per point (0 for stuff and ignore), numbered from 1.

    Within each thing class, p and q are linked when q is one of p's k
    nearest same-class neighbours and lies within ``radius`` in BEV.
    Instances are the connected components of the undirected closure,
    numbered by their lowest point index.
    """
    if k < 1:
        raise ConfigError("k must be >= 1")
    if radius <= 0:
        raise ConfigError("radius must be positive")
    xy = np.asarray(points2d, dtype=np.float64)[:, :2]
    sem = np.asarray(semantic)
    thing_ids = sorted(set(int(t) for t in thing_ids))
    n = sem.shape[0]
    comp = np.full(n, -1, dtype=np.int64)
    srcs, dsts = [], []
    for c in thing_ids:
        members = np.flatnonzero(sem == c)
        if members.size == 0:
            continue
        src, dst = _class_edges(xy[members], k, radius)
        srcs.append(members[src])
        dsts.append(members[dst])
    offset = 0
    if srcs:
        # edges never cross classes, so one graph over all points gives the per-class components
        src, dst = np.concatenate(srcs), np.concatenate(dsts)
        g = coo_matrix((np.ones(src.size, dtype=np.int8), (src, dst)), shape=(n, n))
        _, lab = connected_components(g, directed=True, connection="weak")
        things = np.isin(sem, thing_ids)
        _, comp[things] = np.unique(lab[things], return_inverse=True)
        offset = int(comp.max()) + 1
    inst = np.zeros(n, dtype=np.uint16)
    if offset == 0:
        return inst
    if offset > 0xFFFF:
        raise FormatError("more than 65535 instances in one scan")
    things = np.flatnonzero(comp >= 0)
    first = np.full(offset, np.iinfo(np.int64).max, dtype=np.int64)
    np.minimum.at(first, comp[things], things)
    rank = np.empty(offset, dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(1, offset + 1)
    inst[things] = rank[comp[things]]
    return inst


def panoptic_sequence(
    seq: Sequence,
    labeling: Labeling,
    thing_ids: Iterable[int],
    k: int = DEFAULT_K,
    radius: float = DEFAULT_RADIUS,
) -> list[np.ndarray]:
    """Packed panoptic words per scan; clustering runs in the world-frame BEV."""
    if labeling.sizes != seq.sizes:
        raise FormatError(f"labeling sizes {labeling.sizes} do not match scans {seq.sizes}")
    thing_ids = list(thing_ids)
    out = []
    for cloud, pose, sem in zip(seq.clouds, seq.poses, labeling.labels):
        xy = bev(pose.apply(cloud.xyz))
        inst = cluster(xy, sem, thing_ids, k, radius)
        inst[sem == IGNORE_ID] = 0
        out.append(pack_panoptic(sem, inst))
    return out
