"""Quadratic reference for BEV instance clustering.

For every point of a thing class, all same-class distances are computed
directly; the first k others in (distance, index) order that lie within
the radius are linked. Components come from a plain union-find and are
numbered 1.. by their lowest point index.
"""

import numpy as np


def _find(parent, i):
    while parent[i] != i:
        parent[i] = parent[parent[i]]
        i = parent[i]
    return i


def cluster_reference(xy, semantic, thing_ids, k, radius):
    xy = np.asarray(xy, dtype=np.float64)[:, :2]
    sem = np.asarray(semantic)
    n = len(sem)
    parent = list(range(n))
    things = set(int(t) for t in thing_ids)
    for c in things:
        members = np.flatnonzero(sem == c)
        for p in members:
            others = members[members != p]
            d = np.sqrt(((xy[others] - xy[p]) ** 2).sum(axis=1))
            for j in np.lexsort((others, d))[:k]:
                if d[j] <= radius:
                    a, b = _find(parent, int(p)), _find(parent, int(others[j]))
                    if a != b:
                        parent[max(a, b)] = min(a, b)
    inst = np.zeros(n, dtype=np.uint16)
    numbering = {}
    for i in range(n):
        if int(sem[i]) in things:
            root = _find(parent, i)
            if root not in numbering:
                numbering[root] = len(numbering) + 1
            inst[i] = numbering[root]
    return inst
