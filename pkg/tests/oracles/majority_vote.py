"""Exact and Monte-Carlo accuracy of voxel majority voting under symmetric label noise.

Each voxel holds m observations of its true class t; an observation is
correct with probability 1 - eta, otherwise uniform over the other C - 1
classes. The voxel wins iff t has the strictly largest count, or ties for
the largest and every tied class has a larger id than t.

Run: python3 tests/oracles/majority_vote.py
"""

from fractions import Fraction
from math import comb, factorial

import numpy as np


def _egf(cap, r):
    # sum_{k<=cap} z^k / k!, truncated at degree r
    return [Fraction(1, factorial(k)) if k <= cap else Fraction(0) for k in range(r + 1)]


def _mul(a, b, r):
    out = [Fraction(0)] * (r + 1)
    for i, x in enumerate(a):
        if x:
            for j in range(r + 1 - i):
                out[i + j] += x * b[j]
    return out


def exact(C=16, eta=Fraction(3, 10), m=10) -> Fraction:
    others = C - 1
    total = Fraction(0)
    for t in range(C):
        for x in range(m + 1):
            r = m - x
            p_x = comb(m, x) * (1 - eta) ** x * eta ** r
            poly = [Fraction(1)] + [Fraction(0)] * r
            for _ in range(t):  # lower ids must stay strictly below x
                poly = _mul(poly, _egf(x - 1, r), r)
            for _ in range(others - t):  # higher ids may tie
                poly = _mul(poly, _egf(x, r), r)
            ways = poly[r] * factorial(r)
            total += p_x * ways / Fraction(others) ** r
    return total / C


def monte_carlo(C=16, eta=0.3, m=10, n=2_000_000, seed=0) -> float:
    rng = np.random.default_rng(seed)
    t = rng.integers(0, C, n)
    obs = np.repeat(t[:, None], m, axis=1)
    flip = rng.random((n, m)) < eta
    obs[flip] = (obs[flip] + rng.integers(1, C, flip.sum())) % C
    counts = np.zeros((n, C), dtype=np.int64)
    for j in range(m):
        np.add.at(counts, (np.arange(n), obs[:, j]), 1)
    return float(np.mean(counts.argmax(axis=1) == t))


if __name__ == "__main__":
    e = exact()
    print("exact", float(e))
    print("monte-carlo", monte_carlo())
