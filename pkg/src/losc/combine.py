"""Robust-class selection and the augmentation/time label combination."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .core import IGNORE_ID, ConfigError, FormatError, Labeling, class_counts

DEFAULT_MIN_POINTS = 200_000
DEFAULT_TAU = 1 / 3


@dataclass(frozen=True)
class ClassRobustness:
    class_id: int
    name: str
    n_aug: int
    n_tim: int
    ratio: float
    robust: bool


@dataclass(frozen=True)
class RobustnessReport:
    rows: tuple[ClassRobustness, ...]
    min_points: int
    tau: float
    meta: dict = field(default_factory=dict)

    @property
    def robust_ids(self) -> set[int]:
        return {r.class_id for r in self.rows if r.robust}

    def row(self, key: int | str) -> ClassRobustness:
        for r in self.rows:
            if r.class_id == key or r.name == key:
                return r
        raise KeyError(key)

    def to_json(self) -> dict:
        return {
            "schema": "losc.robustness/1",
            "N": self.min_points,
            "tau": self.tau,
            "columns": ["class", "N_aug", "N_tim", "N_aug/N_tim", "robust"],
            "rows": [
                {
                    "class": r.name,
                    "id": r.class_id,
                    "N_aug": r.n_aug,
                    "N_tim": r.n_tim,
                    "N_aug/N_tim": r.ratio if math.isfinite(r.ratio) else "inf",
                    "robust": r.robust,
                }
                for r in self.rows
            ],
            **self.meta,
        }

    @classmethod
    def from_json(cls, d: dict) -> "RobustnessReport":
        rows = tuple(
            ClassRobustness(
                int(r["id"]), r["class"], int(r["N_aug"]), int(r["N_tim"]),
                float(r["N_aug/N_tim"]), bool(r["robust"]),
            )
            for r in d["rows"]
        )
        return cls(rows, int(d["N"]), float(d["tau"]))


def robust_classes(
    counts_aug: Mapping[int, int],
    counts_tim: Mapping[int, int],
    min_points: float = DEFAULT_MIN_POINTS,
    tau: float = DEFAULT_TAU,
    names: Iterable[str] | None = None,
) -> RobustnessReport:
    """A class is robust iff N_aug >= N and N_aug / N_tim >= tau.

    N_tim = 0 with N_aug > 0 gives an infinite ratio (the ratio test
    passes); N_aug = N_tim = 0 is reported as ratio 0, not robust.
    The ignore id is never robust.
    """
    if min_points < 0:
        raise ConfigError("N must be non-negative")
    if not 0 <= tau <= 1:
        raise ConfigError("tau must lie in [0, 1]")
    ids = sorted(c for c in set(counts_aug) | set(counts_tim) if c != IGNORE_ID)
    names = list(names) if names is not None else None
    rows = []
    for c in ids:
        n_aug = int(counts_aug.get(c, 0))
        n_tim = int(counts_tim.get(c, 0))
        if n_tim > 0:
            ratio = n_aug / n_tim
        else:
            ratio = math.inf if n_aug > 0 else 0.0
        robust = n_aug > 0 and n_aug >= min_points and ratio >= tau
        name = names[c] if names is not None and c < len(names) else str(c)
        rows.append(ClassRobustness(c, name, n_aug, n_tim, ratio, robust))
    return RobustnessReport(tuple(rows), min_points, tau)


def dataset_counts(labelings: Iterable[Labeling], num_classes: int) -> dict[int, int]:
    total = {c: 0 for c in range(num_classes)}
    total[IGNORE_ID] = 0
    for lab in labelings:
        for c, n in class_counts(lab, num_classes).items():
            total[c] += n
    return total


def _robust_lut(robust_ids) -> np.ndarray:
    lut = np.zeros(1 << 16, dtype=bool)
    for c in robust_ids:
        if c != IGNORE_ID:
            lut[c] = True
    return lut


def combine(l_aug: Labeling, l_tim: Labeling, report: RobustnessReport | Iterable[int]) -> Labeling:
    """Take L_aug where its label is a robust class, L_tim everywhere else."""
    if l_aug.sizes != l_tim.sizes:
        raise FormatError(f"L_aug sizes {l_aug.sizes} differ from L_tim sizes {l_tim.sizes}")
    robust = report.robust_ids if isinstance(report, RobustnessReport) else set(report)
    lut = _robust_lut(robust)
    out = tuple(np.where(lut[a], a, t) for a, t in zip(l_aug.labels, l_tim.labels))
    return Labeling(out, "atc")
