"""Shared vocabulary: class sets, point clouds, poses, labelings and voxel keys."""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Mapping, Sequence as SequenceT

import numpy as np

IGNORE_ID = 65535
THING = "thing"
STUFF = "stuff"

# 21 bits per axis, signed via offset.
_KEY_BITS = 21
_KEY_OFFSET = 1 << (_KEY_BITS - 1)
_KEY_MASK = (1 << _KEY_BITS) - 1

_PROVENANCE_RE = re.compile(r"^(vlm|tim|abc|aug|atc|gt|model-round-[1-9][0-9]*)$")


class MalformedPoseError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class ClassInfo:
    id: int
    name: str
    kind: str


@dataclass(frozen=True)
class ClassSet:
    """Ordered class vocabulary with a reserved ignore id.

    ``superclass_map`` maps every class id to an index into
    ``superclass_names``. Superclass kinds are derived: a superclass is a
    thing iff all of its member classes are things.
    """

    classes: tuple[ClassInfo, ...]
    ignore_id: int = IGNORE_ID
    superclass_map: Mapping[int, int] | None = None
    superclass_names: tuple[str, ...] | None = None

    def __post_init__(self):
        ids = [c.id for c in self.classes]
        if ids != list(range(len(ids))):
            raise ConfigError(f"class ids must be dense 0..C-1, got {ids}")
        if self.ignore_id in ids:
            raise ConfigError("ignore_id collides with a class id")
        for c in self.classes:
            if c.kind not in (THING, STUFF):
                raise ConfigError(f"class {c.name!r} has kind {c.kind!r}")
        if self.superclass_map is not None:
            missing = set(ids) - set(self.superclass_map)
            if missing:
                raise ConfigError(f"superclass_map is not total, missing {sorted(missing)}")
            if self.superclass_names is None:
                raise ConfigError("superclass_map requires superclass_names")
            bad = [s for s in self.superclass_map.values() if not 0 <= s < len(self.superclass_names)]
            if bad:
                raise ConfigError(f"superclass ids out of range: {bad}")

    @classmethod
    def from_names(cls, names, kinds, **kwargs) -> "ClassSet":
        return cls(tuple(ClassInfo(i, n, k) for i, (n, k) in enumerate(zip(names, kinds))), **kwargs)

    def __len__(self):
        return len(self.classes)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.classes]

    @property
    def thing_ids(self) -> list[int]:
        return [c.id for c in self.classes if c.kind == THING]

    @property
    def stuff_ids(self) -> list[int]:
        return [c.id for c in self.classes if c.kind == STUFF]

    def index(self, name: str) -> int:
        for c in self.classes:
            if c.name == name:
                return c.id
        raise KeyError(name)

    def superclass_set(self) -> "ClassSet":
        if self.superclass_map is None:
            raise ConfigError("class set has no superclass_map")
        kinds = []
        for s in range(len(self.superclass_names)):
            members = [c for c in self.classes if self.superclass_map[c.id] == s]
            kinds.append(THING if members and all(c.kind == THING for c in members) else STUFF)
        return ClassSet.from_names(self.superclass_names, kinds, ignore_id=self.ignore_id)

    def to_json(self) -> dict:
        out = {
            "schema": "losc.classes/1",
            "ignore_id": self.ignore_id,
            "classes": [{"id": c.id, "name": c.name, "kind": c.kind} for c in self.classes],
        }
        if self.superclass_map is not None:
            out["superclasses"] = list(self.superclass_names)
            out["superclass_map"] = {str(k): v for k, v in sorted(self.superclass_map.items())}
        return out

    @classmethod
    def from_json(cls, data: dict) -> "ClassSet":
        try:
            classes = tuple(ClassInfo(int(c["id"]), str(c["name"]), str(c["kind"])) for c in data["classes"])
        except (KeyError, TypeError) as e:
            raise FormatError(f"malformed class set: {e}") from e
        smap = data.get("superclass_map")
        return cls(
            classes,
            ignore_id=int(data.get("ignore_id", IGNORE_ID)),
            superclass_map={int(k): int(v) for k, v in smap.items()} if smap is not None else None,
            superclass_names=tuple(data["superclasses"]) if smap is not None else None,
        )


NUSCENES_NAMES = (
    "barrier", "bicycle", "bus", "car", "construction_vehicle", "motorcycle",
    "pedestrian", "traffic_cone", "trailer", "truck", "driveable_surface",
    "other_flat", "sidewalk", "terrain", "manmade", "vegetation",
)
SUPERCLASS_NAMES = ("object", "vehicle", "human", "ground", "nature", "structure")
_NUSCENES_SUPER = {
    "barrier": 0, "traffic_cone": 0,
    "bicycle": 1, "bus": 1, "car": 1, "construction_vehicle": 1, "motorcycle": 1,
    "trailer": 1, "truck": 1,
    "pedestrian": 2,
    "driveable_surface": 3, "other_flat": 3, "sidewalk": 3,
    "terrain": 4, "vegetation": 4,
    "manmade": 5,
}


def nuscenes_classes() -> ClassSet:
    """The 16-class nuScenes lidarseg vocabulary with six superclasses."""
    kinds = [THING] * 10 + [STUFF] * 6
    return ClassSet.from_names(
        NUSCENES_NAMES,
        kinds,
        superclass_map={i: _NUSCENES_SUPER[n] for i, n in enumerate(NUSCENES_NAMES)},
        superclass_names=SUPERCLASS_NAMES,
    )


@dataclass(frozen=True)
class Pose:
    """Rigid transform taking sensor-frame coordinates to world-frame."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise MalformedPoseError("pose contains non-finite values")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6) or abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise MalformedPoseError("rotation is not orthonormal with det +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        if m.shape == (12,):
            m = m.reshape(3, 4)
        if m.shape not in ((3, 4), (4, 4)):
            raise MalformedPoseError(f"pose matrix has shape {m.shape}")
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "Pose":
        c, s = np.cos(yaw), np.sin(yaw)
        return cls(np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]), translation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "Pose":
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def apply(self, xyz: np.ndarray) -> np.ndarray:
        return np.asarray(xyz, dtype=np.float64) @ self.rotation.T + self.translation


@dataclass(frozen=True)
class PointCloud:
    """One lidar scan: (N, 4) array of x, y, z, intensity."""

    points: np.ndarray
    scan_id: int = 0
    timestamp: float | None = None

    def __post_init__(self):
        pts = np.asarray(self.points)
        if pts.dtype not in (np.float32, np.float64):
            pts = pts.astype(np.float64)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise FormatError(f"points must have shape (N, 4), got {pts.shape}")
        if not np.all(np.isfinite(pts[:, :3])):
            raise FormatError(f"scan {self.scan_id} has non-finite coordinates")
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return self.points.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3]


def transform_to_world(cloud: PointCloud, pose: Pose) -> PointCloud:
    xyz = pose.apply(cloud.xyz)
    if not np.all(np.isfinite(xyz)):
        raise MalformedPoseError("transformed coordinates are not finite")
    out = np.empty((len(cloud), 4), dtype=np.float64)
    out[:, :3] = xyz
    out[:, 3] = cloud.intensity
    return PointCloud(out, cloud.scan_id, cloud.timestamp)


@dataclass(frozen=True)
class Sequence:
    """An ordered list of scans with their sensor-to-world poses."""

    seq_id: str
    clouds: tuple[PointCloud, ...]
    poses: tuple[Pose, ...]

    def __post_init__(self):
        object.__setattr__(self, "clouds", tuple(self.clouds))
        object.__setattr__(self, "poses", tuple(self.poses))
        if len(self.clouds) != len(self.poses):
            raise FormatError(f"{len(self.clouds)} scans but {len(self.poses)} poses")

    def __len__(self):
        return len(self.clouds)

    @property
    def sizes(self) -> list[int]:
        return [len(c) for c in self.clouds]

    @property
    def num_points(self) -> int:
        return sum(self.sizes)

    @cached_property
    def world_xyz(self) -> np.ndarray:
        """All points of the sequence in world coordinates, scan after scan."""
        if not self.clouds:
            return np.zeros((0, 3))
        out = np.concatenate([p.apply(c.xyz) for c, p in zip(self.clouds, self.poses)])
        if not np.all(np.isfinite(out)):
            raise MalformedPoseError("transformed coordinates are not finite")
        return out

    def subsequence(self, start: int, stop: int) -> "Sequence":
        return Sequence(self.seq_id, self.clouds[start:stop], self.poses[start:stop])


@dataclass(frozen=True)
class Labeling:
    """Per-scan label arrays of one sequence plus the stage that produced them."""

    labels: tuple[np.ndarray, ...]
    provenance: str

    def __post_init__(self):
        if not _PROVENANCE_RE.match(self.provenance):
            raise ConfigError(f"unknown provenance tag {self.provenance!r}")
        object.__setattr__(
            self, "labels", tuple(np.asarray(a, dtype=np.uint16).reshape(-1) for a in self.labels)
        )

    @classmethod
    def from_flat(cls, flat: np.ndarray, sizes: SequenceT[int], provenance: str) -> "Labeling":
        flat = np.asarray(flat)
        if flat.shape[0] != sum(sizes):
            raise FormatError(f"flat labeling has {flat.shape[0]} entries, expected {sum(sizes)}")
        bounds = np.cumsum([0, *sizes])
        return cls(tuple(flat[a:b] for a, b in zip(bounds[:-1], bounds[1:])), provenance)

    def __len__(self):
        return len(self.labels)

    @property
    def sizes(self) -> list[int]:
        return [a.shape[0] for a in self.labels]

    def flat(self) -> np.ndarray:
        if not self.labels:
            return np.zeros(0, dtype=np.uint16)
        return np.concatenate(self.labels)

    def with_provenance(self, provenance: str) -> "Labeling":
        return Labeling(self.labels, provenance)

    def validate(self, num_classes: int, sizes: SequenceT[int] | None = None) -> "Labeling":
        if sizes is not None and list(sizes) != self.sizes:
            raise FormatError(f"labeling sizes {self.sizes} do not match scans {list(sizes)}")
        for i, a in enumerate(self.labels):
            bad = (a >= num_classes) & (a != IGNORE_ID)
            if bad.any():
                raise FormatError(f"scan {i}: label {int(a[bad][0])} is neither a class id nor ignore")
        return self

    def equals(self, other: "Labeling") -> bool:
        return len(self) == len(other) and all(np.array_equal(a, b) for a, b in zip(self.labels, other.labels))


def voxel_key(point, voxel_size: float) -> tuple[int, int, int]:
    if voxel_size <= 0:
        raise ConfigError("voxel_size must be positive")
    p = np.asarray(point, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise FormatError("non-finite coordinate")
    return tuple(int(v) for v in np.floor(p / voxel_size))


def voxel_keys(xyz: np.ndarray, voxel_size: float) -> np.ndarray:
    """Integer (N, 3) voxel indices, floor(coordinate / voxel_size)."""
    if voxel_size <= 0:
        raise ConfigError("voxel_size must be positive")
    xyz = np.asarray(xyz, dtype=np.float64)
    if not np.all(np.isfinite(xyz)):
        raise FormatError("non-finite coordinate")
    return np.floor(xyz / voxel_size).astype(np.int64)


def pack_keys(ijk: np.ndarray) -> np.ndarray:
    """Pack (N, 3) voxel indices into one int64 per voxel.

    Packed order is lexicographic in (i, j, k).
    """
    ijk = np.asarray(ijk, dtype=np.int64)
    if ijk.size and (ijk.min() < -_KEY_OFFSET or ijk.max() >= _KEY_OFFSET):
        raise FormatError("voxel index exceeds the 21-bit packing range")
    s = ijk + _KEY_OFFSET
    return (s[:, 0] << (2 * _KEY_BITS)) | (s[:, 1] << _KEY_BITS) | s[:, 2]


def unpack_keys(packed: np.ndarray) -> np.ndarray:
    packed = np.asarray(packed, dtype=np.int64)
    out = np.empty((packed.shape[0], 3), dtype=np.int64)
    out[:, 0] = (packed >> (2 * _KEY_BITS)) & _KEY_MASK
    out[:, 1] = (packed >> _KEY_BITS) & _KEY_MASK
    out[:, 2] = packed & _KEY_MASK
    return out - _KEY_OFFSET


def class_counts(labels: Labeling | Iterable[Labeling], num_classes: int) -> dict[int, int]:
    """Points per class id over all scans; ignore is counted under IGNORE_ID."""
    if isinstance(labels, Labeling):
        labels = [labels]
    counts = np.zeros(num_classes + 1, dtype=np.int64)
    for lab in labels:
        for a in lab.labels:
            idx = np.where(a == IGNORE_ID, num_classes, a).astype(np.int64)
            counts += np.bincount(idx, minlength=num_classes + 1)[: num_classes + 1]
    out = {c: int(counts[c]) for c in range(num_classes)}
    out[IGNORE_ID] = int(counts[num_classes])
    return out
