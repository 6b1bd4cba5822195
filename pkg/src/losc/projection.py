"""Pinhole projection of lidar points and back-projection of 2D label maps."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence as SequenceT

import numpy as np

from .core import IGNORE_ID, ConfigError, FormatError, Labeling, PointCloud, Pose, Sequence

DEFAULT_DEPTH_TOLERANCE = 0.5


@dataclass(frozen=True)
class Camera:
    """Rectified pinhole camera; ``extrinsic`` maps lidar frame to camera frame."""

    camera_id: int
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsic: Pose

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigError(f"camera {self.camera_id}: focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ConfigError(f"camera {self.camera_id}: image size must be positive")

    def to_json(self) -> dict:
        return {
            "id": self.camera_id,
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "extrinsic": self.extrinsic.matrix()[:3].tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "Camera":
        try:
            return cls(
                int(d["id"]), float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                int(d["width"]), int(d["height"]), Pose.from_matrix(d["extrinsic"]),
            )
        except (KeyError, TypeError) as e:
            raise FormatError(f"malformed camera entry: {e}") from e


@dataclass(frozen=True)
class CameraRig:
    cameras: tuple[Camera, ...]

    def __post_init__(self):
        cams = tuple(sorted(self.cameras, key=lambda c: c.camera_id))
        ids = [c.camera_id for c in cams]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate camera ids {ids}")
        object.__setattr__(self, "cameras", cams)

    def __iter__(self):
        return iter(self.cameras)

    def __len__(self):
        return len(self.cameras)

    @property
    def ids(self) -> list[int]:
        return [c.camera_id for c in self.cameras]

    def to_json(self) -> dict:
        return {"schema": "losc.calibration/1", "cameras": [c.to_json() for c in self.cameras]}

    @classmethod
    def from_json(cls, d: dict) -> "CameraRig":
        if "cameras" not in d:
            raise FormatError("calibration has no 'cameras' list")
        return cls(tuple(Camera.from_json(c) for c in d["cameras"]))


@dataclass(frozen=True)
class LabelMap:
    labels: np.ndarray
    aug_id: str = "identity"
    camera_id: int = 0
    scan_id: int = 0

    def __post_init__(self):
        a = np.asarray(self.labels)
        if a.ndim != 2:
            raise FormatError(f"label map must be 2D, got shape {a.shape}")
        object.__setattr__(self, "labels", a.astype(np.uint16, copy=False))

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def height(self) -> int:
        return self.labels.shape[0]


@dataclass(frozen=True)
class Projection:
    visible: np.ndarray
    u: np.ndarray
    v: np.ndarray
    depth: np.ndarray
    width: int
    height: int

    def pixel_index(self) -> np.ndarray:
        return self.v.astype(np.int64) * self.width + self.u


def project(cloud: PointCloud | np.ndarray, camera: Camera) -> Projection:
    """Project points onto the image plane with round-half-up pixel lookup.

    Points behind the camera or outside the image are flagged invisible
    and carry ``u = v = -1``.
    """
    xyz = cloud.xyz if isinstance(cloud, PointCloud) else np.asarray(cloud)[:, :3]
    cam = camera.extrinsic.apply(xyz)
    z = cam[:, 2]
    front = z > 0
    u = np.full(z.shape, -1, dtype=np.int64)
    v = np.full(z.shape, -1, dtype=np.int64)
    zf = z[front]
    uf = np.floor(camera.fx * cam[front, 0] / zf + camera.cx + 0.5)
    vf = np.floor(camera.fy * cam[front, 1] / zf + camera.cy + 0.5)
    inside = (uf >= 0) & (uf < camera.width) & (vf >= 0) & (vf < camera.height)
    visible = np.zeros(z.shape, dtype=bool)
    idx = np.flatnonzero(front)[inside]
    visible[idx] = True
    u[idx] = uf[inside].astype(np.int64)
    v[idx] = vf[inside].astype(np.int64)
    return Projection(visible, u, v, z, camera.width, camera.height)


def occlusion_filter(proj: Projection, depth_tolerance: float = DEFAULT_DEPTH_TOLERANCE) -> Projection:
    """Keep a visible point iff its depth is within tolerance of its pixel's z-buffer."""
    if depth_tolerance < 0:
        raise ConfigError("depth_tolerance must be non-negative")
    idx = np.flatnonzero(proj.visible)
    if idx.size == 0:
        return proj
    pix = proj.pixel_index()[idx]
    depth = proj.depth[idx]
    zbuf = np.full(proj.width * proj.height, np.inf)
    np.minimum.at(zbuf, pix, depth)
    keep = depth <= zbuf[pix] + depth_tolerance
    visible = np.zeros_like(proj.visible)
    visible[idx[keep]] = True
    u = np.where(visible, proj.u, -1)
    v = np.where(visible, proj.v, -1)
    return Projection(visible, u, v, proj.depth, proj.width, proj.height)


def _check_map(m: LabelMap, camera: Camera):
    if m.width != camera.width or m.height != camera.height:
        raise FormatError(
            f"label map {m.width}x{m.height} does not match camera {camera.camera_id} "
            f"({camera.width}x{camera.height})"
        )


def _visible_projections(cloud, rig: CameraRig, depth_tolerance: float) -> list[Projection]:
    return [occlusion_filter(project(cloud, cam), depth_tolerance) for cam in rig]


def _owner_camera(projs: list[Projection], n: int) -> tuple[np.ndarray, np.ndarray]:
    """Per point, the rig index of the nearest camera that sees it (-1 if none).

    Ties in depth go to the camera listed first, i.e. the lowest camera id.
    """
    owner = np.full(n, -1, dtype=np.int64)
    best = np.full(n, np.inf)
    for ci, pr in enumerate(projs):
        better = pr.visible & (pr.depth < best)
        owner[better] = ci
        best[better] = pr.depth[better]
    return owner, best


def _read_labels(projs, owner, maps_by_cam: Mapping[int, LabelMap], rig: CameraRig) -> np.ndarray:
    out = np.full(owner.shape, IGNORE_ID, dtype=np.uint16)
    for ci, (cam, pr) in enumerate(zip(rig, projs)):
        sel = owner == ci
        if sel.any():
            out[sel] = maps_by_cam[cam.camera_id].labels[pr.v[sel], pr.u[sel]]
    return out


def backproject_labels(
    cloud: PointCloud,
    maps: Mapping[int, LabelMap] | SequenceT[LabelMap],
    rig: CameraRig,
    depth_tolerance: float = DEFAULT_DEPTH_TOLERANCE,
) -> np.ndarray:
    """Label every point from the camera that sees it closest; unseen points get ignore."""
    maps_by_cam = _index_maps(maps, rig)
    augs = {m.aug_id for m in maps_by_cam.values()}
    if len(augs) > 1:
        raise FormatError(f"label maps mix augmentations {sorted(augs)}")
    projs = _visible_projections(cloud, rig, depth_tolerance)
    owner, _ = _owner_camera(projs, len(cloud))
    return _read_labels(projs, owner, maps_by_cam, rig)


def backproject_variants(
    cloud: PointCloud,
    maps_by_aug: Mapping[str, Mapping[int, LabelMap]],
    rig: CameraRig,
    depth_tolerance: float = DEFAULT_DEPTH_TOLERANCE,
) -> dict[str, np.ndarray]:
    """Back-project several label-map variants of one scan, sharing the geometry."""
    projs = _visible_projections(cloud, rig, depth_tolerance)
    owner, _ = _owner_camera(projs, len(cloud))
    return {
        aug: _read_labels(projs, owner, _index_maps(maps, rig), rig)
        for aug, maps in maps_by_aug.items()
    }


def _index_maps(maps, rig: CameraRig) -> dict[int, LabelMap]:
    if isinstance(maps, Mapping):
        by_cam = {int(k): m for k, m in maps.items()}
    else:
        by_cam = {m.camera_id: m for m in maps}
    for cam in rig:
        if cam.camera_id not in by_cam:
            raise FormatError(f"missing label map for camera {cam.camera_id}")
        _check_map(by_cam[cam.camera_id], cam)
    return by_cam


def backproject_sequence(
    seq: Sequence,
    maps: SequenceT[Mapping[int, LabelMap]],
    rig: CameraRig,
    depth_tolerance: float = DEFAULT_DEPTH_TOLERANCE,
) -> Labeling:
    """L_vlm for a whole sequence; ``maps[i]`` holds scan i's maps keyed by camera id."""
    if len(maps) != len(seq):
        raise FormatError(f"{len(maps)} label-map sets for {len(seq)} scans")
    return Labeling(
        tuple(backproject_labels(c, m, rig, depth_tolerance) for c, m in zip(seq.clouds, maps)),
        "vlm",
    )
