"""On-disk formats: KITTI-style points, labels, poses; JSON calibration; 16-bit PNG label maps."""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
from PIL import Image

from .core import FormatError, PointCloud, Pose
from .projection import CameraRig, LabelMap


def read_points(path, scan_id: int = 0) -> PointCloud:
    raw = np.fromfile(path, dtype="<f4")
    if raw.size % 4:
        raise FormatError(f"{path}: size is not a multiple of 16 bytes")
    return PointCloud(raw.reshape(-1, 4), scan_id)


def write_points(path, cloud: PointCloud | np.ndarray):
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    pts.astype("<f4").tofile(path)


def read_labels(path) -> tuple[np.ndarray, np.ndarray]:
    """Return (semantic uint16, instance uint16) from a 32-bit label file."""
    raw = np.fromfile(path, dtype="<u4")
    return (raw & 0xFFFF).astype(np.uint16), (raw >> 16).astype(np.uint16)


def read_label_words(path) -> np.ndarray:
    return np.fromfile(path, dtype="<u4")


def write_labels(path, semantic: np.ndarray, instance: np.ndarray | None = None):
    words = np.asarray(semantic).astype(np.uint32)
    if instance is not None:
        words = words | (np.asarray(instance).astype(np.uint32) << 16)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    words.astype("<u4").tofile(path)


def write_label_words(path, words: np.ndarray):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    np.asarray(words).astype("<u4").tofile(path)


def read_poses(path) -> list[Pose]:
    poses = []
    with open(path) as f:
        for n, line in enumerate(f, 1):
            if not line.strip():
                continue
            vals = line.split()
            if len(vals) != 12:
                raise FormatError(f"{path}:{n}: expected 12 values, got {len(vals)}")
            poses.append(Pose.from_matrix(np.array(vals, dtype=np.float64)))
    return poses


def write_poses(path, poses):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for p in poses:
            f.write(" ".join(repr(float(x)) for x in p.matrix()[:3].reshape(-1)) + "\n")


def read_json(path) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: {e}") from e


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        x = x.item()
    if isinstance(x, float) and not math.isfinite(x):
        # strict JSON has no NaN/inf
        return None if math.isnan(x) else ("inf" if x > 0 else "-inf")
    return x


def write_json(path, data):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(_jsonable(data), f, indent=2, allow_nan=False)
        f.write("\n")


def read_calibration(path) -> CameraRig:
    return CameraRig.from_json(read_json(path))


def write_calibration(path, rig: CameraRig):
    write_json(path, rig.to_json())


def read_label_map(path, aug_id="identity", camera_id=0, scan_id=0) -> LabelMap:
    with Image.open(path) as im:
        if im.mode not in ("I;16", "I;16B", "I;16L", "I", "L"):
            raise FormatError(f"{path}: expected a single-channel 16-bit PNG, got mode {im.mode}")
        arr = np.array(im)
    return LabelMap(arr.astype(np.uint16), aug_id, camera_id, scan_id)


def write_label_map(path, label_map: LabelMap | np.ndarray):
    arr = label_map.labels if isinstance(label_map, LabelMap) else np.asarray(label_map)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr.astype(np.uint16)).save(path, format="PNG", compress_level=1)
