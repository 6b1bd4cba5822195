"""Deterministic synthetic driving sequences with ground truth and noisy label maps.

Scenes are axis-aligned boxes on a ground plane. A spinning lidar is
simulated by casting a regular (ring x azimuth) ray grid; cameras share the
lidar's optical centre, and the default intrinsics make every lidar ray land
on its own pixel, so zero-noise label maps back-project exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence as SequenceT

import numpy as np
from scipy import ndimage

from . import io
from .augmentation import DEFAULT_AUGMENTATIONS, get_augmentation, realign
from .core import IGNORE_ID, ClassSet, ConfigError, Labeling, PointCloud, Pose, Sequence, nuscenes_classes
from .dataset import write_manifest
from .panoptic import pack_panoptic
from .projection import Camera, CameraRig, LabelMap, project

# nuScenes-style ids used by the procedural scene
BARRIER, BICYCLE, BUS, CAR, CONSTRUCTION, MOTORCYCLE, PEDESTRIAN, CONE, TRAILER, TRUCK = range(10)
ROAD, OTHER_FLAT, SIDEWALK, TERRAIN, MANMADE, VEGETATION = range(10, 16)

_SIZES = {
    CAR: (4.5, 1.9, 1.5), TRUCK: (8.0, 2.5, 3.2), BUS: (11.0, 2.8, 3.2),
    CONSTRUCTION: (6.0, 3.0, 3.5), TRAILER: (10.0, 2.5, 3.5), MOTORCYCLE: (2.0, 0.8, 1.3),
    BICYCLE: (1.7, 0.5, 1.1), PEDESTRIAN: (0.6, 0.6, 1.75), BARRIER: (2.0, 0.5, 1.0),
    CONE: (0.4, 0.4, 0.7),
}
_CLEARANCE = {CAR: 0.5, TRUCK: 0.6, BUS: 0.5, CONSTRUCTION: 0.6, TRAILER: 0.7}


@dataclass(frozen=True)
class Box:
    """Axis-aligned box; ``velocity`` (m/s) moves it linearly with time."""

    center: tuple[float, float, float]
    size: tuple[float, float, float]
    class_id: int
    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def bounds(self, t: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
        c = np.asarray(self.center) + t * np.asarray(self.velocity)
        h = np.asarray(self.size) / 2
        return c - h, c + h

    @property
    def moving(self) -> bool:
        return any(v != 0 for v in self.velocity)


@dataclass(frozen=True)
class RigSpec:
    n_cameras: int = 2
    width: int = 240
    height: int = 160
    hfov_deg: float = 90.0
    # lidar-frame camera centre; zero keeps every point on its own pixel
    offset: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def build(self) -> CameraRig:
        f = self.width / 2 / math.tan(math.radians(self.hfov_deg) / 2)
        cams = []
        for i in range(self.n_cameras):
            yaw = 2 * math.pi * i / self.n_cameras
            c, s = math.cos(yaw), math.sin(yaw)
            # camera axes in the lidar frame: x right, y down, z forward
            fwd = np.array([c, s, 0.0])
            right = np.array([s, -c, 0.0])
            down = np.array([0.0, 0.0, -1.0])
            R = np.stack([right, down, fwd])
            t = -R @ np.asarray(self.offset, dtype=np.float64)
            cams.append(Camera(i, f, f, self.width / 2, self.height / 2, self.width, self.height, Pose(R, t)))
        return CameraRig(tuple(cams))


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    extent: float = 100.0
    n_scans: int = 40
    points_per_scan: int = 20_000
    rings: int = 32
    elevation_deg: tuple[float, float] = (-25.0, -1.0)
    sensor_height: float = 1.8
    max_range: float = 120.0
    frame_rate: float = 2.0
    ego_speed: float = 5.0
    ego_weave: float = 0.8
    ground: bool = True
    # gap between generated objects and the ground, keeps voxels class-pure
    clearance: float = 0.2
    static_boxes: tuple[Box, ...] | None = None
    moving_boxes: tuple[Box, ...] | None = None
    rig: RigSpec = RigSpec()

    def __post_init__(self):
        if self.n_scans < 1:
            raise ConfigError("a scene needs at least one scan")
        if self.points_per_scan < 1 or self.rings < 1:
            raise ConfigError("points_per_scan and rings must be positive")
        if self.frame_rate <= 0:
            raise ConfigError("frame_rate must be positive")
        if not self.ground and self.static_boxes == () and self.moving_boxes == ():
            raise ConfigError("empty world: no ground and no boxes")


@dataclass(frozen=True)
class NoiseModel:
    """Label-map corruption emulating an imperfect 2D segmenter.

    Applied in order: boundary corruption, class flips, drop to ignore.
    """

    flip_rate: float = 0.0
    flip_matrix: np.ndarray | None = None
    drop_rate: float = 0.0
    independent: bool = True
    boundary_width: int = 0
    boundary_rate: float = 0.5

    def __post_init__(self):
        for name in ("flip_rate", "drop_rate", "boundary_rate"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.flip_matrix is not None:
            m = np.asarray(self.flip_matrix, dtype=np.float64)
            if m.ndim != 2 or m.shape[0] != m.shape[1] or (m < 0).any() or not np.allclose(m.sum(axis=1), 1):
                raise ConfigError("flip_matrix must be square and row-stochastic")
            object.__setattr__(self, "flip_matrix", m)
        if self.boundary_width < 0:
            raise ConfigError("boundary_width must be non-negative")

    @property
    def is_zero(self) -> bool:
        return self.flip_matrix is None and self.flip_rate == 0 and self.drop_rate == 0 and self.boundary_width == 0


@dataclass
class SyntheticSequence:
    sequence: Sequence
    semantic: list[np.ndarray]
    instance: list[np.ndarray]
    label_maps: list[dict[int, LabelMap]]
    rig: CameraRig
    max_points_per_pixel: int = 0

    @property
    def gt(self) -> Labeling:
        return Labeling(tuple(self.semantic), "gt")

    def gt_words(self) -> list[np.ndarray]:
        return [pack_panoptic(s, i) for s, i in zip(self.semantic, self.instance)]


def _rng(seed, *stream) -> np.random.Generator:
    return np.random.default_rng([seed, *stream])


def _ego_pose(spec: SceneSpec, t: float) -> Pose:
    x = 10.0 + spec.ego_speed * t
    k = 2 * math.pi / 60.0
    y = spec.ego_weave * math.sin(k * x)
    yaw = math.atan(spec.ego_weave * k * math.cos(k * x))
    return Pose.from_yaw(yaw, (x, y, spec.sensor_height))


def _procedural_static(spec: SceneSpec) -> list[Box]:
    rng = _rng(spec.seed, 0xB0)
    lift = spec.clearance
    lo, hi = -40.0, 10.0 + spec.ego_speed * spec.n_scans / spec.frame_rate + spec.extent
    boxes = []
    for side in (-1, 1):
        x = lo
        while x < hi:
            w, d, h = rng.uniform(8, 20), rng.uniform(6, 10), rng.uniform(5, 15)
            boxes.append(Box((x + w / 2, side * (13 + d / 2), lift + h / 2), (w, d, h), MANMADE))
            x += w + rng.uniform(2, 6)
        x = lo + rng.uniform(0, 5)
        while x < hi:
            s, h = rng.uniform(1.5, 2.5), rng.uniform(3, 6)
            boxes.append(Box((x, side * rng.uniform(9.5, 10.5), lift + h / 2), (s, s, h), VEGETATION))
            x += rng.uniform(5, 10)
        x = lo + rng.uniform(0, 8)
        kinds = [CAR, TRUCK, BUS, CONSTRUCTION, TRAILER, MOTORCYCLE, BICYCLE]
        probs = [0.62, 0.1, 0.05, 0.05, 0.05, 0.06, 0.07]
        while x < hi:
            c = kinds[rng.choice(len(kinds), p=probs)]
            L, W, H = _SIZES[c]
            z0 = max(_CLEARANCE.get(c, 0.0), lift)
            # inner edge clears the oncoming lane (|y| <= 2.95)
            boxes.append(Box((x + L / 2, side * (3.15 + W / 2), z0 + H / 2), (L, W, H), c))
            x += L + rng.uniform(2, 12)
        x = lo + rng.uniform(0, 5)
        while x < hi:
            r = rng.random()
            if r < 0.5:
                c, y = PEDESTRIAN, side * rng.uniform(7.0, 7.05)
            elif r < 0.8:
                c, y = BARRIER, side * 6.5
            else:
                c, y = CONE, side * 6.5
            L, W, H = _SIZES[c]
            boxes.append(Box((x, y, lift + H / 2), (L, W, H), c))
            x += rng.uniform(4, 14)
    return boxes


def _procedural_moving(spec: SceneSpec) -> list[Box]:
    rng = _rng(spec.seed, 0xB1)
    duration = spec.n_scans / spec.frame_rate
    boxes = []
    for _ in range(2):
        L, W, H = _SIZES[CAR]
        x0 = 10.0 + spec.ego_speed * duration * rng.uniform(0.5, 1.5) + 40
        boxes.append(Box((x0, 2.0, 0.5 + H / 2), (L, W, H), CAR, (-rng.uniform(6, 10), 0.0, 0.0)))
    L, W, H = _SIZES[PEDESTRIAN]
    # walks beside the static pedestrians, never through them
    y = -7.75
    boxes.append(Box((10.0 + rng.uniform(0, 40), y, spec.clearance + H / 2), (L, W, H), PEDESTRIAN, (1.2, 0.0, 0.0)))
    return boxes


def _ground_class(y: np.ndarray) -> np.ndarray:
    a = np.abs(y)
    return np.where(a < 5, ROAD, np.where(a < 8, SIDEWALK, TERRAIN)).astype(np.uint16)


def _ray_grid(spec: SceneSpec):
    A = -(-spec.points_per_scan // spec.rings)
    el = np.radians(np.linspace(spec.elevation_deg[0], spec.elevation_deg[1], spec.rings))
    az = 2 * np.pi * (np.arange(A) + 0.5) / A
    return el, az, A


def _cast(spec: SceneSpec, pose: Pose, boxes: list[Box], t: float, el, az, A):
    """Nearest hit per ray. Returns (hit distance, box index or -1 for ground) on the ray grid."""
    R = spec.rings
    ce, se = np.cos(el)[:, None], np.sin(el)[:, None]
    d_sensor = np.stack(np.broadcast_arrays(ce * np.cos(az), ce * np.sin(az), se), axis=-1)  # (R, A, 3)
    d = d_sensor @ pose.rotation.T
    o = pose.translation
    best = np.full((R, A), np.inf)
    owner = np.full((R, A), -2, dtype=np.int64)
    if spec.ground:
        dz = d[..., 2]
        with np.errstate(divide="ignore"):
            tg = np.where(dz < 0, -o[2] / dz, np.inf)
        hit = tg <= spec.max_range
        best[hit] = tg[hit]
        owner[hit] = -1
    yaw = math.atan2(pose.rotation[1, 0], pose.rotation[0, 0])
    safe = np.where(np.abs(d) < 1e-12, 1e-12, d)
    inv = 1.0 / safe
    for bi, box in enumerate(boxes):
        lo, hi = box.bounds(t)
        near = np.clip(o, lo, hi)
        if np.linalg.norm(near - o) > spec.max_range:
            continue
        cols = _azimuth_columns(o, lo, hi, yaw, A)
        if cols is None:
            sub_inv, idx = inv.reshape(-1, 3), None
        else:
            sub_inv = inv[:, cols].reshape(-1, 3)
        t1 = (lo - o) * sub_inv
        t2 = (hi - o) * sub_inv
        tmin = np.minimum(t1, t2).max(axis=1)
        tmax = np.maximum(t1, t2).min(axis=1)
        th = np.where(tmin > 0, tmin, tmax)
        ok = (tmax >= np.maximum(tmin, 0)) & (th > 0) & (th <= spec.max_range)
        if cols is None:
            cur = best.reshape(-1)
            own = owner.reshape(-1)
            upd = ok & (th < cur)
            cur[upd] = th[upd]
            own[upd] = bi
        else:
            th = th.reshape(R, len(cols))
            ok = ok.reshape(R, len(cols))
            sub_best = best[:, cols]
            upd = ok & (th < sub_best)
            rr, cc = np.nonzero(upd)
            best[rr, cols[cc]] = th[rr, cc]
            owner[rr, cols[cc]] = bi
    return best, owner, d


def _azimuth_columns(o, lo, hi, yaw, A):
    """Ray-grid columns whose azimuth can meet the box footprint, or None for all."""
    if lo[0] <= o[0] <= hi[0] and lo[1] <= o[1] <= hi[1]:
        return None
    cx, cy = (lo[0] + hi[0]) / 2 - o[0], (lo[1] + hi[1]) / 2 - o[1]
    ac = math.atan2(cy, cx)
    rel = []
    for x in (lo[0], hi[0]):
        for y in (lo[1], hi[1]):
            a = math.atan2(y - o[1], x - o[0]) - ac
            rel.append((a + math.pi) % (2 * math.pi) - math.pi)
    step = 2 * math.pi / A
    a0 = ac + min(rel) - yaw - step
    a1 = ac + max(rel) - yaw + step
    j0 = math.floor(a0 / step - 0.5)
    j1 = math.ceil(a1 / step - 0.5)
    return np.arange(j0, j1 + 1) % A


def _render_maps(cloud: PointCloud, semantic: np.ndarray, rig: CameraRig) -> tuple[dict[int, LabelMap], int]:
    """Splat ground-truth points (nearest wins) and fill empty pixels from the nearest splat."""
    maps = {}
    max_mult = 0
    for cam in rig:
        pr = project(cloud, cam)
        idx = np.flatnonzero(pr.visible)
        img = np.full((cam.height, cam.width), IGNORE_ID, dtype=np.uint16)
        if idx.size:
            pix = pr.pixel_index()[idx]
            max_mult = max(max_mult, int(np.bincount(pix).max()))
            order = np.argsort(-pr.depth[idx], kind="stable")
            flat = img.reshape(-1)
            flat[pix[order]] = semantic[idx[order]]
            empty = img == IGNORE_ID
            if empty.any():
                _, (iy, ix) = ndimage.distance_transform_edt(empty, return_indices=True)
                img = img[iy, ix]
        maps[cam.camera_id] = LabelMap(img, "identity", cam.camera_id, cloud.scan_id)
    return maps, max_mult


def generate(spec: SceneSpec, seq_id: str = "00") -> SyntheticSequence:
    """Scans, poses, ground-truth semantic/instance labels and rendered label maps."""
    static = list(spec.static_boxes) if spec.static_boxes is not None else _procedural_static(spec)
    moving = list(spec.moving_boxes) if spec.moving_boxes is not None else _procedural_moving(spec)
    boxes = static + moving
    if not spec.ground and not boxes:
        raise ConfigError("empty world: no ground and no boxes")
    rig = spec.rig.build()
    el, az, A = _ray_grid(spec)
    clouds, poses, sems, insts, maps = [], [], [], [], []
    max_mult = 0
    for s in range(spec.n_scans):
        t = s / spec.frame_rate
        pose = _ego_pose(spec, t)
        best, owner, d = _cast(spec, pose, boxes, t, el, az, A)
        valid = np.isfinite(best).reshape(-1)[: spec.points_per_scan]
        flat_best = best.reshape(-1)[: spec.points_per_scan][valid]
        flat_owner = owner.reshape(-1)[: spec.points_per_scan][valid]
        flat_d = d.reshape(-1, 3)[: spec.points_per_scan][valid]
        world = pose.translation + flat_best[:, None] * flat_d
        # classify from the stored float32 coordinates so labels agree with any re-derived voxel keys
        sensor = pose.inverse().apply(world).astype(np.float32)
        world = pose.apply(sensor)
        sem = np.empty(flat_owner.shape[0], dtype=np.uint16)
        ground = flat_owner == -1
        sem[ground] = _ground_class(world[ground, 1])
        box_cls = np.array([b.class_id for b in boxes] or [0], dtype=np.uint16)
        sem[~ground] = box_cls[flat_owner[~ground]]
        inst = _instances(flat_owner, boxes)
        rng = _rng(spec.seed, 0x1A, s)
        pts = np.empty((sensor.shape[0], 4), dtype=np.float32)
        pts[:, :3] = sensor
        pts[:, 3] = rng.uniform(0, 1, sensor.shape[0])
        cloud = PointCloud(pts, s, t)
        m, mult = _render_maps(cloud, sem, rig)
        max_mult = max(max_mult, mult)
        clouds.append(cloud)
        poses.append(pose)
        sems.append(sem)
        insts.append(inst)
        maps.append(m)
    return SyntheticSequence(Sequence(seq_id, tuple(clouds), tuple(poses)), sems, insts, maps, rig, max_mult)


def _instances(owner: np.ndarray, boxes: list[Box]) -> np.ndarray:
    inst = np.zeros(owner.shape[0], dtype=np.uint16)
    thing = np.array([b.class_id < ROAD for b in boxes] or [False])
    is_thing = (owner >= 0) & thing[np.maximum(owner, 0)]
    idx = np.flatnonzero(is_thing)
    if idx.size:
        _, first, inv = np.unique(owner[idx], return_index=True, return_inverse=True)
        rank = np.empty(first.size, dtype=np.int64)
        rank[np.argsort(first, kind="stable")] = np.arange(1, first.size + 1)
        inst[idx] = rank[inv]
    return inst


def _corrupt_labels(labels: np.ndarray, model: NoiseModel, rng: np.random.Generator, num_classes: int) -> np.ndarray:
    out = labels.copy()
    valid = out != IGNORE_ID
    if model.boundary_width > 0:
        w = model.boundary_width
        size = 2 * w + 1
        real = np.where(valid, out, 0).astype(np.int32)
        edge = (ndimage.maximum_filter(real, size) != ndimage.minimum_filter(real, size)) & valid
        hit = edge & (rng.random(out.shape) < model.boundary_rate)
        ys, xs = np.nonzero(hit)
        oy = np.clip(ys + rng.integers(-w, w + 1, ys.size), 0, out.shape[0] - 1)
        ox = np.clip(xs + rng.integers(-w, w + 1, xs.size), 0, out.shape[1] - 1)
        out[ys, xs] = labels[oy, ox]
        valid = out != IGNORE_ID
    if model.flip_matrix is not None:
        m = model.flip_matrix
        idx = np.flatnonzero(valid.reshape(-1))
        cdf = np.cumsum(m, axis=1)
        u = rng.random(idx.size)
        src = out.reshape(-1)[idx].astype(np.int64)
        new = (u[:, None] > cdf[src]).sum(axis=1)
        out.reshape(-1)[idx] = np.minimum(new, m.shape[0] - 1)
    elif model.flip_rate > 0 and num_classes > 1:
        flip = valid & (rng.random(out.shape) < model.flip_rate)
        shift = rng.integers(1, num_classes, size=int(flip.sum()))
        out[flip] = ((out[flip].astype(np.int64) + shift) % num_classes).astype(np.uint16)
    if model.drop_rate > 0:
        out[rng.random(out.shape) < model.drop_rate] = IGNORE_ID
    return out


def corrupt(
    maps: Mapping[int, LabelMap],
    model: NoiseModel,
    seed,
    aug_ids: SequenceT[str] = ("identity",),
    num_classes: int = 16,
) -> dict[str, dict[int, LabelMap]]:
    """Noisy label-map variants per augmentation, in augmented (not original) geometry.

    With ``model.independent`` each augmentation draws its own noise;
    otherwise all variants share one corruption.
    """
    seed = list(np.atleast_1d(seed))
    out = {}
    for a_i, aug in enumerate(aug_ids):
        desc = get_augmentation(aug)
        stream = a_i if model.independent else 0
        per_cam = {}
        for cam, m in sorted(maps.items()):
            rng = _rng(*seed, 0xC0, stream, int(cam))
            lab = m.labels if model.is_zero else _corrupt_labels(m.labels, model, rng, num_classes)
            per_cam[cam] = realign(LabelMap(lab, aug, m.camera_id, m.scan_id), desc)
        out[aug] = per_cam
    return out


# Defaults for the desk corpus: a systematic error shared by all variants, plus
# small independent per-augmentation noise.
DEFAULT_SHARED_NOISE = NoiseModel(flip_rate=0.15, drop_rate=0.05, boundary_width=2, independent=False)
DEFAULT_VARIANT_NOISE = NoiseModel(flip_rate=0.03, drop_rate=0.01, independent=True)


def make_variants(
    gt_maps: Mapping[int, LabelMap],
    shared: NoiseModel,
    variant: NoiseModel,
    seed,
    aug_ids: SequenceT[str],
    num_classes: int = 16,
) -> dict[str, dict[int, LabelMap]]:
    seed = list(np.atleast_1d(seed))
    base = corrupt(gt_maps, replace(shared, independent=False), [*seed, 1], ("identity",), num_classes)["identity"]
    return corrupt(base, variant, [*seed, 2], aug_ids, num_classes)


@dataclass(frozen=True)
class CorpusSpec:
    n_sequences: int = 4
    scene: SceneSpec = SceneSpec()
    shared_noise: NoiseModel = DEFAULT_SHARED_NOISE
    variant_noise: NoiseModel = DEFAULT_VARIANT_NOISE
    augmentations: tuple[str, ...] = DEFAULT_AUGMENTATIONS
    base_augmentation: str = "identity"
    seed: int = 0


def generate_corpus(spec: CorpusSpec) -> list[SyntheticSequence]:
    return [
        generate(replace(spec.scene, seed=spec.seed * 1000 + i), f"{i:02d}") for i in range(spec.n_sequences)
    ]


def write_dataset(
    out_dir,
    corpus: SequenceT[SyntheticSequence],
    spec: CorpusSpec = CorpusSpec(),
    classset: ClassSet | None = None,
) -> Path:
    """Write the on-disk layout the CLI consumes and return the manifest path."""
    out = Path(out_dir)
    classset = classset or nuscenes_classes()
    io.write_json(out / "classes.json", classset.to_json())
    rig = corpus[0].rig
    io.write_calibration(out / "calibration.json", rig)
    aug_ids = list(dict.fromkeys([spec.base_augmentation, *spec.augmentations]))
    seqs = []
    for si, syn in enumerate(corpus):
        seq = syn.sequence
        sdir = Path("sequences") / seq.seq_id
        io.write_poses(out / sdir / "poses.txt", seq.poses)
        scans = []
        for j, (cloud, words, gt_maps) in enumerate(zip(seq.clouds, syn.gt_words(), syn.label_maps)):
            name = f"{j:06d}"
            io.write_points(out / sdir / "velodyne" / f"{name}.bin", cloud)
            io.write_label_words(out / sdir / "labels" / f"{name}.label", words)
            variants = make_variants(
                gt_maps, spec.shared_noise, spec.variant_noise, [spec.seed, si, j], aug_ids, classset.num_classes
            )
            lm = {}
            for aug, per_cam in variants.items():
                for cam, m in per_cam.items():
                    rel = sdir / "labelmaps" / name / str(cam) / f"{aug}.png"
                    io.write_label_map(out / rel, m)
                    lm.setdefault(str(cam), {})[aug] = str(rel)
            scans.append({
                "name": name,
                "points": str(sdir / "velodyne" / f"{name}.bin"),
                "gt": str(sdir / "labels" / f"{name}.label"),
                "labelmaps": lm,
            })
        seqs.append({"id": seq.seq_id, "poses": str(sdir / "poses.txt"), "scans": scans})
    path = out / "manifest.json"
    write_manifest(path, {
        "classes": "classes.json",
        "calibration": "calibration.json",
        "base_augmentation": spec.base_augmentation,
        "augmentations": list(spec.augmentations),
        "sequences": seqs,
    })
    return path
