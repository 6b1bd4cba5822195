"""Augmentation-based consolidation (unanimity over label-map variants)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence as SequenceT

import numpy as np

from .core import IGNORE_ID, ConfigError, FormatError, Labeling, Sequence
from .projection import DEFAULT_DEPTH_TOLERANCE, CameraRig, LabelMap, backproject_variants
from .tbc import DEFAULT_VOXEL_SIZE, tbc

HFLIP = "hflip"
_INVERSES = (HFLIP,)


@dataclass(frozen=True)
class AugmentationDescriptor:
    aug_id: str
    geometric: bool = False
    inverse: str | None = None

    def __post_init__(self):
        if self.geometric and self.inverse not in _INVERSES:
            raise ConfigError(f"geometric augmentation {self.aug_id!r} has no supported inverse")

    def to_json(self):
        return {"id": self.aug_id, "geometric": self.geometric, "inverse": self.inverse}

    @classmethod
    def from_json(cls, d) -> "AugmentationDescriptor":
        if isinstance(d, str):
            return get_augmentation(d)
        return cls(str(d["id"]), bool(d.get("geometric", False)), d.get("inverse"))


# The ten image transformations used for consolidation; only the flip moves pixels.
DEFAULT_AUGMENTATIONS = (
    "horizontal-flip", "hue-saturation", "blur", "color-jitter", "auto-contrast",
    "sharpen", "chromatic-aberration", "emboss", "fancy-pca", "clahe",
)

_REGISTRY = {a: AugmentationDescriptor(a) for a in ("identity", *DEFAULT_AUGMENTATIONS)}
_REGISTRY["horizontal-flip"] = AugmentationDescriptor("horizontal-flip", True, HFLIP)


def get_augmentation(aug_id: str) -> AugmentationDescriptor:
    try:
        return _REGISTRY[aug_id]
    except KeyError:
        raise ConfigError(
            f"unknown augmentation {aug_id!r}; declare it with an explicit descriptor"
        ) from None


def _flip(labels: np.ndarray, aug: AugmentationDescriptor) -> np.ndarray:
    if not aug.geometric:
        return labels
    if aug.inverse == HFLIP:
        return labels[:, ::-1].copy()
    raise ConfigError(f"unknown geometric augmentation {aug.aug_id!r}")


def dealign(label_map: LabelMap, aug: AugmentationDescriptor) -> LabelMap:
    """Bring a map predicted on an augmented image back to the original pixel grid."""
    return LabelMap(_flip(label_map.labels, aug), label_map.aug_id, label_map.camera_id, label_map.scan_id)


def realign(label_map: LabelMap, aug: AugmentationDescriptor) -> LabelMap:
    """Forward pixel mapping (horizontal flip is its own inverse)."""
    return dealign(label_map, aug)


def unanimity(variants: SequenceT[Labeling]) -> Labeling:
    """Keep a point's label only if every variant agrees on it."""
    if not variants:
        raise ConfigError("unanimity needs at least one variant")
    sizes = variants[0].sizes
    for v in variants[1:]:
        if v.sizes != sizes:
            raise FormatError(f"variant sizes {v.sizes} differ from {sizes}")
    out = []
    for scan in range(len(sizes)):
        first = variants[0].labels[scan]
        agree = np.ones(first.shape, dtype=bool)
        for v in variants[1:]:
            agree &= v.labels[scan] == first
        out.append(np.where(agree, first, np.uint16(IGNORE_ID)).astype(np.uint16))
    return Labeling(tuple(out), "abc")


def backproject_augmented(
    seq: Sequence,
    maps: SequenceT[Mapping[str, Mapping[int, LabelMap]]],
    rig: CameraRig,
    augmentations: SequenceT[AugmentationDescriptor],
    depth_tolerance: float = DEFAULT_DEPTH_TOLERANCE,
) -> dict[str, Labeling]:
    """One L_vlm per augmentation; ``maps[i][aug_id][camera_id]`` as predicted on augmented images."""
    if len(maps) != len(seq):
        raise FormatError(f"{len(maps)} label-map sets for {len(seq)} scans")
    ids = [a.aug_id for a in augmentations]
    per_aug = {a: [] for a in ids}
    for cloud, scan_maps in zip(seq.clouds, maps):
        missing = set(ids) - set(scan_maps)
        if missing:
            raise FormatError(f"scan {cloud.scan_id} lacks augmentations {sorted(missing)}")
        aligned = {
            a.aug_id: {c: dealign(m, a) for c, m in scan_maps[a.aug_id].items()} for a in augmentations
        }
        for aug_id, labels in backproject_variants(cloud, aligned, rig, depth_tolerance).items():
            per_aug[aug_id].append(labels)
    return {a: Labeling(tuple(v), "vlm") for a, v in per_aug.items()}


def build_l_abc(seq, maps, rig, augmentations, depth_tolerance=DEFAULT_DEPTH_TOLERANCE) -> Labeling:
    variants = backproject_augmented(seq, maps, rig, augmentations, depth_tolerance)
    return unanimity(list(variants.values()))


def build_l_aug(
    seq: Sequence,
    maps,
    rig: CameraRig,
    augmentations: SequenceT[AugmentationDescriptor],
    voxel_size: float = DEFAULT_VOXEL_SIZE,
    depth_tolerance: float = DEFAULT_DEPTH_TOLERANCE,
    num_classes: int | None = None,
    window_length: int | None = None,
) -> Labeling:
    """dealign -> back-project per augmentation -> unanimity -> TBC."""
    l_abc = build_l_abc(seq, maps, rig, augmentations, depth_tolerance)
    return tbc(seq, l_abc, voxel_size, window_length=window_length, num_classes=num_classes).with_provenance("aug")
