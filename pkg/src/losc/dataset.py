"""Dataset manifests and self-describing stage artifacts."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from . import io
from .augmentation import AugmentationDescriptor, get_augmentation
from .core import ClassSet, FormatError, Labeling, Sequence
from .projection import CameraRig, LabelMap

MANIFEST_SCHEMA = "losc.manifest/1"
LABELING_SCHEMA = "losc.labeling/1"


@dataclass(frozen=True)
class ScanEntry:
    name: str
    points: Path
    labelmaps: Mapping[int, Mapping[str, Path]]
    gt: Path | None = None


@dataclass(frozen=True)
class SequenceEntry:
    seq_id: str
    poses: Path
    scans: tuple[ScanEntry, ...]

    @property
    def scan_names(self) -> list[str]:
        return [s.name for s in self.scans]


@dataclass(frozen=True)
class Dataset:
    root: Path
    classset: ClassSet
    rig: CameraRig
    base_augmentation: str
    augmentations: tuple[AugmentationDescriptor, ...]
    sequences: tuple[SequenceEntry, ...]

    @property
    def sequence_ids(self) -> list[str]:
        return [s.seq_id for s in self.sequences]

    def entry(self, seq_id: str) -> SequenceEntry:
        for s in self.sequences:
            if s.seq_id == seq_id:
                return s
        raise KeyError(seq_id)

    def load_sequence(self, seq_id: str) -> Sequence:
        e = self.entry(seq_id)
        poses = io.read_poses(e.poses)
        if len(poses) != len(e.scans):
            raise FormatError(f"sequence {seq_id}: {len(poses)} poses for {len(e.scans)} scans")
        clouds = tuple(io.read_points(s.points, i) for i, s in enumerate(e.scans))
        return Sequence(seq_id, clouds, tuple(poses))

    def load_sequences(self) -> list[Sequence]:
        return [self.load_sequence(s) for s in self.sequence_ids]

    def descriptor(self, aug_id: str) -> AugmentationDescriptor:
        for a in self.augmentations:
            if a.aug_id == aug_id:
                return a
        return get_augmentation(aug_id)

    def load_maps(self, seq_id: str, aug_ids: Iterable[str]) -> list[dict[str, dict[int, LabelMap]]]:
        """Per scan: ``{aug_id: {camera_id: LabelMap}}`` as stored (augmented geometry)."""
        aug_ids = list(aug_ids)
        out = []
        for i, s in enumerate(self.entry(seq_id).scans):
            per_aug = {}
            for aug in aug_ids:
                per_aug[aug] = {}
                for cam in self.rig.ids:
                    try:
                        path = s.labelmaps[cam][aug]
                    except KeyError:
                        raise FormatError(
                            f"sequence {seq_id} scan {s.name}: no label map for camera {cam}, augmentation {aug}"
                        ) from None
                    per_aug[aug][cam] = io.read_label_map(path, aug, cam, i)
            out.append(per_aug)
        return out

    def load_gt(self, seq_id: str) -> list[np.ndarray] | None:
        """Packed ground-truth words per scan, or None when the sequence has none."""
        scans = self.entry(seq_id).scans
        if any(s.gt is None for s in scans):
            return None
        return [io.read_label_words(s.gt) for s in scans]

    def has_gt(self) -> bool:
        return all(s.gt is not None for e in self.sequences for s in e.scans)


def _resolve(root: Path, value, what: str) -> Path:
    p = Path(value)
    p = p if p.is_absolute() else root / p
    if not p.exists():
        raise FormatError(f"{what} not found: {p}")
    return p


def load_manifest(path) -> Dataset:
    path = Path(path)
    data = io.read_json(path)
    if data.get("schema") != MANIFEST_SCHEMA:
        raise FormatError(f"{path}: expected schema {MANIFEST_SCHEMA!r}, got {data.get('schema')!r}")
    root = path.parent
    try:
        classes = data["classes"]
        calib = data["calibration"]
        seqs = data["sequences"]
    except KeyError as e:
        raise FormatError(f"{path}: missing field {e}") from e
    classset = ClassSet.from_json(classes if isinstance(classes, dict) else io.read_json(_resolve(root, classes, "class set")))
    rig = CameraRig.from_json(calib if isinstance(calib, dict) else io.read_json(_resolve(root, calib, "calibration")))
    augs = tuple(AugmentationDescriptor.from_json(a) for a in data.get("augmentations", []))
    base = data.get("base_augmentation", "identity")

    entries = []
    for s in seqs:
        scans = []
        for j, sc in enumerate(s["scans"]):
            pts = _resolve(root, sc["points"], "point file")
            maps = {
                int(cam): {aug: _resolve(root, p, "label map") for aug, p in by_aug.items()}
                for cam, by_aug in sc.get("labelmaps", {}).items()
            }
            gt = _resolve(root, sc["gt"], "ground-truth labels") if sc.get("gt") else None
            scans.append(ScanEntry(sc.get("name", pts.stem), pts, maps, gt))
        entries.append(SequenceEntry(str(s["id"]), _resolve(root, s["poses"], "pose file"), tuple(scans)))

    ds = Dataset(root, classset, rig, base, augs, tuple(entries))
    _check_augmentation_sets(ds)
    return ds


def _check_augmentation_sets(ds: Dataset):
    reference = None
    for e in ds.sequences:
        for s in e.scans:
            for cam, by_aug in s.labelmaps.items():
                ids = frozenset(by_aug)
                if reference is None:
                    reference = ids
                elif ids != reference:
                    raise FormatError(
                        f"sequence {e.seq_id} scan {s.name} camera {cam}: augmentation set "
                        f"{sorted(ids)} differs from {sorted(reference)}"
                    )


def write_manifest(path, data: dict):
    io.write_json(path, {"schema": MANIFEST_SCHEMA, **data})


def write_labelings(
    out_dir,
    labelings: Mapping[str, Labeling] | Mapping[str, list[np.ndarray]],
    dataset: Dataset,
    provenance: str | None = None,
    panoptic: bool = False,
    extra: dict | None = None,
) -> list[str]:
    """Write per-scan label files plus a ``labeling.json`` describing them."""
    out_dir = Path(out_dir)
    meta = {"schema": LABELING_SCHEMA, "provenance": provenance, "panoptic": panoptic, "sequences": {}}
    written = []
    for seq_id, lab in labelings.items():
        entry = dataset.entry(seq_id)
        if isinstance(lab, Labeling):
            meta["provenance"] = lab.provenance if provenance is None else provenance
            arrays = lab.labels
        else:
            arrays = lab
        if len(arrays) != len(entry.scans):
            raise FormatError(f"sequence {seq_id}: {len(arrays)} label arrays for {len(entry.scans)} scans")
        for name, arr in zip(entry.scan_names, arrays):
            p = out_dir / seq_id / f"{name}.label"
            io.write_label_words(p, np.asarray(arr).astype(np.uint32))
            written.append(str(p))
        meta["sequences"][seq_id] = {"scans": entry.scan_names, "sizes": [int(np.asarray(a).shape[0]) for a in arrays]}
    if meta["provenance"] is None:
        raise FormatError("stage artifacts need a provenance tag")
    if extra:
        meta.update(extra)
    io.write_json(out_dir / "labeling.json", meta)
    return written


def read_labeling_meta(in_dir) -> dict:
    p = Path(in_dir) / "labeling.json"
    if not p.exists():
        raise FormatError(f"{in_dir}: not a stage artifact directory (no labeling.json)")
    meta = io.read_json(p)
    if meta.get("schema") != LABELING_SCHEMA:
        raise FormatError(f"{p}: unexpected schema {meta.get('schema')!r}")
    return meta


def read_labelings(
    in_dir,
    dataset: Dataset,
    sequences: Mapping[str, Sequence] | None = None,
    expect_provenance: str | Iterable[str] | None = None,
) -> dict[str, Labeling]:
    """Read a semantic stage artifact, checking provenance and point counts."""
    meta = read_labeling_meta(in_dir)
    prov = meta["provenance"]
    if expect_provenance is not None:
        allowed = {expect_provenance} if isinstance(expect_provenance, str) else set(expect_provenance)
        if prov not in allowed:
            raise FormatError(f"{in_dir}: provenance {prov!r}, expected one of {sorted(allowed)}")
    out = {}
    for seq_id, info in meta["sequences"].items():
        entry = dataset.entry(seq_id)
        if info["scans"] != entry.scan_names:
            raise FormatError(f"{in_dir}: scans of sequence {seq_id} do not match the manifest")
        arrays = []
        for name, n in zip(info["scans"], info["sizes"]):
            sem, _ = io.read_labels(Path(in_dir) / seq_id / f"{name}.label")
            if sem.shape[0] != n:
                raise FormatError(f"{in_dir}/{seq_id}/{name}.label: {sem.shape[0]} labels, expected {n}")
            arrays.append(sem)
        lab = Labeling(tuple(arrays), prov)
        if sequences is not None and seq_id in sequences:
            if lab.sizes != sequences[seq_id].sizes:
                raise FormatError(f"{in_dir}: point counts of sequence {seq_id} do not match the scans")
        out[seq_id] = lab.validate(dataset.classset.num_classes)
    return out


def read_panoptic(in_dir, dataset: Dataset) -> dict[str, list[np.ndarray]]:
    meta = read_labeling_meta(in_dir)
    out = {}
    for seq_id, info in meta["sequences"].items():
        out[seq_id] = [
            io.read_label_words(Path(in_dir) / seq_id / f"{name}.label") for name in info["scans"]
        ]
        for a, n in zip(out[seq_id], info["sizes"]):
            if a.shape[0] != n:
                raise FormatError(f"{in_dir}: panoptic file size mismatch in sequence {seq_id}")
    return out
