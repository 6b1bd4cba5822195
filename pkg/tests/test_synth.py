from dataclasses import replace

import numpy as np
import pytest

from losc.core import IGNORE_ID, ConfigError, pack_keys, voxel_keys
from losc.projection import LabelMap
from losc.synth import (
    CAR,
    MANMADE,
    PEDESTRIAN,
    Box,
    NoiseModel,
    RigSpec,
    SceneSpec,
    corrupt,
    generate,
)
from losc.tbc import accumulate


def test_box_around_sensor_gives_one_class():
    spec = SceneSpec(n_scans=3, points_per_scan=2000, ground=False,
                     static_boxes=(Box((12, 0, 2), (50, 50, 50), MANMADE),), moving_boxes=())
    syn = generate(spec)
    assert set(np.concatenate(syn.semantic).tolist()) == {MANMADE}
    assert all(len(c) == 2000 for c in syn.sequence.clouds)


def test_generation_is_deterministic():
    spec = SceneSpec(seed=11, n_scans=2, points_per_scan=1500)
    a, b = generate(spec), generate(spec)
    for x, y in zip(a.sequence.clouds, b.sequence.clouds):
        np.testing.assert_array_equal(x.points, y.points)
    for x, y in zip(a.semantic + a.instance, b.semantic + b.instance):
        np.testing.assert_array_equal(x, y)
    c = generate(replace(spec, seed=12))
    assert not np.array_equal(a.sequence.clouds[0].points, c.sequence.clouds[0].points)


def test_fast_object_leaves_disjoint_voxels():
    car = Box((20, 6, 1.2), (4.5, 1.9, 1.6), CAR, velocity=(0, -12, 0))
    syn = generate(SceneSpec(n_scans=2, points_per_scan=20000, static_boxes=(), moving_boxes=(car,)))
    world = [p.apply(c.xyz) for c, p in zip(syn.sequence.clouds, syn.sequence.poses)]
    keys = [set(pack_keys(voxel_keys(w[s == CAR], 0.1)).tolist()) for w, s in zip(world, syn.semantic)]
    assert keys[0] and keys[1] and not keys[0] & keys[1]


def test_crossing_objects_mix_votes():
    a = Box((20, 5, 1.0), (1, 1, 1.5), PEDESTRIAN, velocity=(0, -10, 0))
    b = Box((20, -5, 1.0), (1, 1, 1.5), CAR, velocity=(0, 10, 0))
    syn = generate(SceneSpec(n_scans=3, points_per_scan=20000, static_boxes=(), moving_boxes=(a, b)))
    table = accumulate(syn.sequence, None, syn.gt, 0.1, num_classes=16)
    mixed = (table.votes[:, PEDESTRIAN] > 0) & (table.votes[:, CAR] > 0)
    assert mixed.any()


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_static_voxels_are_class_pure(seed):
    syn = generate(SceneSpec(seed=seed, n_scans=4, points_per_scan=8000))
    table = accumulate(syn.sequence, None, syn.gt, 0.1, num_classes=16)
    assert ((table.votes[:, :16] > 0).sum(axis=1) <= 1).all()


def test_each_pixel_sees_at_most_one_point(small_synthetic):
    assert small_synthetic.max_points_per_pixel == 1


def test_instances_only_on_things(small_synthetic):
    sem = np.concatenate(small_synthetic.semantic)
    inst = np.concatenate(small_synthetic.instance)
    assert (inst[sem >= 10] == 0).all()
    assert (inst[sem < 10] > 0).all()


def test_rig_layout():
    rig = RigSpec(n_cameras=4).build()
    assert len(rig) == 4
    fwd = [c.extrinsic.rotation[2] for c in rig]
    np.testing.assert_allclose(fwd[1], [0, 1, 0], atol=1e-12)


def _map(rng, shape=(200, 500)):
    return {0: LabelMap(rng.integers(0, 16, shape).astype(np.uint16))}


def test_corrupt_zero_noise_is_identity(rng):
    maps = _map(rng)
    out = corrupt(maps, NoiseModel(), 0)["identity"][0]
    np.testing.assert_array_equal(out.labels, maps[0].labels)


def test_corrupt_rates(rng):
    maps = _map(rng)
    dropped = corrupt(maps, NoiseModel(drop_rate=1.0), 0)["identity"][0].labels
    assert (dropped == IGNORE_ID).all()
    flipped = corrupt(maps, NoiseModel(flip_rate=0.3), 4)["identity"][0].labels
    assert (flipped != maps[0].labels).mean() == pytest.approx(0.3, abs=0.01)
    assert (flipped < 16).all()
    same = corrupt(maps, NoiseModel(flip_matrix=np.eye(16)), 0)["identity"][0].labels
    np.testing.assert_array_equal(same, maps[0].labels)


def test_corrupt_independence_and_alignment(rng):
    maps = _map(rng)
    augs = ("identity", "blur", "horizontal-flip")
    shared = corrupt(maps, NoiseModel(flip_rate=0.3, independent=False), 1, augs)
    np.testing.assert_array_equal(shared["blur"][0].labels, shared["identity"][0].labels)
    # variant maps are stored in augmented geometry
    np.testing.assert_array_equal(shared["horizontal-flip"][0].labels, shared["identity"][0].labels[:, ::-1])
    indep = corrupt(maps, NoiseModel(flip_rate=0.3), 1, augs)
    assert not np.array_equal(indep["blur"][0].labels, indep["identity"][0].labels)


def test_validation():
    with pytest.raises(ConfigError):
        SceneSpec(n_scans=0)
    with pytest.raises(ConfigError):
        SceneSpec(ground=False, static_boxes=(), moving_boxes=())
    with pytest.raises(ConfigError):
        NoiseModel(flip_rate=1.5)
    with pytest.raises(ConfigError):
        NoiseModel(flip_matrix=np.ones((2, 2)))
    with pytest.raises(ConfigError):
        NoiseModel(boundary_width=-1)
