import math

import numpy as np
import pytest

from losc.core import IGNORE_ID, ConfigError, FormatError, PointCloud, Pose
from losc.projection import (
    Camera,
    CameraRig,
    LabelMap,
    backproject_labels,
    backproject_sequence,
    occlusion_filter,
    project,
)

# camera looking along lidar +x: cam_x = -y, cam_y = -z, cam_z = x
FORWARD = Pose(np.array([[0.0, -1, 0], [0, 0, -1], [1, 0, 0]]), np.zeros(3))


def cam(cid=0, extrinsic=FORWARD, w=20, h=10):
    return Camera(cid, 10.0, 10.0, 10.0, 5.0, w, h, extrinsic)


def cloud(xyz):
    pts = np.zeros((len(xyz), 4))
    pts[:, :3] = xyz
    return PointCloud(pts)


def test_project_hand_example():
    # (x=5, y=-1, z=0.5) -> cam (1, -0.5, 5) -> u = 10*1/5 + 10 = 12, v = 10*(-0.5)/5 + 5 = 4
    pr = project(cloud([[5, -1, 0.5]]), cam())
    assert pr.visible[0] and (pr.u[0], pr.v[0]) == (12, 4)
    assert pr.depth[0] == 5


def test_project_rounds_half_up():
    # u = 10 * 0.25 / 1 + 10 = 12.5 -> 13; v = 4.5 -> 5
    pr = project(cloud([[1, -0.25, 0.05]]), cam())
    assert (pr.u[0], pr.v[0]) == (13, 5)


def test_project_invisible_points():
    pr = project(cloud([[-5, 0, 0], [5, -100, 0], [0, 0, 0]]), cam())
    assert not pr.visible.any()
    assert (pr.u == -1).all() and (pr.v == -1).all()


def test_occlusion_filter_tolerance():
    pts = [[5, 0, 0], [5.4, 0, 0], [6, 0, 0]]
    pr = occlusion_filter(project(cloud(pts), cam()), 0.5)
    assert pr.visible.tolist() == [True, True, False]
    assert occlusion_filter(project(cloud(pts), cam()), 0.0).visible.tolist() == [True, False, False]
    with pytest.raises(ConfigError):
        occlusion_filter(pr, -1)


def _brute_backproject(xyz, maps, rig, tol):
    """Per-point reference: z-buffer per camera, then the nearest visible camera, lowest id on ties."""
    n = len(xyz)
    best = [(math.inf, None, None)] * n
    for c in rig:
        zbuf = {}
        rows = []
        for i, p in enumerate(xyz):
            q = c.extrinsic.rotation @ p + c.extrinsic.translation
            if q[2] <= 0:
                rows.append(None)
                continue
            u = math.floor(c.fx * q[0] / q[2] + c.cx + 0.5)
            v = math.floor(c.fy * q[1] / q[2] + c.cy + 0.5)
            if not (0 <= u < c.width and 0 <= v < c.height):
                rows.append(None)
                continue
            rows.append((u, v, q[2]))
            zbuf[(u, v)] = min(zbuf.get((u, v), math.inf), q[2])
        for i, r in enumerate(rows):
            if r is None or r[2] > zbuf[(r[0], r[1])] + tol:
                continue
            if r[2] < best[i][0]:
                best[i] = (r[2], c.camera_id, (r[0], r[1]))
    out = np.full(n, IGNORE_ID, dtype=np.uint16)
    for i, (_, cid, uv) in enumerate(best):
        if cid is not None:
            out[i] = maps[cid].labels[uv[1], uv[0]]
    return out


def test_backproject_matches_brute_force(rng):
    back = Pose(np.array([[0.0, 1, 0], [0, 0, -1], [-1, 0, 0]]), np.array([0.0, 0.3, 0]))
    rig = CameraRig((cam(0), cam(1, back), cam(2, Pose(FORWARD.rotation, [0.2, 0, 0.1]))))
    for trial in range(5):
        xyz = rng.uniform(-8, 8, (400, 3))
        xyz[:50] = xyz[50:100] * 1.3  # collinear pairs create occlusion
        maps = {c.camera_id: LabelMap(rng.integers(0, 7, (10, 20)), "identity", c.camera_id) for c in rig}
        got = backproject_labels(cloud(xyz), maps, rig, 0.5)
        np.testing.assert_array_equal(got, _brute_backproject(xyz, maps, rig, 0.5))


def test_nearest_camera_wins_and_ties_go_to_lowest_id():
    rig = CameraRig((cam(1), cam(0)))  # same pose: equal depth
    maps = {0: LabelMap(np.full((10, 20), 3)), 1: LabelMap(np.full((10, 20), 4), camera_id=1)}
    assert backproject_labels(cloud([[5, 0, 0]]), maps, rig)[0] == 3
    near = Pose(FORWARD.rotation, FORWARD.rotation @ np.array([-2.0, 0, 0]))  # camera 2 m ahead
    rig = CameraRig((cam(0), cam(1, near)))
    assert backproject_labels(cloud([[5, 0, 0]]), maps, rig)[0] == 4


def test_backproject_errors():
    rig = CameraRig((cam(0), cam(1)))
    with pytest.raises(FormatError):
        backproject_labels(cloud([[5, 0, 0]]), {0: LabelMap(np.zeros((10, 20)))}, rig)
    with pytest.raises(FormatError):
        backproject_labels(cloud([[5, 0, 0]]), {0: LabelMap(np.zeros((9, 20))), 1: LabelMap(np.zeros((10, 20)))}, rig)
    with pytest.raises(FormatError):
        backproject_labels(
            cloud([[5, 0, 0]]),
            {0: LabelMap(np.zeros((10, 20)), "blur"), 1: LabelMap(np.zeros((10, 20)), "identity", 1)},
            rig,
        )
    with pytest.raises(ConfigError):
        CameraRig((cam(0), cam(0)))


def test_point_outside_every_frustum_is_ignore():
    rig = CameraRig((cam(0),))
    out = backproject_labels(cloud([[-5, 0, 0], [5, 0, 0]]), {0: LabelMap(np.full((10, 20), 2))}, rig)
    assert out.tolist() == [IGNORE_ID, 2]


def test_synthetic_round_trip_is_exact(small_synthetic):
    syn = small_synthetic
    lab = backproject_sequence(syn.sequence, syn.label_maps, syn.rig)
    assert lab.provenance == "vlm"
    flat, gt = lab.flat(), np.concatenate(syn.semantic)
    vis = flat != IGNORE_ID
    assert vis.mean() > 0.3
    np.testing.assert_array_equal(flat[vis], gt[vis])
