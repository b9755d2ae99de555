import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ffkit.errors import NonPositiveDepth
from ffkit.geometry import (
    Box2D,
    Box3D,
    ProjectionMatrix,
    bev_corners,
    box2d_from_box3d,
    box3d_corners,
    point_in_box2d,
    points_in_box3d,
    project_box3d,
    project_cloud,
    project_point,
    rot_y,
    wrap_angle,
)

finite = st.floats(-50, 50, allow_nan=False)
angles = st.floats(-20, 20, allow_nan=False)
sizes = st.floats(0.1, 10)


@pytest.fixture
def cam100():
    return ProjectionMatrix.from_intrinsics(100.0, 100.0, 50.0, 50.0)


def kitti_like(rng):
    p = np.array([[721.5, 0.0, 609.6, 44.9], [0.0, 721.5, 172.9, 0.2], [0.0, 0.0, 1.0, 0.003]])
    a = rng.uniform(-0.02, 0.02, 3)
    rect = rot_y(a[0]) @ np.array([[1, 0, 0], [0, math.cos(a[1]), -math.sin(a[1])], [0, math.sin(a[1]), math.cos(a[1])]])
    tr = np.hstack([np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]]), rng.normal(0, 0.1, (3, 1))])
    return ProjectionMatrix(p, rect, tr)


class TestProjectPoint:
    def test_optical_axis(self, cam100):
        assert project_point((0, 0, 10), cam100) == (50.0, 50.0)

    def test_pinhole_formula(self, cam100):
        assert project_point((1, 0, 10), cam100) == pytest.approx((60.0, 50.0), abs=1e-12)

    @pytest.mark.parametrize("p", [(0, 0, -1), (1, 1, 0)])
    def test_behind_camera(self, cam100, p):
        with pytest.raises(NonPositiveDepth):
            project_point(p, cam100)

    def test_rank_deficient_matrix_rejected(self):
        with pytest.raises(ValueError):
            ProjectionMatrix(np.zeros((3, 4)))


class TestProjectCloud:
    def test_empty(self, cam100):
        out = project_cloud(np.zeros((0, 3)), cam100)
        assert len(out.indices) == 0 and out.dropped == 0

    def test_filters_behind(self, cam100):
        out = project_cloud([(0, 0, 10), (0, 0, -1)], cam100)
        assert out.indices.tolist() == [0]
        assert out.dropped == 1
        assert out.pixels[0].tolist() == [50.0, 50.0]

    def test_matches_per_point_oracle(self, rng):
        proj = kitti_like(rng)
        pts = np.column_stack([rng.uniform(2, 60, 1000), rng.uniform(-20, 20, 1000), rng.uniform(-2, 2, 1000)])
        out = project_cloud(pts, proj)
        assert len(out.indices) == 1000
        for i, uv in zip(out.indices, out.pixels):
            assert np.allclose(uv, project_point(pts[i], proj), atol=1e-9)

    def test_composed_matrix_agrees(self, rng):
        proj = kitti_like(rng)
        pts = np.column_stack([rng.uniform(2, 60, 200), rng.uniform(-20, 20, 200), rng.uniform(-2, 2, 200)])
        h = np.hstack([pts, np.ones((200, 1))]) @ proj.composed().T
        uv = h[:, :2] / h[:, 2:]
        assert np.allclose(uv, project_cloud(pts, proj).pixels, atol=1e-9)

    def test_camera_round_trip(self, rng):
        proj = kitti_like(rng)
        pts = rng.normal(size=(50, 3)) * 10
        assert np.allclose(proj.from_camera(proj.to_camera(pts)), pts, atol=1e-9)


class TestCorners:
    def test_unit_cube(self):
        c = box3d_corners(Box3D(0, 0, 0, 1, 1, 1))
        assert sorted(map(tuple, np.abs(c))) == [(0.5, 0.5, 0.5)] * 8
        assert len({tuple(r) for r in np.sign(c)}) == 8

    def test_unit_cube_quarter_turn_same_set(self):
        a = box3d_corners(Box3D(0, 0, 0, 1, 1, 1, 0.0))
        b = box3d_corners(Box3D(0, 0, 0, 1, 1, 1, math.pi / 2))
        key = lambda m: sorted(map(tuple, np.round(m, 12) + 0.0))
        assert key(a) == key(b)
        assert not np.allclose(a, b)

    def test_rotated_bar_by_hand(self):
        c = box3d_corners(Box3D(0, 0, 0, 2, 1, 1, math.pi / 4))
        s = math.sqrt(0.5)
        # local (x, z) = (1, 0.5): x' = x c + z s, z' = -x s + z c
        expected = (1 * s + 0.5 * s, 0.5, -1 * s + 0.5 * s)
        assert np.allclose(c[0], expected, atol=1e-12)

    @given(finite, finite, finite, sizes, sizes, sizes, angles)
    def test_mean_is_center(self, x, y, z, l, w, h, yaw):
        b = Box3D(x, y, z, l, w, h, yaw)
        assert np.allclose(box3d_corners(b).mean(axis=0), b.center, atol=1e-9)

    @given(finite, finite, sizes, sizes, angles)
    def test_yaw_periodic(self, x, z, l, w, yaw):
        a = box3d_corners(Box3D(x, 1, z, l, w, 1, yaw))
        b = box3d_corners(Box3D(x, 1, z, l, w, 1, yaw + 2 * math.pi))
        assert np.allclose(a, b, atol=1e-9)

    @given(finite, finite, sizes, sizes, angles)
    def test_bev_matches_corners(self, x, z, l, w, yaw):
        b = Box3D(x, 0, z, l, w, 1, yaw)
        fp = bev_corners(b)
        key = lambda m: sorted(map(tuple, np.round(m, 9) + 0.0))
        assert key(fp) == key(box3d_corners(b)[:4, [0, 2]])
        area = 0.5 * np.sum(fp[:, 0] * np.roll(fp[:, 1], -1) - np.roll(fp[:, 0], -1) * fp[:, 1])
        assert area == pytest.approx(l * w, rel=1e-9)

    @given(finite, finite, finite, sizes, sizes, sizes, angles)
    def test_corners_are_inside(self, x, y, z, l, w, h, yaw):
        b = Box3D(x, y, z, l, w, h, yaw)
        assert points_in_box3d(box3d_corners(b), b, margin=1e-9).all()
        assert not points_in_box3d(b.center + np.array([[0, h, 0]]), b).any()


class TestBoxes:
    def test_box3d_validation(self):
        with pytest.raises(ValueError):
            Box3D(0, 0, 0, 0, 1, 1)
        with pytest.raises(ValueError):
            Box3D(0, 0, math.nan, 1, 1, 1)

    @given(angles)
    def test_yaw_wrapped(self, yaw):
        b = Box3D(0, 0, 0, 1, 1, 1, yaw)
        assert -math.pi <= b.yaw < math.pi
        assert math.isclose(math.cos(b.yaw), math.cos(yaw), abs_tol=1e-9)

    def test_box2d_validation(self):
        with pytest.raises(ValueError):
            Box2D(0, 0, 0, 1)

    def test_point_in_box2d(self):
        b = Box2D(100, 100, 40, 20)
        assert point_in_box2d((100, 100), b)
        assert point_in_box2d((120, 100), b)
        assert not point_in_box2d((121, 100), b)

    def test_box2d_hull_by_hand(self, cam100):
        b = Box3D(0.5, 0.2, 10, 2, 1, 1.5, 0.3)
        uv = np.array([project_point(c, cam100) for c in box3d_corners(b)])
        got = box2d_from_box3d(b, cam100)
        assert np.allclose(got.corners, (*uv.min(axis=0), *uv.max(axis=0)), atol=1e-9)
        assert np.allclose(project_box3d(b, cam100), uv, atol=1e-12)


@given(st.floats(-1e3, 1e3, allow_nan=False))
def test_wrap_angle_scalar_and_array_agree(a):
    w = wrap_angle(a)
    assert -math.pi <= w < math.pi
    assert abs(w - float(wrap_angle(np.array([a]))[0])) < 1e-9
    assert abs(math.sin(w) - math.sin(a)) < 1e-9
