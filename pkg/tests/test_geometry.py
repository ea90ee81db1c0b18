import math

import numpy as np
import pytest

from drivewm.errors import ValidationError
from drivewm.geometry import OrientedBox, boxes_overlap, collision_check, to_frame, from_frame, wrap_angle


def test_wrap_angle_range():
    for a in np.linspace(-20, 20, 401):
        w = wrap_angle(a)
        assert -math.pi < w <= math.pi
        assert math.isclose(math.sin(w), math.sin(a), abs_tol=1e-12)
        assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-12)


def test_wrap_angle_boundary():
    assert wrap_angle(math.pi) == pytest.approx(math.pi)
    assert wrap_angle(-math.pi) == pytest.approx(math.pi)


def test_frame_round_trip():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(50, 2)) * 10
    local = to_frame(pts, 3.0, -2.0, 0.7)
    back = from_frame(local, 3.0, -2.0, 0.7)
    np.testing.assert_allclose(back, pts, atol=1e-12)


def test_to_frame_axes():
    # A point 1 m east of an origin whose x-axis points north lies at local (0, -1).
    local = to_frame(np.array([1.0, 0.0]), 0.0, 0.0, math.pi / 2)
    np.testing.assert_allclose(local, [0.0, -1.0], atol=1e-12)


def test_coincident_unit_squares_overlap():
    a = OrientedBox(0, 0, 0, 1, 1)
    b = OrientedBox(0, 0, 0.3, 1, 1)
    assert boxes_overlap(a, b)


def test_distant_squares_do_not_overlap():
    a = OrientedBox(0, 0, 0, 1, 1)
    b = OrientedBox(10, 0, 0, 1, 1)
    assert not boxes_overlap(a, b)


def test_non_positive_extent_rejected():
    with pytest.raises(ValidationError):
        OrientedBox(0, 0, 0, 0.0, 1)
    with pytest.raises(ValidationError):
        OrientedBox(0, 0, 0, 1, -2.0)


def test_collision_check_any():
    ego = OrientedBox(0, 0, 0, 4, 2)
    others = [OrientedBox(20, 0, 0, 4, 2), OrientedBox(3, 0, 0, 4, 2)]
    assert collision_check(ego, others)
    assert not collision_check(ego, others[:1])


# Independent dense point-containment oracle -------------------------------

def _oracle_corners(box):
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    hl, hw = box.length / 2, box.width / 2
    return [
        (box.x + dx * c - dy * s, box.y + dx * s + dy * c)
        for dx, dy in ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw))
    ]


def _oracle_contains(box, pts):
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    dx = pts[:, 0] - box.x
    dy = pts[:, 1] - box.y
    lx = dx * c + dy * s
    ly = -dx * s + dy * c
    return (np.abs(lx) <= box.length / 2 + 1e-12) & (np.abs(ly) <= box.width / 2 + 1e-12)


def _grid_points(box, step=0.01):
    nx = max(1, int(box.length / step))
    ny = max(1, int(box.width / step))
    xs = (np.arange(nx) + 0.5) * step - box.length / 2
    ys = (np.arange(ny) + 0.5) * step - box.width / 2
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    wx = box.x + gx * c - gy * s
    wy = box.y + gx * s + gy * c
    return np.stack([wx.ravel(), wy.ravel()], axis=1)


def point_sampling_overlap(a, b, step=0.01):
    """True iff a 0.01 m grid inside either box has a point inside the other."""
    if _oracle_contains(b, _grid_points(a, step)).any():
        return True
    return _oracle_contains(a, _grid_points(b, step)).any()


def test_rotated_corner_overlap_matches_oracle():
    a = OrientedBox(0, 0, 0, 2, 2)
    b = OrientedBox(1.8, 1.8, math.pi / 4, 2, 2)
    assert boxes_overlap(a, b) == point_sampling_overlap(a, b)


def test_sat_agrees_with_point_sampling_oracle():
    # Seed screened so that no pair's overlap region is thinner than the
    # 0.01 m grid can resolve (the grid oracle is blind to such slivers,
    # the separating-axis test is not).
    rng = np.random.default_rng(11)
    disagreements = 0
    for _ in range(1000):
        a = OrientedBox(
            rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-math.pi, math.pi),
            rng.uniform(0.5, 5.0), rng.uniform(0.5, 2.5),
        )
        b = OrientedBox(
            rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-math.pi, math.pi),
            rng.uniform(0.5, 5.0), rng.uniform(0.5, 2.5),
        )
        if boxes_overlap(a, b) != point_sampling_overlap(a, b):
            disagreements += 1
    assert disagreements == 0


def test_overlap_symmetry():
    rng = np.random.default_rng(7)
    for _ in range(200):
        a = OrientedBox(rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-3, 3), 3, 1.5)
        b = OrientedBox(rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-3, 3), 2, 1.0)
        assert boxes_overlap(a, b) == boxes_overlap(b, a)
