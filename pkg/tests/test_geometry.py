import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unimpr.geometry import (PolarBEV, PolarBEVGrid, Pose2D, cyclic_shift, polar_indices, project_cartesian,
                             project_polar, read_points, resample_polar, transform_points, wrap_angle,
                             write_points)

FULL_GRID = PolarBEVGrid(900, 200, 50.0)


def pts(*xyz):
    return np.array([[*p, *([0.0] * (4 - len(p)))] for p in xyz], dtype=np.float64)


def rotate(cloud, angle):
    return transform_points(cloud, Pose2D(0, 0, angle))


def random_cloud(rng, n=2000, m=50.0):
    r = rng.uniform(0.5, m * 1.1, n)
    a = rng.uniform(-np.pi, np.pi, n)
    return np.stack([r * np.cos(a), r * np.sin(a), rng.uniform(-4, 16, n), rng.random(n)], axis=1)


# --- project_polar ----------------------------------------------------------

def test_polar_axis_point():
    bev = project_polar(pts((10, 0, 1.2)), FULL_GRID)
    assert bev.data.shape == (1, 900, 200)
    assert bev.data[0, 180, 100] == pytest.approx(0.1)
    assert np.count_nonzero(bev.data) == 1


def test_polar_symmetric_points():
    v, u, _ = polar_indices(pts((0, 5, 0), (0, -5, 0)), FULL_GRID)
    assert list(zip(v, u)) == [(90, 50), (90, 150)]


def test_polar_hand_evaluated_diagonal():
    v, u, _ = polar_indices(pts((-7.07, -7.07, 0)), FULL_GRID)
    assert (v[0], u[0]) == (179, 175)


def test_polar_discards_far_points_and_empty_cloud():
    bev = project_polar(pts((50, 0, 0), (0, 60, 0)), FULL_GRID)
    assert not bev.data.any()
    assert not project_polar(np.zeros((0, 4)), FULL_GRID).data.any()


def test_polar_density_cap():
    bev = project_polar(pts(*[(10, 0, 0)] * 25), FULL_GRID)
    assert bev.data.max() == 1.0
    bev = project_polar(pts(*[(10, 0, 0)] * 3), FULL_GRID)
    assert bev.data.max() == pytest.approx(0.3)


def test_polar_max_elevation_clip_and_scale():
    cloud = pts((10, 0, 1.0), (10, 0, 6.0), (0, 10, 40.0), (0, -10, -9.0))
    bev = project_polar(cloud, FULL_GRID, "max_elevation")
    assert bev.data[0, 180, 100] == pytest.approx(0.5)  # max z=6 -> (6+3)/18
    assert bev.data[0, 180, 50] == pytest.approx(1.0)
    assert bev.data[0, 180, 150] == 0.0  # clipped to the floor value
    assert np.count_nonzero(bev.data) == 2


def test_polar_oracle_loop():
    rng = np.random.default_rng(3)
    cloud = random_cloud(rng, 500)
    grid = PolarBEVGrid(40, 36, 50.0)
    expected = np.zeros((40, 36))
    for x, y, *_ in cloud:
        r = math.hypot(x, y)
        if r >= 50:
            continue
        u = math.floor(0.5 * (1 - math.atan2(y, x) / math.pi) * 36) % 36
        v = min(math.floor(r / 50 * 40), 39)
        expected[v, u] += 1
    got = project_polar(cloud, grid).data[0]
    np.testing.assert_allclose(got, np.minimum(expected, 10) / 10, atol=1e-7)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_polar_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    cloud = random_cloud(rng, 300)
    perm = rng.permutation(len(cloud))
    grid = PolarBEVGrid(30, 24)
    for mode in ("density", "max_elevation"):
        a = project_polar(cloud, grid, mode).data
        b = project_polar(cloud[perm], grid, mode).data
        assert a.tobytes() == b.tobytes()


def test_density_mass_monotone_in_points():
    rng = np.random.default_rng(0)
    cloud = random_cloud(rng, 3000)
    grid = PolarBEVGrid(20, 16)
    masses = [project_polar(cloud[:n], grid).data.sum() for n in range(0, 3001, 250)]
    assert all(b >= a for a, b in zip(masses, masses[1:]))


def test_translation_moves_rows_by_at_most_one():
    rng = np.random.default_rng(1)
    grid = PolarBEVGrid(100, 64, 50.0)
    cloud = random_cloud(rng, 1000, 45.0)
    t = rng.normal(size=2)
    t *= 0.99 * (grid.m / grid.h) / np.linalg.norm(t)
    v0, _, k0 = polar_indices(cloud, grid)
    v1, _, k1 = polar_indices(transform_points(cloud, Pose2D(t[0], t[1], 0)), grid)
    both = k0 & k1
    assert np.abs(v0[both[k0]] - v1[both[k1]]).max() <= 1


# --- rotation / cyclic shift ----------------------------------------------------

@pytest.mark.parametrize("j", [1, 50, 100])
def test_rotation_equals_cyclic_shift_random(j):
    rng = np.random.default_rng(j)
    grid = PolarBEVGrid(90, 200, 50.0)
    cloud = random_cloud(rng, 3000)
    a = project_polar(rotate(cloud, 2 * np.pi * j / grid.w), grid).data
    b = cyclic_shift(project_polar(cloud, grid), -j).data
    occupied = (a > 0) | (b > 0)
    assert (a[occupied] == b[occupied]).mean() >= 0.995


def test_rotation_equals_cyclic_shift_bin_centres():
    grid = PolarBEVGrid(20, 40, 50.0)
    v, u = np.meshgrid(np.arange(grid.h), np.arange(grid.w), indexing="ij")
    r = (v.ravel() + 0.5) / grid.h * grid.m
    theta = np.pi * (1 - 2 * (u.ravel() + 0.5) / grid.w)
    cloud = np.stack([r * np.cos(theta), r * np.sin(theta), np.ones_like(r), np.zeros_like(r)], 1)
    cloud = cloud[np.random.default_rng(0).random(len(cloud)) < 0.3]
    for j in (1, 10, 20):
        a = project_polar(rotate(cloud, 2 * np.pi * j / grid.w), grid).data
        b = cyclic_shift(project_polar(cloud, grid), -j).data
        assert np.array_equal(a, b)


def test_cyclic_shift_identities():
    data = np.random.default_rng(0).random((2, 5, 8)).astype(np.float32)
    bev = PolarBEV(PolarBEVGrid(5, 8), data)
    assert np.array_equal(cyclic_shift(bev, 0).data, data)
    assert np.array_equal(cyclic_shift(bev, 8).data, data)
    assert np.array_equal(cyclic_shift(cyclic_shift(bev, 3), 5).data, data)
    assert cyclic_shift(bev, 1).data[0, 0, 1] == data[0, 0, 0]


# --- cartesian ----------------------------------------------------------------

def test_cartesian_origin_and_extent():
    img = project_cartesian(pts((0, 0, 0)), 50, 10, 10)
    assert img[0, 5, 5] == pytest.approx(0.1) and np.count_nonzero(img) == 1
    assert not project_cartesian(pts((60, 0, 0), (0, -50.5, 0)), 50, 10, 10).any()


def test_cartesian_loop_oracle():
    rng = np.random.default_rng(2)
    cloud = random_cloud(rng, 800)
    e, h, w = 40.0, 16, 12
    expected = np.zeros((h, w))
    for x, y, *_ in cloud:
        if -e <= x < e and -e <= y < e:
            expected[min(int((x + e) / (2 * e) * h), h - 1), min(int((y + e) / (2 * e) * w), w - 1)] += 1
    np.testing.assert_allclose(project_cartesian(cloud, e, h, w)[0], np.minimum(expected, 10) / 10, atol=1e-7)


# --- poses ---------------------------------------------------------------------

def test_transform_examples():
    cloud = pts((1, 0, 2, 0.5))
    assert np.array_equal(transform_points(cloud, Pose2D()), cloud)
    np.testing.assert_allclose(transform_points(cloud, Pose2D(0, 0, math.pi))[0], [-1, 0, 2, 0.5], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(*[st.floats(-100, 100)] * 2, st.floats(-7, 7), *[st.floats(-100, 100)] * 2, st.floats(-7, 7))
def test_compose_matches_sequential_transform(x1, y1, a1, x2, y2, a2):
    p1, p2 = Pose2D(x1, y1, a1), Pose2D(x2, y2, a2)
    cloud = random_cloud(np.random.default_rng(0), 50)
    seq = transform_points(transform_points(cloud, p2), p1)
    np.testing.assert_allclose(transform_points(cloud, p1.compose(p2)), seq, atol=1e-9)
    ident = p1.compose(p1.inverse())
    assert abs(ident.x) < 1e-9 and abs(ident.y) < 1e-9 and abs(ident.yaw) < 1e-12


def test_wrap_angle_range():
    assert wrap_angle(-math.pi) == math.pi
    assert wrap_angle(3 * math.pi) == pytest.approx(math.pi)
    assert -math.pi < Pose2D(yaw=-7.5).yaw <= math.pi


# --- resample ------------------------------------------------------------------

def test_resample_identity_and_constant():
    g = PolarBEVGrid(12, 16, 50)
    data = np.random.default_rng(0).random((1, 12, 16)).astype(np.float32)
    assert np.array_equal(resample_polar(PolarBEV(g, data), g).data, data)
    const = PolarBEV(g, np.full((2, 12, 16), 0.25, np.float32))
    out = resample_polar(const, PolarBEVGrid(7, 9, 40))
    np.testing.assert_allclose(out.data, 0.25, atol=1e-7)
    with pytest.raises(ValueError):
        resample_polar(const, PolarBEVGrid(7, 9, 60))


def test_resample_smooth_round_trip():
    fine = PolarBEVGrid(120, 160, 50)
    rho = (np.arange(fine.h) + 0.5) / fine.h
    th = (np.arange(fine.w) + 0.5) / fine.w * 2 * np.pi
    field = 0.5 + 0.25 * np.sin(2 * np.pi * rho)[:, None] * np.cos(th)[None]
    bev = PolarBEV(fine, field[None].astype(np.float32))
    back = resample_polar(resample_polar(bev, PolarBEVGrid(60, 80, 50)), fine)
    rmse = np.sqrt(np.mean((back.data - bev.data) ** 2))
    assert rmse / np.sqrt(np.mean(bev.data ** 2)) < 0.05


# --- point blobs -----------------------------------------------------------------

def test_point_blob_round_trip_and_truncation(tmp_path):
    cloud = random_cloud(np.random.default_rng(0), 33).astype(np.float32)
    write_points(tmp_path / "a.bin", cloud)
    assert read_points(tmp_path / "a.bin").tobytes() == cloud.tobytes()
    (tmp_path / "b.bin").write_bytes((tmp_path / "a.bin").read_bytes()[:-3])
    with pytest.raises(ValueError, match="b.bin"):
        read_points(tmp_path / "b.bin")
