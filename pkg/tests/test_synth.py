from dataclasses import replace

import numpy as np
import pytest

from unimpr.geometry import Pose2D
from unimpr.synth import (BenchmarkSpec, MultimodalFrame, SensorSuite, World, benchmark_world, degrade,
                          generate_world, make_split, perturb_calibration, perturb_viewpoint, read_dataset,
                          render_frame, render_lidar, render_radar, sample_places, write_dataset)


@pytest.fixture(scope="module")
def world():
    return generate_world(3, n_landmarks=300, extent=120.0, n_classes=8, clear=np.zeros((1, 2)))


def one_landmark(x=10.0, y=0.0, r=1.0, h=5.0):
    return World(0, 50.0, np.array([[x, y]]), np.array([r]), np.array([h]), np.array([0]), np.array([0.5]), 1)


def frames_equal(a: MultimodalFrame, b: MultimodalFrame) -> bool:
    same = a.id == b.id and a.pose == b.pose and a.timestamps == b.timestamps
    same &= (a.lidar is None) == (b.lidar is None) and (a.lidar is None or a.lidar.tobytes() == b.lidar.tobytes())
    if a.radar is not None:
        ra, rb = a.radar, b.radar
        same &= ra.kind == rb.kind
        same &= (ra.points.tobytes() == rb.points.tobytes()) if ra.points is not None else \
            ra.intensity.data.tobytes() == rb.intensity.data.tobytes()
    if a.camera is not None:
        same &= all(va.features.tobytes() == vb.features.tobytes() and np.array_equal(va.R, vb.R)
                    for va, vb in zip(a.camera.views, b.camera.views))
    return bool(same)


# --- worlds -------------------------------------------------------------------------

def test_world_non_overlapping_and_clear(world):
    d = np.hypot(*(world.positions[:, None] - world.positions[None]).transpose(2, 0, 1))
    gap = d - world.radius[:, None] - world.radius[None]
    np.fill_diagonal(gap, np.inf)
    assert gap.min() >= 1.0
    assert np.all(np.hypot(*world.positions.T) >= world.radius + 2.5)
    assert world.height.min() >= 1.5 and world.cls.max() < 8


def test_world_deterministic_and_errors():
    a, b = generate_world(5, 50, 80.0), generate_world(5, 50, 80.0)
    assert np.array_equal(a.positions, b.positions) and np.array_equal(a.cls, b.cls)
    with pytest.raises(ValueError):
        generate_world(0, 0)
    with pytest.raises(ValueError):
        generate_world(0, 500, 10.0, max_tries=5)


def test_places_spacing():
    p = sample_places(1, 40, (100.0, 100.0), 15.0)
    d = np.hypot(*(p[:, None] - p[None]).transpose(2, 0, 1))
    np.fill_diagonal(d, np.inf)
    assert d.min() >= 15.0 and np.all(np.abs(p) <= 100.0)
    with pytest.raises(ValueError):
        sample_places(1, 100, (10.0, 10.0), 15.0, max_tries=1000)


# --- sensors -------------------------------------------------------------------------

def test_lidar_hits_cylinder_surface():
    w = one_landmark()
    pts = render_lidar(w, Pose2D(), beams=8, range_noise=0.0)
    assert len(pts) > 0
    r = np.hypot(pts[:, 0] - 10.0, pts[:, 1])
    np.testing.assert_allclose(r, 1.0, atol=1e-9)
    assert pts[:, 2].min() >= 0 and pts[:, 2].max() <= 5.0


def test_lidar_rotates_with_vehicle():
    w = one_landmark()
    yaw = np.pi / 2
    # vehicle turned left: the landmark ahead now lies on its right (-y)
    pts = render_lidar(w, Pose2D(0, 0, yaw), beams=4, range_noise=0.0)
    assert np.all(pts[:, 1] < 0) and np.allclose(np.hypot(pts[:, 0], pts[:, 1] + 10.0), 1.0, atol=1e-9)


def test_lidar_empty_world_region():
    w = one_landmark(x=500.0)
    assert render_lidar(w, Pose2D(), beams=4).shape == (0, 4)
    with pytest.raises(ValueError):
        render_lidar(w, Pose2D(), beams=0)


def test_radar_kinds():
    w = one_landmark()
    pts = render_radar(w, Pose2D(), "single_chip", np.random.default_rng(0), clutter=0, keep_prob=1.0,
                       position_noise=0.0)
    assert pts.shape[1] == 4 and np.all(np.abs(np.hypot(pts[:, 0], pts[:, 1]) - 9.0) < 1.0)
    bev = render_radar(w, Pose2D(), "scanning", np.random.default_rng(0), speckle=0.0)
    assert bev.data.shape == (1, 200, 90) and bev.data.max() > 0 and bev.data.min() >= 0
    with pytest.raises(ValueError):
        render_radar(w, Pose2D(), "sonar")


def test_render_frame_deterministic(world):
    suite = SensorSuite(lidar_beams=4)
    a = render_frame(world, Pose2D(1.0, 2.0, 0.3), suite, "f", [1, 2])
    b = render_frame(world, Pose2D(1.0, 2.0, 0.3), suite, "f", [1, 2])
    assert frames_equal(a, b) and a.modalities == ("camera", "lidar", "radar")
    c = render_frame(world, Pose2D(1.0, 2.0, 0.3), suite, "f", [1, 3])
    assert a.lidar.tobytes() != c.lidar.tobytes()


def test_suite_with_modalities():
    assert SensorSuite.with_modalities(["lidar", "camera"]).modalities() == ("camera", "lidar")
    with pytest.raises(ValueError):
        SensorSuite.with_modalities([])


# --- perturbations -----------------------------------------------------------------------

def test_viewpoint_rerender_matches_direct_render(world):
    suite = SensorSuite(lidar_beams=4, rig=None)
    f = render_frame(world, Pose2D(0.0, 0.0, 0.0), suite, "q", [9])
    f.meta["noise_seed"] = [9]
    g = perturb_viewpoint(f, delta=(1.0, -2.0, 0.5), world=world, suite=suite)
    direct = render_frame(world, Pose2D(1.0, -2.0, 0.5), suite, "q", [9])
    assert g.pose == direct.pose and g.lidar.tobytes() == direct.lidar.tobytes()
    assert g.meta["perturbation"] == [1.0, -2.0, 0.5]


def test_viewpoint_rigid_transform_without_world(world):
    f = render_frame(world, Pose2D(), SensorSuite(lidar_beams=4, radar_kind=None), "q", [1])
    g = perturb_viewpoint(f, delta=(0.0, 0.0, np.pi / 2))
    assert g.camera is None
    np.testing.assert_allclose(g.lidar[:, 0], f.lidar[:, 1], atol=1e-5)
    np.testing.assert_allclose(g.lidar[:, 1], -f.lidar[:, 0], atol=1e-5)


def test_perturbation_ranges():
    rng = np.random.default_rng(0)
    f = MultimodalFrame("x", Pose2D(), lidar=np.zeros((1, 4), np.float32))
    for _ in range(50):
        dx, dy, dyaw = perturb_viewpoint(f, rng, trans_range=4.5).meta["perturbation"]
        assert abs(dx) <= 4.5 and abs(dy) <= 4.5 and 0 <= dyaw < 2 * np.pi


def test_degrade_modes(world):
    f = render_frame(world, Pose2D(), SensorSuite(lidar_beams=8), "f", [0])
    dropped = degrade(f, "drop_modality", "camera")
    assert dropped.camera is None and "camera" not in dropped.timestamps and f.camera is not None
    dec = degrade(f, "decimate_points", 0.0, np.random.default_rng(0))
    r = np.hypot(dec.lidar[:, 0], dec.lidar[:, 1])
    assert r.max() <= 10.0 and len(dec.lidar) < len(f.lidar)
    near = np.hypot(f.lidar[:, 0], f.lidar[:, 1]) <= 10.0
    assert np.array_equal(dec.lidar, f.lidar[near])
    assert degrade(f, "feature_noise", 0.0).camera is f.camera
    noisy = degrade(f, "radar_noise", 2.0, np.random.default_rng(0))
    assert len(noisy.radar.points) >= len(f.radar.points)
    only = MultimodalFrame("x", Pose2D(), lidar=f.lidar)
    with pytest.raises(ValueError):
        degrade(only, "drop_modality", "lidar")
    with pytest.raises(ValueError):
        degrade(f, "fog")


def test_calibration_noise(world):
    rig = render_frame(world, Pose2D(), SensorSuite(lidar_beams=None, radar_kind=None), "f", [0]).camera
    same = perturb_calibration(rig, 0.0)
    assert all(np.array_equal(a.R, b.R) and np.array_equal(a.t, b.t) for a, b in zip(rig.views, same.views))
    moved = perturb_calibration(rig, 4.0, np.random.default_rng(0))
    for a, b in zip(rig.views, moved.views):
        np.testing.assert_allclose(b.R @ b.R.T, np.eye(3), atol=1e-12)
        assert not np.array_equal(a.R, b.R)
    with pytest.raises(ValueError):
        perturb_calibration(rig, -1.0)


# --- datasets ---------------------------------------------------------------------------

def test_dataset_round_trip_bit_exact(world, tmp_path):
    frames = [render_frame(world, Pose2D(i * 3.0, 0.0, 0.1 * i), SensorSuite(lidar_beams=4), f"f{i}", [i])
              for i in range(3)]
    frames.append(render_frame(world, Pose2D(0, 5.0), SensorSuite(lidar_beams=4, radar_kind="scanning", rig="front"),
                               "s", [7]))
    write_dataset(tmp_path / "d", frames, meta={"k": 1})
    back, meta = read_dataset(tmp_path / "d")
    assert meta == {"k": 1} and len(back) == 4
    assert all(frames_equal(a, b) for a, b in zip(frames, back))
    write_dataset(tmp_path / "e", back, meta={"k": 1})
    assert (tmp_path / "d" / "manifest.json").read_bytes() == (tmp_path / "e" / "manifest.json").read_bytes()


def test_dataset_errors(tmp_path):
    with pytest.raises(ValueError, match="manifest"):
        read_dataset(tmp_path)
    (tmp_path / "manifest.json").write_text("{not json")
    with pytest.raises(ValueError, match="malformed"):
        read_dataset(tmp_path)


# --- benchmark ------------------------------------------------------------------------------

def small_spec(**kw):
    base = dict(n_places=12, n_train=20, n_landmarks=400, extent=200.0, place_half_size=(150.0, 150.0),
                suite=SensorSuite(lidar_beams=4, rig=None))
    base.update(kw)
    return BenchmarkSpec(**base)


def test_spec_dict_round_trip():
    spec = small_spec()
    assert BenchmarkSpec.from_dict(spec.to_dict()) == spec


def test_make_split_contract():
    spec = small_spec()
    db, q, tr = make_split(spec, "db"), make_split(spec, "query"), make_split(spec, "train")
    assert len(db) == len(q) == 12 and len(tr) == 20
    for a, b in zip(db, q):
        dx, dy, _ = b.meta["perturbation"]
        assert abs(b.pose.x - a.pose.x - dx) < 1e-9 and max(abs(dx), abs(dy)) <= 4.5
    again = make_split(spec, "query")
    assert all(frames_equal(a, b) for a, b in zip(q, again))
    with pytest.raises(KeyError):
        make_split(spec, "val")


def test_train_poses_near_places():
    spec = small_spec(train_radius=6.0)
    _, places = benchmark_world(spec)
    tr = make_split(spec, "train")
    xy = np.array([[f.pose.x, f.pose.y] for f in tr])
    d = np.min(np.hypot(*(xy[:, None] - places[None]).transpose(2, 0, 1)), axis=1)
    assert d.max() <= 6.0 + 1e-9
    spread = make_split(replace(spec, train_radius=None), "train")
    assert len(spread) == 20
