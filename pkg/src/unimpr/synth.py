"""Synthetic multimodal worlds, sensor rendering, perturbations and the on-disk dataset format.

A world is a set of vertical cylinders (landmarks) on a flat ground plane.
LiDAR and radar are ray cast in 2.5D against the cylinders; camera
"features" are class-conditioned blobs painted by a pinhole projection,
standing in for the output of an image backbone.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .gaussian import CameraRig, CameraView, intrinsics, look_at_extrinsics, read_feature_image, write_feature_image
from .geometry import PolarBEV, PolarBEVGrid, Pose2D, read_points, transform_points, write_points

RADAR_KINDS = ("single_chip", "scanning")
RIGS = ("surround", "front")
CLASS_SEED = 20240917


@dataclass
class World:
    seed: int
    extent: float  # landmarks lie in [-extent, extent]^2
    positions: np.ndarray  # [n, 2]
    radius: np.ndarray
    height: np.ndarray
    cls: np.ndarray
    reflectivity: np.ndarray
    n_classes: int = 8

    def __len__(self) -> int:
        return len(self.positions)

    def nearby(self, x: float, y: float, r: float) -> np.ndarray:
        d = np.hypot(self.positions[:, 0] - x, self.positions[:, 1] - y)
        return np.nonzero(d < r + self.radius)[0]

    def spec(self) -> dict:
        return {"seed": self.seed, "n_landmarks": len(self), "extent": self.extent, "n_classes": self.n_classes}


def generate_world(seed: int, n_landmarks: int = 1500, extent: float = 250.0, min_gap: float = 1.0,
                   n_classes: int = 8, clear: np.ndarray | None = None, clear_radius: float = 2.5,
                   max_tries: int = 200) -> World:
    """Rejection-sample non-overlapping cylinders.

    ``clear`` optionally lists (x, y) spots (e.g. vehicle places) that must stay
    free of landmarks within ``clear_radius``.
    """
    if n_landmarks < 1:
        raise ValueError("a world needs at least one landmark")
    rng = np.random.default_rng(seed)
    cell = 8.0  # spatial hash for spacing checks
    buckets: dict[tuple[int, int], list[int]] = {}
    pos, rad = [], []
    for _ in range(n_landmarks):
        for _try in range(max_tries):
            p = rng.uniform(-extent, extent, 2)
            r = rng.uniform(0.5, 3.0)
            if clear is not None and len(clear):
                if np.min(np.hypot(*(np.asarray(clear) - p).T)) < r + clear_radius:
                    continue
            ci, cj = int(p[0] // cell), int(p[1] // cell)
            ok = True
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    for k in buckets.get((ci + di, cj + dj), ()):
                        if np.hypot(*(pos[k] - p)) < r + rad[k] + min_gap:
                            ok = False
                            break
                    if not ok:
                        break
                if not ok:
                    break
            if ok:
                buckets.setdefault((ci, cj), []).append(len(pos))
                pos.append(p)
                rad.append(r)
                break
        else:
            raise ValueError(f"could not place {n_landmarks} landmarks with gap {min_gap} m in extent {extent} m")
    n = len(pos)
    height = rng.uniform(1.5, 12.0, n)
    cls = rng.integers(0, n_classes, n)
    refl = rng.uniform(0.2, 1.0, n)
    return World(seed, float(extent), np.array(pos), np.array(rad), height, cls, refl, n_classes)


def sample_places(seed: int, n: int, half_size: tuple[float, float], min_spacing: float = 20.0,
                  max_tries: int = 100000) -> np.ndarray:
    """Poisson-disc style (x, y) places inside [-hx, hx] x [-hy, hy]."""
    rng = np.random.default_rng(seed)
    pts: list[np.ndarray] = []
    tries = 0
    while len(pts) < n:
        tries += 1
        if tries > max_tries:
            raise ValueError(f"could not place {n} places with spacing {min_spacing} m")
        p = rng.uniform(-1, 1, 2) * np.asarray(half_size)
        if pts and np.min(np.hypot(*(np.array(pts) - p).T)) < min_spacing:
            continue
        pts.append(p)
    return np.array(pts)


# --- ray casting ------------------------------------------------------------

def _ray_circle(origin: np.ndarray, dirs: np.ndarray, centers: np.ndarray, radii: np.ndarray) -> np.ndarray:
    """Entry distance of each ray [R,2] into each circle [L]; inf where missed."""
    c = centers - origin  # [L, 2]
    b = dirs @ c.T  # [R, L]
    cc = np.sum(c * c, axis=1) - radii ** 2  # [L]
    disc = b ** 2 - cc[None]
    t = np.full(b.shape, np.inf)
    hit = (disc >= 0) & (cc[None] > 0)  # sensor inside a footprint: ignore that landmark
    t_hit = b - np.sqrt(np.where(hit, disc, 0.0))
    ok = hit & (t_hit > 0)
    t[ok] = t_hit[ok]
    return t


def render_lidar(world: World, pose: Pose2D, beams: int = 16, range_noise: float = 0.03,
                 rng: np.random.Generator | None = None, azimuth_rays: int = 360,
                 elevation_deg: tuple[float, float] = (-15.0, 15.0), sensor_height: float = 1.8,
                 max_range: float = 60.0) -> np.ndarray:
    """2.5D ray cast against landmark cylinders (no ground returns).

    Returns [N, 4] points (x, y, z, intensity) in the vehicle frame.
    """
    if beams < 1:
        raise ValueError("beams must be >= 1")
    rng = rng or np.random.default_rng(0)
    az = np.arange(azimuth_rays) * (2 * np.pi / azimuth_rays)
    elev = np.deg2rad(np.linspace(*elevation_deg, beams)) if beams > 1 else np.zeros(1)
    near = world.nearby(pose.x, pose.y, max_range)
    dirs = np.stack([np.cos(az + pose.yaw), np.sin(az + pose.yaw)], axis=1)
    origin = np.array([pose.x, pose.y])
    t = _ray_circle(origin, dirs, world.positions[near], world.radius[near])  # [R, L]
    heights = world.height[near]
    refl = world.reflectivity[near]

    out = []
    if len(near) == 0:
        return np.zeros((0, 4))
    rows = np.arange(len(az))
    for te in np.tan(elev):
        z = sensor_height + t * te  # [R, L]
        valid = np.isfinite(t) & (z >= 0) & (z <= heights[None]) & (t < max_range)
        tv = np.where(valid, t, np.inf)
        first = np.argmin(tv, axis=1)
        r = tv[rows, first]
        hit = np.isfinite(r)
        if not hit.any():
            continue
        r_h = r[hit]
        z_h = sensor_height + r_h * te
        if range_noise > 0:
            r_h = r_h + rng.normal(0.0, range_noise, r_h.shape)
        a = az[hit]
        out.append(np.stack([r_h * np.cos(a), r_h * np.sin(a), z_h, refl[first[hit]]], axis=1))
    if not out:
        return np.zeros((0, 4))
    return np.concatenate(out)


def render_radar(world: World, pose: Pose2D, kind: str = "single_chip", rng: np.random.Generator | None = None,
                 keep_prob: float = 0.3, position_noise: float = 0.3, clutter: int = 10,
                 sectors: list[tuple[float, float]] | None = None, max_range: float = 60.0,
                 scan_grid: PolarBEVGrid = PolarBEVGrid(200, 90, 60.0), speckle: float = 0.3):
    """single_chip -> sparse noisy [N, 4] cloud; scanning -> intensity PolarBEV in [0, 1]."""
    if kind not in RADAR_KINDS:
        raise ValueError(f"unknown radar kind {kind!r}")
    rng = rng or np.random.default_rng(0)
    near = world.nearby(pose.x, pose.y, max_range)
    origin = np.array([pose.x, pose.y])
    if kind == "scanning":
        g = scan_grid
        # column u centre angle under the projection convention
        theta = np.pi * (1 - 2 * (np.arange(g.w) + 0.5) / g.w)
        dirs = np.stack([np.cos(theta + pose.yaw), np.sin(theta + pose.yaw)], axis=1)
        img = np.zeros((g.h, g.w))
        if len(near):
            t = _ray_circle(origin, dirs, world.positions[near], world.radius[near])
            first = np.argmin(t, axis=1)
            tf = t[np.arange(g.w), first]
            for u in np.nonzero(np.isfinite(tf) & (tf < g.m))[0]:
                v = int(tf[u] / g.m * g.h)
                tail = np.arange(v, min(v + 3, g.h))
                img[tail, u] = world.reflectivity[near][first[u]] * np.exp(-0.7 * (tail - v))
        if speckle > 0:
            img = img * np.clip(1 + speckle * rng.standard_normal(img.shape), 0, None)
        return PolarBEV(g, np.clip(img, 0, 1).astype(np.float32)[None], "intensity")

    rays = 720
    az = np.arange(rays) * (2 * np.pi / rays)
    if sectors is not None:
        keep_az = np.zeros(rays, dtype=bool)
        for centre, width in sectors:
            keep_az |= np.abs(np.angle(np.exp(1j * (az - centre)))) <= width / 2
        az = az[keep_az]
    if len(near) == 0 or len(az) == 0:
        return np.zeros((0, 4))
    dirs = np.stack([np.cos(az + pose.yaw), np.sin(az + pose.yaw)], axis=1)
    t = _ray_circle(origin, dirs, world.positions[near], world.radius[near])
    first = np.argmin(t, axis=1)
    tf = t[np.arange(len(az)), first]
    hit = np.isfinite(tf) & (tf < max_range) & (rng.random(len(az)) < keep_prob)
    r = tf[hit] + rng.normal(0, position_noise, hit.sum())
    a = az[hit] + rng.normal(0, np.deg2rad(1.0), hit.sum())
    pts = np.stack([r * np.cos(a), r * np.sin(a), np.full(hit.sum(), 0.5),
                    world.reflectivity[near][first[hit]]], axis=1)
    if clutter:
        n = rng.poisson(clutter)
        rc, ac = rng.uniform(2, max_range, n), rng.uniform(0, 2 * np.pi, n)
        cl = np.stack([rc * np.cos(ac), rc * np.sin(ac), np.full(n, 0.5), rng.uniform(0, 0.2, n)], axis=1)
        pts = np.concatenate([pts, cl])
    return pts


def class_codes(n_classes: int, channels: int) -> np.ndarray:
    rng = np.random.default_rng(CLASS_SEED)
    codes = rng.standard_normal((n_classes, channels))
    return codes / np.linalg.norm(codes, axis=1, keepdims=True)


def rig_geometry(kind: str = "surround", image_size=(224, 224), feature_hw=(21, 21)) -> list[dict]:
    """Camera layout as a list of {yaw, fov_deg, position} dicts."""
    if kind == "surround":
        return [{"yaw": math.radians(a), "fov_deg": 70.0, "position": (0.0, 0.0, 1.6)} for a in range(0, 360, 60)]
    if kind == "front":
        return [{"yaw": 0.0, "fov_deg": 90.0, "position": (0.5, 0.0, 1.6)}]
    raise ValueError(f"unknown rig {kind!r}")


def render_camera_features(world: World, pose: Pose2D, geometry: list[dict], channels: int = 16,
                           feature_hw=(21, 21), image_size=(224, 224), max_range: float = 50.0) -> CameraRig:
    """Paint class-coded blobs for every landmark in view, far to near (nearer overwrite)."""
    if not geometry:
        raise ValueError("camera rig needs at least one view")
    codes = class_codes(world.n_classes, channels)
    Hf, Wf = feature_hw
    W_img, H_img = image_size
    near = world.nearby(pose.x, pose.y, max_range)
    c, s = math.cos(pose.yaw), math.sin(pose.yaw)
    rel = world.positions[near] - np.array([pose.x, pose.y])
    local = np.stack([c * rel[:, 0] + s * rel[:, 1], -s * rel[:, 0] + c * rel[:, 1]], axis=1) if len(near) else np.zeros((0, 2))
    dist = np.hypot(local[:, 0], local[:, 1])
    order = np.argsort(-dist, kind="stable")
    yy, xx = np.mgrid[0:Hf, 0:Wf]
    views = []
    for g in geometry:
        K = intrinsics(g["fov_deg"], W_img, H_img)
        R, t = look_at_extrinsics(g["yaw"], g["position"])
        img = np.zeros((channels, Hf, Wf))
        for i in order:
            lm = near[i]
            base = np.array([local[i, 0], local[i, 1], world.height[lm] / 2])
            cam = R @ base + t
            if cam[2] <= 0.5:
                continue
            u = K[0, 0] * cam[0] / cam[2] + K[0, 2]
            v = K[1, 1] * cam[1] / cam[2] + K[1, 2]
            rad_px = K[0, 0] * world.radius[lm] / cam[2]
            hgt_px = K[1, 1] * world.height[lm] / cam[2]
            if u < -rad_px or u > W_img + rad_px:
                continue
            fx, fy = u * Wf / W_img - 0.5, v * Hf / H_img - 0.5
            sx = max(rad_px * Wf / W_img, 0.6)
            sy = max(0.5 * hgt_px * Hf / H_img, 0.6)
            mask = np.exp(-0.5 * (((xx - fx) / sx) ** 2 + ((yy - fy) / sy) ** 2))
            atten = math.exp(-dist[i] / 40.0)
            a = np.clip(mask * 1.5, 0, 1)
            value = codes[world.cls[lm]] * atten * (0.5 + 0.5 * world.reflectivity[lm])
            img = img * (1 - a) + a * value[:, None, None]
        views.append(CameraView(img.astype(np.float32), K, R, t))
    return CameraRig(views)


# --- frames -------------------------------------------------------------------

@dataclass
class RadarData:
    kind: str
    points: np.ndarray | None = None  # single_chip
    intensity: PolarBEV | None = None  # scanning


@dataclass
class MultimodalFrame:
    id: str
    pose: Pose2D
    lidar: np.ndarray | None = None
    radar: RadarData | None = None
    camera: CameraRig | None = None
    timestamps: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def modalities(self) -> tuple[str, ...]:
        out = []
        if self.camera is not None:
            out.append("camera")
        if self.lidar is not None:
            out.append("lidar")
        if self.radar is not None:
            out.append("radar")
        return tuple(out)


@dataclass
class SensorSuite:
    lidar_beams: int | None = 32
    lidar_noise: float = 0.03
    lidar_elevation: tuple[float, float] = (-25.0, 35.0)
    radar_kind: str | None = "single_chip"
    rig: str | None = "surround"
    camera_channels: int = 16
    feature_hw: tuple[int, int] = (21, 21)

    def modalities(self) -> tuple[str, ...]:
        return tuple(m for m, on in (("camera", self.rig), ("lidar", self.lidar_beams), ("radar", self.radar_kind)) if on)

    @classmethod
    def with_modalities(cls, names, **kw) -> "SensorSuite":
        names = set(names)
        s = cls(**kw)
        if "camera" not in names:
            s.rig = None
        if "lidar" not in names:
            s.lidar_beams = None
        if "radar" not in names:
            s.radar_kind = None
        if not s.modalities():
            raise ValueError("sensor suite needs at least one modality")
        return s


def render_frame(world: World, pose: Pose2D, suite: SensorSuite, frame_id: str, noise_seed) -> MultimodalFrame:
    """Render every sensor of ``suite``; noise is drawn from ``noise_seed`` only."""
    ss = np.random.SeedSequence(noise_seed)
    lidar_rng, radar_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    ts = pose.timestamp
    frame = MultimodalFrame(frame_id, pose)
    if suite.lidar_beams:
        frame.lidar = render_lidar(world, pose, suite.lidar_beams, suite.lidar_noise, lidar_rng,
                                   elevation_deg=tuple(suite.lidar_elevation)).astype(np.float32)
        frame.timestamps["lidar"] = ts
    if suite.radar_kind:
        r = render_radar(world, pose, suite.radar_kind, radar_rng)
        if suite.radar_kind == "scanning":
            frame.radar = RadarData("scanning", intensity=r)
        else:
            frame.radar = RadarData("single_chip", points=r.astype(np.float32))
        frame.timestamps["radar"] = ts + 0.02
    if suite.rig:
        frame.camera = render_camera_features(world, pose, rig_geometry(suite.rig), suite.camera_channels,
                                              suite.feature_hw)
        frame.timestamps["camera"] = ts + 0.01
    return frame


# --- perturbations --------------------------------------------------------

def perturb_viewpoint(frame: MultimodalFrame, rng: np.random.Generator | None = None,
                      rot_range=(0.0, 2 * np.pi), trans_range: float = 4.5,
                      world: World | None = None, suite: SensorSuite | None = None,
                      delta: tuple[float, float, float] | None = None) -> MultimodalFrame:
    """Move the vehicle by a random (dx, dy) in the world frame and a random yaw.

    With ``world`` and ``suite`` the frame is re-rendered from the new pose
    (same noise seed); otherwise point data is rigidly transformed into the new
    vehicle frame and camera data, which cannot be re-rendered, is dropped.
    """
    if delta is None:
        rng = rng or np.random.default_rng()
        dx, dy = rng.uniform(-trans_range, trans_range, 2)
        dyaw = rng.uniform(*rot_range)
    else:
        dx, dy, dyaw = delta
    old = frame.pose
    new = Pose2D(old.x + dx, old.y + dy, old.yaw + dyaw, old.timestamp)
    meta = dict(frame.meta)
    meta["perturbation"] = [float(dx), float(dy), float(dyaw)]
    if world is not None and suite is not None:
        out = render_frame(world, new, suite, frame.id, meta.get("noise_seed", 0))
        out.meta = meta
        return out
    # points seen from the new pose: p_new = T_new^-1 T_old p_old
    rel = new.inverse().compose(old)
    out = replace(frame, pose=new, meta=meta, camera=None)
    if frame.lidar is not None:
        out.lidar = transform_points(frame.lidar, rel).astype(np.float32)
    if frame.radar is not None and frame.radar.points is not None:
        out.radar = RadarData(frame.radar.kind, points=transform_points(frame.radar.points, rel).astype(np.float32))
    if not out.modalities:
        raise ValueError("viewpoint perturbation without a world left no modality")
    return out


DEGRADE_MODES = ("drop_modality", "decimate_points", "feature_noise", "radar_noise")


def degrade(frame: MultimodalFrame, mode: str, level: float | str = 1.0,
            rng: np.random.Generator | None = None) -> MultimodalFrame:
    """Simulated degradation. For ``drop_modality``, ``level`` names the sensor."""
    if mode not in DEGRADE_MODES:
        raise ValueError(f"unknown degradation {mode!r}")
    rng = rng or np.random.default_rng(0)
    out = replace(frame, timestamps=dict(frame.timestamps), meta=dict(frame.meta))
    if mode == "drop_modality":
        if level not in frame.modalities:
            return out
        if len(frame.modalities) == 1:
            raise ValueError("cannot drop the last remaining modality")
        setattr(out, str(level), None)
        out.timestamps.pop(str(level), None)
        return out
    level = float(level)
    if mode == "decimate_points":
        if frame.lidar is not None and level < 1:
            pts = frame.lidar
            r = np.hypot(pts[:, 0], pts[:, 1])
            far = r > decimation_range(level)
            keep = ~far | (rng.random(len(pts)) < level)
            out.lidar = pts[keep]
        return out
    if mode == "feature_noise":
        if frame.camera is not None and level > 0:
            views = [replace(v, features=(v.features + level * rng.standard_normal(v.features.shape)).astype(np.float32))
                     for v in frame.camera.views]
            out.camera = CameraRig(views)
        return out
    if frame.radar is not None and level > 0:  # radar_noise
        if frame.radar.points is not None:
            n = rng.poisson(20 * level)
            rc, ac = rng.uniform(2, 50, n), rng.uniform(0, 2 * np.pi, n)
            cl = np.stack([rc * np.cos(ac), rc * np.sin(ac), np.full(n, 0.5), rng.uniform(0, 1, n)], axis=1)
            out.radar = RadarData(frame.radar.kind, points=np.concatenate([frame.radar.points, cl]).astype(np.float32))
        else:
            bev = frame.radar.intensity
            noisy = np.clip(bev.data + level * 0.2 * rng.random(bev.data.shape), 0, 1).astype(np.float32)
            out.radar = RadarData(frame.radar.kind, intensity=replace(bev, data=noisy))
    return out


def decimation_range(level: float) -> float:
    """Range beyond which decimation applies; fog thins the far field first."""
    return 10.0 + 40.0 * level


def perturb_calibration(rig: CameraRig, tau: float, rng: np.random.Generator | None = None) -> CameraRig:
    """Extrinsic noise: random-axis rotation with angle ~ N(0, tau deg), translation ~ N(0, 5 tau cm)."""
    if tau < 0:
        raise ValueError("tau must be non-negative")
    rng = rng or np.random.default_rng(0)
    views = []
    for v in rig.views:
        if tau == 0:
            views.append(replace(v))
            continue
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        angle = math.radians(rng.normal(0.0, tau))
        dR = Rotation.from_rotvec(axis * angle).as_matrix()
        dt = rng.normal(0.0, 0.05 * tau, 3)
        views.append(replace(v, R=dR @ v.R, t=v.t + dt))
    return CameraRig(views)


# --- dataset directory format ------------------------------------------------

MANIFEST = "manifest.json"


def write_dataset(directory: str | Path, frames: list[MultimodalFrame], meta: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "blobs").mkdir(exist_ok=True)
    entries = []
    for i, f in enumerate(frames):
        stem = f"{i:06d}"
        e: dict = {"id": f.id, "timestamps": f.timestamps, "pose": [f.pose.x, f.pose.y, f.pose.yaw],
                   "time": f.pose.timestamp}
        if f.meta:
            e["meta"] = f.meta
        if f.lidar is not None:
            e["lidar"] = f"blobs/{stem}_lidar.bin"
            write_points(directory / e["lidar"], f.lidar)
        if f.radar is not None:
            if f.radar.kind == "scanning":
                path = f"blobs/{stem}_radar.feat"
                write_feature_image(directory / path, f.radar.intensity.data)
                e["radar"] = {"kind": "scanning", "file": path, "m": f.radar.intensity.grid.m}
            else:
                path = f"blobs/{stem}_radar.bin"
                write_points(directory / path, f.radar.points)
                e["radar"] = {"kind": f.radar.kind, "file": path}
        if f.camera is not None:
            cams = []
            for j, v in enumerate(f.camera.views):
                path = f"blobs/{stem}_cam{j}.feat"
                write_feature_image(directory / path, v.features)
                cams.append({"K": np.asarray(v.K).tolist(), "R": np.asarray(v.R).tolist(),
                             "t": np.asarray(v.t).tolist(), "features": path})
            e["cameras"] = cams
        entries.append(e)
    manifest = {"frames": entries, "meta": meta or {}}
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return directory


def read_dataset(directory: str | Path) -> tuple[list[MultimodalFrame], dict]:
    directory = Path(directory)
    mpath = directory / MANIFEST
    try:
        manifest = json.loads(mpath.read_text())
    except FileNotFoundError:
        raise ValueError(f"{mpath}: dataset manifest not found") from None
    except json.JSONDecodeError as exc:
        raise ValueError(f"{mpath}: malformed manifest ({exc})") from None
    if not isinstance(manifest, dict) or not isinstance(manifest.get("frames"), list):
        raise ValueError(f"{mpath}: manifest must contain a 'frames' list")
    frames = []
    for k, e in enumerate(manifest["frames"]):
        try:
            x, y, yaw = e["pose"]
            pose = Pose2D(x, y, yaw, e.get("time", 0.0))
            f = MultimodalFrame(str(e["id"]), pose, timestamps=dict(e.get("timestamps", {})),
                                meta=dict(e.get("meta", {})))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{mpath}: frame {k} is malformed ({exc})") from None
        if e.get("lidar"):
            f.lidar = read_points(directory / e["lidar"])
        if e.get("radar"):
            r = e["radar"]
            if r.get("kind") not in RADAR_KINDS:
                raise ValueError(f"{mpath}: frame {k} has unknown radar kind {r.get('kind')!r}")
            if r["kind"] == "scanning":
                data = read_feature_image(directory / r["file"])
                f.radar = RadarData("scanning", intensity=PolarBEV(PolarBEVGrid(data.shape[1], data.shape[2], r["m"]),
                                                                    data, "intensity"))
            else:
                f.radar = RadarData(r["kind"], points=read_points(directory / r["file"]))
        if e.get("cameras"):
            views = []
            for c in e["cameras"]:
                feats = read_feature_image(directory / c["features"])
                views.append(CameraView(feats, np.array(c["K"]), np.array(c["R"]), np.array(c["t"])))
            f.camera = CameraRig(views)
        frames.append(f)
    return frames, manifest.get("meta", {})


# --- benchmark assembly -------------------------------------------------------

@dataclass
class BenchmarkSpec:
    seed: int = 0
    n_places: int = 200
    n_train: int = 1600
    n_landmarks: int = 6000
    extent: float = 750.0
    place_half_size: tuple[float, float] = (700.0, 700.0)
    place_spacing: float = 60.0
    n_classes: int = 32
    suite: SensorSuite = field(default_factory=SensorSuite)
    trans_range: float = 4.5
    rot_range: tuple[float, float] = (0.0, 2 * np.pi)
    train_radius: float | None = 6.0  # None spreads training poses over the whole place region

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkSpec":
        d = dict(d)
        d["suite"] = SensorSuite(**d.get("suite", {}))
        for k in ("place_half_size", "rot_range"):
            if k in d:
                d[k] = tuple(d[k])
        d["suite"].feature_hw = tuple(d["suite"].feature_hw)
        d["suite"].lidar_elevation = tuple(d["suite"].lidar_elevation)
        return cls(**d)


def benchmark_world(spec: BenchmarkSpec) -> tuple[World, np.ndarray]:
    places = sample_places(spec.seed + 1, spec.n_places, spec.place_half_size, spec.place_spacing)
    world = generate_world(spec.seed, spec.n_landmarks, spec.extent, n_classes=spec.n_classes, clear=places)
    return world, places


def make_split(spec: BenchmarkSpec, split: str, world: World | None = None,
               places: np.ndarray | None = None) -> list[MultimodalFrame]:
    """Frames for ``train`` (random poses around the places), ``db`` (one per
    place) or ``query`` (db places under a random viewpoint perturbation)."""
    if world is None or places is None:
        world, places = benchmark_world(spec)
    split_id = {"train": 0, "db": 1, "query": 2}[split]
    rng = np.random.default_rng([spec.seed, 7, split_id])
    frames = []
    if split == "train":
        hx, hy = spec.place_half_size
        for i in range(spec.n_train):
            # keep the vehicle out of landmark footprints
            for _ in range(100):
                if spec.train_radius is None:
                    p = rng.uniform(-1, 1, 2) * np.array([hx + 10, hy + 10])
                else:
                    r = spec.train_radius * np.sqrt(rng.random())
                    a = rng.uniform(-np.pi, np.pi)
                    p = places[rng.integers(len(places))] + r * np.array([np.cos(a), np.sin(a)])
                near = world.nearby(p[0], p[1], 0.5)
                if len(near) == 0:
                    break
            pose = Pose2D(p[0], p[1], rng.uniform(-np.pi, np.pi), float(i))
            seed = [spec.seed, split_id, i]
            f = render_frame(world, pose, spec.suite, f"train_{i:05d}", seed)
            f.meta["noise_seed"] = seed
            frames.append(f)
        return frames
    for i, (x, y) in enumerate(places):
        yaw = np.random.default_rng([spec.seed, 11, i]).uniform(-np.pi, np.pi)
        pose = Pose2D(x, y, yaw, float(i))
        seed = [spec.seed, split_id, i]
        if split == "db":
            f = render_frame(world, pose, spec.suite, f"db_{i:05d}", seed)
            f.meta["noise_seed"] = seed
        else:
            base = MultimodalFrame(f"query_{i:05d}", pose, meta={"noise_seed": seed})
            f = perturb_viewpoint(base, rng, spec.rot_range, spec.trans_range, world=world, suite=spec.suite)
        frames.append(f)
    return frames
