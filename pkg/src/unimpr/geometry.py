"""Point clouds to polar / Cartesian BEV images, plus 2D pose utilities.

Point clouds are plain ``np.ndarray`` of shape [N, 4] holding
(x, y, z, intensity) in the sensor frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

VALUE_MODES = ("density", "max_elevation", "intensity", "feature")
DENSITY_CAP = 10
Z_RANGE = (-3.0, 15.0)


@dataclass(frozen=True)
class PolarBEVGrid:
    h: int  # range bins (rows)
    w: int  # azimuth bins (columns)
    m: float = 50.0  # max range, metres

    def __post_init__(self):
        if self.h < 1 or self.w < 1 or not self.m > 0:
            raise ValueError(f"invalid polar grid {self}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.h, self.w)


@dataclass
class PolarBEV:
    grid: PolarBEVGrid
    data: np.ndarray  # [C, h, w]
    value_mode: str = "density"

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[1:] != self.grid.shape:
            raise ValueError(f"BEV data {self.data.shape} does not match grid {self.grid.shape}")
        if self.value_mode not in VALUE_MODES:
            raise ValueError(f"unknown value mode {self.value_mode!r}")

    @property
    def channels(self) -> int:
        return self.data.shape[0]


def wrap_angle(a: float) -> float:
    """Normalize to (-pi, pi]."""
    a = math.remainder(a, 2 * math.pi)
    return math.pi if a == -math.pi else a


@dataclass(frozen=True)
class Pose2D:
    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0
    timestamp: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    def compose(self, other: "Pose2D") -> "Pose2D":
        """self ∘ other: apply ``other`` first, then ``self``."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return Pose2D(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.yaw + other.yaw,
            self.timestamp,
        )

    def inverse(self) -> "Pose2D":
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return Pose2D(-(c * self.x + s * self.y), s * self.x - c * self.y, -self.yaw, self.timestamp)

    def distance(self, other: "Pose2D") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.yaw])


def transform_points(points: np.ndarray, pose: Pose2D) -> np.ndarray:
    """Rigid 2D transform of (x, y); z and intensity untouched."""
    out = np.array(points, dtype=np.float64, copy=True)
    if len(out) == 0:
        return out.reshape(0, points.shape[1] if points.ndim == 2 else 4)
    c, s = math.cos(pose.yaw), math.sin(pose.yaw)
    x, y = out[:, 0].copy(), out[:, 1].copy()
    out[:, 0] = c * x - s * y + pose.x
    out[:, 1] = s * x + c * y + pose.y
    return out


def polar_indices(points: np.ndarray, grid: PolarBEVGrid) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(rows, cols, keep-mask) for each point; points with r >= m are dropped."""
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, np.zeros(0, dtype=bool)
    x, y = pts[:, 0], pts[:, 1]
    r = np.hypot(x, y)
    keep = r < grid.m
    theta = np.arctan2(y[keep], x[keep])
    u = np.floor(0.5 * (1.0 - theta / np.pi) * grid.w).astype(np.int64) % grid.w
    v = np.floor(r[keep] / grid.m * grid.h).astype(np.int64)
    np.minimum(v, grid.h - 1, out=v)
    return v, u, keep


def _rasterize(rows, cols, z, h, w, value_mode, n_cap, z_range) -> np.ndarray:
    img = np.zeros((h, w), dtype=np.float64)
    if value_mode == "density":
        counts = np.bincount(rows * w + cols, minlength=h * w).reshape(h, w)
        img = np.minimum(counts, n_cap) / n_cap
    elif value_mode == "max_elevation":
        zmin, zmax = z_range
        zs = (np.clip(z, zmin, zmax) - zmin) / (zmax - zmin)
        flat = np.full(h * w, -np.inf)
        np.maximum.at(flat, rows * w + cols, zs)
        flat[np.isinf(flat)] = 0.0
        img = flat.reshape(h, w)
    else:
        raise ValueError(f"point projection supports density/max_elevation, got {value_mode!r}")
    return img.astype(np.float32)[None]


def project_polar(points: np.ndarray, grid: PolarBEVGrid, value_mode: str = "density",
                  n_cap: int = DENSITY_CAP, z_range: tuple[float, float] = Z_RANGE) -> PolarBEV:
    rows, cols, keep = polar_indices(points, grid)
    z = np.asarray(points, dtype=np.float64)[keep, 2] if len(rows) else np.zeros(0)
    data = _rasterize(rows, cols, z, grid.h, grid.w, value_mode, n_cap, z_range)
    return PolarBEV(grid, data, value_mode)


def project_cartesian(points: np.ndarray, extent_m: float, h: int, w: int,
                      value_mode: str = "density", n_cap: int = DENSITY_CAP,
                      z_range: tuple[float, float] = Z_RANGE) -> np.ndarray:
    """Uniform x/y binning over [-extent, extent)^2 -> [1, h, w].

    Rows index x (forward), columns index y.
    """
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) == 0:
        return np.zeros((1, h, w), dtype=np.float32)
    x, y = pts[:, 0], pts[:, 1]
    keep = (x >= -extent_m) & (x < extent_m) & (y >= -extent_m) & (y < extent_m)
    rows = np.floor((x[keep] + extent_m) / (2 * extent_m) * h).astype(np.int64)
    cols = np.floor((y[keep] + extent_m) / (2 * extent_m) * w).astype(np.int64)
    np.minimum(rows, h - 1, out=rows)
    np.minimum(cols, w - 1, out=cols)
    return _rasterize(rows, cols, pts[keep, 2], h, w, value_mode, n_cap, z_range)


def cyclic_shift(bev: PolarBEV, j: int) -> PolarBEV:
    """Shift azimuth columns by j (column u moves to u + j mod w)."""
    return replace(bev, data=np.roll(bev.data, j, axis=-1))


def resample_polar(bev: PolarBEV, target: PolarBEVGrid) -> PolarBEV:
    """Bilinear resampling onto ``target``; azimuth wraps, range clamps."""
    src = bev.grid
    if target.m > src.m:
        raise ValueError(f"target range {target.m} exceeds source range {src.m}")
    if target == src:
        return replace(bev, data=bev.data.copy())
    rho = (np.arange(target.h) + 0.5) / target.h * target.m
    rs = rho / src.m * src.h - 0.5
    cs = (np.arange(target.w) + 0.5) / target.w * src.w - 0.5

    r0 = np.floor(rs).astype(np.int64)
    fr = rs - r0
    r1 = np.clip(r0 + 1, 0, src.h - 1)
    r0 = np.clip(r0, 0, src.h - 1)
    c0 = np.floor(cs).astype(np.int64)
    fc = cs - c0
    c1 = (c0 + 1) % src.w
    c0 = c0 % src.w

    d = bev.data.astype(np.float64)
    top = d[:, r0][:, :, c0] * (1 - fc) + d[:, r0][:, :, c1] * fc
    bot = d[:, r1][:, :, c0] * (1 - fc) + d[:, r1][:, :, c1] * fc
    out = top * (1 - fr)[:, None] + bot * fr[:, None]
    return PolarBEV(target, out.astype(np.float32), bev.value_mode)


def write_points(path: str | Path, points: np.ndarray) -> None:
    np.ascontiguousarray(points, dtype="<f4").reshape(-1, 4).tofile(path)


def read_points(path: str | Path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) % 16:
        raise ValueError(f"{path}: point blob size {len(raw)} is not a multiple of 16 bytes (N x 4 float32)")
    return np.frombuffer(raw, dtype="<f4").reshape(-1, 4).copy()
