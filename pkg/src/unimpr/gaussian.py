"""Camera features -> polar BEV.

A fixed cylindrical grid of 3D sample points is projected into every camera
view; features are bilinearly sampled and averaged over the views that see
the point. A small MLP reduces them and predicts an opacity, and each point
is splatted as an isotropic 2D Gaussian (z collapsed) onto the polar grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn

from .geometry import PolarBEV, PolarBEVGrid


@dataclass
class CameraView:
    features: np.ndarray  # [C, H, W] backbone output
    K: np.ndarray  # 3x3 intrinsics, image pixels
    R: np.ndarray  # 3x3 vehicle -> camera rotation
    t: np.ndarray  # 3, vehicle -> camera translation (m)

    @property
    def image_size(self) -> tuple[float, float]:
        # principal point assumed at the image centre
        return 2.0 * float(self.K[0, 2]), 2.0 * float(self.K[1, 2])

    def horizontal_fov(self) -> float:
        w, _ = self.image_size
        return 2.0 * math.atan(0.5 * w / float(self.K[0, 0]))

    def yaw(self) -> float:
        """Heading of the optical axis in the vehicle frame."""
        fwd = self.R[2]  # camera z axis expressed in vehicle coordinates
        return math.atan2(fwd[1], fwd[0])


@dataclass
class CameraRig:
    views: list[CameraView] = field(default_factory=list)

    def __post_init__(self):
        if not self.views:
            raise ValueError("camera rig needs at least one view")

    def fov_coverage_deg(self, resolution_deg: float = 1.0) -> float:
        """Azimuth coverage of the union of view frustums, in degrees."""
        az = np.deg2rad(np.arange(0.0, 360.0, resolution_deg))
        covered = np.zeros(len(az), dtype=bool)
        for v in self.views:
            half = 0.5 * v.horizontal_fov()
            diff = np.abs(np.angle(np.exp(1j * (az - v.yaw()))))
            covered |= diff <= half
        return float(covered.sum() * resolution_deg)


def look_at_extrinsics(yaw: float, position=(0.0, 0.0, 1.6)) -> tuple[np.ndarray, np.ndarray]:
    """Vehicle->camera (R, t) for a level camera at ``position`` facing ``yaw``."""
    c, s = math.cos(yaw), math.sin(yaw)
    R = np.array([
        [s, -c, 0.0],  # camera x: right
        [0.0, 0.0, -1.0],  # camera y: down
        [c, s, 0.0],  # camera z: forward
    ])
    t = -R @ np.asarray(position, dtype=np.float64)
    return R, t


def intrinsics(fov_deg: float, width: float, height: float) -> np.ndarray:
    f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
    return np.array([[f, 0.0, width / 2], [0.0, f, height / 2], [0.0, 0.0, 1.0]])


@dataclass
class SamplingGrid:
    n_rho: int
    n_theta: int
    n_z: int
    m: float
    z_lo: float
    z_hi: float
    rho: np.ndarray  # [N] per point
    theta: np.ndarray  # [N] in [0, 2pi)
    z: np.ndarray  # [N]

    @property
    def xyz(self) -> np.ndarray:
        return np.stack([self.rho * np.cos(self.theta), self.rho * np.sin(self.theta), self.z], axis=1)

    def __len__(self) -> int:
        return len(self.rho)


def make_cylindrical_grid(n_rho: int = 57, n_theta: int = 52, n_z: int = 4, m: float = 50.0,
                          z_lo: float = 0.0, z_hi: float = 6.0) -> SamplingGrid:
    if min(n_rho, n_theta, n_z) < 1:
        raise ValueError("sampling grid counts must be >= 1")
    if z_lo >= z_hi:
        raise ValueError(f"z_lo ({z_lo}) must be below z_hi ({z_hi})")
    rho = (np.arange(n_rho) + 0.5) * (m / n_rho)
    theta = (np.arange(n_theta) + 0.5) * (2 * np.pi / n_theta)
    z = z_lo + (np.arange(n_z) + 0.5) * ((z_hi - z_lo) / n_z)
    R, T, Z = np.meshgrid(rho, theta, z, indexing="ij")
    return SamplingGrid(n_rho, n_theta, n_z, m, z_lo, z_hi, R.ravel(), T.ravel(), Z.ravel())


def _bilinear(fmap: np.ndarray, fx: np.ndarray, fy: np.ndarray) -> np.ndarray:
    """Sample fmap [C,H,W] at continuous (fx, fy) with edge clamping -> [N, C]."""
    C, H, W = fmap.shape
    x0 = np.floor(fx).astype(np.int64)
    y0 = np.floor(fy).astype(np.int64)
    ax, ay = fx - x0, fy - y0
    x1, y1 = np.clip(x0 + 1, 0, W - 1), np.clip(y0 + 1, 0, H - 1)
    x0, y0 = np.clip(x0, 0, W - 1), np.clip(y0, 0, H - 1)
    f = fmap.astype(np.float64)
    out = (f[:, y0, x0] * ((1 - ax) * (1 - ay)) + f[:, y0, x1] * (ax * (1 - ay))
           + f[:, y1, x0] * ((1 - ax) * ay) + f[:, y1, x1] * (ax * ay))
    return out.T


def lift_features(grid: SamplingGrid, rig: CameraRig) -> tuple[np.ndarray, np.ndarray]:
    """Mean bilinear feature over the views that see each sample point.

    Returns (features [N, C] float32, visible [N] bool); invisible rows are 0.
    """
    pts = grid.xyz
    C = rig.views[0].features.shape[0]
    acc = np.zeros((len(pts), C))
    n = np.zeros(len(pts))
    for view in rig.views:
        cam = pts @ np.asarray(view.R).T + np.asarray(view.t)
        depth = cam[:, 2]
        front = depth > 1e-6
        idx = np.nonzero(front)[0]
        pix = cam[idx] @ np.asarray(view.K).T
        u = pix[:, 0] / pix[:, 2]
        v = pix[:, 1] / pix[:, 2]
        W_img, H_img = view.image_size
        inside = (u >= 0) & (u < W_img) & (v >= 0) & (v < H_img)
        idx, u, v = idx[inside], u[inside], v[inside]
        _, Hf, Wf = view.features.shape
        fx = u * (Wf / W_img) - 0.5
        fy = v * (Hf / H_img) - 0.5
        acc[idx] += _bilinear(view.features, fx, fy)
        n[idx] += 1
    visible = n > 0
    acc[visible] /= n[visible, None]
    return acc.astype(np.float32), visible


@dataclass
class GaussianSet:
    mu: np.ndarray  # [M, 2] (row, col) in output-grid bin units
    z: np.ndarray  # [M], kept for reference; dropped at splat time
    feats: Tensor  # [M, C']
    alpha: Tensor  # [M], in (0, 1)


def gaussian_centers(grid: SamplingGrid, out: PolarBEVGrid) -> np.ndarray:
    """Sample-point (rho, theta) in (row, col) bin units of ``out``, same azimuth convention as point projection."""
    rows = grid.rho / out.m * out.h
    atan = np.arctan2(np.sin(grid.theta), np.cos(grid.theta))
    cols = np.mod(0.5 * (1.0 - atan / np.pi) * out.w, out.w)
    return np.stack([rows, cols], axis=1)


class GaussianHead(nn.Module):
    """Feature reduction MLP and the opacity MLP acting on the reduced feature."""

    def __init__(self, c_in: int, c_out: int, hidden: int = 32):
        super().__init__()
        self.reduce = nn.Sequential(nn.Linear(c_in, hidden), nn.ReLU(), nn.Linear(hidden, c_out))
        self.opacity = nn.Sequential(nn.Linear(c_out, hidden), nn.ReLU(), nn.Linear(hidden, 1))

    def forward(self, f: Tensor) -> tuple[Tensor, Tensor]:
        reduced = self.reduce(f)
        alpha = torch.sigmoid(self.opacity(reduced)).squeeze(-1)
        return reduced, alpha


def prepare_gaussians(grid: SamplingGrid, lifted: np.ndarray | Tensor, visible: np.ndarray,
                      head: GaussianHead, out: PolarBEVGrid) -> GaussianSet:
    mu = gaussian_centers(grid, out)
    keep = np.asarray(visible, dtype=bool)
    f = torch.as_tensor(lifted)[torch.from_numpy(keep)]
    f = f.to(next(head.parameters()).dtype)
    reduced, alpha = head(f)
    return GaussianSet(mu[keep], grid.z[keep], reduced, alpha)


@dataclass
class SplatPlan:
    """Sparse (cell, gaussian, weight) triples for a fixed set of centres."""
    cells: Tensor
    gaussians: Tensor
    weights: Tensor
    n_gaussians: int
    out: PolarBEVGrid


def splat_plan(mu: np.ndarray, out: PolarBEVGrid, sigma_bins: float = 0.75,
               truncation: float | None = 3.0) -> SplatPlan:
    """Precompute Gaussian weights at BEV cell centres.

    Column distance is taken modulo w. ``truncation=None`` evaluates every cell.
    """
    if not sigma_bins > 0:
        raise ValueError("sigma_bins must be positive")
    mu = np.asarray(mu, dtype=np.float64).reshape(-1, 2)
    h, w = out.h, out.w
    if truncation is None:
        g_idx, cell = np.meshgrid(np.arange(len(mu)), np.arange(h * w), indexing="ij")
        g_idx, cell = g_idx.ravel(), cell.ravel()
        rows, cols = cell // w, cell % w
    else:
        radius = truncation * sigma_bins
        span = int(math.ceil(radius)) + 1
        off = np.arange(-span, span + 1)
        dr, dc = np.meshgrid(off, off, indexing="ij")
        base_r = np.floor(mu[:, 0]).astype(np.int64)
        base_c = np.floor(mu[:, 1]).astype(np.int64)
        rows = (base_r[:, None] + dr.ravel()[None]).ravel()
        cols_raw = (base_c[:, None] + dc.ravel()[None]).ravel()
        g_idx = np.repeat(np.arange(len(mu)), dr.size)
        ok = (rows >= 0) & (rows < h)
        rows, cols_raw, g_idx = rows[ok], cols_raw[ok], g_idx[ok]
        cols = np.mod(cols_raw, w)
        # a column may be reached twice when 2*span+1 > w; keep one copy
        key = (g_idx * h + rows) * w + cols
        _, first = np.unique(key, return_index=True)
        first.sort()
        rows, cols, g_idx = rows[first], cols[first], g_idx[first]
    d_r = rows + 0.5 - mu[g_idx, 0]
    d_c = np.mod(cols + 0.5 - mu[g_idx, 1] + w / 2, w) - w / 2
    d2 = d_r ** 2 + d_c ** 2
    if truncation is not None:
        ok = d2 <= (truncation * sigma_bins) ** 2
        rows, cols, g_idx, d2 = rows[ok], cols[ok], g_idx[ok], d2[ok]
    weights = np.exp(-0.5 * d2 / sigma_bins ** 2)
    return SplatPlan(
        torch.from_numpy(rows * w + cols),
        torch.from_numpy(g_idx),
        torch.from_numpy(weights),
        len(mu),
        out,
    )


def apply_splat(plan: SplatPlan, values: Tensor) -> Tensor:
    """values [M, C] or [B, M, C] (already opacity-weighted) -> [C, h, w] / [B, C, h, w]."""
    unbatched = values.dim() == 2
    if unbatched:
        values = values.unsqueeze(0)
    B, M, C = values.shape
    if M != plan.n_gaussians:
        raise ValueError(f"splat plan built for {plan.n_gaussians} gaussians, got {M}")
    h, w = plan.out.h, plan.out.w
    wts = plan.weights.to(values.dtype)
    contrib = values[:, plan.gaussians] * wts[None, :, None]
    out = values.new_zeros(B, h * w, C).index_add(1, plan.cells, contrib)
    out = out.transpose(1, 2).reshape(B, C, h, w)
    return out[0] if unbatched else out


def splat_polar(gaussians: GaussianSet, out: PolarBEVGrid, sigma_bins: float = 0.75,
                truncation: float | None = 3.0) -> Tensor:
    """Opacity-weighted Gaussian splat of a GaussianSet -> Tensor [C', h, w]."""
    plan = splat_plan(gaussians.mu, out, sigma_bins, truncation)
    values = gaussians.feats * gaussians.alpha.unsqueeze(-1)
    return apply_splat(plan, values)


def splat_to_bev(gaussians: GaussianSet, out: PolarBEVGrid, sigma_bins: float = 0.75) -> PolarBEV:
    data = splat_polar(gaussians, out, sigma_bins).detach().cpu().numpy().astype(np.float32)
    return PolarBEV(out, data, "feature")


def write_feature_image(path: str | Path, features: np.ndarray) -> None:
    """[C,H,W] -> header (H, W, C int32 LE) + H*W*C float32 LE, channel-last."""
    C, H, W = features.shape
    header = np.array([H, W, C], dtype="<i4").tobytes()
    body = np.ascontiguousarray(np.transpose(features, (1, 2, 0)), dtype="<f4").tobytes()
    Path(path).write_bytes(header + body)


def read_feature_image(path: str | Path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 12:
        raise ValueError(f"{path}: feature image shorter than its 12-byte header")
    H, W, C = (int(v) for v in np.frombuffer(raw[:12], dtype="<i4"))
    need = 12 + 4 * H * W * C
    if H < 0 or W < 0 or C < 0 or len(raw) != need:
        raise ValueError(f"{path}: expected {need} bytes for {H}x{W}x{C} features, found {len(raw)}")
    body = np.frombuffer(raw[12:], dtype="<f4").reshape(H, W, C)
    return np.ascontiguousarray(np.transpose(body, (2, 0, 1)))
