"""Modality-specific encoders and descriptor aggregators."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor, nn

from .gaussian import GaussianHead, SamplingGrid, apply_splat, gaussian_centers, splat_plan
from .geometry import PolarBEVGrid
from .nn_core import ContractError, adaptive_avg_pool, conv2d, l2_normalize, softmax

MODALITIES = ("camera", "lidar", "radar")
AGGREGATORS = ("netvlad", "gap", "gmp", "gem")
FEATURE_HW = (29, 7)


@dataclass
class BranchConfig:
    modality: str
    grid: tuple[int, int]
    in_channels: int = 1
    stem_channels: int = 16
    channels: list[int] = field(default_factory=lambda: [32, 64])
    strides: list[int] = field(default_factory=lambda: [2, 2])
    c_feat: int = 64
    out_hw: tuple[int, int] = FEATURE_HW
    dim: int = 256
    clusters: int = 16
    aggregator: str = "netvlad"
    pad_mode: str = "azimuth_circular"
    range_channel: bool = False  # append the normalized range row as an extra stem input
    value_bins: int = 0  # >0: expand each occupied cell value into triangular soft bins over (0, 1]
    # camera only
    image_channels: int = 16
    splat_sigma: float = 0.75

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"unknown aggregator {self.aggregator!r}")
        if len(self.channels) != len(self.strides):
            raise ValueError("channels and strides must have equal length")
        self.grid = tuple(self.grid)
        self.out_hw = tuple(self.out_hw)
        self.channels = list(self.channels)
        # each stride is (range, azimuth); a bare int strides both axes
        self.strides = [tuple(int(v) for v in st) if isinstance(st, (list, tuple)) else (int(st), int(st))
                        for st in self.strides]
        if self.channels and self.channels[-1] != self.c_feat:
            raise ValueError("last stage width must equal c_feat")


class Conv(nn.Module):
    # zero-init bias: inactive at init, but lets ReLUs threshold cell values once trained
    def __init__(self, c_in, c_out, k=3, stride=1, pad_mode="azimuth_circular", bias=True):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(c_out, c_in, k, k))
        nn.init.kaiming_normal_(self.weight, nonlinearity="relu")
        self.bias = nn.Parameter(torch.zeros(c_out)) if bias else None
        self.stride = stride
        self.pad_mode = pad_mode

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.pad_mode)


class ResBlock(nn.Module):
    """Normalization-free residual block: skip(x) + gain * conv(relu(conv(relu(x))))."""

    def __init__(self, c_in, c_out, stride=1, pad_mode="azimuth_circular", gain=0.2):
        super().__init__()
        self.conv1 = Conv(c_in, c_out, 3, stride, pad_mode)
        self.conv2 = Conv(c_out, c_out, 3, 1, pad_mode)
        strided = stride not in (1, (1, 1))
        self.skip = Conv(c_in, c_out, 1, stride, pad_mode) if (strided or c_in != c_out) else None
        self.gain = nn.Parameter(torch.tensor(float(gain)))

    def forward(self, x):
        h = self.conv2(torch.relu(self.conv1(torch.relu(x))))
        s = x if self.skip is None else self.skip(x)
        return s + self.gain * h


def soft_bins(x: Tensor, bins: int) -> Tensor:
    """[.., C, H, W] -> [.., C*bins, H, W]; triangular bins on (0, 1], empty (zero) cells map to zero."""
    centers = (torch.arange(bins, dtype=x.dtype, device=x.device) + 0.5) / bins
    v = x.unsqueeze(-3)  # [.., C, 1, H, W]
    enc = torch.relu(1 - (v - centers[:, None, None]).abs() * bins) * (v > 0)
    return enc.flatten(-4, -3)


class Encoder(nn.Module):
    """Stem + strided ResBlocks -> adaptive pool to the common resolution -> + positional encoding."""

    def __init__(self, cfg: BranchConfig):
        super().__init__()
        self.cfg = cfg
        c_in = cfg.in_channels * (cfg.value_bins or 1) + int(cfg.range_channel)
        self.stem = Conv(c_in, cfg.stem_channels, 3, 1, cfg.pad_mode)
        blocks, c = [], cfg.stem_channels
        for c_out, s in zip(cfg.channels, cfg.strides):
            blocks.append(ResBlock(c, c_out, s, cfg.pad_mode))
            c = c_out
        self.blocks = nn.ModuleList(blocks)
        self.pos = nn.Parameter(torch.zeros(cfg.c_feat, *cfg.out_hw))

    def features(self, x: Tensor) -> Tensor:
        """Backbone output after pooling, before the positional encoding."""
        if x.shape[-3] != self.cfg.in_channels:
            raise ContractError(f"{self.cfg.modality} encoder expects {self.cfg.in_channels} channels, got {x.shape[-3]}")
        if self.cfg.value_bins:
            x = soft_bins(x, self.cfg.value_bins)
        if self.cfg.range_channel:
            h, w = x.shape[-2:]
            rows = (torch.arange(h, dtype=x.dtype, device=x.device) + 0.5) / h
            x = torch.cat([x, rows[:, None].expand(*x.shape[:-3], 1, h, w)], dim=-3)
        x = self.stem(x)
        for b in self.blocks:
            x = b(x)
        return adaptive_avg_pool(x, *self.cfg.out_hw)

    def forward(self, x: Tensor) -> Tensor:
        return self.features(x) + self.pos


class NetVLAD(nn.Module):
    def __init__(self, c: int, clusters: int = 16, dim: int = 256):
        super().__init__()
        self.assign_w = nn.Parameter(torch.randn(c, clusters) / np.sqrt(c))
        self.assign_b = nn.Parameter(torch.zeros(clusters))
        self.centroids = nn.Parameter(torch.randn(clusters, c) * 0.1)
        self.proj = nn.Parameter(torch.randn(clusters * c, dim) / np.sqrt(clusters * c))

    @torch.no_grad()
    def init_clusters(self, x: Tensor, iters: int = 20, seed: int = 0) -> None:
        """k-means centroids from sample features x [N, C]; assignment logits -alpha*|x - c|^2 + const."""
        x = x.reshape(-1, x.shape[-1]).to(self.centroids.dtype)
        K = self.centroids.shape[0]
        g = torch.Generator().manual_seed(seed)
        c = x[torch.randperm(len(x), generator=g)[:K]].clone()
        for _ in range(iters):
            lab = torch.cdist(x, c).argmin(1)
            for k in range(K):
                sel = x[lab == k]
                if len(sel):
                    c[k] = sel.mean(0)
        d2 = torch.cdist(x, c).pow(2)
        self.set_centroids(c, float(1.0 / d2.min(1).values.mean().clamp_min(1e-12)))

    @torch.no_grad()
    def set_centroids(self, c: Tensor, alpha: float) -> None:
        """Hard-ish nearest-centroid assignment: logits = -alpha*|x - c_k|^2 up to a per-token constant."""
        self.centroids.copy_(c)
        self.assign_w.copy_(2 * alpha * c.T)
        self.assign_b.copy_(-alpha * c.pow(2).sum(1))

    def forward(self, x: Tensor) -> Tensor:
        """x [N, C] or [B, N, C] -> unit descriptor [D] or [B, D]."""
        if x.shape[-2] < 1:
            raise ContractError("netvlad: empty feature set")
        a = softmax(x @ self.assign_w + self.assign_b, axis=-1)  # [.., N, K]
        at = a.transpose(-1, -2)
        vlad = at @ x - at.sum(-1, keepdim=True) * self.centroids  # [.., K, C]
        vlad = l2_normalize(vlad, 1e-12, dim=-1)
        flat = vlad.reshape(*vlad.shape[:-2], -1)
        return l2_normalize(flat @ self.proj)


class PooledAggregator(nn.Module):
    """GAP / GMP / GeM pooling followed by a linear projection and normalization."""

    def __init__(self, mode: str, c: int, dim: int = 256, p: float = 3.0, eps: float = 1e-6):
        super().__init__()
        if mode not in ("gap", "gmp", "gem"):
            raise ContractError(f"unknown pooling mode {mode!r}")
        self.mode = mode
        self.eps = eps
        self.p = nn.Parameter(torch.tensor(float(p))) if mode == "gem" else None
        self.proj = nn.Parameter(torch.randn(c, dim) / np.sqrt(c))

    def pool(self, x: Tensor) -> Tensor:
        """x [.., N, C] -> [.., C] before projection."""
        if self.mode == "gap":
            return x.mean(-2)
        if self.mode == "gmp":
            return x.amax(-2)
        p = self.p
        return x.clamp_min(self.eps).pow(p).mean(-2).pow(1.0 / p)

    def forward(self, x: Tensor) -> Tensor:
        return l2_normalize(self.pool(x) @ self.proj)


def make_aggregator(mode: str, c: int, dim: int, clusters: int = 16) -> nn.Module:
    if mode == "netvlad":
        return NetVLAD(c, clusters, dim)
    if mode in ("gap", "gmp", "gem"):
        return PooledAggregator(mode, c, dim)
    raise ContractError(f"unknown aggregation mode {mode!r}")


def flatten_tokens(featmap: Tensor) -> Tensor:
    """[.., C, H, W] -> [.., H*W, C]; token q is cell (q // W, q % W)."""
    return featmap.flatten(-2).transpose(-1, -2)


def aggregate(featmap: Tensor, aggregator: nn.Module) -> Tensor:
    return aggregator(flatten_tokens(featmap))


class ModalityBranch(nn.Module):
    """Encoder + aggregator for one modality.

    ``forward`` returns (position-encoded feature map, branch descriptor).
    """

    def __init__(self, cfg: BranchConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.aggregator = make_aggregator(cfg.aggregator, cfg.c_feat, cfg.dim, cfg.clusters)

    def bev(self, x: Tensor) -> Tensor:
        return x

    @torch.no_grad()
    def init_range_bands(self, amplitude: float = 1.0, sharpness: float = 5.0, seed: int = 0) -> None:
        """Positional encoding = one orthogonal code per range band (constant over azimuth) and NetVLAD
        centroids on those codes, so each cluster starts out summing the features of one band."""
        nv = self.aggregator
        if not isinstance(nv, NetVLAD):
            raise ContractError("range-band init needs a NetVLAD aggregator")
        pe = self.encoder.pos
        C, H, W = pe.shape
        K = nv.centroids.shape[0]
        if K > C:
            raise ContractError(f"range-band init needs clusters ({K}) <= channels ({C})")
        g = torch.Generator().manual_seed(seed)
        U = torch.linalg.qr(torch.randn(C, C, generator=g, dtype=torch.float64))[0][:, :K].T.to(pe.dtype)
        band = (torch.arange(H) * K) // H
        pe.copy_(amplitude * U[band].T[:, :, None].expand(C, H, W))
        nv.set_centroids(amplitude * U, sharpness / amplitude ** 2)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        fmap = self.encoder(self.bev(x))
        return fmap, aggregate(fmap, self.aggregator)


class CameraBranch(ModalityBranch):
    """Camera branch: lifted sample-point features are splatted to a polar BEV first.

    Input is the lifted feature tensor [B, N, C_img] with invisible rows masked
    out by a visibility tensor [B, N] (concatenated as a final channel).
    """

    def __init__(self, cfg: BranchConfig, sampling: SamplingGrid, bev_m: float):
        super().__init__(cfg)
        self.sampling = sampling
        self.out_grid = PolarBEVGrid(cfg.grid[0], cfg.grid[1], bev_m)
        self.head = GaussianHead(cfg.image_channels, cfg.in_channels)
        mu = gaussian_centers(sampling, self.out_grid)
        self.plan = splat_plan(mu, self.out_grid, cfg.splat_sigma)

    def bev(self, x: Tensor) -> Tensor:
        feats, vis = x[..., :-1], x[..., -1:]
        reduced, alpha = self.head(feats)
        # invisible points contribute nothing, identical to dropping them
        return apply_splat(self.plan, reduced * (alpha.unsqueeze(-1) * vis))
