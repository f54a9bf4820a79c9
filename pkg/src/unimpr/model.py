"""Whole-network assembly and frame -> tensor preparation."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Mapping

import numpy as np
import torch
from torch import Tensor, nn

from .branches import MODALITIES, BranchConfig, CameraBranch, ModalityBranch, NetVLAD
from .fusion import (Connector, FusionBranch, ImputationBank, PresenceMask, RouterState,
                     assemble_descriptor, tokenize_and_connect)
from .gaussian import SamplingGrid, lift_features, make_cylindrical_grid
from .geometry import PolarBEVGrid, project_cartesian, project_polar, resample_polar
from .nn_core import ContractError, load_checkpoint, save_checkpoint
from .synth import MultimodalFrame


@dataclass
class ModelConfig:
    profile: str = "toy"
    max_range: float = 50.0
    lidar_grid: tuple[int, int] = (180, 40)
    radar_grid: tuple[int, int] = (45, 10)
    camera_grid: tuple[int, int] = (57, 13)
    lidar_strides: list = field(default_factory=lambda: [[2, 1], [2, 1]])  # (range, azimuth) per stage
    radar_strides: list[int] = field(default_factory=lambda: [1, 1])
    camera_strides: list[int] = field(default_factory=lambda: [2])
    stem_channels: int = 8
    c_feat: int = 32
    dim: int = 256
    clusters: int = 16
    aggregator: str = "netvlad"
    range_channel: bool = False
    value_bins: int = 16
    netvlad_init: str = "range_bands"  # or "random"
    bev: str = "polar"  # or "cartesian" (ablation)
    value_mode: str = "max_elevation"  # or "density"
    sampling: tuple[int, int, int] = (57, 26, 2)
    sampling_z: tuple[float, float] = (0.0, 6.0)
    image_channels: int = 16
    camera_bev_channels: int = 8
    splat_sigma: float = 0.75
    d_conn: int = 32
    layers: int = 2
    heads: int = 4
    experts: int = 4
    top_k: int = 2
    renormalize_topk: bool = False
    imputation: str = "learnable"  # or "zero" (ablation)

    @classmethod
    def full_scale(cls, **kw) -> "ModelConfig":
        base = dict(profile="full-scale", lidar_grid=(900, 200), radar_grid=(225, 50), camera_grid=(57, 13),
                    lidar_strides=[2, 2, 2, 2, 2], radar_strides=[2, 2, 2], camera_strides=[2],
                    stem_channels=16, c_feat=64, d_conn=64, sampling=(57, 52, 4))
        base.update(kw)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        d = dict(d)
        for k in ("lidar_grid", "radar_grid", "camera_grid", "sampling", "sampling_z"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def grid(self, modality: str) -> PolarBEVGrid:
        h, w = getattr(self, f"{modality}_grid")
        return PolarBEVGrid(h, w, self.max_range)

    def branch_config(self, modality: str) -> BranchConfig:
        strides = list(getattr(self, f"{modality}_strides"))
        widths = [self.c_feat] * len(strides)
        for i in range(len(strides) - 1):
            widths[i] = max(self.stem_channels, self.c_feat // 2 ** (len(strides) - 1 - i))
        cart = self.bev == "cartesian" and modality != "camera"
        return BranchConfig(
            modality=modality,
            grid=getattr(self, f"{modality}_grid"),
            in_channels=self.camera_bev_channels if modality == "camera" else 1,
            stem_channels=self.stem_channels,
            channels=widths,
            strides=strides,
            c_feat=self.c_feat,
            dim=self.dim,
            clusters=self.clusters,
            aggregator=self.aggregator,
            pad_mode="zero" if cart else "azimuth_circular",
            range_channel=self.range_channel and not cart,
            value_bins=0 if modality == "camera" else self.value_bins,
            image_channels=self.image_channels,
            splat_sigma=self.splat_sigma,
        )

    def sampling_grid(self) -> SamplingGrid:
        n_rho, n_theta, n_z = self.sampling
        return make_cylindrical_grid(n_rho, n_theta, n_z, self.max_range, *self.sampling_z)


class UniMPR(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.sampling = cfg.sampling_grid()
        branches = {}
        for m in MODALITIES:
            bc = cfg.branch_config(m)
            branches[m] = CameraBranch(bc, self.sampling, cfg.max_range) if m == "camera" else ModalityBranch(bc)
        self.branches = nn.ModuleDict(branches)
        if cfg.netvlad_init == "range_bands":
            for b in branches.values():
                if isinstance(b.aggregator, NetVLAD):
                    b.init_range_bands()
        elif cfg.netvlad_init != "random":
            raise ValueError(f"unknown netvlad init {cfg.netvlad_init!r}")
        self.connectors = nn.ModuleDict({m: Connector(cfg.c_feat, cfg.d_conn) for m in MODALITIES})
        tokens = cfg.branch_config("lidar").out_hw[0] * cfg.branch_config("lidar").out_hw[1]
        self.bank = ImputationBank(tokens, cfg.d_conn)
        if cfg.imputation == "zero":
            for p in self.bank.parameters():
                p.data.zero_()
                p.requires_grad_(False)
        elif cfg.imputation != "learnable":
            raise ValueError(f"unknown imputation mode {cfg.imputation!r}")
        self.fusion = FusionBranch(3 * cfg.d_conn, cfg.layers, cfg.heads, cfg.experts, cfg.top_k,
                                   cfg.clusters, cfg.dim, cfg.renormalize_topk)

    def branch_forward(self, modality: str, x: Tensor) -> tuple[Tensor, Tensor]:
        return self.branches[modality](x)

    def fuse(self, featmaps: Mapping[str, Tensor], descs: Mapping[str, Tensor],
             mask: PresenceMask) -> tuple[Tensor, Tensor, RouterState]:
        """(D_M, D_F, router state) from precomputed branch outputs."""
        tokens = tokenize_and_connect({m: featmaps[m] for m in mask.present}, mask, self.bank, self.connectors)
        d_f, state = self.fusion(tokens)
        d_m = assemble_descriptor({m: descs.get(m) for m in mask.present}, d_f, mask)
        return d_m, d_f, state

    def forward(self, inputs: Mapping[str, Tensor], mask: PresenceMask | None = None) -> dict:
        """inputs: modality -> batched branch input. Returns dict with 'descriptor' [B, 4D]."""
        if mask is None:
            mask = PresenceMask.of(inputs)
        mask.validate()
        fmaps, descs = {}, {}
        for m in mask.present:
            if m not in inputs:
                raise ContractError(f"mask marks {m} present but no input was given")
            fmaps[m], descs[m] = self.branch_forward(m, inputs[m])
        d_m, d_f, state = self.fuse(fmaps, descs, mask)
        return {"descriptor": d_m, "fusion": d_f, "branch": descs, "featmaps": fmaps, "router": state}

    # checkpoints

    def save(self, directory, meta: dict | None = None):
        meta = dict(meta or {})
        meta["model"] = self.cfg.to_dict()
        return save_checkpoint(directory, dict(self.state_dict()), meta)

    @classmethod
    def load(cls, directory) -> tuple["UniMPR", dict]:
        tensors, meta = load_checkpoint(directory)
        if "model" not in meta:
            raise ValueError(f"{directory}: checkpoint carries no model config")
        model = cls(ModelConfig.from_dict(meta["model"]))
        model.load_state_dict(tensors)
        return model, meta


# --- frame preparation -----------------------------------------------------

def lidar_input(frame: MultimodalFrame, cfg: ModelConfig) -> np.ndarray:
    h, w = cfg.lidar_grid
    if cfg.bev == "cartesian":
        return project_cartesian(frame.lidar, cfg.max_range, h, w, cfg.value_mode)
    return project_polar(frame.lidar, cfg.grid("lidar"), cfg.value_mode).data


def radar_input(frame: MultimodalFrame, cfg: ModelConfig) -> np.ndarray:
    r = frame.radar
    h, w = cfg.radar_grid
    if r.kind == "scanning":
        return resample_polar(r.intensity, cfg.grid("radar")).data
    if cfg.bev == "cartesian":
        return project_cartesian(r.points, cfg.max_range, h, w, cfg.value_mode)
    return project_polar(r.points, cfg.grid("radar"), cfg.value_mode).data


def camera_input(frame: MultimodalFrame, sampling: SamplingGrid) -> np.ndarray:
    feats, vis = lift_features(sampling, frame.camera)
    return np.concatenate([feats, vis[:, None].astype(np.float32)], axis=1)


def prepare_frames(frames: list[MultimodalFrame], cfg: ModelConfig,
                   modalities=MODALITIES, sampling: SamplingGrid | None = None) -> dict[str, np.ndarray]:
    """Stack branch inputs for every modality present in all frames.

    A modality missing from any frame is left out entirely.
    """
    sampling = sampling or cfg.sampling_grid()
    out = {}
    for m in modalities:
        if not frames or any(getattr(f, m) is None for f in frames):
            continue
        if m == "lidar":
            out[m] = np.stack([lidar_input(f, cfg) for f in frames])
        elif m == "radar":
            out[m] = np.stack([radar_input(f, cfg) for f in frames])
        else:
            out[m] = np.stack([camera_input(f, sampling) for f in frames])
    return out


def to_tensors(inputs: Mapping[str, np.ndarray], idx=None, dtype=torch.float32) -> dict[str, Tensor]:
    return {m: torch.as_tensor(v if idx is None else v[idx], dtype=dtype) for m, v in inputs.items()}


@torch.no_grad()
def extract_descriptors(model: UniMPR, inputs: Mapping[str, np.ndarray], mask: PresenceMask,
                        batch: int = 64) -> np.ndarray:
    """[N, 4D] float32 multimodal descriptors under ``mask``."""
    mask.validate()
    missing = [m for m in mask.present if m not in inputs]
    if missing:
        raise ContractError(f"mask requests {missing} but the data has no such modality")
    n = len(next(iter(inputs[m] for m in mask.present)))
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    for s in range(0, n, batch):
        idx = slice(s, s + batch)
        x = {m: torch.as_tensor(inputs[m][idx], dtype=dtype) for m in mask.present}
        out.append(model(x, mask)["descriptor"].float().numpy())
    return np.concatenate(out)


@torch.no_grad()
def branch_outputs(model: UniMPR, inputs: Mapping[str, np.ndarray], batch: int = 64) -> dict:
    """Frozen-branch cache: modality -> (featmaps [N,C,29,7], descriptors [N,D])."""
    model.eval()
    dtype = next(model.parameters()).dtype
    out = {}
    for m, arr in inputs.items():
        fm, de = [], []
        for s in range(0, len(arr), batch):
            f, d = model.branch_forward(m, torch.as_tensor(arr[s:s + batch], dtype=dtype))
            fm.append(f)
            de.append(d)
        out[m] = (torch.cat(fm), torch.cat(de))
    return out
