"""Token fusion: connectors, learnable imputation, MoE transformer, descriptor assembly."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, NamedTuple

import torch
from torch import Tensor, nn

from .branches import MODALITIES, NetVLAD, flatten_tokens
from .nn_core import ContractError, l2_normalize, layer_norm, multi_head_attention, softmax


class PresenceMask(NamedTuple):
    camera: bool = True
    lidar: bool = True
    radar: bool = True

    @classmethod
    def parse(cls, text: str) -> "PresenceMask":
        names = {s.strip() for s in text.split(",") if s.strip()}
        unknown = names - set(MODALITIES)
        if unknown:
            raise ValueError(f"unknown modalities in mask: {sorted(unknown)}")
        mask = cls(*(m in names for m in MODALITIES))
        mask.validate()
        return mask

    @classmethod
    def of(cls, present) -> "PresenceMask":
        present = set(present)
        return cls(*(m in present for m in MODALITIES))

    def validate(self) -> None:
        if not any(self):
            raise ContractError("presence mask must contain at least one modality")

    @property
    def present(self) -> tuple[str, ...]:
        return tuple(m for m, on in zip(MODALITIES, self) if on)

    def __str__(self) -> str:
        return ",".join(self.present)


def all_masks() -> list[PresenceMask]:
    out = []
    for bits in range(1, 8):
        out.append(PresenceMask(bool(bits & 1), bool(bits & 2), bool(bits & 4)))
    return out


@dataclass
class RouterState:
    """Per-batch expert usage: I = kept gating weight mass, L = selection probability mass."""
    I: Tensor
    L: Tensor
    k: int

    @property
    def E(self) -> int:
        return self.I.shape[-1]

    @classmethod
    def empty(cls, E: int, k: int, dtype=torch.float32) -> "RouterState":
        return cls(torch.zeros(E, dtype=dtype), torch.zeros(E, dtype=dtype), k)

    def merge(self, other: "RouterState") -> "RouterState":
        return RouterState(self.I + other.I, self.L + other.L, self.k)


class Connector(nn.Module):
    def __init__(self, c_in: int, d_conn: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(c_in, d_conn), nn.GELU(), nn.Linear(d_conn, d_conn))

    def forward(self, x):
        return self.net(x)


class ImputationBank(nn.Module):
    """Learnable stand-in token maps, one per modality, shaped [T, d_conn]."""

    def __init__(self, tokens: int, d_conn: int):
        super().__init__()
        self.maps = nn.ParameterDict({m: nn.Parameter(torch.randn(tokens, d_conn) * 0.02) for m in MODALITIES})

    def __getitem__(self, modality: str) -> Tensor:
        return self.maps[modality]


def tokenize_and_connect(featmaps: Mapping[str, Tensor], mask: PresenceMask, bank: ImputationBank,
                         connectors: Mapping[str, nn.Module]) -> Tensor:
    """Per-position concatenation of connected (or imputed) modality tokens.

    featmaps holds [B, C, 29, 7] maps for exactly the present modalities.
    Returns [B, T, 3 * d_conn].
    """
    mask.validate()
    if set(featmaps) != set(mask.present):
        raise ContractError(f"feature maps for {sorted(featmaps)} do not match mask {mask.present}")
    batch = next(iter(featmaps.values())).shape[0]
    parts = []
    for m in MODALITIES:
        if m in featmaps:
            parts.append(connectors[m](flatten_tokens(featmaps[m])))
        else:
            parts.append(bank[m].unsqueeze(0).expand(batch, -1, -1))
    return torch.cat(parts, dim=-1)


class MoELayer(nn.Module):
    """Top-k gated mixture of MLP experts applied per token.

    Kept weights are the raw softmax probabilities (no renormalization) unless
    ``renormalize`` is set.
    """

    def __init__(self, d: int, experts: int = 4, k: int = 2, hidden: int | None = None,
                 renormalize: bool = False):
        super().__init__()
        if not 1 <= k <= experts:
            raise ContractError(f"moe: need 1 <= k <= E, got k={k}, E={experts}")
        hidden = hidden or 2 * d
        self.k = k
        self.renormalize = renormalize
        self.router = nn.Linear(d, experts)
        self.experts = nn.ModuleList(
            nn.Sequential(nn.Linear(d, hidden), nn.GELU(), nn.Linear(hidden, d)) for _ in range(experts)
        )

    @property
    def E(self) -> int:
        return len(self.experts)

    def gates(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """(kept weights, full probabilities), both [.., E]."""
        probs = softmax(self.router(x), axis=-1)
        top = torch.topk(probs, self.k, dim=-1).indices
        keep = torch.zeros_like(probs).scatter(-1, top, 1.0)
        weights = probs * keep
        if self.renormalize:
            weights = weights / weights.sum(-1, keepdim=True)
        return weights, probs

    def forward(self, x: Tensor) -> tuple[Tensor, RouterState]:
        weights, probs = self.gates(x)
        flat = x.reshape(-1, x.shape[-1])
        wflat = weights.reshape(-1, self.E)
        out = torch.zeros_like(flat)
        for e, expert in enumerate(self.experts):
            sel = torch.nonzero(wflat[:, e] != 0).squeeze(-1)
            if sel.numel() == 0:
                continue
            out = out.index_add(0, sel, wflat[sel, e:e + 1] * expert(flat[sel]))
        lead = tuple(range(x.dim() - 1))
        state = RouterState(weights.sum(dim=lead), probs.sum(dim=lead), self.k)
        return out.reshape(x.shape), state


class EncoderBlock(nn.Module):
    """Post-norm transformer encoder block with an MoE feed-forward sublayer."""

    def __init__(self, d: int, heads: int = 4, experts: int = 4, k: int = 2, renormalize: bool = False):
        super().__init__()
        self.heads = heads
        s = d ** -0.5
        self.attn = nn.ParameterDict({
            "wq": nn.Parameter(torch.randn(d, d) * s), "bq": nn.Parameter(torch.zeros(d)),
            "wk": nn.Parameter(torch.randn(d, d) * s), "bk": nn.Parameter(torch.zeros(d)),
            "wv": nn.Parameter(torch.randn(d, d) * s), "bv": nn.Parameter(torch.zeros(d)),
            "wo": nn.Parameter(torch.randn(d, d) * s), "bo": nn.Parameter(torch.zeros(d)),
        })
        self.ln1_w, self.ln1_b = nn.Parameter(torch.ones(d)), nn.Parameter(torch.zeros(d))
        self.ln2_w, self.ln2_b = nn.Parameter(torch.ones(d)), nn.Parameter(torch.zeros(d))
        self.moe = MoELayer(d, experts, k, renormalize=renormalize)

    def forward(self, x: Tensor) -> tuple[Tensor, RouterState]:
        x = layer_norm(x + multi_head_attention(x, self.heads, self.attn), self.ln1_w, self.ln1_b)
        y, state = self.moe(x)
        return layer_norm(x + y, self.ln2_w, self.ln2_b), state


class FusionBranch(nn.Module):
    def __init__(self, d_tok: int, layers: int = 2, heads: int = 4, experts: int = 4, k: int = 2,
                 clusters: int = 16, dim: int = 256, renormalize: bool = False):
        super().__init__()
        self.blocks = nn.ModuleList(EncoderBlock(d_tok, heads, experts, k, renormalize) for _ in range(layers))
        self.netvlad = NetVLAD(d_tok, clusters, dim)

    def forward(self, tokens: Tensor) -> tuple[Tensor, RouterState]:
        state = None
        x = tokens
        for blk in self.blocks:
            x, s = blk(x)
            state = s if state is None else state.merge(s)
        return self.netvlad(x), state


def assemble_descriptor(branch: Mapping[str, Tensor | None], d_f: Tensor, mask: PresenceMask) -> Tensor:
    """Concatenate [camera | lidar | radar | fusion], zeros for absent branches, then L2-normalize."""
    mask.validate()
    parts = []
    for m, on in zip(MODALITIES, mask):
        d = branch.get(m)
        if on:
            if d is None:
                raise ContractError(f"mask marks {m} present but its descriptor is missing")
            parts.append(d)
        else:
            parts.append(torch.zeros_like(d_f))
    parts.append(d_f)
    return l2_normalize(torch.cat(parts, dim=-1))
