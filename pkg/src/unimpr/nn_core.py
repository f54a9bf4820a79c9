"""Differentiable compute core.

Thin functional layer over torch autograd: the handful of operations the
network needs (with the BEV-specific azimuth-circular padding), a
finite-difference gradient checker, a hand-rolled Adam over named parameter
maps, and the raw float32 checkpoint format.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

PAD_MODES = ("zero", "azimuth_circular")


class ContractError(ValueError):
    """Raised when an operation's shape/value preconditions are violated."""


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x W + b with W laid out as [Cin, Cout]."""
    if x.shape[-1] != W.shape[0]:
        raise ContractError(f"linear: x has {x.shape[-1]} input features, W expects {W.shape[0]}")
    if b is not None and b.shape[-1] != W.shape[1]:
        raise ContractError(f"linear: bias size {b.shape[-1]} != output size {W.shape[1]}")
    y = x @ W
    return y + b if b is not None else y


def conv2d(x: Tensor, k: Tensor, bias: Tensor | None = None, stride: int | tuple[int, int] = 1,
           pad_mode: str = "zero") -> Tensor:
    """Cross-correlation of x [C,H,W] or [B,C,H,W] with k [Cout,C,kh,kw].

    Padding is "same"-sized (kh//2, kw//2). With ``azimuth_circular`` the last
    (azimuth) axis wraps cyclically while the range axis is zero padded.
    """
    if pad_mode not in PAD_MODES:
        raise ContractError(f"conv2d: unknown pad_mode {pad_mode!r}")
    unbatched = x.dim() == 3
    if unbatched:
        x = x.unsqueeze(0)
    if x.dim() != 4 or k.dim() != 4:
        raise ContractError("conv2d: expected x [B,C,H,W] or [C,H,W] and k [Cout,C,kh,kw]")
    if x.shape[1] != k.shape[1]:
        raise ContractError(f"conv2d: input has {x.shape[1]} channels, kernel expects {k.shape[1]}")
    kh, kw = k.shape[-2:]
    ph, pw = kh // 2, kw // 2
    if pad_mode == "azimuth_circular":
        if pw > x.shape[-1]:
            raise ContractError("conv2d: circular pad wider than the azimuth axis")
        if pw:
            x = torch.cat([x[..., -pw:], x, x[..., :pw]], dim=-1)
        padding = (ph, 0)
    else:
        padding = (ph, pw)
    padded = (x.shape[-2] + 2 * padding[0], x.shape[-1] + 2 * padding[1])
    if kh > padded[0] or kw > padded[1]:
        raise ContractError(f"conv2d: kernel {kh}x{kw} larger than padded input {padded}")
    # zero padding happens inside the convolution, which avoids a padded copy
    y = F.conv2d(x, k, bias, stride=stride, padding=padding)
    return y.squeeze(0) if unbatched else y


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x - x.amax(dim=axis, keepdim=True).detach()
    e = torch.exp(z)
    return e / e.sum(dim=axis, keepdim=True)


def layer_norm(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    y = (x - mu) / torch.sqrt(var + eps)
    if weight is not None:
        y = y * weight
    if bias is not None:
        y = y + bias
    return y


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d_k)) v over the last two axes."""
    d_k = q.shape[-1]
    scores = q @ k.transpose(-1, -2) / math.sqrt(d_k)
    return softmax(scores, axis=-1) @ v


def multi_head_attention(x: Tensor, heads: int, params: Mapping[str, Tensor]) -> Tensor:
    """Multi-head self-attention over tokens x [T,C] (or [B,T,C]).

    ``params`` holds wq, wk, wv, wo as [C,C] matrices and optional bq, bk, bv, bo.
    Returns the output projection of the concatenated heads (no residual;
    the encoder block in :mod:`unimpr.fusion` adds residual + layer norm).
    """
    T, C = x.shape[-2:]
    if T == 0:
        raise ContractError("multi_head_attention: empty token sequence")
    if C % heads:
        raise ContractError(f"multi_head_attention: {C} channels not divisible by {heads} heads")
    d_k = C // heads
    lead = x.shape[:-2]

    def split(t: Tensor) -> Tensor:
        return t.reshape(*lead, T, heads, d_k).transpose(-2, -3)

    q = split(linear(x, params["wq"], params.get("bq")))
    k = split(linear(x, params["wk"], params.get("bk")))
    v = split(linear(x, params["wv"], params.get("bv")))
    out = attention(q, k, v).transpose(-2, -3).reshape(*lead, T, C)
    return linear(out, params["wo"], params.get("bo"))


def adaptive_avg_pool(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Average pool [..,C,H,W] to [..,C,out_h,out_w].

    Window i covers [floor(i*H/out_h), ceil((i+1)*H/out_h)), the same rule
    torch uses, so the torch kernel is called directly.
    """
    if out_h < 1 or out_w < 1:
        raise ContractError("adaptive_avg_pool: output dims must be positive")
    H, W = x.shape[-2:]
    if out_h > H or out_w > W:
        raise ContractError(f"adaptive_avg_pool: cannot pool {H}x{W} up to {out_h}x{out_w}")
    if (H, W) == (out_h, out_w):
        return x
    return F.adaptive_avg_pool2d(x, (out_h, out_w))


def l2_normalize(x: Tensor, eps: float = 1e-12, dim: int = -1) -> Tensor:
    norm = torch.linalg.vector_norm(x, dim=dim, keepdim=True)
    return x / norm.clamp_min(eps)


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], step: float = 1e-5) -> float:
    """Max relative error between autograd and central-difference gradients.

    ``f`` maps the inputs to a scalar. Inputs are cloned to float64. The
    relative error per entry is |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8).
    """
    xs = [t.detach().to(torch.float64).clone().requires_grad_(True) for t in inputs]
    out = f(*xs)
    if out.numel() != 1:
        raise ContractError("grad_check: f must return a scalar")
    ad = torch.autograd.grad(out, xs, allow_unused=True)
    ad = [torch.zeros_like(x) if g is None else g for x, g in zip(xs, ad)]

    worst = 0.0
    with torch.no_grad():
        for x, g in zip(xs, ad):
            flat = x.view(-1)
            gflat = g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                fp = f(*xs).item()
                flat[i] = orig - step
                fm = f(*xs).item()
                flat[i] = orig
                fd = (fp - fm) / (2 * step)
                a = gflat[i].item()
                err = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
                worst = max(worst, err)
    return worst


class ParameterSet:
    """Named trainable tensors plus their Adam state.

    Parameters are held by reference, so a set built from a module updates
    the module in place.
    """

    def __init__(self, params: Mapping[str, Tensor]):
        self.params: dict[str, Tensor] = dict(params)
        self.exp_avg: dict[str, Tensor] = {}
        self.exp_avg_sq: dict[str, Tensor] = {}
        self.steps: dict[str, int] = {}

    @classmethod
    def from_module(cls, module: torch.nn.Module, prefixes: Iterable[str] | None = None) -> "ParameterSet":
        prefixes = tuple(prefixes) if prefixes is not None else None
        named = {
            n: p for n, p in module.named_parameters()
            if prefixes is None or n.startswith(prefixes)
        }
        return cls(named)

    def __len__(self) -> int:
        return len(self.params)

    def __iter__(self):
        return iter(self.params)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def grads(self) -> dict[str, Tensor | None]:
        return {n: p.grad for n, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def count(self) -> int:
        return sum(p.numel() for p in self.params.values())


def adam_step(pset: ParameterSet, grads: Mapping[str, Tensor | None], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place Adam update with bias correction.

    Parameters whose gradient is None are skipped (frozen for this step).
    """
    if lr <= 0:
        raise ContractError(f"adam_step: learning rate must be positive, got {lr}")
    with torch.no_grad():
        for name, p in pset.params.items():
            g = grads.get(name)
            if g is None:
                continue
            if g.shape != p.shape:
                raise ContractError(f"adam_step: grad shape {tuple(g.shape)} != param {name} {tuple(p.shape)}")
            if name not in pset.exp_avg:
                pset.exp_avg[name] = torch.zeros_like(p)
                pset.exp_avg_sq[name] = torch.zeros_like(p)
                pset.steps[name] = 0
            m, v = pset.exp_avg[name], pset.exp_avg_sq[name]
            pset.steps[name] += 1
            t = pset.steps[name]
            m.mul_(beta1).add_(g, alpha=1 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
            m_hat = m / (1 - beta1 ** t)
            v_hat = v / (1 - beta2 ** t)
            p.sub_(lr * m_hat / (v_hat.sqrt() + eps))


# Checkpoints: manifest.json + one little-endian float32 blob.

MANIFEST = "manifest.json"
BLOB = "params.f32"


def save_checkpoint(directory: str | Path, tensors: Mapping[str, Tensor], meta: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    chunks = []
    for name in sorted(tensors):
        arr = tensors[name].detach().cpu().numpy().astype("<f4", copy=False)
        arr = np.ascontiguousarray(arr)
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32", "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    (directory / BLOB).write_bytes(b"".join(chunks))
    manifest = {"blob": BLOB, "tensors": entries, "meta": meta or {}}
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return directory


def load_checkpoint(directory: str | Path) -> tuple[dict[str, Tensor], dict]:
    directory = Path(directory)
    mpath = directory / MANIFEST
    if not mpath.exists():
        raise FileNotFoundError(f"checkpoint manifest not found: {mpath}")
    manifest = json.loads(mpath.read_text())
    blob = (directory / manifest["blob"]).read_bytes()
    out = {}
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        end = e["offset"] + 4 * n
        if end > len(blob):
            raise ValueError(f"{directory / manifest['blob']}: truncated at tensor {e['name']}")
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=e["offset"]).reshape(e["shape"])
        out[e["name"]] = torch.from_numpy(arr.copy())
    return out, manifest.get("meta", {})
