"""Finite-difference gradient checks for every differentiable op."""

from __future__ import annotations

from typing import Callable

import numpy as np
import torch
from torch.func import functional_call

from .branches import NetVLAD, PooledAggregator
from .fusion import MoELayer, RouterState
from .gaussian import GaussianSet, splat_polar
from .geometry import PolarBEVGrid
from .nn_core import attention, conv2d, grad_check, linear, softmax
from .training import lazy_triplet_loss, load_balance_loss

F64 = torch.float64
TOLERANCE = 1e-4


def _rand(g, *shape):
    return torch.randn(*shape, generator=g, dtype=F64)


def _weighted(y: torch.Tensor, g) -> torch.Tensor:
    # random linear functional turns any output into a scalar
    return (y * _rand(g, *y.shape)).sum()


def _case_linear(g):
    w = _rand(g, 4, 2)
    return (lambda x, W, b: (linear(x, W, b) * w).sum()), [_rand(g, 4, 3), _rand(g, 3, 2), _rand(g, 2)]


def _case_conv(pad_mode, stride):
    def case(g):
        x, k, b = _rand(g, 1, 2, 6, 5), _rand(g, 3, 2, 3, 3), _rand(g, 3)
        w = _rand(g, *conv2d(x, k, b, stride, pad_mode).shape)
        return (lambda x, k, b: (conv2d(x, k, b, stride, pad_mode) * w).sum()), [x, k, b]
    return case


def _case_softmax(g):
    w = _rand(g, 3, 5)
    return (lambda x: (softmax(x) * w).sum()), [_rand(g, 3, 5)]


def _case_attention(g):
    w = _rand(g, 4, 3)
    return (lambda q, k, v: (attention(q, k, v) * w).sum()), [_rand(g, 4, 3), _rand(g, 5, 3), _rand(g, 5, 3)]


def _case_netvlad(g):
    torch.manual_seed(int(torch.randint(0, 2 ** 31, (1,), generator=g)))
    nv = NetVLAD(4, clusters=3, dim=5).double()
    w = _rand(g, 5)

    def f(x, c, aw, proj):
        p = {"centroids": c, "assign_w": aw, "assign_b": nv.assign_b, "proj": proj}
        return (functional_call(nv, p, (x,)) * w).sum()

    return f, [_rand(g, 6, 4), nv.centroids.detach(), nv.assign_w.detach(), nv.proj.detach()]


def _case_gem(g):
    agg = PooledAggregator("gem", 3, 4).double()
    w = _rand(g, 4)

    def f(x, p):
        return (functional_call(agg, {"p": p, "proj": agg.proj}, (x,)) * w).sum()

    x = torch.rand(6, 3, generator=g, dtype=F64) + 0.1
    return f, [x, torch.tensor(2.0 + torch.rand(1, generator=g).item(), dtype=F64)]


def _case_splat(g):
    out = PolarBEVGrid(6, 8)
    mu = torch.rand(3, 2, generator=g, dtype=F64).numpy() * np.array([6.0, 8.0])
    w = _rand(g, 2, 6, 8)

    def f(feats, alpha):
        return (splat_polar(GaussianSet(mu, np.zeros(3), feats, alpha), out) * w).sum()

    return f, [_rand(g, 3, 2), torch.rand(3, generator=g, dtype=F64) * 0.8 + 0.1]


def _case_moe(g):
    torch.manual_seed(int(torch.randint(0, 2 ** 31, (1,), generator=g)))
    moe = MoELayer(3, experts=4, k=2).double()
    while True:
        x = _rand(g, 4, 3)
        top = torch.topk(softmax(moe.router(x)), 3, dim=-1).values
        if (top[:, 1] - top[:, 2]).min() > 1e-3:  # keep away from top-k switching points
            break
    w = _rand(g, 4, 3)
    params = dict(moe.named_parameters())

    def f(x, rw, rb):
        p = dict(params, **{"router.weight": rw, "router.bias": rb})
        return (functional_call(moe, p, (x,))[0] * w).sum()

    return f, [x, moe.router.weight.detach(), moe.router.bias.detach()]


def _case_triplet(semantics):
    def case(g):
        while True:
            q, p, n = _rand(g, 2, 4), _rand(g, 2, 4), _rand(g, 2, 3, 4)
            dn = torch.linalg.vector_norm(q.unsqueeze(-2) - n, dim=-1).sort(-1).values
            if (dn[:, 1:] - dn[:, :-1]).min() > 1e-3:  # distinct negatives keep the pick stable
                break
        return (lambda q, p, n: lazy_triplet_loss(q, p, n, beta=5.0, semantics=semantics)), [q, p, n]
    return case


def _case_load_balance(g):
    I = torch.rand(4, generator=g, dtype=F64) * 3
    L = torch.rand(4, generator=g, dtype=F64) * 3
    return (lambda I, L: load_balance_loss(RouterState(I, L, 2), eps=1e-2)), [I, L]


CASES: dict[str, Callable] = {
    "linear": _case_linear,
    "conv2d_circular": _case_conv("azimuth_circular", 1),
    "conv2d_zero_stride2": _case_conv("zero", 2),
    "softmax": _case_softmax,
    "attention": _case_attention,
    "netvlad": _case_netvlad,
    "gem": _case_gem,
    "splat_polar": _case_splat,
    "moe": _case_moe,
    "triplet_hardest": _case_triplet("hardest"),
    "triplet_literal": _case_triplet("literal"),
    "load_balance": _case_load_balance,
}


def run_suite(seeds: int = 20, ops=None) -> dict[str, float]:
    """Worst relative gradient error per op over ``seeds`` random draws."""
    worst = {}
    for name in ops or CASES:
        if name not in CASES:
            raise ValueError(f"unknown op {name!r}; expected one of {sorted(CASES)}")
        err = 0.0
        for s in range(seeds):
            g = torch.Generator().manual_seed(1000 * s + len(name))
            f, inputs = CASES[name](g)
            err = max(err, grad_check(f, inputs))
        worst[name] = err
    return worst
