import numpy as np
import pytest
import torch
from torch import nn

from unimpr.branches import MODALITIES
from unimpr.fusion import (Connector, FusionBranch, ImputationBank, MoELayer, PresenceMask, RouterState,
                           all_masks, assemble_descriptor, tokenize_and_connect)
from unimpr.nn_core import ContractError

T, C, D = 203, 8, 4


def featmaps(mask, seed=0, batch=2):
    g = torch.Generator().manual_seed(seed)
    return {m: torch.randn(batch, C, 29, 7, generator=g, dtype=torch.float64) for m in mask.present}


def parts():
    torch.manual_seed(0)
    bank = ImputationBank(T, D).double()
    conns = nn.ModuleDict({m: Connector(C, D) for m in MODALITIES}).double()
    return bank, conns


def fixed_router_moe(logits, d=3):
    torch.manual_seed(1)
    moe = MoELayer(d, experts=len(logits), k=2).double()
    with torch.no_grad():
        moe.router.weight.zero_()
        moe.router.bias.copy_(torch.tensor(logits, dtype=torch.float64))
    return moe


# --- presence masks ------------------------------------------------------------

def test_mask_parse_and_errors():
    assert PresenceMask.parse("lidar, radar") == PresenceMask(False, True, True)
    assert str(PresenceMask.parse("camera")) == "camera"
    with pytest.raises(ContractError):
        PresenceMask.parse("")
    with pytest.raises(ValueError):
        PresenceMask.parse("sonar")
    assert len(all_masks()) == 7 and len(set(all_masks())) == 7


# --- tokens ------------------------------------------------------------------------

@pytest.mark.parametrize("mask", all_masks(), ids=str)
def test_tokens_shape_and_substitution(mask):
    bank, conns = parts()
    tok = tokenize_and_connect(featmaps(mask), mask, bank, conns)
    assert tok.shape == (2, T, 3 * D)
    for i, m in enumerate(MODALITIES):
        sl = tok[..., i * D:(i + 1) * D]
        if m in mask.present:
            assert not torch.equal(sl[0], bank[m])
        else:
            assert torch.equal(sl[0], bank[m]) and torch.equal(sl[1], bank[m])


def test_tokens_all_present_ignore_bank():
    bank, conns = parts()
    mask = PresenceMask()
    fm = featmaps(mask)
    a = tokenize_and_connect(fm, mask, bank, conns)
    with torch.no_grad():
        for p in bank.parameters():
            p.add_(1.0)
    assert torch.equal(a, tokenize_and_connect(fm, mask, bank, conns))


def test_tokens_order_matches_cells():
    bank, conns = parts()
    mask = PresenceMask(False, True, False)
    fm = featmaps(mask, batch=1)
    tok = tokenize_and_connect(fm, mask, bank, conns)
    q = 52
    cell = fm["lidar"][0, :, q // 7, q % 7]
    assert torch.allclose(tok[0, q, D:2 * D], conns["lidar"](cell))


def test_tokens_mask_mismatch():
    bank, conns = parts()
    with pytest.raises(ContractError):
        tokenize_and_connect(featmaps(PresenceMask(True, True, False)), PresenceMask(), bank, conns)


# --- MoE ---------------------------------------------------------------------------

def test_moe_hand_example():
    moe = fixed_router_moe([2.0, 1.0, 0.0, -1.0])
    x = torch.randn(5, 3, dtype=torch.float64)
    w, probs = moe.gates(x)
    np.testing.assert_allclose(w[0].detach().numpy(), [0.643914, 0.236883, 0, 0], atol=1e-6)
    y, state = moe(x)
    expected = w[0, 0] * moe.experts[0](x) + w[0, 1] * moe.experts[1](x)
    assert torch.allclose(y, expected, atol=1e-12)
    assert torch.allclose(state.L.sum(), torch.tensor(5.0, dtype=torch.float64), atol=1e-9)


def test_moe_single_expert_is_plain_ffn():
    torch.manual_seed(2)
    moe = MoELayer(6, experts=1, k=1).double()
    x = torch.randn(2, 10, 6, dtype=torch.float64)
    y, state = moe(x)
    assert torch.allclose(y, moe.experts[0](x), atol=1e-12)
    assert state.I.tolist() == [20.0]


def test_moe_exactly_k_active_and_k_bounds():
    torch.manual_seed(3)
    moe = MoELayer(8, experts=4, k=2).double()
    w, _ = moe.gates(torch.randn(100, 8, dtype=torch.float64))
    assert ((w != 0).sum(-1) == 2).all()
    with pytest.raises(ContractError):
        MoELayer(8, experts=2, k=3)


def test_moe_renormalize_flag():
    moe = fixed_router_moe([2.0, 1.0, 0.0, -1.0])
    moe.renormalize = True
    w, _ = moe.gates(torch.zeros(1, 3, dtype=torch.float64))
    assert w.sum().item() == pytest.approx(1.0)


# --- fusion / assembly ------------------------------------------------------------------

def test_fusion_forward_unit_and_deterministic():
    torch.manual_seed(0)
    fb = FusionBranch(3 * D, layers=2, heads=2, experts=4, k=2, clusters=4, dim=16).double()
    tok = torch.randn(3, T, 3 * D, dtype=torch.float64)
    d1, s1 = fb(tok)
    d2, _ = fb(tok)
    assert d1.shape == (3, 16)
    assert torch.allclose(d1.norm(dim=-1), torch.ones(3, dtype=torch.float64), atol=1e-12)
    assert torch.equal(d1, d2)
    assert isinstance(s1, RouterState) and s1.E == 4
    assert torch.allclose(s1.L.sum(), torch.tensor(2 * 3 * T, dtype=torch.float64), atol=1e-9)


def test_fusion_permutation_invariant_without_positions():
    torch.manual_seed(0)
    fb = FusionBranch(3 * D, layers=1, heads=2, clusters=4, dim=16).double()
    tok = torch.randn(1, T, 3 * D, dtype=torch.float64)
    perm = torch.randperm(T)
    a, _ = fb(tok)
    b, _ = fb(tok[:, perm])
    assert torch.allclose(a, b, atol=1e-10)


def test_assemble_all_present_parts():
    g = torch.Generator().manual_seed(0)
    descs = {m: torch.nn.functional.normalize(torch.randn(256, generator=g), dim=0) for m in MODALITIES}
    d_f = torch.nn.functional.normalize(torch.randn(256, generator=g), dim=0)
    out = assemble_descriptor(descs, d_f, PresenceMask())
    assert out.shape == (1024,)
    for i in range(4):
        assert out[i * 256:(i + 1) * 256].norm().item() == pytest.approx(0.5, abs=1e-6)


@pytest.mark.parametrize("mask", all_masks(), ids=str)
def test_assemble_zero_slots(mask):
    d_f = torch.nn.functional.normalize(torch.randn(2, 256), dim=-1)
    descs = {m: torch.nn.functional.normalize(torch.randn(2, 256), dim=-1) for m in mask.present}
    out = assemble_descriptor(descs, d_f, mask)
    assert out.shape == (2, 1024)
    assert torch.allclose(out.norm(dim=-1), torch.ones(2), atol=1e-6)
    for i, m in enumerate(MODALITIES):
        if m not in mask.present:
            assert not out[:, i * 256:(i + 1) * 256].any()


def test_assemble_errors():
    d_f = torch.ones(4)
    with pytest.raises(ContractError):
        assemble_descriptor({}, d_f, PresenceMask(False, False, False))
    with pytest.raises(ContractError):
        assemble_descriptor({}, d_f, PresenceMask(False, True, False))
