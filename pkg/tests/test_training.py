import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_data
from unimpr.fusion import RouterState
from unimpr.geometry import Pose2D
from unimpr.nn_core import ContractError
from unimpr.training import (BUFFER, NEGATIVE, POSITIVE, UNLABELED, LabelRule, TrainConfig, Triplet, align_timestamps,
                             assign_labels, joint_labels, label_codes, lazy_triplet_loss, load_balance_loss,
                             mine_triplets, mined_triplet_loss, train_end_to_end, train_stage1, train_stage2)


def label_oracle(q: Pose2D, c: Pose2D, rule: LabelRule) -> int:
    """Per-pair rule written out case by case."""
    d = math.hypot(q.x - c.x, q.y - c.y)
    if rule.fov_class == "panoramic":
        if d <= rule.d_pos:
            return POSITIVE
        if d <= rule.d_non_neg:
            return BUFFER
        return NEGATIVE
    dh = abs((c.yaw - q.yaw + math.pi) % (2 * math.pi) - math.pi)
    aligned = math.degrees(dh) <= rule.heading_thresh
    if d > rule.d_non_neg:
        return NEGATIVE
    if not aligned:
        return UNLABELED
    return POSITIVE if d <= rule.d_pos else BUFFER


# --- labels ---------------------------------------------------------------------------

def test_label_examples():
    pano, lim = LabelRule(), LabelRule(fov_class="limited")
    q = Pose2D(0, 0, 0)
    opposite = Pose2D(5, 0, math.pi)
    assert label_codes(np.zeros(2), 0.0, np.array([[5.0, 0.0]]), np.array([math.pi]), pano)[0] == POSITIVE
    assert label_oracle(q, opposite, lim) == UNLABELED
    assert label_codes(np.zeros(2), 0.0, np.array([[5.0, 0.0]]), np.array([math.pi]), lim)[0] == UNLABELED
    assert label_codes(np.zeros(2), 0.0, np.array([[10.0, 0.0]]), np.array([0.0]), pano)[0] == BUFFER
    assert label_codes(np.zeros(2), 0.0, np.array([[12.5, 0.0]]), np.array([0.0]), lim)[0] == NEGATIVE


def test_label_rule_validation():
    with pytest.raises(ValueError):
        LabelRule(d_pos=12, d_non_neg=9)
    with pytest.raises(ValueError):
        LabelRule(fov_class="fisheye")
    with pytest.raises(ValueError):
        LabelRule(heading_thresh=0)


@pytest.mark.parametrize("fov", ["panoramic", "limited"])
def test_labels_match_oracle_on_1000_pairs(fov):
    rng = np.random.default_rng(7)
    rule = LabelRule(fov_class=fov)
    q = Pose2D(0.0, 0.0, 0.4)
    cands = [Pose2D(*rng.uniform(-16, 16, 2), rng.uniform(-np.pi, np.pi)) for _ in range(1000)]
    sets = assign_labels(q, cands, rule)
    got = np.empty(1000, dtype=int)
    for code, idx in zip((POSITIVE, NEGATIVE, UNLABELED, BUFFER), (sets.positives, sets.negatives, sets.unlabeled,
                                                                    sets.buffer)):
        got[idx] = code
    assert got.tolist() == [label_oracle(q, c, rule) for c in cands]


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 20), st.floats(-math.pi, math.pi), st.floats(-math.pi, math.pi), st.floats(-math.pi, math.pi))
def test_labels_match_oracle_property(d, bearing, yq, yc):
    q, c = Pose2D(0.0, 0.0, yq), Pose2D(d * math.cos(bearing), d * math.sin(bearing), yc)
    for fov in ("panoramic", "limited"):
        rule = LabelRule(fov_class=fov)
        code = label_codes(np.zeros(2), yq, np.array([[c.x, c.y]]), np.array([yc]), rule)[0]
        assert code == label_oracle(q, c, rule)


def test_joint_labels_need_every_rule(tiny_cfg):
    data = tiny_data(tiny_cfg)
    data.rules["camera"] = LabelRule(fov_class="limited")
    pos_all, neg_all = joint_labels(data, 0, ["camera", "lidar"])
    pos_l, neg_l = joint_labels(data, 0, ["lidar"])
    assert not pos_all[0] and not neg_all[0]
    assert np.all(pos_all <= pos_l) and np.array_equal(neg_all, neg_l)


# --- losses ---------------------------------------------------------------------------

def test_lazy_triplet_hand_values():
    q = torch.tensor([0.0, 0.0])
    p = torch.tensor([0.3, 0.4])  # d_pos = 0.5
    negs = torch.tensor([[0.6, 0.8], [0.0, 0.7]])  # distances 1.0, 0.7
    assert lazy_triplet_loss(q, p, negs, 0.5, "hardest").item() == pytest.approx(0.3)
    assert lazy_triplet_loss(q, p, negs, 0.5, "literal").item() == pytest.approx(0.0)
    assert lazy_triplet_loss(q, p, negs, 1.0, "literal").item() == pytest.approx(0.5)
    with pytest.raises(ContractError):
        lazy_triplet_loss(q, p, torch.zeros(0, 2))
    with pytest.raises(ContractError):
        lazy_triplet_loss(q, p, negs, semantics="softest")


def test_load_balance_hand_values():
    uniform = RouterState(torch.full((4,), 3.0, dtype=torch.float64), torch.full((4,), 2.0, dtype=torch.float64), 2)
    assert load_balance_loss(uniform).item() == pytest.approx(0.0, abs=1e-12)
    skew = RouterState(torch.tensor([2.0, 0, 0, 0], dtype=torch.float64), torch.ones(4, dtype=torch.float64), 2)
    assert load_balance_loss(skew, eps=1e-12).item() == pytest.approx(3.0, abs=1e-6)


def test_mined_loss_matches_full_batch_value_and_gradient():
    torch.manual_seed(0)
    emb = torch.randn(12, 5, dtype=torch.float64, requires_grad=True)
    trips = [Triplet(0, 1, np.array([4, 5, 6])), Triplet(2, 3, np.array([7, 8, 9]))]

    def encode(ids):
        return torch.nn.functional.normalize(emb[torch.as_tensor(ids)] * 2.0, dim=-1)

    for semantics in ("hardest", "literal"):
        emb.grad = None
        mined = mined_triplet_loss(encode, trips, 1.5, semantics)
        mined.backward()
        g_mined = emb.grad.clone()
        emb.grad = None
        full = sum(lazy_triplet_loss(encode([t.query])[0], encode([t.positive])[0], encode(t.negatives), 1.5, semantics)
                   for t in trips) / len(trips)
        full.backward()
        assert mined.item() == pytest.approx(full.item(), abs=1e-12)
        assert torch.allclose(g_mined, emb.grad, atol=1e-12)


# --- mining ----------------------------------------------------------------------------

def test_mining_respects_labels(tiny_cfg):
    data = tiny_data(tiny_cfg)
    rng = np.random.default_rng(0)
    for t in mine_triplets(data, ["lidar"], 16, 5, rng):
        d = lambda j: np.hypot(*(data.xy[j] - data.xy[t.query]))  # noqa: E731
        assert t.positive != t.query and d(t.positive) <= 9.0
        assert len(t.negatives) == 5 and all(d(j) > 12.0 for j in t.negatives)


def test_mining_with_cache_picks_closest(tiny_cfg):
    data = tiny_data(tiny_cfg)
    cache = np.random.default_rng(1).normal(size=(len(data), 4))
    t = mine_triplets(data, ["lidar"], 1, 3, np.random.default_rng(2), cache)[0]
    _, neg = joint_labels(data, t.query, ["lidar"])
    cand = np.nonzero(neg)[0]
    order = cand[np.argsort(np.linalg.norm(cache[cand] - cache[t.query], axis=1), kind="stable")]
    assert t.negatives.tolist() == order[:3].tolist()


def test_mining_fails_without_negatives(tiny_cfg):
    data = tiny_data(tiny_cfg, n_places=1)
    with pytest.raises(ContractError):
        mine_triplets(data, ["lidar"], 2, 3, np.random.default_rng(0), max_tries=50)


# --- stages -----------------------------------------------------------------------------

def snapshot(model):
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def changed(before, model, prefix):
    return {k for k, v in model.state_dict().items() if k.startswith(prefix) and not torch.equal(v, before[k])}


FAST = dict(epochs=1, steps_per_epoch=2, B=2, o=3, lr=1e-3)


def test_stage1_touches_only_its_branch(tiny_model, tiny_cfg):
    data = tiny_data(tiny_cfg)
    before = snapshot(tiny_model)
    hist = train_stage1(tiny_model, "lidar", [data], TrainConfig(**FAST))
    assert len(hist) == 2 and all(r["stage"] == "1:lidar" for r in hist)
    assert changed(before, tiny_model, "branches.lidar.")
    for prefix in ("branches.camera.", "branches.radar.", "connectors.", "bank.", "fusion."):
        assert not changed(before, tiny_model, prefix), prefix
    assert all(p.requires_grad for p in tiny_model.parameters())


def test_stage2_freezes_branches(tiny_model, tiny_cfg):
    data = tiny_data(tiny_cfg)
    before = snapshot(tiny_model)
    hist = train_stage2(tiny_model, [data], TrainConfig(**FAST, modality_dropout=0.5))
    assert [r["step"] for r in hist] == [0, 1] and all("load_balance" in r for r in hist)
    assert not changed(before, tiny_model, "branches.")
    assert changed(before, tiny_model, "fusion.") and changed(before, tiny_model, "connectors.")


def test_end_to_end_trains_everything(tiny_model, tiny_cfg):
    data = tiny_data(tiny_cfg)
    before = snapshot(tiny_model)
    train_end_to_end(tiny_model, [data], TrainConfig(**FAST))
    for prefix in ("branches.camera.", "branches.lidar.", "branches.radar.", "fusion."):
        assert changed(before, tiny_model, prefix), prefix


def test_training_is_deterministic(tiny_cfg):
    from unimpr.model import UniMPR
    out = []
    for _ in range(2):
        torch.manual_seed(3)
        m = UniMPR(tiny_cfg)
        data = tiny_data(tiny_cfg)
        h = train_stage1(m, "radar", [data], TrainConfig(**FAST, seed=5))
        out.append(([r["loss"] for r in h], snapshot(m)))
    assert out[0][0] == out[1][0]
    assert all(torch.equal(out[0][1][k], out[1][1][k]) for k in out[0][1])


def test_multi_dataset_accumulation_equals_joint_gradient(tiny_cfg):
    """Per-dataset backward passes sum to the gradient of the summed loss."""
    from unimpr.model import UniMPR
    torch.manual_seed(0)
    m = UniMPR(tiny_cfg).double()
    sets = [tiny_data(tiny_cfg, seed=s, name=f"d{s}") for s in (0, 1)]
    trips = [mine_triplets(d, ["lidar"], 2, 3, np.random.default_rng(s)) for s, d in enumerate(sets)]

    def loss_for(d, t):
        return mined_triplet_loss(lambda ids: m.branch_forward("lidar", torch.as_tensor(d.inputs["lidar"][ids],
                                                                                         dtype=torch.float64))[1],
                                  t, 5.0)

    params = list(m.branches["lidar"].parameters())
    for d, t in zip(sets, trips):
        loss_for(d, t).backward()
    acc = [p.grad.clone() for p in params]
    m.zero_grad()
    (loss_for(sets[0], trips[0]) + loss_for(sets[1], trips[1])).backward()
    assert all(torch.allclose(a, p.grad, atol=1e-12) for a, p in zip(acc, params))


def test_stage1_errors_without_modality(tiny_model, tiny_cfg):
    data = tiny_data(tiny_cfg, modalities=("lidar",))
    with pytest.raises(ContractError):
        train_stage1(tiny_model, "camera", [data], TrainConfig(**FAST))


# --- timestamps ---------------------------------------------------------------------------

def test_align_timestamps():
    ref, idx = align_timestamps({"lidar": [0.0, 0.1, 0.2, 0.3], "camera": [0.0, 0.2], "radar": [0.04, 0.16, 0.26]})
    assert ref == "camera"
    assert idx["lidar"].tolist() == [0, 2] and idx["radar"].tolist() == [0, 1]
    _, tie = align_timestamps({"a": [0.0, 1.0], "b": [0.45, 0.55, 0.5, 0.6, 0.7]})
    assert tie["b"].tolist() == [0, 4]
    with pytest.raises(ValueError):
        align_timestamps({"a": []})
