"""Label assignment, triplet mining, losses and the training stages."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
from torch import Tensor

from .branches import MODALITIES
from .fusion import PresenceMask, RouterState
from .geometry import Pose2D
from .model import ModelConfig, UniMPR, branch_outputs, prepare_frames
from .nn_core import ContractError, ParameterSet, adam_step
from .synth import MultimodalFrame

log = logging.getLogger(__name__)

POSITIVE, NEGATIVE, UNLABELED, BUFFER = 0, 1, 2, 3
FOV_CLASSES = ("panoramic", "limited")
PANORAMIC_MIN_DEG = 300.0


@dataclass(frozen=True)
class LabelRule:
    d_pos: float = 9.0
    d_non_neg: float = 12.0
    fov_class: str = "panoramic"
    heading_thresh: float = 60.0  # degrees

    def __post_init__(self):
        if not 0 < self.d_pos < self.d_non_neg:
            raise ValueError("need 0 < d_pos < d_non_neg")
        if not 0 < self.heading_thresh <= 180:
            raise ValueError("heading threshold must lie in (0, 180]")
        if self.fov_class not in FOV_CLASSES:
            raise ValueError(f"unknown fov class {self.fov_class!r}")


@dataclass
class LabelSets:
    positives: np.ndarray
    negatives: np.ndarray
    unlabeled: np.ndarray
    buffer: np.ndarray


def label_codes(q_xy: np.ndarray, q_yaw: float, xy: np.ndarray, yaw: np.ndarray, rule: LabelRule) -> np.ndarray:
    """Vectorized label code per candidate (POSITIVE / NEGATIVE / UNLABELED / BUFFER)."""
    d = np.hypot(xy[:, 0] - q_xy[0], xy[:, 1] - q_xy[1])
    codes = np.full(len(d), NEGATIVE, dtype=np.int8)
    near = d <= rule.d_pos
    mid = (d > rule.d_pos) & (d <= rule.d_non_neg)
    if rule.fov_class == "panoramic":
        codes[near] = POSITIVE
        codes[mid] = BUFFER
        return codes
    dh = np.degrees(np.abs(np.angle(np.exp(1j * (yaw - q_yaw)))))
    aligned = dh <= rule.heading_thresh
    codes[near & aligned] = POSITIVE
    codes[mid & aligned] = BUFFER
    codes[(d <= rule.d_non_neg) & ~aligned] = UNLABELED
    return codes


def assign_labels(query: Pose2D, candidates: Sequence[Pose2D], rule: LabelRule) -> LabelSets:
    xy = np.array([[c.x, c.y] for c in candidates]).reshape(-1, 2)
    yaw = np.array([c.yaw for c in candidates])
    codes = label_codes(np.array([query.x, query.y]), query.yaw, xy, yaw, rule)
    return LabelSets(*(np.nonzero(codes == c)[0] for c in (POSITIVE, NEGATIVE, UNLABELED, BUFFER)))


def fov_class_for(frame: MultimodalFrame, modality: str) -> str:
    if modality == "camera" and frame.camera is not None:
        return "panoramic" if frame.camera.fov_coverage_deg() >= PANORAMIC_MIN_DEG else "limited"
    return "panoramic"


# --- data -------------------------------------------------------------------------

@dataclass
class TrainData:
    """One source dataset prepared for training."""
    name: str
    inputs: dict[str, np.ndarray]
    xy: np.ndarray
    yaw: np.ndarray
    rules: dict[str, LabelRule]

    @property
    def modalities(self) -> tuple[str, ...]:
        return tuple(m for m in MODALITIES if m in self.inputs)

    def __len__(self) -> int:
        return len(self.xy)

    @classmethod
    def from_frames(cls, name: str, frames: list[MultimodalFrame], cfg: ModelConfig,
                    base_rule: LabelRule = LabelRule()) -> "TrainData":
        inputs = prepare_frames(frames, cfg)
        rules = {}
        for m in inputs:
            rules[m] = LabelRule(base_rule.d_pos, base_rule.d_non_neg, fov_class_for(frames[0], m),
                                 base_rule.heading_thresh)
        xy = np.array([[f.pose.x, f.pose.y] for f in frames])
        yaw = np.array([f.pose.yaw for f in frames])
        return cls(name, inputs, xy, yaw, rules)

    def with_rule(self, base: LabelRule) -> "TrainData":
        """Same data with new thresholds; each modality keeps its FoV class."""
        rules = {m: LabelRule(base.d_pos, base.d_non_neg, r.fov_class, base.heading_thresh)
                 for m, r in self.rules.items()}
        return TrainData(self.name, self.inputs, self.xy, self.yaw, rules)


@dataclass
class Triplet:
    query: int
    positive: int
    negatives: np.ndarray


def joint_labels(data: TrainData, q: int, modalities: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    """(positive mask, negative mask) agreed on by every applicable rule; self excluded."""
    pos = np.ones(len(data), dtype=bool)
    neg = np.ones(len(data), dtype=bool)
    for m in modalities:
        codes = label_codes(data.xy[q], data.yaw[q], data.xy, data.yaw, data.rules[m])
        pos &= codes == POSITIVE
        neg &= codes == NEGATIVE
    pos[q] = False
    neg[q] = False
    return pos, neg


def mine_triplets(data: TrainData, modalities: Sequence[str], B: int, o: int, rng: np.random.Generator,
                  cache: np.ndarray | None = None, max_tries: int = 1000) -> list[Triplet]:
    """B triplets; negatives are the o closest in ``cache`` descriptor space, or random without a cache."""
    out = []
    tries = 0
    while len(out) < B:
        tries += 1
        if tries > max_tries:
            raise ContractError(f"{data.name}: could not find queries with positives and negatives")
        q = int(rng.integers(len(data)))
        pos, neg = joint_labels(data, q, modalities)
        pos_idx, neg_idx = np.nonzero(pos)[0], np.nonzero(neg)[0]
        if len(pos_idx) == 0 or len(neg_idx) == 0:
            continue
        p = int(rng.choice(pos_idx))
        if cache is not None:
            d = np.linalg.norm(cache[neg_idx] - cache[q], axis=1)
            order = np.argsort(d, kind="stable")[:o]
            negs = neg_idx[order]
            if len(negs) < o:
                negs = np.concatenate([negs, rng.choice(neg_idx, o - len(negs))])
        else:
            negs = rng.choice(neg_idx, o, replace=len(neg_idx) < o)
        out.append(Triplet(q, p, np.asarray(negs)))
    return out


def triplet_index(triplets: list[Triplet]) -> tuple[np.ndarray, Tensor, Tensor, Tensor]:
    """Unique frame ids plus positions of query / positive / negatives inside them."""
    ids = np.unique(np.concatenate([[t.query, t.positive, *t.negatives] for t in triplets]))
    pos_of = {int(v): i for i, v in enumerate(ids)}
    q = torch.tensor([pos_of[t.query] for t in triplets])
    p = torch.tensor([pos_of[t.positive] for t in triplets])
    n = torch.tensor([[pos_of[int(v)] for v in t.negatives] for t in triplets])
    return ids, q, p, n


# --- losses -----------------------------------------------------------------------

def lazy_triplet_loss(d_q: Tensor, d_pos: Tensor, d_negs: Tensor, beta: float = 0.5,
                      semantics: str = "hardest") -> Tensor:
    """Hinge on the query-positive distance against one negative.

    ``hardest`` uses the closest negative; ``literal`` uses the farthest one.
    Batched inputs ([B, D], [B, D], [B, o, D]) give the batch mean.
    """
    if d_negs.shape[-2] == 0:
        raise ContractError("lazy triplet loss needs at least one negative")
    if semantics not in ("hardest", "literal"):
        raise ContractError(f"unknown triplet semantics {semantics!r}")
    dp = torch.linalg.vector_norm(d_q - d_pos, dim=-1)
    dn = torch.linalg.vector_norm(d_q.unsqueeze(-2) - d_negs, dim=-1)
    chosen = dn.gather(-1, pick_negative(dn, semantics).unsqueeze(-1)).squeeze(-1)
    return torch.relu(beta + dp - chosen).mean()


def pick_negative(dn: Tensor, semantics: str = "hardest") -> Tensor:
    """Index of the negative the lazy triplet loss uses; ties go to the lowest index."""
    if semantics not in ("hardest", "literal"):
        raise ContractError(f"unknown triplet semantics {semantics!r}")
    return dn.argmin(dim=-1) if semantics == "hardest" else dn.argmax(dim=-1)


def mined_triplet_loss(encode: Callable[[np.ndarray], Tensor], trips: list[Triplet], beta: float = 0.5,
                       semantics: str = "hardest") -> Tensor:
    """Lazy triplet loss that runs the gradient pass on query, positive and the chosen negative only.

    All negatives are encoded once without autograd to pick the one the loss
    uses; the value and gradient match the full-batch loss because only the
    picked negative carries gradient there.
    """
    ids, q, p, n = triplet_index(trips)
    with torch.no_grad():
        d = encode(ids)
        dn = torch.linalg.vector_norm(d[q].unsqueeze(-2) - d[n], dim=-1)
        pick = pick_negative(dn, semantics).numpy()
    narrowed = [Triplet(t.query, t.positive, t.negatives[[k]]) for t, k in zip(trips, pick)]
    ids, q, p, n = triplet_index(narrowed)
    d = encode(ids)
    return lazy_triplet_loss(d[q], d[p], d[n], beta, semantics)


def load_balance_loss(state: RouterState, eps: float = 1e-2) -> Tensor:
    I, L = state.I, state.L
    E = I.shape[-1]
    if E < 1:
        raise ContractError("load balance loss needs at least one expert")
    i_bar, l_bar = I.mean(), L.mean()
    return (((I - i_bar) ** 2).sum() / (i_bar ** 2 + eps) + ((L - l_bar) ** 2).sum() / (l_bar ** 2 + eps)) / E


# --- temporal alignment ----------------------------------------------------------

def align_timestamps(streams: Mapping[str, Sequence[float]]) -> tuple[str, dict[str, np.ndarray]]:
    """Pair every sample of the lowest-rate stream with the nearest sample of each other stream.

    Returns (reference name, name -> index array aligned to the reference).
    Ties in |dt| go to the earlier sample.
    """
    arrays = {k: np.sort(np.asarray(v, dtype=np.float64)) for k, v in streams.items() if len(v)}
    if not arrays:
        raise ValueError("align_timestamps: every stream is empty")

    def rate(t: np.ndarray) -> float:
        span = t[-1] - t[0]
        return 0.0 if len(t) < 2 or span <= 0 else (len(t) - 1) / span

    ref = min(arrays, key=lambda k: rate(arrays[k]))
    ref_t = arrays[ref]
    out = {ref: np.arange(len(ref_t))}
    for k, t in arrays.items():
        if k == ref:
            continue
        hi = np.clip(np.searchsorted(t, ref_t, side="left"), 0, len(t) - 1)
        lo = np.clip(hi - 1, 0, len(t) - 1)
        pick_lo = np.abs(ref_t - t[lo]) <= np.abs(t[hi] - ref_t)
        out[k] = np.where(pick_lo, lo, hi)
    return ref, out


# --- training ------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 3
    lr: float = 5e-5
    decay: float = 0.8  # per-epoch multiplier
    B: int = 8
    o: int = 10
    beta: float = 0.5
    semantics: str = "hardest"
    lambda_lb: float = 0.01
    eps_lb: float = 1e-2
    seed: int = 0
    steps_per_epoch: int | None = None
    hard_mining: bool = True
    hard_mining_start: int = 1  # epochs before this one mine negatives at random
    modality_dropout: float = 0.0
    d_pos: float = 9.0
    d_non_neg: float = 12.0
    heading_thresh: float = 60.0

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def to_dict(self) -> dict:
        return asdict(self)

    def rule(self) -> LabelRule:
        return LabelRule(self.d_pos, self.d_non_neg, "panoramic", self.heading_thresh)


def _steps(cfg: TrainConfig, datasets: Sequence[TrainData]) -> int:
    if cfg.steps_per_epoch:
        return cfg.steps_per_epoch
    total = sum(len(d) for d in datasets)
    return max(1, math.ceil(total / (cfg.B * len(datasets))))


def _refresh_due(epoch: int, step: int, steps: int, cfg: TrainConfig) -> bool:
    # early epochs mine at random; afterwards refresh every half epoch
    return cfg.hard_mining and epoch >= cfg.hard_mining_start and step in (0, steps // 2)


def set_trainable(model: UniMPR, prefixes: Sequence[str] | None) -> ParameterSet:
    """Enable grads for parameters under ``prefixes`` (all if None), freeze the rest."""
    pre = tuple(prefixes) if prefixes is not None else None
    trainable = {}
    for n, p in model.named_parameters():
        on = pre is None or n.startswith(pre)
        if n.startswith("bank.") and model.cfg.imputation == "zero":
            on = False
        p.requires_grad_(on)
        if on:
            trainable[n] = p
    return ParameterSet(trainable)


@torch.no_grad()
def _branch_cache(model: UniMPR, data: TrainData, modality: str, batch: int = 64) -> np.ndarray:
    model.eval()
    arr = data.inputs[modality]
    dtype = next(model.parameters()).dtype
    out = [model.branch_forward(modality, torch.as_tensor(arr[s:s + batch], dtype=dtype))[1]
           for s in range(0, len(arr), batch)]
    return torch.cat(out).float().numpy()


def train_stage1(model: UniMPR, modality: str, datasets: Sequence[TrainData], cfg: TrainConfig,
                 callback: Callable[[dict], None] | None = None) -> list[dict]:
    """Train one branch (encoder + aggregator) with the lazy triplet loss."""
    datasets = [d.with_rule(cfg.rule()) for d in datasets if modality in d.inputs]
    if not datasets:
        raise ContractError(f"no training data contains {modality}")
    pset = set_trainable(model, [f"branches.{modality}."])
    rng = np.random.default_rng([cfg.seed, MODALITIES.index(modality)])
    steps = _steps(cfg, datasets)
    dtype = next(model.parameters()).dtype
    caches: dict[str, np.ndarray | None] = {d.name: None for d in datasets}
    history = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr * cfg.decay ** epoch
        for step in range(steps):
            if _refresh_due(epoch, step, steps, cfg):
                caches = {d.name: _branch_cache(model, d, modality) for d in datasets}
            model.train()
            pset.zero_grad()
            total = 0.0
            for d in datasets:
                trips = mine_triplets(d, [modality], cfg.B, cfg.o, rng, caches[d.name])

                def encode(ids, d=d):
                    return model.branch_forward(modality, torch.as_tensor(d.inputs[modality][ids], dtype=dtype))[1]

                loss = mined_triplet_loss(encode, trips, cfg.beta, cfg.semantics)
                loss.backward()
                total += loss.item()
            adam_step(pset, pset.grads(), lr)
            row = {"stage": f"1:{modality}", "epoch": epoch, "step": step, "lr": lr, "loss": total}
            history.append(row)
            if callback:
                callback(row)
    for p in model.parameters():
        p.requires_grad_(True)
    return history


def _stage2_mask(data: TrainData, cfg: TrainConfig, rng: np.random.Generator) -> PresenceMask:
    present = list(data.modalities)
    if cfg.modality_dropout > 0 and len(present) > 1 and rng.random() < cfg.modality_dropout:
        keep_n = int(rng.integers(1, len(present)))
        present = list(rng.choice(present, keep_n, replace=False))
    return PresenceMask.of(present)


FUSION_PREFIXES = ("connectors.", "bank.", "fusion.")


def _fusion_step_loss(model, data, trips, mask, cfg, branch_fn):
    states = []

    def encode(ids):
        d_m, _, state = model.fuse(*branch_fn(data, ids, mask), mask)
        if torch.is_grad_enabled():
            states.append(state)
        return d_m

    loss = mined_triplet_loss(encode, trips, cfg.beta, cfg.semantics)
    return loss, states[-1]


def _train_fusion(model: UniMPR, datasets: Sequence[TrainData], cfg: TrainConfig, end_to_end: bool,
                  callback=None) -> list[dict]:
    datasets = [d.with_rule(cfg.rule()) for d in datasets]
    pset = set_trainable(model, None if end_to_end else FUSION_PREFIXES)
    rng = np.random.default_rng([cfg.seed, 99])
    steps = _steps(cfg, datasets)
    dtype = next(model.parameters()).dtype

    frozen = {} if end_to_end else {d.name: branch_outputs(model, d.inputs) for d in datasets}

    def branch_fn(data, ids, mask):
        if end_to_end:
            fm, de = {}, {}
            for m in mask.present:
                fm[m], de[m] = model.branch_forward(m, torch.as_tensor(data.inputs[m][ids], dtype=dtype))
            return fm, de
        cache = frozen[data.name]
        t = torch.as_tensor(ids)
        return {m: cache[m][0][t] for m in mask.present}, {m: cache[m][1][t] for m in mask.present}

    @torch.no_grad()
    def descriptor_cache(data):
        model.eval()
        mask = PresenceMask.of(data.modalities)
        out = []
        for s in range(0, len(data), 64):
            ids = np.arange(s, min(s + 64, len(data)))
            fm, de = branch_fn(data, ids, mask)
            out.append(model.fuse(fm, de, mask)[0])
        return torch.cat(out).float().numpy()

    caches = {d.name: None for d in datasets}
    history = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr * cfg.decay ** epoch
        for step in range(steps):
            if _refresh_due(epoch, step, steps, cfg):
                caches = {d.name: descriptor_cache(d) for d in datasets}
            model.train()
            pset.zero_grad()
            states = []
            total = 0.0
            for d in datasets:
                mask = _stage2_mask(d, cfg, rng)
                trips = mine_triplets(d, d.modalities, cfg.B, cfg.o, rng, caches[d.name])
                loss, state = _fusion_step_loss(model, d, trips, mask, cfg, branch_fn)
                # per-dataset backward (gradient accumulation)
                loss.backward(retain_graph=cfg.lambda_lb > 0)
                states.append(state)
                total += loss.item()
            lb_val = 0.0
            if cfg.lambda_lb > 0:
                merged = states[0]
                for s in states[1:]:
                    merged = merged.merge(s)
                lb = load_balance_loss(merged, cfg.eps_lb)
                (cfg.lambda_lb * lb).backward()
                lb_val = lb.item()
            adam_step(pset, pset.grads(), lr)
            row = {"stage": "e2e" if end_to_end else "2", "epoch": epoch, "step": step, "lr": lr,
                   "loss": total, "load_balance": lb_val}
            history.append(row)
            if callback:
                callback(row)
    for p in model.parameters():
        p.requires_grad_(True)
    if model.cfg.imputation == "zero":
        for p in model.bank.parameters():
            p.requires_grad_(False)
    return history


def train_stage2(model: UniMPR, datasets: Sequence[TrainData], cfg: TrainConfig, callback=None) -> list[dict]:
    """Frozen branches; trains connectors, imputation bank and the fusion branch."""
    return _train_fusion(model, datasets, cfg, False, callback)


def train_end_to_end(model: UniMPR, datasets: Sequence[TrainData], cfg: TrainConfig, callback=None) -> list[dict]:
    return _train_fusion(model, datasets, cfg, True, callback)


def train_two_stage(model: UniMPR, datasets: Sequence[TrainData], stage1: TrainConfig, stage2: TrainConfig,
                    callback=None) -> list[dict]:
    history = []
    for m in MODALITIES:
        if any(m in d.inputs for d in datasets):
            history += train_stage1(model, m, datasets, stage1, callback)
    history += train_stage2(model, datasets, stage2, callback)
    return history
