"""Benchmark assembly, training drivers, evaluation sweeps and ablations."""

from __future__ import annotations

import copy
import csv
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .branches import MODALITIES
from .fusion import PresenceMask, all_masks
from .geometry import Pose2D
from .model import ModelConfig, UniMPR, extract_descriptors, prepare_frames
from .nn_core import ContractError
from .retrieval import EvalReport, build_index, evaluate, read_descriptors, write_descriptors
from .synth import (BenchmarkSpec, MultimodalFrame, World, benchmark_world, degrade, make_split,
                    perturb_calibration, perturb_viewpoint, read_dataset, write_dataset)
from .training import (TrainConfig, TrainData, train_end_to_end, train_stage1, train_stage2)

log = logging.getLogger(__name__)

ABLATION_AXES = ("bev-mode", "aggregator", "moe", "imputation", "label-rule", "loss-semantics", "training")
SWEEPS = ("viewpoint", "calibration", "threshold", "degradation")
TAUS = (0, 1, 2, 3, 4)
THRESHOLDS = tuple(range(1, 13))


def toy_stage1() -> TrainConfig:
    return TrainConfig(epochs=6, lr=1e-3, decay=0.8, steps_per_epoch=60, hard_mining_start=99)


def toy_stage2() -> TrainConfig:
    return TrainConfig(epochs=2, lr=1e-3, decay=0.8, steps_per_epoch=60, modality_dropout=0.5, hard_mining_start=99)


@dataclass
class ExperimentConfig:
    benchmark: BenchmarkSpec = field(default_factory=BenchmarkSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    stage1: TrainConfig = field(default_factory=toy_stage1)
    stage2: TrainConfig = field(default_factory=toy_stage2)
    training: str = "two_stage"  # or "e2e"
    seed: int = 0
    d_succ: float = 9.0

    def to_dict(self) -> dict:
        return {"benchmark": self.benchmark.to_dict(), "model": self.model.to_dict(),
                "stage1": self.stage1.to_dict(), "stage2": self.stage2.to_dict(),
                "training": self.training, "seed": self.seed, "d_succ": self.d_succ}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        base = cls()
        known = {"benchmark", "model", "stage1", "stage2", "training", "seed", "d_succ"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown experiment config keys: {sorted(unknown)}")
        bench = base.benchmark.to_dict()
        bench.update(d.get("benchmark", {}))
        s1, s2 = base.stage1.to_dict(), base.stage2.to_dict()
        s1.update(d.get("stage1", {}))
        s2.update(d.get("stage2", {}))
        if d.get("training", "two_stage") not in ("two_stage", "e2e"):
            raise ValueError("training must be 'two_stage' or 'e2e'")
        return cls(BenchmarkSpec.from_dict(bench), ModelConfig.from_dict(d.get("model", {})),
                   TrainConfig.from_dict(s1), TrainConfig.from_dict(s2), d.get("training", "two_stage"),
                   int(d.get("seed", 0)), float(d.get("d_succ", 9.0)))


# --- benchmark ----------------------------------------------------------------------

@dataclass
class Benchmark:
    spec: BenchmarkSpec
    world: World | None
    places: np.ndarray | None
    train: list[MultimodalFrame]
    db: list[MultimodalFrame]
    query: list[MultimodalFrame]

    @property
    def name(self) -> str:
        return f"world{self.spec.seed}"

    def get_world(self) -> World:
        # rebuilt from the spec when loaded from disk
        if self.world is None:
            self.world, self.places = benchmark_world(self.spec)
        return self.world


def build_benchmark(spec: BenchmarkSpec, splits: Sequence[str] = ("train", "db", "query")) -> Benchmark:
    world, places = benchmark_world(spec)
    frames = {s: make_split(spec, s, world, places) if s in splits else [] for s in ("train", "db", "query")}
    return Benchmark(spec, world, places, frames["train"], frames["db"], frames["query"])


def save_benchmark(root, bench: Benchmark) -> Path:
    """``root/{train,db,query}`` dataset directories plus ``root/benchmark.json``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for split in ("train", "db", "query"):
        write_dataset(root / split, getattr(bench, split), meta={"split": split, "seed": bench.spec.seed})
    (root / "benchmark.json").write_text(json.dumps(bench.spec.to_dict(), indent=1, sort_keys=True))
    return root


def load_benchmark(root, splits: Sequence[str] = ("train", "db", "query")) -> Benchmark:
    root = Path(root)
    try:
        spec = BenchmarkSpec.from_dict(json.loads((root / "benchmark.json").read_text()))
    except FileNotFoundError:
        raise ValueError(f"{root}: benchmark.json not found") from None
    frames = {s: read_dataset(root / s)[0] if s in splits else [] for s in ("train", "db", "query")}
    return Benchmark(spec, None, None, frames["train"], frames["db"], frames["query"])


def mix_specs(base: BenchmarkSpec, n_worlds: int = 3) -> list[BenchmarkSpec]:
    """Worlds with different seeds and sensor suites: full suite, LiDAR + scanning radar, front camera + LiDAR."""
    suites = [base.suite,
              replace(base.suite, rig=None, radar_kind="scanning"),
              replace(base.suite, rig="front", radar_kind=None)]
    return [replace(base, seed=base.seed + 10 * i, suite=suites[i % len(suites)]) for i in range(n_worlds)]


def poses(frames: Sequence[MultimodalFrame]) -> list[Pose2D]:
    return [f.pose for f in frames]


def chance_recall(db_poses: Sequence[Pose2D], q_poses: Sequence[Pose2D], d_succ: float = 9.0) -> float:
    """Expected recall@1 of a uniformly random database pick over queries that have a match."""
    db = np.array([[p.x, p.y] for p in db_poses])
    q = np.array([[p.x, p.y] for p in q_poses])
    hits = (np.linalg.norm(q[:, None] - db[None], axis=2) <= d_succ).sum(1)
    valid = hits > 0
    return float((hits[valid] / len(db)).mean()) if valid.any() else 0.0


# --- training -------------------------------------------------------------------------

def new_model(cfg: ModelConfig, seed: int = 0) -> UniMPR:
    torch.manual_seed(seed)
    return UniMPR(cfg)


def train_model(cfg: ExperimentConfig, data: Sequence[TrainData], callback: Callable[[dict], None] | None = None,
                model: UniMPR | None = None, stages: Sequence[str] = ("1", "2")) -> tuple[UniMPR, list[dict]]:
    """Two-stage (or end-to-end) training on the given source datasets."""
    model = model or new_model(cfg.model, cfg.seed)
    history = []
    if cfg.training == "e2e":
        history += train_end_to_end(model, data, cfg.stage2, callback)
        return model, history
    if "1" in stages:
        for m in MODALITIES:
            if any(m in d.inputs for d in data):
                history += train_stage1(model, m, data, cfg.stage1, callback)
    if "2" in stages:
        history += train_stage2(model, data, cfg.stage2, callback)
    return model, history


def train_data(bench: Benchmark, cfg: ModelConfig) -> TrainData:
    return TrainData.from_frames(bench.name, bench.train, cfg)


# --- evaluation ----------------------------------------------------------------------

def masks_for(modalities: Sequence[str]) -> list[PresenceMask]:
    return [mk for mk in all_masks() if set(mk.present) <= set(modalities)]


def eval_mask(model: UniMPR, db_inputs: dict, q_inputs: dict, db_poses, q_poses, mask: PresenceMask,
              d_succ: float = 9.0) -> EvalReport:
    a = extract_descriptors(model, db_inputs, mask)
    b = extract_descriptors(model, q_inputs, mask)
    return evaluate(build_index(a, db_poses), b, q_poses, d_succ=d_succ)


def eval_masks(model: UniMPR, bench: Benchmark, masks: Sequence[PresenceMask] | None = None,
               d_succ: float = 9.0) -> dict[str, EvalReport]:
    db_in = prepare_frames(bench.db, model.cfg, sampling=model.sampling)
    q_in = prepare_frames(bench.query, model.cfg, sampling=model.sampling)
    present = [m for m in MODALITIES if m in db_in and m in q_in]
    masks = masks if masks is not None else masks_for(present)
    return {str(mk): eval_mask(model, db_in, q_in, poses(bench.db), poses(bench.query), mk, d_succ) for mk in masks}


@torch.no_grad()
def branch_recall(model: UniMPR, bench: Benchmark, modality: str, d_succ: float = 9.0) -> EvalReport:
    """Retrieval with the branch descriptor alone (no fusion)."""
    model.eval()
    out = []
    for frames in (bench.db, bench.query):
        x = prepare_frames(frames, model.cfg, modalities=[modality], sampling=model.sampling)[modality]
        dtype = next(model.parameters()).dtype
        out.append(torch.cat([model.branch_forward(modality, torch.as_tensor(x[s:s + 64], dtype=dtype))[1]
                              for s in range(0, len(x), 64)]).numpy())
    return evaluate(build_index(out[0], poses(bench.db)), out[1], poses(bench.query), d_succ=d_succ)


def threshold_sweep(index, queries: np.ndarray, q_poses, thresholds=THRESHOLDS) -> list[dict]:
    """Recall@K against the success threshold over the fixed set of all queries.

    A query without any database entry inside the threshold counts as a miss, so every point of the curve
    describes the same population.
    """
    rows = []
    n = len(queries)
    for t in thresholds:
        rep = evaluate(index, queries, q_poses, d_succ=float(t))
        n_valid = n - rep.n_without_match
        # integer hit counts keep the curve exactly monotone
        rows.append({"d_succ": float(t), **{f"recall@{k}": round(v * n_valid) / n for k, v in rep.recalls.items()},
                     "max_f1": rep.max_f1, "n_without_match": rep.n_without_match})
    return rows


def _full_mask(model: UniMPR, frames) -> PresenceMask:
    return PresenceMask.of([m for m in MODALITIES if all(getattr(f, m) is not None for f in frames)])


def calibration_sweep(model: UniMPR, bench: Benchmark, taus=TAUS, seed: int = 0,
                      d_succ: float = 9.0) -> list[dict]:
    """Test-time extrinsic noise on the query camera rigs; the database stays clean."""
    mask = _full_mask(model, bench.query)
    if "camera" not in mask.present:
        raise ContractError("calibration sweep needs camera data")
    db_in = prepare_frames(bench.db, model.cfg, sampling=model.sampling)
    index = build_index(extract_descriptors(model, db_in, mask), poses(bench.db))
    rows = []
    for tau in taus:
        rng = np.random.default_rng([seed, 31, int(round(tau * 1000))])
        qf = [replace(f, camera=perturb_calibration(f.camera, tau, rng)) for f in bench.query]
        q_in = prepare_frames(qf, model.cfg, sampling=model.sampling)
        rep = evaluate(index, extract_descriptors(model, q_in, mask), poses(qf), d_succ=d_succ)
        rows.append({"tau": tau, **{f"recall@{k}": v for k, v in rep.recalls.items()}, "max_f1": rep.max_f1})
    return rows


def viewpoint_sweep(model: UniMPR, bench: Benchmark, translations=(0.0, 1.5, 3.0, 4.5), rotate: bool = True,
                    seed: int = 0, d_succ: float = 9.0) -> list[dict]:
    """Re-rendered queries at increasing translation; rotation is uniform on (0, 2pi) when ``rotate``."""
    mask = _full_mask(model, bench.db)
    db_in = prepare_frames(bench.db, model.cfg, sampling=model.sampling)
    index = build_index(extract_descriptors(model, db_in, mask), poses(bench.db))
    rows = []
    for t in translations:
        rng = np.random.default_rng([seed, 41, int(round(t * 1000))])
        qf = [perturb_viewpoint(replace(f, meta=dict(f.meta)), rng, (0.0, 2 * np.pi) if rotate else (0.0, 0.0), t,
                                world=bench.get_world(), suite=bench.spec.suite) for f in bench.db]
        q_in = prepare_frames(qf, model.cfg, sampling=model.sampling)
        rep = evaluate(index, extract_descriptors(model, q_in, mask), poses(qf), d_succ=d_succ)
        rows.append({"translation": t, "rotation": "uniform" if rotate else "none",
                     **{f"recall@{k}": v for k, v in rep.recalls.items()}, "max_f1": rep.max_f1})
    return rows


DEGRADATIONS = (("none", 0.0), ("decimate_points", 0.5), ("decimate_points", 0.25), ("feature_noise", 0.5),
                ("feature_noise", 1.0), ("radar_noise", 1.0), ("radar_noise", 3.0))


def degradation_sweep(model: UniMPR, bench: Benchmark, levels=DEGRADATIONS, seed: int = 0,
                      d_succ: float = 9.0) -> list[dict]:
    """Query-side degradations against a clean database, plus dropping each modality."""
    mask = _full_mask(model, bench.db)
    db_in = prepare_frames(bench.db, model.cfg, sampling=model.sampling)
    index = build_index(extract_descriptors(model, db_in, mask), poses(bench.db))
    cases = list(levels) + [("drop_modality", m) for m in mask.present if len(mask.present) > 1]
    rows = []
    for mode, level in cases:
        rng = np.random.default_rng([seed, 53, len(rows)])
        qf = list(bench.query) if mode == "none" else [degrade(f, mode, level, rng) for f in bench.query]
        q_mask = _full_mask(model, qf)
        q_in = prepare_frames(qf, model.cfg, sampling=model.sampling)
        if q_mask != mask:
            # a dropped sensor: the query side is described with what it still has
            q_desc = extract_descriptors(model, q_in, q_mask)
        else:
            q_desc = extract_descriptors(model, q_in, mask)
        rep = evaluate(index, q_desc, poses(qf), d_succ=d_succ)
        rows.append({"mode": mode, "level": level, "query_mask": str(q_mask),
                     **{f"recall@{k}": v for k, v in rep.recalls.items()}, "max_f1": rep.max_f1})
    return rows


# --- outputs ------------------------------------------------------------------------

def write_rows(path: str | Path, rows: Sequence[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keys: list[str] = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)
    return path


def plot_curve(path: str | Path, xs, ys, xlabel: str, ylabel: str, title: str = "") -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(list(xs), list(ys), marker="o", ms=3)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_ylim(0, 1.02)
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def plot_pr(path: str | Path, report: EvalReport) -> Path:
    pr = sorted(report.pr, key=lambda t: t[2])
    return plot_curve(path, [r for _, _, r in pr], [p for _, p, _ in pr], "recall", "precision",
                      f"max F1 = {report.max_f1:.3f}")


# --- run_experiment -----------------------------------------------------------------

def _load_frames(path) -> list[MultimodalFrame]:
    return read_dataset(path)[0]


def run_experiment(config: dict) -> EvalReport:
    """Evaluate a checkpoint on database/query dataset directories.

    Keys: ckpt, db, query (dataset dirs); optional mask ("camera,lidar,radar"), d_succ, ks, calibration_tau,
    degrade ({"mode", "level"}), sweep (one of SWEEPS), seed, out (output directory).
    """
    model, _ = UniMPR.load(config["ckpt"])
    db_frames, q_frames = _load_frames(config["db"]), _load_frames(config["query"])
    seed = int(config.get("seed", 0))
    d_succ = float(config.get("d_succ", 9.0))
    ks = tuple(config.get("ks", (1, 5, 10, 20)))
    rng = np.random.default_rng([seed, 61])
    if config.get("calibration_tau"):
        q_frames = [replace(f, camera=perturb_calibration(f.camera, float(config["calibration_tau"]), rng))
                    if f.camera is not None else f for f in q_frames]
    if config.get("degrade"):
        dg = config["degrade"]
        q_frames = [degrade(f, dg["mode"], dg.get("level", 1.0), rng) for f in q_frames]
    available = _full_mask(model, db_frames).present
    mask = PresenceMask.parse(config["mask"]) if config.get("mask") else PresenceMask.of(available)
    absent = [m for m in mask.present if m not in available or m not in _full_mask(model, q_frames).present]
    if absent:
        raise ContractError(f"mask requests {absent} but the data lacks them")
    db_in = prepare_frames(db_frames, model.cfg, sampling=model.sampling)
    q_in = prepare_frames(q_frames, model.cfg, sampling=model.sampling)
    a, b = extract_descriptors(model, db_in, mask), extract_descriptors(model, q_in, mask)
    index = build_index(a, poses(db_frames))
    report = evaluate(index, b, poses(q_frames), ks, d_succ)
    report.extra = {"mask": str(mask), "config": {k: v for k, v in config.items() if k != "out"}}
    if config.get("sweep") == "threshold":
        report.extra["threshold_sweep"] = threshold_sweep(index, b, poses(q_frames))
    out = config.get("out")
    if out:
        out = Path(out)
        report.write(out, "report")
        (out / "resolved_config.json").write_text(json.dumps(config, indent=1, default=str))
        plot_pr(out / "pr_curve.svg", report)
        if "threshold_sweep" in report.extra:
            rows = report.extra["threshold_sweep"]
            write_rows(out / "threshold_sweep.csv", rows)
            plot_curve(out / "threshold_sweep.svg", [r["d_succ"] for r in rows], [r["recall@1"] for r in rows],
                       "success threshold (m)", "recall@1")
    return report


# --- ablations -------------------------------------------------------------------------

def _stage1_branch(cfg: ExperimentConfig, data: Sequence[TrainData], modality: str, seed: int) -> UniMPR:
    model = new_model(cfg.model, seed)
    train_stage1(model, modality, data, replace(cfg.stage1, seed=seed))
    return model


def ablate(axis: str, cfg: ExperimentConfig, benches: Sequence[Benchmark], seeds: Sequence[int] = (0,),
           progress: Callable[[str], None] | None = None, branch_seed: int | None = None) -> list[dict]:
    """Variant table for one ablation axis; one row per (variant, seed).

    For fusion-side axes ``branch_seed`` trains the stage-1 branches once and reuses them for every
    seed, so the seeds only vary the fusion training.
    """
    if axis not in ABLATION_AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; expected one of {ABLATION_AXES}")
    say = progress or (lambda s: None)
    rows = []

    def record(variant, seed, metrics, t0):
        row = {"axis": axis, "variant": variant, "seed": seed, **metrics, "seconds": round(time.time() - t0, 1)}
        say(json.dumps(row))
        rows.append(row)

    if axis in ("bev-mode", "aggregator", "loss-semantics"):
        # single LiDAR branch; compared on branch descriptors of the first benchmark
        bench = benches[0]
        # square Cartesian grid with about the polar cell count after the strided stages
        cart = {"bev": "cartesian", "lidar_grid": (116, 116), "lidar_strides": [[2, 2], [2, 2]]}
        variants = {"bev-mode": [("polar", {"bev": "polar"}), ("cartesian", cart)],
                    "aggregator": [(a, {"aggregator": a}) for a in ("netvlad", "gap", "gmp", "gem")],
                    "loss-semantics": [("hardest", {}), ("literal", {})]}[axis]
        for name, over in variants:
            vcfg = copy.deepcopy(cfg)
            vcfg.model = replace(cfg.model, **over)
            if axis == "loss-semantics":
                vcfg.stage1 = replace(cfg.stage1, semantics=name)
            data = [train_data(bench, vcfg.model)]
            for seed in seeds:
                t0 = time.time()
                model = _stage1_branch(vcfg, data, "lidar", seed)
                rep = branch_recall(model, bench, "lidar", cfg.d_succ)
                record(name, seed, {"mask": "lidar", "recall@1": rep.recalls[1], "recall@5": rep.recalls[5],
                                    "max_f1": rep.max_f1}, t0)
        return rows

    if axis == "training":
        for name in ("two_stage", "e2e"):
            for seed in seeds:
                t0 = time.time()
                vcfg = replace(cfg, training=name, seed=seed)
                data = [train_data(b, vcfg.model) for b in benches]
                model, _ = train_model(vcfg, data)
                record(name, seed, _mix_metrics(model, benches, cfg.d_succ), t0)
        return rows

    # fusion-side axes share one set of stage-1 branches per seed
    variants = {"moe": [("E1k1", {"experts": 1, "top_k": 1}), ("E4k2", {"experts": 4, "top_k": 2})],
                "imputation": [("learnable", {"imputation": "learnable"}), ("zero", {"imputation": "zero"})],
                "label-rule": [("adaptive", {}), ("distance-only", {})]}[axis]
    data = [train_data(b, cfg.model) for b in benches]
    branch_states: dict[int, dict] = {}
    for seed in seeds:
        key = seed if branch_seed is None else branch_seed
        if key not in branch_states:
            base, _ = train_model(replace(cfg, seed=key), data, stages=("1",))
            branch_states[key] = {k: v.clone() for k, v in base.state_dict().items() if k.startswith("branches.")}
        branch_state = branch_states[key]
        for name, over in variants:
            t0 = time.time()
            vmodel = new_model(replace(cfg.model, **over), seed)
            vmodel.load_state_dict(branch_state, strict=False)
            vdata = data
            if name == "distance-only":
                vdata = [replace(d, rules={m: replace(r, fov_class="panoramic") for m, r in d.rules.items()})
                         for d in data]
            train_stage2(vmodel, vdata, replace(cfg.stage2, seed=seed))
            record(name, seed, _mix_metrics(vmodel, benches, cfg.d_succ), t0)
    return rows


def _mix_metrics(model: UniMPR, benches: Sequence[Benchmark], d_succ: float) -> dict:
    """Full-modality recall@1 per world, their mean, the mean over every missing-modality mask, and the mean
    recall@1 of the fused slot alone (the only part of the descriptor the fusion variants change)."""
    full, masked, fused = [], [], []
    out = {}
    for b in benches:
        reps = eval_masks(model, b, d_succ=d_succ)
        top = max(reps, key=lambda k: len(k.split(",")))
        out[f"{b.name}:{top}"] = reps[top].recalls[1]
        full.append(reps[top].recalls[1])
        masked += [r.recalls[1] for k, r in reps.items() if k != top]
        mask = PresenceMask.parse(top)
        db, q = (descriptors_for(model, f, mask)[:, -model.cfg.dim:] for f in (b.db, b.query))
        db, q = (x / np.linalg.norm(x, axis=1, keepdims=True) for x in (db, q))
        fused.append(evaluate(build_index(db, poses(b.db)), q, poses(b.query), d_succ=d_succ).recalls[1])
    out["recall@1"] = float(np.mean(full))
    out["masked_recall@1"] = float(np.mean(masked)) if masked else float("nan")
    out["fused_recall@1"] = float(np.mean(fused))
    return out


def summarize(rows: Sequence[dict], key: str = "recall@1") -> list[dict]:
    """Mean and sample std of ``key`` per variant."""
    out = []
    for v in dict.fromkeys(r["variant"] for r in rows):
        vals = np.array([r[key] for r in rows if r["variant"] == v], dtype=float)
        out.append({"variant": v, "n": len(vals), "mean": float(vals.mean()),
                    "std": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0})
    return out


def descriptors_for(model: UniMPR, frames: Sequence[MultimodalFrame], mask: PresenceMask) -> np.ndarray:
    return extract_descriptors(model, prepare_frames(frames, model.cfg, sampling=model.sampling), mask)


def save_descriptors(directory, model: UniMPR, frames, mask: PresenceMask) -> Path:
    return write_descriptors(directory, descriptors_for(model, frames, mask), poses(frames), meta={"mask": str(mask)})


def load_descriptors(directory):
    return read_descriptors(directory)
