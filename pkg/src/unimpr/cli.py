"""Command-line entry points: gen-data, train, extract, eval, gradcheck, ablate.

Exit codes: 0 success, 1 usage error, 2 data error, 3 acceptance failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from .experiments import (ABLATION_AXES, SWEEPS, ExperimentConfig, ablate, build_benchmark, calibration_sweep,
                          degradation_sweep, load_benchmark, mix_specs, new_model, plot_curve, plot_pr,
                          save_benchmark, summarize, threshold_sweep, viewpoint_sweep, write_rows)
from .fusion import PresenceMask
from .gradsuite import CASES, TOLERANCE, run_suite
from .model import UniMPR, extract_descriptors, prepare_frames
from .nn_core import ContractError
from .retrieval import build_index, evaluate, read_descriptors, write_descriptors
from .synth import read_dataset
from .training import TrainData, train_end_to_end, train_stage1, train_stage2

log = logging.getLogger("unimpr")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_ACCEPTANCE = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# --- config ---------------------------------------------------------------------

def _set_path(d: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    for k in keys[:-1]:
        d = d.setdefault(k, {})
        if not isinstance(d, dict):
            raise UsageError(f"--set {dotted}: {k} is not a section")
    d[keys[-1]] = value


def resolve_config(args, overrides: dict | None = None) -> ExperimentConfig:
    """Defaults < JSON config file < --set KEY=VALUE < dedicated flags."""
    raw: dict = {}
    if getattr(args, "config", None):
        try:
            raw = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"{args.config}: invalid JSON ({exc})") from None
    for item in getattr(args, "set", None) or []:
        key, sep, text = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        _set_path(raw, key, value)
    for key, value in (overrides or {}).items():
        if value is not None:
            _set_path(raw, key, value)
    try:
        return ExperimentConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from None


def echo_config(out: Path, cfg: ExperimentConfig | dict, **extra) -> None:
    out.mkdir(parents=True, exist_ok=True)
    body = cfg.to_dict() if isinstance(cfg, ExperimentConfig) else dict(cfg)
    body.update(extra)
    body = {k: v for k, v in body.items() if not callable(v)}
    (out / "resolved_config.json").write_text(json.dumps(body, indent=1, sort_keys=True, default=str))


def _parse_list(text: str, cast=str) -> list:
    try:
        return [cast(t.strip()) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _parse_mask(text: str) -> PresenceMask:
    try:
        return PresenceMask.parse(text)
    except (ContractError, ValueError) as exc:
        raise UsageError(f"--mask: {exc}") from None


def _load(fn, *a):
    try:
        return fn(*a)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(str(exc)) from None


# --- commands ----------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if args.frames is not None and args.frames < 1:
        raise UsageError("--frames must be at least 1")
    if args.places is not None and args.places < 1:
        raise UsageError("--places must be at least 1")
    if args.world_size is not None and args.world_size <= 60:
        raise UsageError("--world-size must exceed 60 m")
    cfg = resolve_config(args, {"benchmark.seed": args.seed, "benchmark.n_train": args.frames,
                                "benchmark.n_places": args.places})
    spec = cfg.benchmark
    if args.world_size is not None:
        # keep the landmark density of the default world
        scale = (args.world_size / spec.extent) ** 2
        spec = replace(spec, extent=args.world_size, n_landmarks=max(1, int(round(spec.n_landmarks * scale))),
                       place_half_size=(args.world_size - 50.0, args.world_size - 50.0))
    if args.modalities:
        names = set(_parse_list(args.modalities))
        if not names or names - {"camera", "lidar", "radar"}:
            raise UsageError(f"--modalities: expected a comma list from camera,lidar,radar, got {args.modalities!r}")
        s = spec.suite
        spec = replace(spec, suite=replace(s, rig=(s.rig or "surround") if "camera" in names else None,
                                           lidar_beams=(s.lidar_beams or 32) if "lidar" in names else None,
                                           radar_kind=(s.radar_kind or "single_chip") if "radar" in names else None))
    cfg.benchmark = spec
    t0 = time.time()
    try:
        bench = build_benchmark(spec)
    except ValueError as exc:
        raise UsageError(f"cannot build benchmark: {exc}") from None
    out = Path(args.out)
    save_benchmark(out, bench)
    echo_config(out, cfg)
    print(f"wrote {len(bench.train)} train, {len(bench.db)} db, {len(bench.query)} query frames to {out} "
          f"({time.time() - t0:.1f}s)")
    return EXIT_OK


def _train_sets(roots, cfg: ExperimentConfig) -> list[TrainData]:
    sets = []
    for i, root in enumerate(roots):
        bench = _load(load_benchmark, root, ("train",))
        if not bench.train:
            raise DataError(f"{root}: no training frames")
        sets.append(TrainData.from_frames(f"{i}:{Path(root).name}", bench.train, cfg.model))
    return sets


def cmd_train(args) -> int:
    cfg = resolve_config(args, {"seed": args.seed, "stage1.epochs": args.epochs if args.stage == "1" else None,
                                "stage2.epochs": args.epochs if args.stage != "1" else None,
                                "stage1.lr": args.lr if args.stage == "1" else None,
                                "stage2.lr": args.lr if args.stage != "1" else None,
                                "stage1.steps_per_epoch": args.steps if args.stage == "1" else None,
                                "stage2.steps_per_epoch": args.steps if args.stage != "1" else None})
    stages: list[str] = []
    model = None
    if args.stage == "2" and not args.init_ckpt:
        raise UsageError("stage 2 needs a stage-1 checkpoint (--init-ckpt)")
    if args.init_ckpt:
        model, meta = _load(UniMPR.load, args.init_ckpt)
        stages = list(meta.get("stages", []))
        if args.stage == "2" and "1" not in stages:
            raise DataError(f"{args.init_ckpt}: not a stage-1 checkpoint (stages: {stages or 'none'})")
        cfg.model = model.cfg
    sets = _train_sets(args.data, cfg)
    out = Path(args.out_ckpt)
    t0 = time.time()
    history: list[dict] = []

    def progress(row):
        history.append(row)
        if row["step"] == 0:
            log.info("stage %s epoch %d lr %.2e loss %.4f", row["stage"], row["epoch"], row["lr"], row["loss"])

    try:
        if args.stage == "1":
            model = model or new_model(cfg.model, cfg.seed)
            mods = _parse_list(args.modalities) if args.modalities else \
                [m for m in ("camera", "lidar", "radar") if any(m in d.inputs for d in sets)]
            for m in mods:
                train_stage1(model, m, sets, replace(cfg.stage1, seed=cfg.seed), progress)
        elif args.stage == "2":
            train_stage2(model, sets, replace(cfg.stage2, seed=cfg.seed), progress)
        else:
            model = model or new_model(cfg.model, cfg.seed)
            train_end_to_end(model, sets, replace(cfg.stage2, seed=cfg.seed), progress)
    except ContractError as exc:
        raise DataError(str(exc)) from None
    stages.append(args.stage)
    model.save(out, meta={"stages": stages, "config": cfg.to_dict()})
    write_rows(out / "losses.csv", history)
    echo_config(out, cfg, stage=args.stage, data=[str(d) for d in args.data])
    print(f"stage {args.stage}: {len(history)} steps in {time.time() - t0:.1f}s, "
          f"final loss {history[-1]['loss']:.4f}; checkpoint {out}")
    return EXIT_OK


def cmd_extract(args) -> int:
    mask = _parse_mask(args.mask)
    model, meta = _load(UniMPR.load, args.ckpt)
    frames, _ = _load(read_dataset, args.dataset)
    if not frames:
        raise DataError(f"{args.dataset}: empty dataset")
    inputs = prepare_frames(frames, model.cfg, modalities=mask.present, sampling=model.sampling)
    missing = [m for m in mask.present if m not in inputs]
    if missing:
        raise DataError(f"{args.dataset}: no {', '.join(missing)} data for the requested mask")
    desc = extract_descriptors(model, inputs, mask)
    out = Path(args.out)
    write_descriptors(out, desc, [f.pose for f in frames], meta={"mask": str(mask), "ckpt": str(args.ckpt),
                                                                  "dataset": str(args.dataset)})
    echo_config(out, {"ckpt": str(args.ckpt), "dataset": str(args.dataset), "mask": str(mask),
                      "model": model.cfg.to_dict()})
    print(f"wrote {desc.shape[0]} x {desc.shape[1]} descriptors ({mask}) to {out}")
    return EXIT_OK


def _write_sweep(out: Path, name: str, rows, x: str) -> None:
    write_rows(out / f"{name}_sweep.csv", rows)
    plot_curve(out / f"{name}_sweep.svg", [r[x] if not isinstance(r[x], str) else i for i, r in enumerate(rows)],
               [r["recall@1"] for r in rows], x, "recall@1")
    for r in rows:
        print(json.dumps(r))


def cmd_eval(args) -> int:
    ks = _parse_list(args.k, int)
    if not ks or min(ks) < 1:
        raise UsageError("--k needs positive integers")
    out = Path(args.out)
    if args.sweep in ("viewpoint", "calibration", "degradation"):
        if not (args.ckpt and args.data):
            raise UsageError(f"--sweep {args.sweep} needs --ckpt and --data (a gen-data directory)")
        model, _ = _load(UniMPR.load, args.ckpt)
        bench = _load(load_benchmark, args.data, ("db", "query"))
        fn = {"viewpoint": viewpoint_sweep, "calibration": calibration_sweep, "degradation": degradation_sweep}
        try:
            rows = fn[args.sweep](model, bench, seed=args.seed, d_succ=args.d_succ)
        except ContractError as exc:
            raise DataError(str(exc)) from None
        _write_sweep(out, args.sweep, rows, {"viewpoint": "translation", "calibration": "tau",
                                             "degradation": "mode"}[args.sweep])
        echo_config(out, vars(args) | {"command": "eval"})
        return EXIT_OK
    if not (args.db and args.query):
        raise UsageError("eval needs --db and --query descriptor directories")
    db, db_poses, _ = _load(read_descriptors, args.db)
    q, q_poses, _ = _load(read_descriptors, args.query)
    if db.shape[1] != q.shape[1]:
        raise DataError(f"descriptor dims differ: db {db.shape[1]} vs query {q.shape[1]}")
    if max(ks) > len(db):
        raise UsageError(f"--k {max(ks)} exceeds the database size {len(db)}")
    index = _load(build_index, db, db_poses)
    report = evaluate(index, q, q_poses, tuple(ks), args.d_succ)
    report.write(out, "report")
    plot_pr(out / "pr_curve.svg", report)
    if args.sweep == "threshold":
        _write_sweep(out, "threshold", threshold_sweep(index, q, q_poses), "d_succ")
    echo_config(out, vars(args) | {"command": "eval"})
    print(json.dumps({"recalls": report.recalls, "max_f1": report.max_f1, "n_queries": report.n_queries,
                      "n_without_match": report.n_without_match}))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    ops = _parse_list(args.ops) if args.ops else None
    if ops and set(ops) - set(CASES):
        raise UsageError(f"unknown ops {sorted(set(ops) - set(CASES))}; choose from {sorted(CASES)}")
    t0 = time.time()
    worst = run_suite(args.seeds, ops)
    failed = [k for k, v in worst.items() if not v < args.tol]
    for k, v in worst.items():
        print(f"{k:22s} {v:.3e} {'FAIL' if k in failed else 'ok'}")
    print(f"{len(worst) - len(failed)}/{len(worst)} ops within {args.tol:g} over {args.seeds} seeds "
          f"({time.time() - t0:.1f}s)")
    if args.out:
        out = Path(args.out)
        write_rows(out / "gradcheck.csv", [{"op": k, "max_rel_error": v, "pass": k not in failed}
                                           for k, v in worst.items()])
        echo_config(out, {"seeds": args.seeds, "tol": args.tol, "ops": ops or sorted(CASES)})
    return EXIT_ACCEPTANCE if failed else EXIT_OK


def cmd_ablate(args) -> int:
    cfg = resolve_config(args, {"seed": args.seed})
    seeds = _parse_list(args.seeds, int)
    if args.data:
        benches = [_load(load_benchmark, root) for root in args.data]
    elif args.which in ("bev-mode", "aggregator", "loss-semantics"):
        benches = [build_benchmark(cfg.benchmark)]
    else:
        benches = [build_benchmark(s) for s in mix_specs(cfg.benchmark, args.worlds)]
    rows = ablate(args.which, cfg, benches, seeds, progress=log.info, branch_seed=args.branch_seed)
    out = Path(args.out)
    write_rows(out / f"ablation_{args.which}.csv", rows)
    summary = summarize(rows)
    write_rows(out / f"ablation_{args.which}_summary.csv", summary)
    echo_config(out, cfg, which=args.which, seeds=seeds, branch_seed=args.branch_seed, worlds=[b.spec.to_dict() for b in benches])
    for r in summary:
        print(f"{r['variant']:14s} recall@1 {r['mean']:.3f} +/- {r['std']:.3f} (n={r['n']})")
    return EXIT_OK


# --- parser -------------------------------------------------------------------------

def build_parser() -> Parser:
    p = Parser(prog="unimpr", description="Multimodal place recognition on synthetic benchmarks.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    def with_config(sp):
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config entry, e.g. stage1.epochs=2 (value parsed as JSON)")
        sp.add_argument("--seed", type=int)

    g = sub.add_parser("gen-data", help="render a synthetic benchmark (train/db/query)")
    with_config(g)
    g.add_argument("--frames", type=int, help="number of training frames")
    g.add_argument("--places", type=int, help="number of database places (one query each)")
    g.add_argument("--world-size", type=float, help="world half-extent in metres")
    g.add_argument("--modalities", help="comma list from camera,lidar,radar")
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="stage 1 (branches), stage 2 (fusion) or end-to-end training")
    with_config(t)
    t.add_argument("--stage", choices=("1", "2", "e2e"), required=True)
    t.add_argument("--data", nargs="+", required=True, help="gen-data directories (one per source dataset)")
    t.add_argument("--init-ckpt", help="checkpoint to start from (required for stage 2)")
    t.add_argument("--out-ckpt", required=True)
    t.add_argument("--modalities", help="stage 1: branches to train (default: all present)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--steps", type=int, help="steps per epoch")
    t.add_argument("--lr", type=float)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("extract", help="write descriptors for a dataset directory")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--mask", default="camera,lidar,radar")
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_extract)

    v = sub.add_parser("eval", help="retrieval metrics, optionally with a sweep")
    v.add_argument("--db", help="database descriptor directory")
    v.add_argument("--query", help="query descriptor directory")
    v.add_argument("--k", default="1,5,10,20")
    v.add_argument("--d-succ", type=float, default=9.0)
    v.add_argument("--sweep", choices=SWEEPS)
    v.add_argument("--ckpt", help="model checkpoint (viewpoint, calibration, degradation sweeps)")
    v.add_argument("--data", help="gen-data directory (viewpoint, calibration, degradation sweeps)")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", required=True)
    v.set_defaults(fn=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    c.add_argument("--seeds", type=int, default=20)
    c.add_argument("--tol", type=float, default=TOLERANCE)
    c.add_argument("--ops", help=f"comma list from {','.join(CASES)}")
    c.add_argument("--out")
    c.set_defaults(fn=cmd_gradcheck)

    a = sub.add_parser("ablate", help="compare variants along one ablation axis")
    with_config(a)
    a.add_argument("--which", choices=ABLATION_AXES, required=True)
    a.add_argument("--data", nargs="+", help="gen-data directories (default: generate from the config)")
    a.add_argument("--worlds", type=int, default=3, help="worlds in the generated mix for fusion axes")
    a.add_argument("--seeds", default="0", help="comma list of training seeds")
    a.add_argument("--branch-seed", type=int, help="fusion axes: train stage-1 branches once with this seed")
    a.add_argument("--out", required=True)
    a.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SystemExit as exc:  # --help
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
