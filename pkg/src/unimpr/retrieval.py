"""Exact descriptor retrieval and place-recognition metrics."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import Pose2D

DEFAULT_KS = (1, 5, 10, 20)
NORM_TOL = 1e-6


@dataclass(frozen=True)
class DescriptorIndex:
    descriptors: np.ndarray  # [N, D]
    poses: tuple[Pose2D, ...]

    @property
    def xy(self) -> np.ndarray:
        return np.array([[p.x, p.y] for p in self.poses])

    def __len__(self) -> int:
        return len(self.descriptors)


def build_index(descriptors: np.ndarray, poses: Sequence[Pose2D]) -> DescriptorIndex:
    d = np.ascontiguousarray(descriptors, dtype=np.float64)
    if d.ndim != 2 or len(d) == 0:
        raise ValueError("index needs a non-empty [N, D] descriptor matrix")
    if len(poses) != len(d):
        raise ValueError(f"{len(d)} descriptors but {len(poses)} poses")
    norms = np.linalg.norm(d, axis=1)
    bad = np.abs(norms - 1) > NORM_TOL
    if bad.any():
        raise ValueError(f"{int(bad.sum())} database rows are not unit norm (worst {norms[bad][0]:.6g})")
    return DescriptorIndex(d, tuple(poses))


def distances(index: DescriptorIndex, q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape[-1] != index.descriptors.shape[1]:
        raise ValueError(f"query dim {q.shape[-1]} != index dim {index.descriptors.shape[1]}")
    return np.linalg.norm(index.descriptors - q, axis=1)


def query_topk(index: DescriptorIndex, q: np.ndarray, k: int) -> list[tuple[int, float]]:
    """Exact top-k by Euclidean distance, ties to the lower id."""
    if not 1 <= k <= len(index):
        raise ValueError(f"k must lie in [1, {len(index)}], got {k}")
    d = distances(index, q)
    order = np.argsort(d, kind="stable")[:k]
    return [(int(i), float(d[i])) for i in order]


def _ranked(index: DescriptorIndex, queries: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    ids = np.empty((len(queries), k), dtype=np.int64)
    ds = np.empty((len(queries), k))
    for i, q in enumerate(queries):
        d = distances(index, q)
        order = np.argsort(d, kind="stable")[:k]
        ids[i], ds[i] = order, d[order]
    return ids, ds


@dataclass
class EvalReport:
    recalls: dict[int, float]
    max_f1: float
    pr: list[tuple[float, float, float]]  # (threshold, precision, recall)
    d_succ: float
    top1_distances: list[float]
    top1_ids: list[int]
    top1_correct: list[bool]
    valid: list[bool]
    n_queries: int
    n_without_match: int
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["recalls"] = {str(k): v for k, v in self.recalls.items()}
        return d

    def write(self, directory: str | Path, stem: str = "report") -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / f"{stem}.json").write_text(json.dumps(self.to_dict(), indent=1))
        with open(directory / f"{stem}_queries.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["query", "top1_id", "top1_distance", "correct", "has_match"])
            for i, (tid, dist, ok, v) in enumerate(zip(self.top1_ids, self.top1_distances, self.top1_correct, self.valid)):
                w.writerow([i, tid, f"{dist:.9g}", int(ok), int(v)])


def evaluate(index: DescriptorIndex, queries: np.ndarray, query_poses: Sequence[Pose2D],
             ks: Sequence[int] = DEFAULT_KS, d_succ: float = 9.0) -> EvalReport:
    """Recall@K over queries that have a true match within d_succ, plus max F1 over top-1 distances."""
    queries = np.asarray(queries, dtype=np.float64)
    if len(queries) != len(query_poses):
        raise ValueError("one pose per query required")
    ks = sorted(set(int(k) for k in ks))
    kmax = min(max(ks), len(index))
    ids, ds = _ranked(index, queries, kmax)
    db_xy = index.xy
    q_xy = np.array([[p.x, p.y] for p in query_poses]).reshape(-1, 2)
    geo = np.linalg.norm(q_xy[:, None, :] - db_xy[None, :, :], axis=2)  # [Q, N]
    within = geo <= d_succ
    valid = within.any(axis=1)
    hit = np.take_along_axis(within, ids, axis=1)  # [Q, kmax]
    n_valid = int(valid.sum())
    recalls = {}
    for k in ks:
        kk = min(k, kmax)
        ok = hit[:, :kk].any(axis=1) & valid
        recalls[k] = float(ok.sum() / n_valid) if n_valid else 0.0
    correct = hit[:, 0] & valid
    f1, pr = max_f1(ds[:, 0], correct, valid)
    return EvalReport(recalls, f1, pr, float(d_succ), ds[:, 0].tolist(), ids[:, 0].tolist(),
                      correct.tolist(), valid.tolist(), len(queries), int((~valid).sum()))


def recall_at_k(index: DescriptorIndex, queries: np.ndarray, query_poses: Sequence[Pose2D],
                ks: Sequence[int] = DEFAULT_KS, d_succ: float = 9.0) -> dict[int, float]:
    return evaluate(index, queries, query_poses, ks, d_succ).recalls


def max_f1(top1_distances: Sequence[float], correct: Sequence[bool],
           has_match: Sequence[bool] | None = None) -> tuple[float, list[tuple[float, float, float]]]:
    """Max F1 over acceptance thresholds on top-1 distances.

    A query is accepted when its top-1 distance <= threshold. Recall is taken
    over queries with a ground-truth match, which default to the correct ones.
    """
    d = np.asarray(top1_distances, dtype=np.float64)
    ok = np.asarray(correct, dtype=bool)
    valid = ok.copy() if has_match is None else np.asarray(has_match, dtype=bool)
    ok = ok & valid
    n_pos = int(valid.sum())
    if len(d) == 0:
        raise ValueError("max_f1 needs at least one query")
    order = np.argsort(d, kind="stable")
    ds, oks = d[order], ok[order]
    tp = np.cumsum(oks)
    fp = np.cumsum(~oks)
    # thresholds at each distinct distance: take the last position of each run
    last = np.r_[np.nonzero(np.diff(ds))[0], len(ds) - 1]
    pr = []
    best = 0.0
    for i in last:
        p = tp[i] / (tp[i] + fp[i])
        r = tp[i] / n_pos if n_pos else 0.0
        f = 2 * p * r / (p + r) if p + r > 0 else 0.0
        pr.append((float(ds[i]), float(p), float(r)))
        best = max(best, f)
    return float(best), pr


# --- descriptor files ---------------------------------------------------------------

def write_descriptors(directory: str | Path, descriptors: np.ndarray, poses: Sequence[Pose2D],
                      ids: Sequence[str] | None = None, meta: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(descriptors, dtype="<f4")
    arr.tofile(directory / "descriptors.f32")
    manifest = {
        "shape": list(arr.shape),
        "dtype": "float32",
        "file": "descriptors.f32",
        "poses": [[p.x, p.y, p.yaw] for p in poses],
        "ids": list(ids) if ids is not None else [str(i) for i in range(len(arr))],
        "meta": meta or {},
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return directory


def read_descriptors(directory: str | Path) -> tuple[np.ndarray, list[Pose2D], dict]:
    directory = Path(directory)
    mpath = directory / "manifest.json"
    if not mpath.exists():
        raise ValueError(f"{mpath}: descriptor manifest not found")
    manifest = json.loads(mpath.read_text())
    n, dim = manifest["shape"]
    raw = (directory / manifest["file"]).read_bytes()
    if len(raw) != 4 * n * dim:
        raise ValueError(f"{directory / manifest['file']}: expected {4 * n * dim} bytes, found {len(raw)}")
    arr = np.frombuffer(raw, dtype="<f4").reshape(n, dim).copy()
    poses = [Pose2D(*p) for p in manifest["poses"]]
    return arr, poses, manifest
