"""GFSL metrics, calibration search and the evaluation harness.

A *scorer* is any object with ``task_scores(ds, task) -> TaskScores``. Every
instance is reduced to its best seen-side and best unseen-side score. All
accuracies and the seen/unseen curve follow from those two numbers: an
instance goes to the seen side at calibration ``gamma`` iff
``max_seen - gamma >= max_unseen``.
"""
from __future__ import annotations

import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .data import Dataset, GfslTask, sample_gfsl_task
from .rng import derive_seed

METRICS = ("fsl_acc", "seen_acc", "seen_joint", "unseen_joint", "mean_acc", "delta", "hm", "ausuc")


@dataclass(frozen=True)
class TaskScores:
    is_seen: np.ndarray  # bool per test instance
    label: np.ndarray  # true class index within its own side
    seen_max: np.ndarray
    seen_arg: np.ndarray
    unseen_max: np.ndarray
    unseen_arg: np.ndarray

    @classmethod
    def from_scores(cls, seen_scores, unseen_scores, is_seen, label):
        seen_scores = np.asarray(seen_scores, dtype=np.float64)
        unseen_scores = np.asarray(unseen_scores, dtype=np.float64)
        return cls(
            is_seen=np.asarray(is_seen, dtype=bool),
            label=np.asarray(label, dtype=np.int64),
            seen_max=seen_scores.max(axis=1),
            seen_arg=seen_scores.argmax(axis=1),
            unseen_max=unseen_scores.max(axis=1),
            unseen_arg=unseen_scores.argmax(axis=1),
        )

    @property
    def gap(self) -> np.ndarray:
        return self.seen_max - self.unseen_max

    @property
    def seen_ok(self) -> np.ndarray:
        return self.is_seen & (self.seen_arg == self.label)

    @property
    def unseen_ok(self) -> np.ndarray:
        return ~self.is_seen & (self.unseen_arg == self.label)


def task_labels(ds: Dataset, task: GfslTask):
    """``(is_seen, label)`` for the test instances ordered seen queries then unseen queries."""
    pos = ds.seen_position()
    seen_labels = pos[ds.labels[task.seen_query]]
    is_seen = np.r_[np.ones(task.seen_query.size, bool), np.zeros(task.unseen_query.size, bool)]
    return is_seen, np.r_[seen_labels, task.unseen_query_labels]


def test_indices(task: GfslTask) -> np.ndarray:
    return np.r_[task.seen_query, task.unseen_query]


# --------------------------------------------------------------------- metrics

def harmonic_mean(acc_s: float, acc_u: float) -> float:
    if acc_s <= 0 or acc_u <= 0:
        return 0.0
    return 2.0 * acc_s * acc_u / (acc_s + acc_u)


def delta_value(acc_ss: float, acc_sj: float, acc_uu: float, acc_uj: float) -> float:
    """Mean accuracy drop when moving from the restricted to the joint label space."""
    return ((acc_ss - acc_sj) + (acc_uu - acc_uj)) / 2.0


def ausuc(ts: TaskScores) -> float:
    """Exact area under the seen-unseen accuracy curve of one task."""
    n_s = int(ts.is_seen.sum())
    n_u = int(ts.is_seen.size - n_s)
    return float(kernels.ausuc_area(ts.gap, ts.seen_ok, ts.unseen_ok, n_s, n_u))


def seen_unseen_curve(ts: TaskScores):
    n_s = int(ts.is_seen.sum())
    return kernels.su_curve(ts.gap, ts.seen_ok, ts.unseen_ok, n_s, int(ts.is_seen.size - n_s))


def task_metrics(ts: TaskScores, gamma: float = 0.0) -> dict:
    n_s = int(ts.is_seen.sum())
    n_u = int(ts.is_seen.size - n_s)
    seen_ok, unseen_ok = ts.seen_ok, ts.unseen_ok
    sj, uj = kernels.joint_correct_counts(ts.gap, seen_ok, unseen_ok, np.array([gamma], dtype=np.float64))
    acc_ss = seen_ok.sum() / n_s if n_s else 0.0
    acc_uu = unseen_ok.sum() / n_u if n_u else 0.0
    acc_sj = int(sj[0]) / n_s if n_s else 0.0
    acc_uj = int(uj[0]) / n_u if n_u else 0.0
    return {
        "fsl_acc": float(acc_uu),
        "seen_acc": float(acc_ss),
        "seen_joint": float(acc_sj),
        "unseen_joint": float(acc_uj),
        "mean_acc": float((int(sj[0]) + int(uj[0])) / ts.is_seen.size),
        "delta": float(delta_value(acc_ss, acc_sj, acc_uu, acc_uj)),
        "hm": float(harmonic_mean(acc_sj, acc_uj)),
        "ausuc": ausuc(ts),
    }


def hm_over_grid(ts: TaskScores, gammas: np.ndarray) -> np.ndarray:
    """Per-task harmonic mean for every calibration value in ``gammas``."""
    n_s = int(ts.is_seen.sum())
    n_u = int(ts.is_seen.size - n_s)
    sj, uj = kernels.joint_correct_counts(ts.gap, ts.seen_ok, ts.unseen_ok, gammas)
    a = sj / n_s
    b = uj / n_u
    with np.errstate(invalid="ignore", divide="ignore"):
        hm = np.where((a > 0) & (b > 0), 2 * a * b / (a + b), 0.0)
    return hm


def mean_ci(values: Sequence[float]) -> dict:
    v = np.asarray(values, dtype=np.float64)
    mean = float(v.mean()) if v.size else 0.0
    ci = float(1.96 * v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return {"mean": mean, "ci95": ci}


# ----------------------------------------------------------------- harness

def _task_seed(seed: int, role: str, shot: int, way: int, index: int) -> int:
    return derive_seed(seed, "task", role, shot, way, index)


def collect_scores(scorer, ds: Dataset, role: str, shot: int, way: int, num_tasks: int,
                   seed: int, threads: int = 1, domain=None) -> list:
    """TaskScores for ``num_tasks`` tasks, in task-index order."""

    def one(i):
        task = sample_gfsl_task(ds, role, shot, way, _task_seed(seed, role, shot, way, i), domain=domain)
        return scorer.task_scores(ds, task)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, range(num_tasks)))
    return [one(i) for i in range(num_tasks)]


def calibration_grid(scores: Sequence[TaskScores], size: int = 201) -> np.ndarray:
    """Symmetric grid spanning all observed gaps; always contains 0."""
    span = max(float(np.abs(ts.gap).max()) for ts in scores)
    if not np.isfinite(span) or span == 0:
        return np.array([0.0])
    grid = np.linspace(-span, span, size)
    return np.unique(np.r_[grid, 0.0])


def select_gamma(scores: Sequence[TaskScores], grid: Optional[np.ndarray] = None) -> tuple[float, float]:
    """Grid value with the best mean per-task HM; ties go to the smallest ``|gamma|``.

    Returns ``(gamma, mean_hm)``.
    """
    grid = calibration_grid(scores) if grid is None else np.asarray(grid, dtype=np.float64)
    hm = np.mean([hm_over_grid(ts, grid) for ts in scores], axis=0)
    best = hm.max()
    cands = grid[hm == best]
    gamma = float(cands[np.lexsort((cands, np.abs(cands)))][0])
    return gamma, float(best)


def calibrate(scorer, ds: Dataset, shot: int = 1, way: int = 5, num_tasks: int = 500,
              seed: int = 0, threads: int = 1, grid=None, domain=None) -> float:
    """Calibration factor chosen on unseen_val GFSL tasks by mean harmonic mean."""
    way = min(way, int(ds.classes_with_role("unseen_val").size))
    scores = collect_scores(scorer, ds, "unseen_val", shot, way, num_tasks, derive_seed(seed, "calibrate"),
                            threads, domain)
    return select_gamma(scores, grid)[0]


def _subsample_curve(gammas, acc_s, acc_u, max_points: int = 257):
    if gammas.size <= max_points:
        keep = np.arange(gammas.size)
    else:
        keep = np.unique(np.linspace(0, gammas.size - 1, max_points).round().astype(int))
    return [[float(gammas[i]) if np.isfinite(gammas[i]) else ("-inf" if gammas[i] < 0 else "inf"),
             float(acc_s[i]), float(acc_u[i])] for i in keep]


@dataclass
class EvalReport:
    role: str
    shot: int
    ways: list
    num_tasks: int
    gamma: float
    seed: int
    metrics: dict = field(default_factory=dict)  # way -> metric -> {"mean", "ci95"}
    curves: dict = field(default_factory=dict)  # way -> [[gamma, acc_seen_joint, acc_unseen_joint], ...]

    def sweep_table(self) -> list:
        return [{"way": w, **{k: self.metrics[w][k]["mean"] for k in METRICS}} for w in self.ways]

    def to_dict(self) -> dict:
        return {
            "role": self.role,
            "shot": self.shot,
            "ways": list(self.ways),
            "num_tasks": self.num_tasks,
            "gamma": self.gamma,
            "seed": self.seed,
            "metrics": {str(w): self.metrics[w] for w in self.ways},
            "sweep": self.sweep_table(),
            "curves": {str(w): self.curves[w] for w in self.ways},
        }


def evaluate(scorer, ds: Dataset, role: str = "unseen_test", shot: int = 1, ways: Sequence[int] = (5,),
             num_tasks: int = 1000, gamma: float = 0.0, seed: int = 0, threads: int = 1,
             domain=None) -> EvalReport:
    """Run every GFSL metric over ``num_tasks`` sampled tasks for each way in ``ways``.

    ``gamma`` is subtracted from seen scores for the joint metrics; AUSUC ignores it.
    """
    report = EvalReport(role=role, shot=shot, ways=list(ways), num_tasks=num_tasks, gamma=float(gamma), seed=seed)
    for way in ways:
        scores = collect_scores(scorer, ds, role, shot, way, num_tasks, seed, threads, domain)
        per_task = [task_metrics(ts, gamma) for ts in scores]
        report.metrics[way] = {k: mean_ci([m[k] for m in per_task]) for k in METRICS}
        pooled = TaskScores(*(np.concatenate([getattr(ts, f) for ts in scores])
                              for f in ("is_seen", "label", "seen_max", "seen_arg", "unseen_max", "unseen_arg")))
        report.curves[way] = _subsample_curve(*seen_unseen_curve(pooled))
    return report


class EmbeddingCache:
    """Embeds a dataset's features once per (model, dataset) pair."""

    def __init__(self, m):
        self.m = m
        self._lock = threading.Lock()
        self._key = None
        self._emb = None

    def get(self, ds: Dataset) -> np.ndarray:
        with self._lock:
            if self._key is not ds:
                from .model import embed_forward

                self._emb, _ = embed_forward(self.m.layers, ds.features)
                self._key = ds
            return self._emb


class ModelScorer:
    """Scores GFSL tasks with a synthesised joint classifier."""

    def __init__(self, m):
        self.m = m
        self.cache = EmbeddingCache(m)

    def joint_classifier(self, ds: Dataset, task: GfslTask):
        from .synthesis import synthesize_joint

        emb = self.cache.get(ds)
        return synthesize_joint(self.m, emb[task.support], task.support_labels, task.shot)

    def task_scores(self, ds: Dataset, task: GfslTask) -> TaskScores:
        emb = self.cache.get(ds)
        joint = self.joint_classifier(ds, task)
        logits = joint.logits(emb[test_indices(task)], self.m.config.logit_scale, self.m.config.normalize_embeddings)
        s = self.m.theta.shape[1]
        is_seen, label = task_labels(ds, task)
        return TaskScores.from_scores(logits[:, :s], logits[:, s:], is_seen, label)
