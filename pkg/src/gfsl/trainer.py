"""Unified GFSL training with multi-classifier batches, plus light-weight adaptation.

One mini-batch embeds a pool of ``pool_way`` seen classes (``shot`` support
instances each) and an evaluation batch of seen instances exactly once. From
the pool it forms ``classifiers_per_batch`` fake tasks: each picks ``way`` pool
classes as fake tails, whose classifiers are synthesised from their prototypes,
while every other seen class keeps (or, for ``acastle``, adapts) its many-shot
weight vector. The loss is the mean cross-entropy of the evaluation batch
against every fake joint classifier.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, replace
from typing import Optional

import numpy as np

from . import numerics
from .data import TRAIN, Dataset
from .errors import CapacityError, ConfigError, NumericError
from .evaluation import ModelScorer, collect_scores, task_metrics
from .model import ModelState, embed_backward, embed_forward, score
from .rng import derive_seed, stream
from .synthesis import JointClassifier, slots_backward, slots_forward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    way: int = 5
    shot: int = 1
    pool_way: int = 24
    classifiers_per_batch: int = 64
    eval_batch: int = 128
    lr: float = 1e-4
    momentum: float = 0.9
    halve_every: int = 2000
    total_batches: int = 10000
    val_every: int = 500
    val_tasks: int = 500
    val_way: int = 5
    patience: int = 20
    clip_norm: float = 10.0
    single_domain_tails: bool = False
    exemplars_per_class: int = 5
    seed: int = 0

    def validate(self, num_seen: Optional[int] = None):
        if self.way < 1 or self.shot < 1 or self.classifiers_per_batch < 1 or self.eval_batch < 1:
            raise ConfigError("train.way, shot, classifiers_per_batch and eval_batch must be >= 1")
        if self.pool_way < self.way:
            raise ConfigError("train.pool_way must be >= train.way")
        if num_seen is not None and self.pool_way > num_seen:
            raise ConfigError(f"train.pool_way={self.pool_way} exceeds the {num_seen} seen classes")
        if self.lr < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("train.lr must be >= 0 and momentum in [0, 1)")


@dataclass(frozen=True)
class MultiBatch:
    pool_classes: np.ndarray  # (M,) seen-classifier columns
    pool_idx: np.ndarray  # (M*K,) instance indices, class-major
    partitions: np.ndarray  # (Z, N) indices into pool_classes
    eval_idx: np.ndarray
    eval_labels: np.ndarray  # seen-classifier columns
    shot: int


def _distinct_subsets(rng, groups, way: int, count: int) -> np.ndarray:
    """``count`` distinct sorted ``way``-subsets, each drawn inside one group."""
    capacity = sum(math.comb(len(g), way) for g in groups)
    if capacity < count:
        raise CapacityError(f"only {capacity} distinct {way}-class fake tasks available, need {count}")
    chosen, seen = [], set()
    while len(chosen) < count:
        g = groups[int(rng.integers(len(groups)))] if len(groups) > 1 else groups[0]
        sub = tuple(sorted(rng.choice(g, size=way, replace=False).tolist()))
        if sub not in seen:
            seen.add(sub)
            chosen.append(sub)
    return np.array(chosen, dtype=np.int64)


def build_multiclassifier_batch(ds: Dataset, cfg: TrainConfig, seed: int) -> MultiBatch:
    seen = ds.seen_classes
    pos = ds.seen_position()
    rng = stream(seed, "multi-batch")
    eligible = np.array([c for c in seen if ds.instances(TRAIN, c).size >= cfg.shot], dtype=np.int64)
    if eligible.size < cfg.pool_way:
        raise CapacityError(f"need {cfg.pool_way} seen classes with {cfg.shot} meta-train instances, have {eligible.size}")
    pool = np.sort(rng.choice(eligible, size=cfg.pool_way, replace=False))
    pool_idx = np.concatenate([rng.permutation(ds.instances(TRAIN, c))[: cfg.shot] for c in pool])
    if cfg.single_domain_tails:
        doms = ds.class_domains[pool]
        groups = [np.flatnonzero(doms == d) for d in np.unique(doms)]
        groups = [g for g in groups if g.size >= cfg.way]
        if not groups:
            raise CapacityError(f"no domain has {cfg.way} classes in the pool")
    else:
        groups = [np.arange(cfg.pool_way)]
    partitions = _distinct_subsets(rng, groups, cfg.way, cfg.classifiers_per_batch)
    candidates = np.setdiff1d(np.flatnonzero((ds.splits == TRAIN) & (pos[ds.labels] >= 0)), pool_idx)
    if candidates.size < cfg.eval_batch:
        raise CapacityError(f"need {cfg.eval_batch} seen instances for the evaluation batch")
    eval_idx = np.sort(rng.choice(candidates, size=cfg.eval_batch, replace=False))
    return MultiBatch(pool_classes=pos[pool], pool_idx=pool_idx, partitions=partitions,
                      eval_idx=eval_idx, eval_labels=pos[ds.labels[eval_idx]], shot=cfg.shot)


def gfsl_loss(m: ModelState, ds: Dataset, batch: MultiBatch, stats: Optional[dict] = None):
    """Mean cross-entropy over all fake tasks and evaluation instances.

    Returns ``(loss, grads)`` with ``grads`` aligned with ``m.params()``.
    """
    cfg = m.config
    x = ds.features[np.r_[batch.pool_idx, batch.eval_idx]]
    emb, cache = embed_forward(m.layers, x)
    if stats is not None:
        stats["embedded"] = stats.get("embedded", 0) + x.shape[0]
    n_pool = batch.pool_idx.size
    e_pool, e_eval = emb[:n_pool], emb[n_pool:]
    n_cls, k = batch.pool_classes.size, batch.shot
    d = m.embed_dim
    protos = e_pool.reshape(n_cls, k, d).mean(axis=1)

    z, way = batch.partitions.shape
    n_seen = m.theta.shape[1]
    slots = np.broadcast_to(m.theta.T, (z, n_seen, d)).copy()
    tail = np.zeros((z, n_seen), dtype=bool)
    rows = np.repeat(np.arange(z), way)
    cols = batch.pool_classes[batch.partitions].ravel()
    slots[rows, cols] = protos[batch.partitions.ravel()]
    tail[rows, cols] = True
    unit, scache = slots_forward(slots, tail, m.bases, m.proj_u, m.proj_v, cfg)

    if cfg.normalize_embeddings:
        e_norm = np.sqrt((e_eval ** 2).sum(-1, keepdims=True))
        e_used = e_eval / e_norm
    else:
        e_used = e_eval
    s = cfg.logit_scale
    logits = s * (e_used[None] @ np.swapaxes(unit, 1, 2))  # (Z, n, S)
    labels = np.broadcast_to(batch.eval_labels, (z, batch.eval_labels.size))
    loss, g = numerics.cross_entropy_batch(logits, labels)

    d_unit = s * (np.swapaxes(g, 1, 2) @ e_used)
    d_e = s * np.einsum("zns,zsd->nd", g, unit)
    if cfg.normalize_embeddings:
        d_e = numerics.l2_normalize_backward(e_used, e_norm, d_e)
    d_slots, d_b, d_u, d_v = slots_backward(d_unit, scache, m.bases, m.proj_u, m.proj_v, cfg)
    d_theta = np.where(tail[..., None], 0.0, d_slots).sum(axis=0).T
    d_protos = np.zeros_like(protos)
    np.add.at(d_protos, batch.partitions.ravel(), d_slots[rows, cols])
    d_pool = np.repeat(d_protos / k, k, axis=0)
    grads = embed_backward(m.layers, cache, np.vstack([d_pool, d_e]))
    return loss, grads + [d_theta, d_b, d_u, d_v]


def validation_hm(m: ModelState, ds: Dataset, cfg: TrainConfig, seed: int) -> float:
    """Mean per-task harmonic mean on 1-shot unseen_val GFSL tasks (no calibration)."""
    way = min(cfg.val_way, int(ds.classes_with_role("unseen_val").size))
    scores = collect_scores(ModelScorer(m), ds, "unseen_val", 1, way, cfg.val_tasks, derive_seed(seed, "val"))
    return float(np.mean([task_metrics(ts)["hm"] for ts in scores]))


def pick_exemplars(ds: Dataset, per_class: int, seed: int) -> list:
    """Instance ids of ``per_class`` random meta-train instances for every seen class."""
    rng = stream(seed, "exemplars")
    ids = []
    for c in ds.seen_classes:
        idx = ds.instances(TRAIN, c)
        ids += [ds.ids[i] for i in np.sort(rng.choice(idx, size=min(per_class, idx.size), replace=False))]
    return ids


def train(ds: Dataset, m0: ModelState, cfg: TrainConfig, log_file=None):
    """Momentum SGD on the unified objective; returns ``(best_state, log_records)``.

    The learning rate halves every ``halve_every`` batches. The model is
    validated before training and every ``val_every`` batches; the best
    validated state is returned, and training stops after ``patience``
    validations without improvement.
    """
    cfg.validate(m0.theta.shape[1])
    seed = cfg.seed
    params = [p.copy() for p in m0.params()]
    velocity = [np.zeros_like(p) for p in params]
    records = []
    start = time.perf_counter()

    def emit(rec):
        records.append(rec)
        if log_file is not None:
            log_file.write(json.dumps(rec, sort_keys=True) + "\n")

    best_hm = validation_hm(m0, ds, cfg, seed)
    best_params = [p.copy() for p in params]
    stale = 0
    emit({"batch": 0, "loss": None, "lr": cfg.lr, "val_hm": best_hm, "clipped": 0, "wallclock_ms": 0.0})
    clipped = 0
    for t in range(1, cfg.total_batches + 1):
        lr = cfg.lr * 0.5 ** ((t - 1) // cfg.halve_every)
        state = m0.with_params(params)
        batch = build_multiclassifier_batch(ds, cfg, derive_seed(seed, "batch", t))
        loss, grads = gfsl_loss(state, ds, batch)
        if not np.isfinite(loss):
            raise NumericError(f"loss is NaN/inf at batch {t}")
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
        if norm > cfg.clip_norm:
            grads = [g * (cfg.clip_norm / norm) for g in grads]
            clipped += 1
        for p, v, g in zip(params, velocity, grads):
            v *= cfg.momentum
            v -= lr * g
            p += v
        val_hm = None
        if t % cfg.val_every == 0 or t == cfg.total_batches:
            val_hm = validation_hm(m0.with_params(params), ds, cfg, seed)
            if val_hm > best_hm:
                best_hm, best_params, stale = val_hm, [p.copy() for p in params], 0
            else:
                stale += 1
        if val_hm is not None or t % 100 == 0:
            emit({"batch": t, "loss": loss, "lr": lr, "val_hm": val_hm, "clipped": clipped,
                  "wallclock_ms": round((time.perf_counter() - start) * 1000.0, 3)})
        if stale >= cfg.patience:
            log.info("early stop at batch %d", t)
            break
    log.info("training done: best val HM %.4f, %d clipped steps", best_hm, clipped)
    best = m0.with_params(best_params)
    best.meta.update(val_hm=best_hm, clipped_steps=clipped,
                     exemplars=pick_exemplars(ds, cfg.exemplars_per_class, seed))
    return best, records


# ------------------------------------------------------------ light-weight adaptation

@dataclass(frozen=True)
class LightweightAdapter:
    """Joint classifier applied to ``(1 + scale) * embedding + bias``."""

    scale: np.ndarray
    bias: np.ndarray
    joint: JointClassifier
    logit_scale: float
    normalize_embeddings: bool = False

    def logits(self, emb) -> np.ndarray:
        z = (1.0 + self.scale) * np.asarray(emb) + self.bias
        return score(self.joint.columns, z, self.logit_scale, self.normalize_embeddings)


def light_weight_adapt(m: ModelState, joint: JointClassifier, support_emb, support_labels,
                       exemplar_emb, exemplar_labels, steps: int = 20, lr: float = 0.01,
                       momentum: float = 0.9) -> LightweightAdapter:
    """Fine-tune classifier columns and a per-dimension scale/bias with the embedding frozen.

    ``exemplar_labels`` index the seen heads (the first columns of ``joint``);
    ``support_labels`` index its tails.
    """
    if exemplar_emb is None or len(exemplar_emb) == 0:
        raise ConfigError("light-weight adaptation needs stored seen-class exemplars")
    n_heads = joint.num_heads
    e = np.vstack([np.asarray(exemplar_emb, dtype=np.float64), np.asarray(support_emb, dtype=np.float64)])
    y = np.r_[np.asarray(exemplar_labels, dtype=np.int64), n_heads + np.asarray(support_labels, dtype=np.int64)]
    d = e.shape[1]
    w = joint.columns.copy()
    scale, bias = np.zeros(d), np.zeros(d)
    vel = [np.zeros_like(w), np.zeros(d), np.zeros(d)]
    s = m.config.logit_scale
    for _ in range(steps):
        z = (1.0 + scale) * e + bias
        if m.config.normalize_embeddings:
            zn = np.sqrt((z * z).sum(-1, keepdims=True))
            zu = z / zn
        else:
            zu = z
        wn_norm = np.sqrt((w * w).sum(0, keepdims=True))
        wn = w / wn_norm
        _, g = numerics.cross_entropy_batch(s * zu @ wn, y)
        d_wn = s * zu.T @ g
        d_w = numerics.l2_normalize_backward(wn, wn_norm, d_wn, axis=0)
        d_z = s * g @ wn.T
        if m.config.normalize_embeddings:
            d_z = numerics.l2_normalize_backward(zu, zn, d_z)
        grads = [d_w, (d_z * e).sum(0), d_z.sum(0)]
        for p, v, gr in zip((w, scale, bias), vel, grads):
            v *= momentum
            v -= lr * gr
            p += v
    adapted = replace(joint, columns=numerics.l2_normalize(w, axis=0)) if steps else joint
    return LightweightAdapter(scale, bias, adapted, s, m.config.normalize_embeddings)


class LightweightScorer(ModelScorer):
    """Model scorer that adapts scale/bias/classifier per task on stored exemplars."""

    def __init__(self, m: ModelState, exemplar_idx, steps: int = 20, lr: float = 0.01):
        super().__init__(m)
        self.exemplar_idx = np.asarray(exemplar_idx, dtype=np.int64)
        self.steps = steps
        self.lr = lr

    def task_scores(self, ds, task):
        from .evaluation import TaskScores, task_labels, test_indices

        emb = self.cache.get(ds)
        joint = self.joint_classifier(ds, task)
        ex_labels = ds.seen_position()[ds.labels[self.exemplar_idx]]
        adapter = light_weight_adapt(self.m, joint, emb[task.support], task.support_labels,
                                     emb[self.exemplar_idx], ex_labels, self.steps, self.lr)
        logits = adapter.logits(emb[test_indices(task)])
        s = self.m.theta.shape[1]
        is_seen, label = task_labels(ds, task)
        return TaskScores.from_scores(logits[:, :s], logits[:, s:], is_seen, label)
