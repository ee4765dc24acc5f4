"""Reference GFSL systems: MC + kNN, ProtoNet + ProtoNet, MC + ProtoNet.

Each produces joint scores in its own native units with no calibration:

* ``mc_knn``: raw linear-head logits for seen classes, softmax over negative
  squared distances to the support prototypes for unseen classes.
* ``proto_proto``: negative squared distance to seen centroids (averaged over
  up to ``seen_centroid_samples`` meta-train instances) and to unseen prototypes.
* ``mc_proto``: like ``mc_knn`` but on an embedding trained with a mix of the
  many-shot and ProtoNet objectives.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import numerics
from .data import TRAIN, Dataset, GfslTask, sample_episode
from .errors import ConfigError, NumericError
from .evaluation import EmbeddingCache, TaskScores, task_labels, test_indices
from .model import ModelState, embed_backward, embed_forward, mc_loss_and_grads, nearest_centroid_accuracy
from .rng import derive_seed, stream
from .synthesis import compute_prototypes
from .trainer import TrainConfig

log = logging.getLogger(__name__)

KINDS = ("mc_knn", "proto_proto", "mc_proto")


@dataclass(frozen=True)
class BaselineKind:
    tag: str
    tradeoff: float = 0.5
    seen_centroid_samples: int = 100

    def __post_init__(self):
        if self.tag not in KINDS:
            raise ConfigError(f"unknown baseline {self.tag!r}; expected one of {KINDS}")
        if not 0.0 <= self.tradeoff <= 1.0:
            raise ConfigError("baseline tradeoff must lie in [0, 1]")


def sq_distances(a, b) -> np.ndarray:
    """Squared Euclidean distances between rows of ``a`` and rows of ``b``."""
    diff = a[:, None, :] - b[None, :, :]
    return (diff * diff).sum(-1)


def protonet_loss(layers, support_x, support_y, query_x, query_y, shot):
    """ProtoNet cross-entropy over ``-|e - p|^2`` logits and its embedding gradients."""
    n_s = support_x.shape[0]
    emb, cache = embed_forward(layers, np.vstack([support_x, query_x]))
    es, eq = emb[:n_s], emb[n_s:]
    protos = compute_prototypes(es, support_y, shot)
    diff = eq[:, None, :] - protos[None]
    loss, g = numerics.cross_entropy_batch(-(diff * diff).sum(-1), query_y)
    # d logits / d eq = -2 diff ; d logits / d p = +2 diff
    d_eq = -2.0 * (g[..., None] * diff).sum(1)
    d_p = 2.0 * (g[..., None] * diff).sum(0)
    d_es = d_p[support_y] / shot
    return loss, embed_backward(layers, cache, np.vstack([d_es, d_eq]))


def protonet_train(ds: Dataset, m0: ModelState, cfg: TrainConfig, tradeoff: float = 0.0):
    """Episodic ProtoNet training from ``m0``'s embedding.

    With ``tradeoff > 0`` the loss is ``tradeoff * MC + (1 - tradeoff) * ProtoNet``
    and the linear head is trained too (the MC + ProtoNet baseline). The epoch
    with the best 1-shot nearest-centroid accuracy on unseen_val is kept.
    Returns ``(state, records)``.
    """
    seed = cfg.seed
    n = len(m0.layers)
    params = [p.copy() for wb in m0.layers for p in wb] + [m0.theta.copy()]
    vel = [np.zeros_like(p) for p in params]
    pos = ds.seen_position()
    seen_train = np.flatnonzero((ds.splits == TRAIN) & (pos[ds.labels] >= 0))
    val_way = min(cfg.val_way, int(ds.classes_with_role("unseen_val").size))
    val_eps = [sample_episode(ds, "unseen_val", 1, val_way, derive_seed(seed, "proto-val", i))
               for i in range(min(cfg.val_tasks, 200))]

    def layers_of(p):
        return [(p[2 * i], p[2 * i + 1]) for i in range(n)]

    best = nearest_centroid_accuracy(layers_of(params), ds, val_eps)
    best_params = [p.copy() for p in params]
    records = [{"batch": 0, "loss": None, "val_acc": best}]
    stale = 0
    for t in range(1, cfg.total_batches + 1):
        lr = cfg.lr * 0.5 ** ((t - 1) // cfg.halve_every)
        ep = sample_episode(ds, "seen", cfg.shot, cfg.way, derive_seed(seed, "proto-episode", t))
        layers = layers_of(params)
        loss, grads = 0.0, [np.zeros_like(p) for p in params]
        if tradeoff < 1.0:
            l_p, g_p = protonet_loss(layers, ds.features[ep.support], ep.support_labels,
                                     ds.features[ep.query], ep.query_labels, cfg.shot)
            loss += (1 - tradeoff) * l_p
            for i, g in enumerate(g_p):
                grads[i] += (1 - tradeoff) * g
        if tradeoff > 0.0:
            b = np.sort(stream(seed, "mc-batch", t).choice(seen_train, size=min(cfg.eval_batch, seen_train.size), replace=False))
            l_m, g_m, d_theta = mc_loss_and_grads(layers, params[-1], ds.features[b], pos[ds.labels[b]])
            loss += tradeoff * l_m
            for i, g in enumerate(g_m):
                grads[i] += tradeoff * g
            grads[-1] += tradeoff * d_theta
        if not np.isfinite(loss):
            raise NumericError(f"baseline loss is NaN/inf at batch {t}")
        norm = np.sqrt(sum(float((g * g).sum()) for g in grads))
        if norm > cfg.clip_norm:
            grads = [g * (cfg.clip_norm / norm) for g in grads]
        for p, v, g in zip(params, vel, grads):
            v *= cfg.momentum
            v -= lr * g
            p += v
        if t % cfg.val_every == 0 or t == cfg.total_batches:
            acc = nearest_centroid_accuracy(layers_of(params), ds, val_eps)
            records.append({"batch": t, "loss": loss, "val_acc": acc})
            if acc > best:
                best, best_params, stale = acc, [p.copy() for p in params], 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
    state = m0.with_params(best_params[:-1] + [best_params[-1], m0.bases, m0.proj_u, m0.proj_v])
    state.meta.update(baseline_val_acc=best, tradeoff=tradeoff)
    return state, records


def seen_centroids(ds: Dataset, emb: np.ndarray, samples: int, seed: int) -> np.ndarray:
    """Per seen class, the mean embedding of up to ``samples`` random meta-train instances."""
    rng = stream(seed, "seen-centroids")
    out = []
    for c in ds.seen_classes:
        idx = ds.instances(TRAIN, c)
        pick = rng.choice(idx, size=min(samples, idx.size), replace=False)
        out.append(emb[pick].mean(axis=0))
    return np.array(out)


def baseline_joint_predict(kind: BaselineKind, m: ModelState, emb_support, support_labels, shot,
                           emb_test, seen_protos=None) -> np.ndarray:
    """Joint score matrix ``(n_test, |S| + N)``: seen columns first, then unseen."""
    protos = compute_prototypes(emb_support, support_labels, shot)
    d_unseen = sq_distances(emb_test, protos)
    if kind.tag == "proto_proto":
        if seen_protos is None:
            raise ConfigError("proto_proto needs precomputed seen centroids")
        return np.hstack([-sq_distances(emb_test, seen_protos), -d_unseen])
    if kind.tag in ("mc_knn", "mc_proto"):
        return np.hstack([emb_test @ m.theta, numerics.softmax_rows(-d_unseen)])
    raise ConfigError(f"unknown baseline {kind.tag!r}")


class BaselineScorer:
    def __init__(self, kind: BaselineKind, m: ModelState, seed: int = 0):
        self.kind = kind
        self.m = m
        self.seed = seed
        self.cache = EmbeddingCache(m)
        self._protos = None

    def seen_protos(self, ds: Dataset):
        if self.kind.tag != "proto_proto":
            return None
        if self._protos is None or self._protos[0] is not ds:
            self._protos = (ds, seen_centroids(ds, self.cache.get(ds), self.kind.seen_centroid_samples, self.seed))
        return self._protos[1]

    def joint_scores(self, ds: Dataset, task: GfslTask) -> np.ndarray:
        emb = self.cache.get(ds)
        return baseline_joint_predict(self.kind, self.m, emb[task.support], task.support_labels, task.shot,
                                      emb[test_indices(task)], self.seen_protos(ds))

    def task_scores(self, ds: Dataset, task: GfslTask) -> TaskScores:
        scores = self.joint_scores(ds, task)
        s = self.m.theta.shape[1]
        is_seen, label = task_labels(ds, task)
        return TaskScores.from_scores(scores[:, :s], scores[:, s:], is_seen, label)


def confidence_ratio(scores) -> float:
    """How much closer test instances sit to their best seen centroid than to their best unseen prototype.

    For distance-based scores (``-|e - p|^2``) this is
    ``mean(nearest unseen distance) / mean(nearest seen distance)``; values
    above 1 mean the seen side is systematically more confident.
    """
    seen = np.concatenate([ts.seen_max for ts in scores])
    unseen = np.concatenate([ts.unseen_max for ts in scores])
    return float(np.mean(-unseen) / np.mean(-seen))
