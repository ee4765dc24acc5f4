"""Neural dictionary classifier synthesis.

A classifier for a class is synthesised from its signature ``q`` (a support
prototype, or a seen-class weight vector when heads are adapted) by attending
over dictionary rows::

    alpha = softmax_k(<q, U b_k>)
    w     = normalize(q + sum_k alpha_k V b_k)

The dictionary always holds the shared learnable bases. The adaptive variant
(``acastle``) also adds the tail prototypes and the head weight vectors of the
current task; a head signature then attends over the shared bases and the tail
prototypes only. ``castle`` keeps head classifiers fixed, and ``castle-minus``
skips the dictionary altogether.

The batched engine (:func:`slots_forward` / :func:`slots_backward`) works on a
stack of ``Z`` tasks at once. Each task is a set of class *slots*, each slot
holding a signature and a tail/head flag. Training uses it for many fake tasks
per step, and inference uses it with ``Z = 1``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DegenerateNormError, EmptyDictionaryError, ShapeError
from .model import VARIANTS, ModelConfig, ModelState, score
from .numerics import NORM_EPS, l2_normalize, softmax_rows

SHARED, TAIL, HEAD = "shared", "tail-prototype", "head-classifier"
STATIONARY, ADAPTED, SYNTHESIZED = "stationary-head", "adapted-head", "synthesized-tail"


@dataclass(frozen=True)
class BaseSet:
    keys: np.ndarray
    values: np.ndarray
    tags: tuple

    def __post_init__(self):
        if self.keys.shape != self.values.shape or self.keys.shape[0] != len(self.tags):
            raise ShapeError("keys, values and tags must have matching row counts")


@dataclass(frozen=True)
class JointClassifier:
    columns: np.ndarray  # (d, n) unit columns, seen heads first then tails
    provenance: tuple
    class_ids: tuple

    def logits(self, emb, scale: float, normalize_embeddings: bool = False) -> np.ndarray:
        return score(self.columns, emb, scale, normalize_embeddings)

    @property
    def num_heads(self) -> int:
        return sum(p != SYNTHESIZED for p in self.provenance)


def compute_prototypes(embs, labels, shot: int) -> np.ndarray:
    """Class means of support embeddings; ``labels`` are local ids ``0..N-1``."""
    embs = np.asarray(embs, dtype=np.float64)
    labels = np.asarray(labels)
    way = int(labels.max()) + 1 if labels.size else 0
    counts = np.bincount(labels, minlength=way)
    if labels.size != embs.shape[0] or np.any(counts != shot):
        raise ShapeError(f"expected exactly {shot} support rows per class, got counts {counts.tolist()}")
    protos = np.zeros((way, embs.shape[1]))
    np.add.at(protos, labels, embs)
    return protos / shot


def build_bases(m: ModelState, prototypes, head_cols) -> BaseSet:
    """Dictionary keys/values: shared bases, plus task-specific rows for ``acastle``."""
    rows = [m.bases]
    tags = [SHARED] * m.bases.shape[0]
    if m.config.variant == "acastle":
        prototypes = np.asarray(prototypes, dtype=np.float64).reshape(-1, m.embed_dim)
        head_cols = np.asarray(head_cols, dtype=np.float64).reshape(m.embed_dim, -1)
        rows += [prototypes, head_cols.T]
        tags += [TAIL] * prototypes.shape[0] + [HEAD] * head_cols.shape[1]
    b = np.vstack(rows) if rows else np.zeros((0, m.embed_dim))
    return BaseSet(keys=b @ m.proj_u.T, values=b @ m.proj_v.T, tags=tuple(tags))


def attention(query, keys, row_mask=None, attn_scale: float = 1.0) -> np.ndarray:
    """Attention weights of one query over dictionary keys (masked rows get 0)."""
    logits = attn_scale * (np.asarray(keys) @ np.asarray(query))
    if row_mask is not None:
        logits = np.where(row_mask, -np.inf, logits)
    if logits.size == 0 or np.all(np.isneginf(logits)):
        raise EmptyDictionaryError("no unmasked dictionary rows to attend over")
    return softmax_rows(logits)


def synthesize(query, bases: BaseSet, row_mask=None, attn_scale: float = 1.0) -> np.ndarray:
    """Unit-norm classifier synthesised from ``query``.

    ``row_mask[k]`` set to True excludes dictionary row ``k``.
    """
    query = np.asarray(query, dtype=np.float64)
    alpha = attention(query, bases.keys, row_mask, attn_scale)
    return l2_normalize(query + alpha @ bases.values)


# ------------------------------------------------------------ batched engine

def _tsum(a, b):
    """``sum_rows a_r^T b_r`` over all leading axes: ``(..., k) x (..., d) -> (k, d)``."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def _head_mask(q_tail, x_tail, cfg: ModelConfig):
    """True where a query may not attend to a specific slot."""
    if cfg.heads_attend_heads:
        return np.zeros(q_tail.shape + x_tail.shape[-1:], dtype=bool)
    return (~q_tail)[..., :, None] & (~x_tail)[..., None, :]


def attend_forward(queries, q_tail, slots, x_tail, bases, proj_u, proj_v, cfg: ModelConfig):
    """Synthesise unit classifiers for a stack of queries.

    ``queries`` is ``(Z, n, d)``; ``slots`` ``(Z, M, d)`` are the task-specific
    dictionary rows (used by ``acastle`` only). Returns ``(unit, cache)``.
    """
    variant = cfg.variant
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    nb = bases.shape[0]
    cache = {"queries": queries, "q_tail": q_tail, "slots": slots, "x_tail": x_tail, "mode": "none"}
    w = queries
    if variant == "castle" and nb > 0:
        ks, vs = bases @ proj_u.T, bases @ proj_v.T
        alpha = softmax_rows(cfg.attn_scale * (queries @ ks.T))
        resid = alpha @ vs
        w = np.where(q_tail[..., None], queries + resid, queries)
        cache.update(mode="castle", ks=ks, vs=vs, alpha=alpha)
    elif variant == "acastle":
        ks, vs = bases @ proj_u.T, bases @ proj_v.T
        kx, vx = slots @ proj_u.T, slots @ proj_v.T
        a_s = cfg.attn_scale * (queries @ ks.T)
        a_x = cfg.attn_scale * (queries @ np.swapaxes(kx, -1, -2))
        mask = _head_mask(q_tail, x_tail, cfg)
        a_x = np.where(mask, -np.inf, a_x)
        logits = np.concatenate([np.broadcast_to(a_s, a_x.shape[:-1] + (nb,)), a_x], axis=-1)
        if np.any(np.all(np.isneginf(logits), axis=-1)):
            raise EmptyDictionaryError("a query has no unmasked dictionary rows")
        alpha = softmax_rows(logits)
        al_s, al_x = alpha[..., :nb], alpha[..., nb:]
        resid = al_s @ vs + al_x @ vx
        w = queries + resid
        cache.update(mode="acastle", ks=ks, vs=vs, kx=kx, vx=vx, alpha=alpha)
    norm = np.sqrt((w * w).sum(-1, keepdims=True))
    if np.any(norm <= NORM_EPS):
        raise DegenerateNormError("synthesised classifier has zero norm")
    unit = w / norm
    cache.update(unit=unit, norm=norm)
    return unit, cache


def attend_backward(grad_unit, cache, bases, proj_u, proj_v, cfg: ModelConfig):
    """Gradients ``(d_queries, d_slots, d_bases, d_u, d_v)`` of :func:`attend_forward`."""
    unit, norm = cache["unit"], cache["norm"]
    queries, slots = cache["queries"], cache["slots"]
    dw = (grad_unit - unit * (unit * grad_unit).sum(-1, keepdims=True)) / norm
    dq = dw.copy()
    d_slots = np.zeros_like(slots)
    d_b = np.zeros_like(bases)
    d_u = np.zeros_like(proj_u)
    d_v = np.zeros_like(proj_v)
    mode = cache["mode"]
    if mode == "none":
        return dq, d_slots, d_b, d_u, d_v
    nb = bases.shape[0]
    alpha = cache["alpha"]
    if mode == "castle":
        dr = np.where(cache["q_tail"][..., None], dw, 0.0)
        dal = dr @ cache["vs"].T
        dvs = _tsum(alpha, dr)
        da = alpha * (dal - (alpha * dal).sum(-1, keepdims=True)) * cfg.attn_scale
        dq += da @ cache["ks"]
        dks = _tsum(da, queries)
    else:
        dr = dw
        vall = cache["vx"]
        dal_s = dr @ cache["vs"].T
        dal_x = dr @ np.swapaxes(vall, -1, -2)
        dal = np.concatenate([np.broadcast_to(dal_s, dal_x.shape[:-1] + (nb,)), dal_x], axis=-1)
        da = alpha * (dal - (alpha * dal).sum(-1, keepdims=True)) * cfg.attn_scale
        da_s, da_x = da[..., :nb], da[..., nb:]
        al_s, al_x = alpha[..., :nb], alpha[..., nb:]
        dvs = _tsum(al_s, dr)
        dks = _tsum(da_s, queries)
        dvx = np.swapaxes(al_x, -1, -2) @ dr
        dkx = np.swapaxes(da_x, -1, -2) @ queries
        dq += da_s @ cache["ks"] + da_x @ cache["kx"]
        d_u += _tsum(dkx, slots)
        d_v += _tsum(dvx, slots)
        ds = dkx @ proj_u + dvx @ proj_v
        if cfg.detach_head_bases:
            ds = np.where(cache["x_tail"][..., None], ds, 0.0)
        d_slots += ds
    d_b += dks @ proj_u + dvs @ proj_v
    d_u += dks.T @ bases
    d_v += dvs.T @ bases
    return dq, d_slots, d_b, d_u, d_v


def slots_forward(slots, tail, bases, proj_u, proj_v, cfg: ModelConfig):
    """Pre-averaged synthesis where every slot signature is also a query."""
    return attend_forward(slots, tail, slots, tail, bases, proj_u, proj_v, cfg)


def slots_backward(grad_unit, cache, bases, proj_u, proj_v, cfg: ModelConfig):
    dq, ds, d_b, d_u, d_v = attend_backward(grad_unit, cache, bases, proj_u, proj_v, cfg)
    return dq + ds, d_b, d_u, d_v


# ---------------------------------------------------------------- inference

def synthesize_joint(m: ModelState, support_emb, support_labels, shot: int,
                     head_ids: Optional[Sequence[int]] = None,
                     tail_ids: Optional[Sequence] = None) -> JointClassifier:
    """Joint classifier over the seen heads (``head_ids``, default all) and the support's tails.

    Columns come out in the order heads, then tails by local label.
    """
    cfg = m.config
    if cfg.variant not in VARIANTS:
        raise ConfigError(f"unknown variant {cfg.variant!r}")
    support_emb = np.asarray(support_emb, dtype=np.float64)
    if support_emb.shape[0] == 0:
        raise ShapeError("support set is empty")
    heads = np.arange(m.theta.shape[1]) if head_ids is None else np.asarray(head_ids, dtype=np.int64)
    protos = compute_prototypes(support_emb, support_labels, shot)
    n_head, n_tail = heads.size, protos.shape[0]
    slots = np.vstack([m.theta[:, heads].T, protos])[None]
    tail = np.concatenate([np.zeros(n_head, bool), np.ones(n_tail, bool)])[None]
    unit, _ = slots_forward(slots, tail, m.bases, m.proj_u, m.proj_v, cfg)
    unit = unit[0]
    if cfg.synth_mode == "post-avg" and shot > 1:
        order = np.argsort(np.asarray(support_labels), kind="stable")
        q = support_emb[order][None]
        per_shot, _ = attend_forward(q, np.ones((1, q.shape[1]), bool), slots, tail,
                                     m.bases, m.proj_u, m.proj_v, cfg)
        avg = per_shot[0].reshape(n_tail, shot, -1).mean(axis=1)
        unit[n_head:] = l2_normalize(avg, axis=-1)
    head_prov = ADAPTED if cfg.variant == "acastle" else STATIONARY
    names = tuple(m.seen_names[h] if m.seen_names else int(h) for h in heads)
    tails = tuple(tail_ids) if tail_ids is not None else tuple(f"tail{i}" for i in range(n_tail))
    return JointClassifier(columns=unit.T.copy(),
                           provenance=(head_prov,) * n_head + (SYNTHESIZED,) * n_tail,
                           class_ids=names + tails)
