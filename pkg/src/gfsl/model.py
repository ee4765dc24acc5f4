"""Embedding network, seen-class classifier, scoring rule and pre-training."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import numerics
from .data import TRAIN, Dataset, sample_episode
from .errors import CapacityError, ConfigError, DataError, NumericError, ShapeError
from .rng import derive_seed, stream

log = logging.getLogger(__name__)

VARIANTS = ("castle", "acastle", "castle-minus")
SYNTH_MODES = ("pre-avg", "post-avg")
CHECKPOINT_FORMAT = "gfsl-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 16
    hidden_dim: int = 32  # 0 means a single linear layer
    num_bases: int = 128
    variant: str = "castle"
    synth_mode: str = "pre-avg"
    logit_scale: float = 10.0
    normalize_embeddings: bool = False
    heads_attend_heads: bool = False
    attn_scale: float = 1.0
    detach_head_bases: bool = False

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"model.variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.synth_mode not in SYNTH_MODES:
            raise ConfigError(f"model.synth_mode must be one of {SYNTH_MODES}")
        if self.embed_dim < 1 or self.hidden_dim < 0 or self.num_bases < 0:
            raise ConfigError("model dimensions must be non-negative (embed_dim >= 1)")
        if not self.logit_scale > 0:
            raise ConfigError("model.logit_scale must be > 0")


@dataclass
class ModelState:
    """All learnable arrays plus the configuration that interprets them.

    ``layers`` holds ``(weight, bias)`` pairs with weights shaped ``(in, out)``;
    ``theta`` has one column per seen class; ``bases`` holds one shared basis
    per row; ``proj_u``/``proj_v`` map bases to keys/values.
    """

    config: ModelConfig
    layers: list
    theta: np.ndarray
    bases: np.ndarray
    proj_u: np.ndarray
    proj_v: np.ndarray
    seen_names: tuple = ()
    meta: dict = field(default_factory=dict)

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def embed_dim(self) -> int:
        return self.layers[-1][0].shape[1]

    def params(self) -> list:
        flat = []
        for w, b in self.layers:
            flat += [w, b]
        return flat + [self.theta, self.bases, self.proj_u, self.proj_v]

    def with_params(self, params: Sequence[np.ndarray]) -> "ModelState":
        n = len(self.layers)
        layers = [(np.array(params[2 * i]), np.array(params[2 * i + 1])) for i in range(n)]
        rest = [np.array(p) for p in params[2 * n:]]
        return replace(self, layers=layers, theta=rest[0], bases=rest[1], proj_u=rest[2], proj_v=rest[3], meta=dict(self.meta))

    def copy(self) -> "ModelState":
        return self.with_params(self.params())

    def with_config(self, **changes) -> "ModelState":
        cfg = replace(self.config, **changes)
        cfg.validate()
        return replace(self, config=cfg, meta=dict(self.meta))


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_state(input_dim: int, num_seen: int, config: ModelConfig, seed: int,
               seen_names: Sequence[str] = ()) -> ModelState:
    """Randomly initialised model (fan-in uniform weights, zero biases)."""
    config.validate()
    rng = stream(seed, "init")
    d = config.embed_dim
    dims = [input_dim] + ([config.hidden_dim] if config.hidden_dim else []) + [d]
    layers = [(_uniform(rng, a, (a, b)), np.zeros(b)) for a, b in zip(dims[:-1], dims[1:])]
    theta = _uniform(rng, d, (d, num_seen))
    bases = _uniform(rng, d, (config.num_bases, d))
    proj_u = _uniform(rng, d, (d, d))
    proj_v = _uniform(rng, d, (d, d))
    return ModelState(config, layers, theta, bases, proj_u, proj_v, tuple(seen_names))


# -------------------------------------------------------------------- embedding

def embed_forward(layers, x) -> tuple[np.ndarray, list]:
    """Forward pass of the MLP; returns the embeddings and the activation cache."""
    h = np.asarray(x, dtype=np.float64)
    if h.ndim == 1:
        h = h[None, :]
    if h.shape[1] != layers[0][0].shape[0]:
        raise ShapeError(f"input has {h.shape[1]} features, embedding expects {layers[0][0].shape[0]}")
    cache = []
    for i, (w, b) in enumerate(layers):
        cache.append(h)
        h = h @ w + b
        if i < len(layers) - 1:
            h = np.maximum(h, 0.0)
    return h, cache


def embed_backward(layers, cache, grad_out) -> list:
    """Gradients ``[dW0, db0, dW1, db1, ...]`` for the MLP given ``d loss / d output``."""
    grads = [None] * (2 * len(layers))
    g = grad_out
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        h_in = cache[i]
        grads[2 * i] = h_in.T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        if i > 0:
            g = (g @ w.T) * (h_in > 0)
    return grads


def embed(m: ModelState, x) -> np.ndarray:
    out, _ = embed_forward(m.layers, x)
    return out[0] if np.ndim(x) == 1 else out


# ---------------------------------------------------------------------- scoring

def score(classifier_cols, emb, scale: float, normalize_embeddings: bool = False) -> np.ndarray:
    """Logits ``scale * <unit column, embedding>`` for every column.

    ``classifier_cols`` is ``(d, M)``; ``emb`` is ``(d,)`` or ``(n, d)``.
    """
    cols = numerics.l2_normalize(np.asarray(classifier_cols, dtype=np.float64), axis=0)
    e = np.asarray(emb, dtype=np.float64)
    if e.shape[-1] != cols.shape[0]:
        raise ShapeError(f"embedding dim {e.shape[-1]} does not match classifier dim {cols.shape[0]}")
    if normalize_embeddings:
        e = numerics.l2_normalize(e, axis=-1)
    return scale * (e @ cols)


# -------------------------------------------------------------------- pretraining

@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 100
    lr: float = 0.1
    momentum: float = 0.9
    batch_size: int = 64
    plateau: int = 10
    val_episodes: int = 200
    val_way: int = 5
    val_shot: int = 1
    clip_norm: float = 10.0


def select_best(scores: Sequence[float]) -> int:
    """Index of the best validation score; the latest epoch wins ties."""
    best = 0
    for i, s in enumerate(scores):
        if s >= scores[best]:
            best = i
    return best


def _val_episodes(ds: Dataset, cfg: PretrainConfig, seed: int):
    val_classes = ds.classes_with_role("unseen_val")
    if val_classes.size == 0:
        raise CapacityError("pretraining needs unseen_val classes for model selection")
    way = min(cfg.val_way, int(val_classes.size))
    return [sample_episode(ds, "unseen_val", cfg.val_shot, way, derive_seed(seed, "pretrain-val", t))
            for t in range(cfg.val_episodes)]


def nearest_centroid_accuracy(layers, ds: Dataset, episodes) -> float:
    """Mean query accuracy of a nearest-prototype classifier in embedding space."""
    idx = np.unique(np.concatenate([np.concatenate([e.support, e.query]) for e in episodes]))
    emb, _ = embed_forward(layers, ds.features[idx])
    lookup = np.full(len(ds), -1, dtype=np.int64)
    lookup[idx] = np.arange(idx.size)
    correct = total = 0
    for ep in episodes:
        s = emb[lookup[ep.support]].reshape(ep.way, ep.shot, -1).mean(axis=1)
        q = emb[lookup[ep.query]]
        dist = ((q[:, None, :] - s[None]) ** 2).sum(-1)
        correct += int((dist.argmin(1) == ep.query_labels).sum())
        total += ep.query.size
    return correct / total


def mc_loss_and_grads(layers, theta, x, y):
    """Cross-entropy of the plain linear head ``theta`` over embeddings of ``x``."""
    emb, cache = embed_forward(layers, x)
    logits = emb @ theta
    loss, g = numerics.cross_entropy_batch(logits, y)
    d_theta = emb.T @ g
    grads = embed_backward(layers, cache, g @ theta.T)
    return loss, grads, d_theta


def pretrain(ds: Dataset, config: ModelConfig, cfg: PretrainConfig, seed: int,
             history: Optional[list] = None) -> ModelState:
    """Train an ``|S|``-way linear classifier on the embedding; keep the best epoch.

    Selection uses 1-shot nearest-centroid accuracy on unseen_val episodes,
    evaluated after every epoch. The learning rate halves after ``cfg.plateau``
    epochs without a validation improvement.
    """
    seen = ds.seen_classes
    pos = ds.seen_position()
    train_idx = np.flatnonzero((ds.splits == TRAIN) & (pos[ds.labels] >= 0))
    if seen.size == 0 or train_idx.size == 0:
        raise CapacityError("pretraining needs seen meta-train instances")
    state = init_state(ds.feature_dim, int(seen.size), config, seed,
                       [ds.class_names[c] for c in seen])
    episodes = _val_episodes(ds, cfg, seed)
    x_all = ds.features[train_idx]
    y_all = pos[ds.labels[train_idx]]

    params = [p for wb in state.layers for p in wb] + [state.theta]
    velocity = [np.zeros_like(p) for p in params]
    lr = cfg.lr
    best_score, best_params, stale = -np.inf, [p.copy() for p in params], 0
    scores = []
    n_layers = len(state.layers)
    for epoch in range(cfg.epochs):
        order = stream(seed, "pretrain-epoch", epoch).permutation(train_idx.size)
        for start in range(0, order.size, cfg.batch_size):
            b = order[start:start + cfg.batch_size]
            layers = [(params[2 * i], params[2 * i + 1]) for i in range(n_layers)]
            loss, grads, d_theta = mc_loss_and_grads(layers, params[-1], x_all[b], y_all[b])
            if not np.isfinite(loss):
                raise NumericError(f"pretraining loss became non-finite at epoch {epoch}")
            grads = grads + [d_theta]
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads))
            if norm > cfg.clip_norm:
                grads = [g * (cfg.clip_norm / norm) for g in grads]
            for p, v, g in zip(params, velocity, grads):
                v *= cfg.momentum
                v -= lr * g
                p += v
        layers = [(params[2 * i], params[2 * i + 1]) for i in range(n_layers)]
        val = nearest_centroid_accuracy(layers, ds, episodes)
        scores.append(val)
        if history is not None:
            emb, _ = embed_forward(layers, x_all)
            train_acc = float(np.mean((emb @ params[-1]).argmax(1) == y_all))
            history.append({"epoch": epoch, "loss": loss, "lr": lr, "train_acc": train_acc, "val_acc": val})
        improved = val > best_score
        if val >= best_score:
            best_score, best_params = val, [p.copy() for p in params]
        if improved:
            stale = 0
        else:
            stale += 1
            if stale >= cfg.plateau:
                lr *= 0.5
                stale = 0
        log.debug("pretrain epoch %d loss %.4f val %.4f lr %g", epoch, loss, val, lr)
    assert scores[select_best(scores)] == best_score
    layers = [(best_params[2 * i], best_params[2 * i + 1]) for i in range(n_layers)]
    meta = {"pretrain_val": best_score, "pretrain_best_epoch": select_best(scores)}
    return replace(state, layers=layers, theta=best_params[-1], meta=meta)


# -------------------------------------------------------------------- checkpoints

def _array_to_json(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": [float(x) for x in a.ravel()]}


def _array_from_json(obj) -> np.ndarray:
    return np.array(obj["data"], dtype=np.float64).reshape(obj["shape"])


def config_fingerprint(obj) -> str:
    """sha256 over canonical JSON (sorted keys, no whitespace)."""
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def save_checkpoint(m: ModelState, path, fingerprint: str = "") -> None:
    """Write a JSON checkpoint.

    Floats are written with Python's shortest round-trip ``repr``, so loading
    restores every array bit for bit.
    """
    arrays = {f"layer{i}.weight": w for i, (w, _) in enumerate(m.layers)}
    arrays.update({f"layer{i}.bias": b for i, (_, b) in enumerate(m.layers)})
    arrays.update(theta=m.theta, bases=m.bases, proj_u=m.proj_u, proj_v=m.proj_v)
    for name, a in arrays.items():
        if not np.all(np.isfinite(a)):
            raise NumericError(f"refusing to save non-finite array {name}")
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "fingerprint": fingerprint or m.meta.get("fingerprint", ""),
        "config": asdict(m.config),
        "num_layers": len(m.layers),
        "seen_names": list(m.seen_names),
        "meta": m.meta,
        "arrays": {k: _array_to_json(v) for k, v in arrays.items()},
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(path) -> ModelState:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"{path} is not a version-{CHECKPOINT_VERSION} {CHECKPOINT_FORMAT} file")
    arr = {k: _array_from_json(v) for k, v in doc["arrays"].items()}
    layers = [(arr[f"layer{i}.weight"], arr[f"layer{i}.bias"]) for i in range(doc["num_layers"])]
    config = ModelConfig(**doc["config"])
    config.validate()
    meta = dict(doc.get("meta", {}))
    meta["fingerprint"] = doc.get("fingerprint", "")
    return ModelState(config, layers, arr["theta"], arr["bases"], arr["proj_u"], arr["proj_v"],
                      tuple(doc.get("seen_names", ())), meta)
