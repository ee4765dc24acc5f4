"""Datasets, split roles, episode and GFSL task sampling, synthetic data.

Class roles follow the usual GFSL layout: *seen* classes own the meta-train
split plus an auxiliary held-out split (``aux``) used only to test seen-class
accuracy; *unseen_val* and *unseen_test* classes own the ``val`` and ``test``
splits and are only ever seen through few-shot supports.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .errors import CapacityError, ConfigError, ParseError, ValidationError
from .rng import derive_seed, stream

SPLITS = ("train", "val", "test", "aux")
TRAIN, VAL, TEST, AUX = range(4)
ROLES = ("seen", "unseen_val", "unseen_test")
ROLE_SPLIT = {"seen": TRAIN, "unseen_val": VAL, "unseen_test": TEST}
DEFAULT_QUERIES = 15


@dataclass(frozen=True, eq=False)
class Dataset:
    feature_dim: int
    features: np.ndarray  # (n, D) float64
    ids: tuple
    labels: np.ndarray  # class index per instance
    class_names: tuple
    roles: dict  # class name -> role
    splits: np.ndarray  # split code per instance
    domains: np.ndarray  # domain index per instance, -1 when absent
    domain_names: tuple = ()
    class_domains: np.ndarray = field(default=None)  # domain index per class, -1 when absent

    def __post_init__(self):
        if self.class_domains is None:
            cd = np.full(len(self.class_names), -1, dtype=np.int64)
            for c in range(len(self.class_names)):
                doms = self.domains[self.labels == c]
                if doms.size:
                    cd[c] = doms[0]
            object.__setattr__(self, "class_domains", cd)

    def __len__(self):
        return len(self.ids)

    def classes_with_role(self, role: str) -> np.ndarray:
        return np.array([i for i, c in enumerate(self.class_names) if self.roles[c] == role], dtype=np.int64)

    @property
    def seen_classes(self) -> np.ndarray:
        return self.classes_with_role("seen")

    @property
    def num_seen(self) -> int:
        return int(self.seen_classes.size)

    def seen_position(self) -> np.ndarray:
        """Map from class index to column in the seen classifier (-1 for unseen classes)."""
        pos = np.full(len(self.class_names), -1, dtype=np.int64)
        pos[self.seen_classes] = np.arange(self.num_seen)
        return pos

    def instances(self, split: int, cls: Optional[int] = None) -> np.ndarray:
        mask = self.splits == split
        if cls is not None:
            mask &= self.labels == cls
        return np.flatnonzero(mask)


@dataclass(frozen=True)
class Episode:
    classes: np.ndarray  # N class indices, in sampled order
    support: np.ndarray  # N*K instance indices, class-major
    query: np.ndarray  # N*Q instance indices, class-major
    way: int
    shot: int

    @property
    def support_labels(self) -> np.ndarray:
        return np.repeat(np.arange(self.way), self.shot)

    @property
    def query_labels(self) -> np.ndarray:
        return np.repeat(np.arange(self.way), self.query.size // self.way)


@dataclass(frozen=True)
class GfslTask:
    unseen_classes: np.ndarray
    support: np.ndarray
    unseen_query: np.ndarray
    seen_query: np.ndarray
    way: int
    shot: int
    queries: int

    @property
    def support_labels(self) -> np.ndarray:
        return np.repeat(np.arange(self.way), self.shot)

    @property
    def unseen_query_labels(self) -> np.ndarray:
        return np.repeat(np.arange(self.way), self.queries)


@dataclass(frozen=True)
class SyntheticSpec:
    num_domains: int = 5
    classes_per_domain: int = 8
    instances_per_class: int = 60
    feature_dim: int = 32
    domain_spread: float = 4.0
    class_spread: float = 1.5
    noise: float = 0.6
    num_seen: int = 25
    num_unseen_val: int = 5
    aux_fraction: float = 1.0 / 3.0
    seed: int = 0

    def validate(self):
        for name in ("num_domains", "classes_per_domain", "instances_per_class", "feature_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"synthetic.{name} must be >= 1")
        for name in ("domain_spread", "class_spread", "noise"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"synthetic.{name} must be > 0")
        total = self.num_domains * self.classes_per_domain
        if not 1 <= self.num_seen <= total or self.num_unseen_val < 0 or self.num_seen + self.num_unseen_val > total:
            raise ConfigError(f"synthetic role counts do not fit {total} classes")
        if not 0 <= self.aux_fraction < 1:
            raise ConfigError("synthetic.aux_fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------- io

def _no_duplicate_keys(pairs):
    seen = {}
    for k, v in pairs:
        if k in seen:
            raise ValidationError("role-disjoint", f"key {k!r} appears more than once")
        seen[k] = v
    return seen


def load_dataset(path: Union[str, Path]) -> Dataset:
    """Read a line-delimited JSON dataset (header line, then one record per instance)."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(0, f"cannot read {path}: {exc}") from exc
    lines = text.splitlines()
    if not lines:
        raise ParseError(1, "empty file; expected a header line")
    try:
        header = json.loads(lines[0], object_pairs_hook=_no_duplicate_keys)
    except json.JSONDecodeError as exc:
        raise ParseError(1, f"invalid JSON: {exc.msg}") from exc
    if not isinstance(header, dict) or "feature_dim" not in header or "roles" not in header:
        raise ParseError(1, "header must be an object with 'feature_dim' and 'roles'")
    dim = header["feature_dim"]
    roles = header["roles"]
    if not isinstance(dim, int) or dim < 1:
        raise ParseError(1, "feature_dim must be a positive integer")
    if not isinstance(roles, dict):
        raise ParseError(1, "roles must be an object")

    ids, classes, domains, splits, feats = [], [], [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(lineno, f"invalid JSON: {exc.msg}") from exc
        if not isinstance(rec, dict):
            raise ParseError(lineno, "record must be a JSON object")
        missing = {"id", "class", "split", "features"} - rec.keys()
        if missing:
            raise ParseError(lineno, f"missing keys {sorted(missing)}")
        if rec["split"] not in SPLITS:
            raise ParseError(lineno, f"split must be one of {SPLITS}, got {rec['split']!r}")
        f = rec["features"]
        if not isinstance(f, list) or len(f) != dim or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in f):
            raise ParseError(lineno, f"features must be a list of {dim} numbers")
        dom = rec.get("domain")
        if dom is not None and not isinstance(dom, str):
            raise ParseError(lineno, "domain must be a string or null")
        ids.append(str(rec["id"]))
        classes.append(str(rec["class"]))
        domains.append(dom)
        splits.append(SPLITS.index(rec["split"]))
        feats.append(f)
    return build_dataset(dim, roles, ids, classes, domains, splits, feats)


def build_dataset(dim, roles, ids, classes, domains, splits, feats) -> Dataset:
    """Assemble and validate a :class:`Dataset` from per-instance columns."""
    for c, r in roles.items():
        if r not in ROLES:
            raise ValidationError("role-valid", f"class {c!r} has unknown role {r!r}")
    class_names = tuple(roles.keys())
    cindex = {c: i for i, c in enumerate(class_names)}
    domain_names = tuple(sorted({d for d in domains if d is not None}))
    dindex = {d: i for i, d in enumerate(domain_names)}

    if len(set(ids)) != len(ids):
        raise ValidationError("unique-ids", "instance ids must be unique")
    for i, c in enumerate(classes):
        if c not in cindex:
            raise ValidationError("class-has-role", f"instance {ids[i]!r} has class {c!r} with no role")
        role = roles[c]
        s = splits[i]
        if role == "seen" and s not in (TRAIN, AUX):
            raise ValidationError("split-matches-role", f"seen class {c!r} has a {SPLITS[s]} instance")
        if role != "seen" and s != ROLE_SPLIT[role]:
            raise ValidationError("split-matches-role", f"{role} class {c!r} has a {SPLITS[s]} instance")

    labels = np.array([cindex[c] for c in classes], dtype=np.int64)
    split_arr = np.array(splits, dtype=np.int64)
    features = np.array(feats, dtype=np.float64).reshape(len(ids), dim)
    if not np.all(np.isfinite(features)):
        raise ValidationError("finite-features", "features must be finite")
    for c in class_names:
        if roles[c] == "seen" and not np.any((labels == cindex[c]) & (split_arr == TRAIN)):
            raise ValidationError("seen-has-train", f"seen class {c!r} has no meta-train instance")
    dom_arr = np.array([dindex[d] if d is not None else -1 for d in domains], dtype=np.int64)
    features.setflags(write=False)
    return Dataset(
        feature_dim=dim,
        features=features,
        ids=tuple(ids),
        labels=labels,
        class_names=class_names,
        roles=dict(roles),
        splits=split_arr,
        domains=dom_arr,
        domain_names=domain_names,
    )


def save_dataset(ds: Dataset, path: Union[str, Path]) -> None:
    lines = [json.dumps({"feature_dim": ds.feature_dim, "roles": ds.roles})]
    for i in range(len(ds)):
        dom = int(ds.domains[i])
        lines.append(json.dumps({
            "id": ds.ids[i],
            "class": ds.class_names[ds.labels[i]],
            "domain": ds.domain_names[dom] if dom >= 0 else None,
            "split": SPLITS[ds.splits[i]],
            "features": [float(x) for x in ds.features[i]],
        }))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ----------------------------------------------------------------------- sampling

def _class_pool(ds: Dataset, role: str, need: int, domain, rng) -> tuple[np.ndarray, int]:
    if role not in ROLE_SPLIT:
        raise ConfigError(f"unknown class role {role!r}")
    split = ROLE_SPLIT[role]
    classes = ds.classes_with_role(role)
    counts = np.array([ds.instances(split, c).size for c in classes], dtype=np.int64)
    classes = classes[counts >= need]
    if domain is None:
        return classes, split
    doms = ds.class_domains[classes]
    if domain == "random":
        return classes, split  # resolved by caller once way is known
    return classes[doms == int(domain)], split


def _pick_classes(ds, classes, way, domain, rng) -> np.ndarray:
    if domain == "random":
        doms = ds.class_domains[classes]
        ok = [d for d in np.unique(doms) if d >= 0 and np.sum(doms == d) >= way]
        if not ok:
            raise CapacityError(f"no single domain has {way} eligible classes")
        d = ok[int(rng.integers(len(ok)))]
        classes = classes[doms == d]
    if classes.size < way:
        raise CapacityError(f"need {way} classes, only {classes.size} have enough instances")
    return np.sort(rng.choice(classes, size=way, replace=False))


def _draw_support_query(ds, classes, split, shot, queries, rng):
    support, query = [], []
    for c in classes:
        pool = ds.instances(split, c)
        picked = rng.permutation(pool)[: shot + queries]
        support.append(picked[:shot])
        query.append(picked[shot:])
    return np.concatenate(support), np.concatenate(query)


def sample_episode(ds: Dataset, role: str, shot: int, way: int, seed: int,
                   queries: int = DEFAULT_QUERIES, domain=None) -> Episode:
    """Sample a ``shot``-shot ``way``-way episode from the classes with ``role``.

    ``domain`` restricts classes to one domain index, or ``"random"`` picks one
    domain that has enough classes.
    """
    if shot < 1 or way < 1 or queries < 0:
        raise ConfigError("shot and way must be >= 1, queries >= 0")
    rng = stream(seed, "episode")
    classes, split = _class_pool(ds, role, shot + queries, domain, rng)
    classes = _pick_classes(ds, classes, way, domain, rng)
    support, query = _draw_support_query(ds, classes, split, shot, queries, rng)
    return Episode(classes=classes, support=support, query=query, way=way, shot=shot)


def sample_gfsl_task(ds: Dataset, role: str, shot: int, way: int, seed: int,
                     queries: int = DEFAULT_QUERIES, domain=None) -> GfslTask:
    """Sample a GFSL task: an unseen episode plus ``queries * way`` aux seen queries."""
    if role == "seen":
        raise ConfigError("GFSL tasks draw their tail classes from an unseen role")
    if shot < 1 or way < 1 or queries < 1:
        raise ConfigError("shot, way and queries must be >= 1")
    rng = stream(seed, "gfsl-task")
    classes, split = _class_pool(ds, role, shot + queries, domain, rng)
    classes = _pick_classes(ds, classes, way, domain, rng)
    support, query = _draw_support_query(ds, classes, split, shot, queries, rng)
    aux = ds.instances(AUX)
    need = queries * way
    if aux.size < need:
        raise CapacityError(f"need {need} aux seen instances, found {aux.size}")
    seen_query = np.sort(rng.choice(aux, size=need, replace=False))
    return GfslTask(unseen_classes=classes, support=support, unseen_query=query,
                    seen_query=seen_query, way=way, shot=shot, queries=queries)


# ---------------------------------------------------------------------- synthetic

def gen_synthetic(spec: SyntheticSpec) -> Dataset:
    """Gaussian domain/class/instance hierarchy with round-robin role assignment.

    Classes are ordered by interleaving domains (d0c0, d1c0, ..., d0c1, ...), then
    the first ``num_seen`` become seen, the next ``num_unseen_val`` unseen_val
    and the rest unseen_test, so every role spans as many domains as possible.
    """
    spec.validate()
    rng = stream(spec.seed, "synthetic")
    D = spec.feature_dim
    dom_means = rng.normal(0.0, spec.domain_spread, size=(spec.num_domains, D))
    cls_means = dom_means[:, None, :] + rng.normal(0.0, spec.class_spread, size=(spec.num_domains, spec.classes_per_domain, D))
    noise = rng.normal(0.0, 1.0, size=(spec.num_domains, spec.classes_per_domain, spec.instances_per_class, D))

    order = [(d, j) for j in range(spec.classes_per_domain) for d in range(spec.num_domains)]
    roles = {}
    for rank, (d, j) in enumerate(order):
        if rank < spec.num_seen:
            role = "seen"
        elif rank < spec.num_seen + spec.num_unseen_val:
            role = "unseen_val"
        else:
            role = "unseen_test"
        roles[f"d{d}c{j:03d}"] = role

    n_aux = int(round(spec.instances_per_class * spec.aux_fraction))
    if n_aux >= spec.instances_per_class:
        n_aux = spec.instances_per_class - 1
    ids, classes, domains, splits, feats = [], [], [], [], []
    for d, j in order:
        name = f"d{d}c{j:03d}"
        role = roles[name]
        x = cls_means[d, j] + spec.noise * noise[d, j]
        for i in range(spec.instances_per_class):
            if role == "seen":
                split = AUX if i >= spec.instances_per_class - n_aux else TRAIN
            else:
                split = ROLE_SPLIT[role]
            ids.append(f"{name}-{i:04d}")
            classes.append(name)
            domains.append(f"domain{d}")
            splits.append(split)
            feats.append(x[i])
    return build_dataset(D, roles, ids, classes, domains, splits, np.array(feats))


def nearest_mean_accuracy(ds: Dataset, role: str, shot: int, way: int, seed: int,
                          num_episodes: int = 200, features: Optional[np.ndarray] = None) -> float:
    """Brute-force nearest-class-mean accuracy over sampled episodes.

    Used as a reference oracle: prototypes from the support, queries assigned to
    the closest prototype in squared Euclidean distance.
    """
    feats = ds.features if features is None else features
    correct = total = 0
    for t in range(num_episodes):
        ep = sample_episode(ds, role, shot, way, seed=derive_seed(seed, "ncm", t))
        protos = feats[ep.support].reshape(way, shot, -1).mean(axis=1)
        q = feats[ep.query]
        dist = ((q[:, None, :] - protos[None, :, :]) ** 2).sum(-1)
        correct += int((dist.argmin(1) == ep.query_labels).sum())
        total += ep.query.size
    return correct / total
