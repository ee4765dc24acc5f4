"""Command-line entry point.

Every command reads one JSON config (``--config``), applies flag overrides
(flags win, ``--set dot.path=value`` for anything else) and writes its
artifacts plus ``run.json`` (config fingerprint and content hashes of the
inputs) into ``--out``.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

from . import __version__
from .baselines import KINDS, BaselineKind, BaselineScorer, protonet_train
from .data import SyntheticSpec, gen_synthetic, load_dataset, save_dataset
from .errors import ConfigError, DataError, GfslError
from .evaluation import ModelScorer, calibrate, evaluate
from .model import (ModelConfig, PretrainConfig, config_fingerprint, init_state, load_checkpoint,
                    pretrain, save_checkpoint)
from .rng import stream
from .trainer import LightweightScorer, TrainConfig, train

log = logging.getLogger("gfsl")

COMMANDS = ("gen-data", "pretrain", "train", "eval", "calibrate", "ablate-dict", "report")
VARIANT_FLAGS = {"castle": "castle", "acastle": "acastle", "castle-minus": "castle-minus"}
PATH_KEYS = {"data.path", "train.init", "eval.checkpoint", "eval.calibration"}


def default_config() -> dict:
    train = {f.name: f.default for f in fields(TrainConfig) if f.name != "seed"}
    train.update(method="castle", init=None, from_scratch=False, tradeoff=0.5)
    pre = asdict(PretrainConfig())
    pre["lr"] = 0.01
    return {
        "seed": None,
        "out": "runs/default",
        "data": {"path": None, "synthetic": {k: v for k, v in asdict(SyntheticSpec()).items() if k != "seed"}},
        "model": asdict(ModelConfig()),
        "pretrain": pre,
        "train": train,
        "eval": {"method": "model", "checkpoint": None, "role": "unseen_test", "shot": 1, "ways": [5],
                 "tasks": 1000, "gamma": 0.0, "calibration": None, "threads": 1, "domain": None,
                 "lightweight": False, "lw_steps": 20, "lw_lr": 0.01, "seen_centroid_samples": 100},
        "calibrate": {"tasks": 500, "way": 5},
        "ablate": {"sizes": [0, 8, 16, 32]},
        "report": {"inputs": []},
    }


# ------------------------------------------------------------------ config

def _merge(base: dict, over: dict, prefix: str = "") -> dict:
    for k, v in over.items():
        path = f"{prefix}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {path}")
        if isinstance(base[k], dict) and not isinstance(v, dict):
            raise ConfigError(f"{path} must be an object")
        if isinstance(base[k], dict):
            _merge(base[k], v, path + ".")
        else:
            base[k] = v
    return base


def set_path(cfg: dict, dotted: str, value) -> None:
    node = cfg
    parts = dotted.split(".")
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config key {dotted}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {dotted}")
    node[parts[-1]] = value


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def build_config(args) -> dict:
    cfg = default_config()
    if args.config:
        try:
            user = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {args.config} is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config file must hold a JSON object")
        _merge(cfg, user)
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects dot.path=value, got {item!r}")
        key, value = item.split("=", 1)
        set_path(cfg, key.strip(), _parse_value(value))
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.variant is not None:
        cfg["model"]["variant"] = VARIANT_FLAGS[args.variant]
    if args.shot is not None:
        cfg["train"]["shot"] = cfg["eval"]["shot"] = args.shot
    if args.way is not None:
        cfg["train"]["way"] = args.way
        cfg["eval"]["ways"] = [args.way]
    if args.tasks is not None:
        cfg["eval"]["tasks"] = args.tasks
    if args.threads is not None:
        cfg["eval"]["threads"] = args.threads
    if args.out is not None:
        cfg["out"] = args.out
    if cfg["seed"] is None:
        raise ConfigError("seed: a seed is required (--seed or \"seed\" in the config)")
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed: must be a non-negative integer")
    for dotted in sorted(PATH_KEYS):
        sect, key = dotted.split(".")
        p = cfg[sect][key]
        if p is not None and not Path(p).is_file():
            raise ConfigError(f"{dotted}: file {p} does not exist")
    return cfg


def _section(cls, cfg: dict, name: str, drop=()):
    values = {k: v for k, v in cfg[name].items() if k not in drop}
    try:
        obj = cls(**values)
    except TypeError as exc:
        raise ConfigError(f"{name}: {exc}") from exc
    if hasattr(obj, "validate"):
        try:
            obj.validate()
        except ConfigError as exc:
            raise ConfigError(f"{name}: {exc}") from exc
    return obj


def git_blob_hash(path) -> str:
    """Content hash in git's blob format: sha1 of ``b"blob <len>\\0" + bytes``."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def semantic_config(cfg: dict) -> dict:
    """Config with the output dir dropped and input paths replaced by content hashes."""
    sem = copy.deepcopy(cfg)
    sem.pop("out", None)
    for dotted in PATH_KEYS:
        sect, key = dotted.split(".")
        p = sem[sect].get(key)
        if p:
            path = Path(p)
            sem[sect][key] = {"blob": git_blob_hash(path)} if path.is_file() else {"missing": True}
    sem["report"] = {"inputs": len(sem["report"]["inputs"])}
    return sem


def _require_file(cfg, dotted) -> Path:
    sect, key = dotted.split(".")
    p = cfg[sect][key]
    if not p:
        raise ConfigError(f"{dotted} is required for this command")
    path = Path(p)
    if not path.is_file():
        raise ConfigError(f"{dotted}: file {p} does not exist")
    return path


# ----------------------------------------------------------------- helpers

class Run:
    def __init__(self, command: str, cfg: dict):
        self.command = command
        self.cfg = cfg
        self.out = Path(cfg["out"])
        self.out.mkdir(parents=True, exist_ok=True)
        self.fingerprint = config_fingerprint({"command": command, **semantic_config(cfg)})
        self._dataset = None
        self.dataset_hash = None

    def write_manifest(self, extra=None):
        inputs = {}
        for dotted in sorted(PATH_KEYS):
            sect, key = dotted.split(".")
            p = self.cfg[sect].get(key)
            if p and Path(p).is_file():
                inputs[dotted] = {"path": str(p), "blob": git_blob_hash(p)}
        doc = {"version": __version__, "command": self.command, "config": self.cfg,
               "config_fingerprint": self.fingerprint, "inputs": inputs, "dataset_hash": self.dataset_hash}
        if extra:
            doc.update(extra)
        (self.out / "run.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def synthetic_spec(self) -> SyntheticSpec:
        spec = dict(self.cfg["data"]["synthetic"])
        spec["seed"] = self.cfg["seed"]
        try:
            obj = SyntheticSpec(**spec)
        except TypeError as exc:
            raise ConfigError(f"data.synthetic: {exc}") from exc
        obj.validate()
        return obj

    def dataset(self):
        if self._dataset is None:
            path = self.cfg["data"]["path"]
            if path:
                self._dataset = load_dataset(path)
                self.dataset_hash = git_blob_hash(path)
            else:
                self._dataset = gen_synthetic(self.synthetic_spec())
                tmp = self.out / "dataset.jsonl"
                save_dataset(self._dataset, tmp)
                self.dataset_hash = git_blob_hash(tmp)
        return self._dataset

    def model_config(self) -> ModelConfig:
        return _section(ModelConfig, self.cfg, "model")

    def train_config(self) -> TrainConfig:
        tc = _section(TrainConfig, {"train": {**self.cfg["train"], "seed": self.cfg["seed"]}}, "train",
                      drop=("method", "init", "from_scratch", "tradeoff"))
        return tc

    def initial_model(self):
        """Starting point for meta-training: a checkpoint, in-process pretraining, or random init."""
        ds = self.dataset()
        tcfg = self.cfg["train"]
        mcfg = self.model_config()
        if tcfg["from_scratch"]:
            return init_state(ds.feature_dim, ds.num_seen, mcfg, self.cfg["seed"],
                              [ds.class_names[c] for c in ds.seen_classes])
        if tcfg["init"]:
            m = load_checkpoint(_require_file(self.cfg, "train.init"))
            return resize_bases(m.with_config(**{k: v for k, v in asdict(mcfg).items() if k != "num_bases"}),
                                mcfg.num_bases, self.cfg["seed"])
        return pretrain(ds, mcfg, _section(PretrainConfig, self.cfg, "pretrain"), self.cfg["seed"])

    def save_model(self, m, name: str):
        m.meta["fingerprint"] = self.fingerprint
        m.meta["dataset_hash"] = self.dataset_hash
        save_checkpoint(m, self.out / name, self.fingerprint)


def resize_bases(m, num_bases: int, seed: int):
    """Same model with a freshly initialised shared dictionary of ``num_bases`` rows."""
    if m.bases.shape[0] == num_bases and m.config.num_bases == num_bases:
        return m
    d = m.embed_dim
    bound = 1.0 / d ** 0.5
    bases = stream(seed, "bases", num_bases).uniform(-bound, bound, size=(num_bases, d))
    out = m.with_config(num_bases=num_bases)
    out.bases = bases
    return out


def make_scorer(run: Run, m, method: str):
    ecfg = run.cfg["eval"]
    if method == "model":
        if ecfg["lightweight"]:
            ds = run.dataset()
            ids = m.meta.get("exemplars")
            if not ids:
                raise ConfigError("eval.lightweight needs a checkpoint with stored exemplars (from `train`)")
            index = {i: n for n, i in enumerate(ds.ids)}
            return LightweightScorer(m, [index[i] for i in ids], ecfg["lw_steps"], ecfg["lw_lr"])
        return ModelScorer(m)
    if method in KINDS:
        return BaselineScorer(BaselineKind(method, run.cfg["train"]["tradeoff"], ecfg["seen_centroid_samples"]),
                              m, run.cfg["seed"])
    raise ConfigError(f"eval.method must be 'model' or one of {KINDS}, got {method!r}")


def _gamma(run: Run) -> float:
    ecfg = run.cfg["eval"]
    if ecfg["calibration"]:
        doc = json.loads(_require_file(run.cfg, "eval.calibration").read_text(encoding="utf-8"))
        return float(doc["gamma"])
    return float(ecfg["gamma"])


def write_curve(path: Path, points) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["gamma", "acc_seen_joint", "acc_unseen_joint"])
        for g, s, u in points:
            w.writerow([g, repr(s), repr(u)])


# ---------------------------------------------------------------- commands

def cmd_gen_data(run: Run):
    ds = gen_synthetic(run.synthetic_spec())
    path = run.out / "dataset.jsonl"
    save_dataset(ds, path)
    run.dataset_hash = git_blob_hash(path)
    log.info("wrote %s (%d instances)", path, len(ds))


def cmd_pretrain(run: Run):
    ds = run.dataset()
    history = []
    m = pretrain(ds, run.model_config(), _section(PretrainConfig, run.cfg, "pretrain"), run.cfg["seed"], history)
    with (run.out / "pretrain_log.jsonl").open("w", encoding="utf-8") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    run.save_model(m, "pretrained.json")


def _train_one(run: Run, m0, method: str, log_path: Path):
    ds = run.dataset()
    tc = run.train_config()
    if method == "castle":
        with log_path.open("w", encoding="utf-8") as fh:
            m, _ = train(ds, m0, tc, fh)
        return m
    if method in ("protonet", "mc_proto"):
        tradeoff = 0.0 if method == "protonet" else float(run.cfg["train"]["tradeoff"])
        m, records = protonet_train(ds, m0, tc, tradeoff)
        with log_path.open("w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return m
    raise ConfigError(f"train.method must be castle, protonet or mc_proto, got {method!r}")


def cmd_train(run: Run):
    m0 = run.initial_model()
    m = _train_one(run, m0, run.cfg["train"]["method"], run.out / "train_log.jsonl")
    run.save_model(m, "model.json")


def _load_eval_model(run: Run):
    m = load_checkpoint(_require_file(run.cfg, "eval.checkpoint"))
    overrides = {k: v for k, v in run.cfg["model"].items()
                 if k in ("synth_mode", "normalize_embeddings", "heads_attend_heads", "attn_scale")}
    return m.with_config(**overrides)


def report_document(run: Run, report, m, method: str) -> dict:
    doc = report.to_dict()
    doc.update(method=method, variant=m.config.variant if method == "model" else None,
               model_fingerprint=m.meta.get("fingerprint", ""), config_fingerprint=run.fingerprint,
               dataset_hash=run.dataset_hash, seed=run.cfg["seed"])
    return doc


def cmd_eval(run: Run):
    ds = run.dataset()
    m = _load_eval_model(run)
    ecfg = run.cfg["eval"]
    scorer = make_scorer(run, m, ecfg["method"])
    report = evaluate(scorer, ds, ecfg["role"], ecfg["shot"], ecfg["ways"], ecfg["tasks"], _gamma(run),
                      run.cfg["seed"], ecfg["threads"], ecfg["domain"])
    doc = report_document(run, report, m, ecfg["method"])
    (run.out / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    for i, way in enumerate(report.ways):
        write_curve(run.out / f"curve_way{way}.csv", report.curves[way])
        if i == 0:
            write_curve(run.out / "curve.csv", report.curves[way])
    for row in report.sweep_table():
        log.info("way %d: HM %.4f  mean acc %.4f  AUSUC %.4f", row["way"], row["hm"], row["mean_acc"], row["ausuc"])


def cmd_calibrate(run: Run):
    ds = run.dataset()
    m = _load_eval_model(run)
    ecfg = run.cfg["eval"]
    scorer = make_scorer(run, m, ecfg["method"])
    gamma = calibrate(scorer, ds, ecfg["shot"], run.cfg["calibrate"]["way"], run.cfg["calibrate"]["tasks"],
                      run.cfg["seed"], ecfg["threads"], domain=ecfg["domain"])
    doc = {"gamma": gamma, "method": ecfg["method"], "model_fingerprint": m.meta.get("fingerprint", ""),
           "config_fingerprint": run.fingerprint}
    (run.out / "calibration.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    log.info("calibration factor %.6g", gamma)


ABLATE_COLUMNS = ("num_bases", "hm", "mean_acc", "fsl_acc", "seen_joint", "unseen_joint", "delta", "ausuc")


def ablate_dict(run: Run, m0, sizes) -> list:
    ds = run.dataset()
    ecfg = run.cfg["eval"]
    rows = []
    for size in sizes:
        start = resize_bases(m0.with_config(variant="castle"), int(size), run.cfg["seed"])
        m = _train_one(run, start, "castle", run.out / f"train_log_bases{size}.jsonl")
        rep = evaluate(ModelScorer(m), ds, ecfg["role"], ecfg["shot"], ecfg["ways"][:1], ecfg["tasks"], 0.0,
                       run.cfg["seed"], ecfg["threads"], ecfg["domain"])
        means = rep.sweep_table()[0]
        rows.append({"num_bases": int(size), **{k: means[k] for k in ABLATE_COLUMNS[1:]}})
    return rows


def cmd_ablate_dict(run: Run):
    m0 = run.initial_model()
    rows = ablate_dict(run, m0, run.cfg["ablate"]["sizes"])
    with (run.out / "ablate_dict.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATE_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def cmd_report(run: Run):
    inputs = run.cfg["report"]["inputs"] or [str(run.out)]
    found = []
    for item in inputs:
        p = Path(item)
        found += sorted(p.rglob("report.json")) if p.is_dir() else [p]
    if not found:
        raise DataError("report: no report.json files found")
    rows = []
    for path in found:
        doc = json.loads(path.read_text(encoding="utf-8"))
        name = doc.get("variant") or doc.get("method")
        for r in doc["sweep"]:
            rows.append({"source": str(path.parent), "method": name, "gamma": doc["gamma"], **r})
    cols = ["source", "method", "gamma", "way", "hm", "mean_acc", "fsl_acc", "seen_joint", "unseen_joint",
            "delta", "ausuc", "seen_acc"]
    with (run.out / "summary.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    lines = ["| method | way | gamma | HM | mean acc | FSL acc | S->SuU | U->SuU | delta | AUSUC |",
             "|---|---|---|---|---|---|---|---|---|---|"]
    for r in rows:
        lines.append(f"| {r['method']} | {r['way']} | {r['gamma']:.4g} | {100 * r['hm']:.2f} | {100 * r['mean_acc']:.2f} "
                     f"| {100 * r['fsl_acc']:.2f} | {100 * r['seen_joint']:.2f} | {100 * r['unseen_joint']:.2f} "
                     f"| {100 * r['delta']:.2f} | {100 * r['ausuc']:.2f} |")
    (run.out / "summary.md").write_text("\n".join(lines) + "\n", encoding="utf-8")


HANDLERS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "calibrate": cmd_calibrate,
    "ablate-dict": cmd_ablate_dict,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gfsl", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", metavar="PATH")
    p.add_argument("--seed", type=int, metavar="U64")
    p.add_argument("--variant", choices=sorted(VARIANT_FLAGS))
    p.add_argument("--shot", type=int, metavar="K")
    p.add_argument("--way", type=int, metavar="N")
    p.add_argument("--tasks", type=int, metavar="COUNT")
    p.add_argument("--threads", type=int, metavar="N")
    p.add_argument("--out", metavar="DIR")
    p.add_argument("--set", action="append", metavar="dot.path=value")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = build_config(args)
        r = Run(args.command, cfg)
        HANDLERS[args.command](r)
        r.write_manifest()
    except GfslError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code
    return 0


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
