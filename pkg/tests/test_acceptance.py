"""Acceptance criteria on the synthetic acceptance dataset.

Every test checks one criterion at the stated tolerance and records one
pass/fail line (printed in the terminal summary). The directional
experiments share one cached run per seed: pretraining, ProtoNet,
CASTLE, aCASTLE and a from-scratch CASTLE, all on the same dataset.
"""
import json
import time

import numpy as np
import pytest

from gfsl.baselines import BaselineKind, BaselineScorer, protonet_train
from gfsl.cli import run as cli_run
from gfsl.data import SyntheticSpec, gen_synthetic
from gfsl.evaluation import (ModelScorer, TaskScores, ausuc, calibrate, delta_value, evaluate, harmonic_mean,
                             task_metrics)
from gfsl.model import ModelConfig, PretrainConfig, init_state, pretrain
from gfsl.numerics import grad_check
from gfsl.synthesis import attention, compute_prototypes, synthesize_joint
from gfsl.trainer import TrainConfig, build_multiclassifier_batch, gfsl_loss, train

from conftest import toy_state
from test_evaluation import ausuc_oracle, joint_accuracies_oracle, random_task

SEEDS = (0, 1, 2, 3, 4)
NUM_TASKS = 1000
PRETRAIN = PretrainConfig(lr=0.01)


def train_config(seed):
    return TrainConfig(lr=1e-3, total_batches=1000, val_every=250, halve_every=500, seed=seed)


def acceptance_dataset():
    return gen_synthetic(SyntheticSpec(num_domains=5, classes_per_domain=8, instances_per_class=60, feature_dim=32,
                                       domain_spread=4.0, class_spread=1.5, noise=0.6, num_seen=25,
                                       num_unseen_val=5, seed=0))


def mean_metric(report, key, way=None):
    way = report.ways[0] if way is None else way
    return report.metrics[way][key]["mean"]


class SeedRun:
    """Everything the directional criteria need for one seed, computed on first use."""

    def __init__(self, ds, seed):
        self.ds, self.seed = ds, seed
        self.seconds = {}
        self._cache = {}

    def _timed(self, name, fn):
        if name not in self._cache:
            t0 = time.perf_counter()
            self._cache[name] = fn()
            self.seconds[name] = time.perf_counter() - t0
        return self._cache[name]

    @property
    def pretrained(self):
        return self._timed("pretrain", lambda: pretrain(self.ds, ModelConfig(), PRETRAIN, self.seed))

    @property
    def protonet(self):
        return self._timed("protonet", lambda: protonet_train(self.ds, self.pretrained, train_config(self.seed))[0])

    def model(self, variant):
        return self._timed(variant, lambda: train(self.ds, self.pretrained.with_config(variant=variant),
                                                  train_config(self.seed))[0])

    @property
    def scratch(self):
        def fit():
            m0 = init_state(self.ds.feature_dim, self.ds.num_seen, ModelConfig(), self.seed)
            return train(self.ds, m0, train_config(self.seed))[0]
        return self._timed("scratch", fit)

    def scorer(self, name):
        if name in ("castle", "acastle", "castle-minus"):
            return ModelScorer(self.model(name))
        if name == "scratch":
            return ModelScorer(self.scratch)
        if name == "proto_proto":
            return BaselineScorer(BaselineKind("proto_proto"), self.protonet, self.seed)
        if name == "mc_knn":
            return BaselineScorer(BaselineKind("mc_knn"), self.pretrained, self.seed)
        raise KeyError(name)

    def gamma(self, name):
        return self._timed(f"calibrate:{name}", lambda: calibrate(self.scorer(name), self.ds, 1, 5, 500, self.seed))

    def report(self, name, calibrated=False, ways=(5,), domain=None):
        key = f"eval:{name}:{calibrated}:{ways}:{domain}"
        gamma = self.gamma(name) if calibrated else 0.0
        return self._timed(key, lambda: evaluate(self.scorer(name), self.ds, "unseen_test", 1, list(ways), NUM_TASKS,
                                                 gamma, self.seed, domain=domain))


@pytest.fixture(scope="module")
def runs():
    ds = acceptance_dataset()
    return {s: SeedRun(ds, s) for s in SEEDS}


def seed_mean(runs, fn):
    return float(np.mean([fn(r) for r in runs.values()]))


# ---------------------------------------------------------------- criterion 1

@pytest.mark.criterion(1)
def test_metric_oracle_suite(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for trial in range(200):
        a, b = rng.random(2)
        if trial % 10 == 0:
            a = 0.0
        worst = max(worst, abs(harmonic_mean(a, b) - (0.0 if a * b == 0 else 1.0 / ((1 / a + 1 / b) / 2))))
        w, x, y, z = rng.random(4)
        worst = max(worst, abs(delta_value(w, x, y, z) - ((w - x) + (y - z)) / 2))
        ns, nu = rng.integers(1, 7, size=2)
        s, u, is_seen, label = random_task(rng, ns, nu, integer=trial % 2 == 0)
        ts = TaskScores.from_scores(s, u, is_seen, label)
        worst = max(worst, abs(ausuc(ts) - ausuc_oracle(ts)))
        sj, uj = joint_accuracies_oracle(s, u, is_seen, label, 0.0)
        m = task_metrics(ts)
        worst = max(worst, abs(m["seen_joint"] - sj), abs(m["unseen_joint"] - uj))
    table3 = harmonic_mean(0.8032, 0.2942)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-10 and abs(table3 - 0.4306) <= 0.0005 and elapsed < 10
    verdict.check(ok, f"max oracle error {worst:.2e} over 200 inputs; HM(0.8032, 0.2942) = {table3:.4f}; "
                      f"{elapsed:.1f}s")


# ---------------------------------------------------------------- criterion 2

@pytest.mark.criterion(2)
def test_gradient_certification(verdict):
    t0 = time.perf_counter()
    worst = {}
    for variant in ("castle", "acastle"):
        ds = gen_synthetic(SyntheticSpec(num_domains=1, classes_per_domain=6, instances_per_class=10, feature_dim=5,
                                         num_seen=3, num_unseen_val=1, seed=1))
        m = toy_state(variant, d=6, num_bases=4, num_seen=3, input_dim=5, hidden=4, seed=2)
        for w, _ in m.layers:
            w *= 0.5
        batch = build_multiclassifier_batch(ds, TrainConfig(way=2, shot=2, pool_way=3, classifiers_per_batch=3,
                                                            eval_batch=6), seed=3)

        def fn(params, m=m, ds=ds, batch=batch):
            return gfsl_loss(m.with_params(params), ds, batch)

        worst[variant] = grad_check(fn, m.params(), eps=1e-5)
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and elapsed < 30
    verdict.check(ok, "max relative error " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
                  + f" (blocks: embedding, bases, theta, U, V); {elapsed:.1f}s")


# ---------------------------------------------------------------- criterion 3

def _random_case(rng, variant=None, num_bases=None, shot=None, **cfg):
    variant = variant or str(rng.choice(["castle", "acastle", "castle-minus"]))
    d = int(rng.integers(2, 7))
    nb = int(rng.integers(0, 7)) if num_bases is None else num_bases
    s = int(rng.integers(1, 6))
    way = int(rng.integers(1, 5))
    k = int(rng.integers(1, 4)) if shot is None else shot
    m = toy_state(variant, d=d, num_bases=nb, num_seen=s, seed=int(rng.integers(2**31)), **cfg)
    labels = rng.permutation(np.repeat(np.arange(way), k))
    return m, rng.normal(size=(labels.size, d)), labels, k, s


@pytest.mark.criterion(3)
def test_synthesis_invariants(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(99)
    cases = 200
    passed = {}

    def run(name, check):
        passed[name] = sum(bool(check()) for _ in range(cases))

    def simplex():
        rows, d = rng.integers(1, 9), rng.integers(1, 7)
        mask = rng.random(rows) < 0.4
        mask[rng.integers(rows)] = False
        a = attention(rng.normal(scale=3, size=d), rng.normal(scale=3, size=(rows, d)), mask)
        return np.all(a >= 0) and abs(a.sum() - 1) < 1e-12

    def zero_values():
        m, e, y, k, s = _random_case(rng)
        m.proj_v[:] = 0
        cols = synthesize_joint(m, e, y, k).columns
        p = compute_prototypes(e, y, k)
        return (np.allclose(cols[:, s:], (p / np.linalg.norm(p, axis=1, keepdims=True)).T, atol=1e-12)
                and np.allclose(cols[:, :s], m.theta / np.linalg.norm(m.theta, axis=0), atol=1e-12))

    def support_perm():
        m, e, y, k, _ = _random_case(rng)
        perm = rng.permutation(y.size)
        return np.allclose(synthesize_joint(m, e, y, k).columns, synthesize_joint(m, e[perm], y[perm], k).columns,
                           atol=1e-12, rtol=0)

    def base_order():
        m, e, y, k, _ = _random_case(rng)
        a = synthesize_joint(m, e, y, k).columns
        m.bases = m.bases[rng.permutation(m.bases.shape[0])]
        return np.allclose(a, synthesize_joint(m, e, y, k).columns, atol=1e-12, rtol=0)

    def unit_norm():
        m, e, y, k, _ = _random_case(rng, synth_mode=str(rng.choice(["pre-avg", "post-avg"])))
        cols = synthesize_joint(m, e * rng.uniform(0.01, 100), y, k).columns
        return np.allclose(np.linalg.norm(cols, axis=0), 1.0, atol=1e-9)

    def empty_dictionary():
        m, e, y, k, _ = _random_case(rng, variant="castle", num_bases=0)
        return np.array_equal(synthesize_joint(m, e, y, k).columns,
                              synthesize_joint(m.with_config(variant="castle-minus"), e, y, k).columns)

    def one_shot_modes():
        m, e, y, _, _ = _random_case(rng, shot=1)
        return np.array_equal(synthesize_joint(m, e, y, 1).columns,
                              synthesize_joint(m.with_config(synth_mode="post-avg"), e, y, 1).columns)

    for name, check in [("attention simplex", simplex), ("V=0 prototype identity", zero_values),
                        ("support permutation", support_perm), ("base order", base_order),
                        ("unit-norm columns", unit_norm), ("|B|=0 equals CASTLE-minus", empty_dictionary),
                        ("K=1 pre-avg equals post-avg", one_shot_modes)]:
        run(name, check)
    elapsed = time.perf_counter() - t0
    ok = all(v == cases for v in passed.values()) and elapsed < 60
    verdict.check(ok, "; ".join(f"{k} {v}/{cases}" for k, v in passed.items()) + f"; {elapsed:.1f}s")


# ---------------------------------------------------------------- criterion 4

@pytest.mark.criterion(4)
def test_calibration_phenomenon(runs, verdict):
    t0 = time.perf_counter()
    pn_raw = seed_mean(runs, lambda r: mean_metric(r.report("proto_proto"), "hm"))
    pn_cal = seed_mean(runs, lambda r: mean_metric(r.report("proto_proto", calibrated=True), "hm"))
    ca_raw = seed_mean(runs, lambda r: mean_metric(r.report("castle"), "hm"))
    ca_cal = seed_mean(runs, lambda r: mean_metric(r.report("castle", calibrated=True), "hm"))
    elapsed = time.perf_counter() - t0
    gain_pn, gain_ca = 100 * (pn_cal - pn_raw), 100 * (ca_cal - ca_raw)
    clauses = [gain_pn >= 5.0, gain_ca <= 2.0, ca_cal >= pn_cal, elapsed < 600]
    verdict.check(all(clauses),
                  f"ProtoNet+ProtoNet HM {100 * pn_raw:.2f} -> {100 * pn_cal:.2f} (gain {gain_pn:+.2f}, need >= +5) "
                  f"[{'ok' if clauses[0] else 'miss'}]; CASTLE HM {100 * ca_raw:.2f} -> {100 * ca_cal:.2f} "
                  f"(gain {gain_ca:+.2f}, need <= +2) [{'ok' if clauses[1] else 'miss'}]; calibrated CASTLE >= "
                  f"ProtoNet [{'ok' if clauses[2] else 'miss'}]; {elapsed:.0f}s")


# ---------------------------------------------------------------- criterion 5

@pytest.mark.criterion(5)
def test_unified_objective_benefit(runs, verdict):
    pn = seed_mean(runs, lambda r: mean_metric(r.report("proto_proto"), "hm"))
    ca = seed_mean(runs, lambda r: mean_metric(r.report("castle"), "hm"))
    knn = seed_mean(runs, lambda r: mean_metric(r.report("mc_knn"), "hm"))
    margin = 100 * (ca - pn)
    clauses = [margin >= 10.0, 100 * knn < 1.0]
    verdict.check(all(clauses),
                  f"uncalibrated CASTLE HM {100 * ca:.2f} vs ProtoNet+ProtoNet {100 * pn:.2f} (margin {margin:+.2f}, "
                  f"need >= +10) [{'ok' if clauses[0] else 'miss'}]; MC+kNN HM {100 * knn:.2f} (need < 1) "
                  f"[{'ok' if clauses[1] else 'miss'}]")


# ---------------------------------------------------------------- criterion 6

@pytest.mark.criterion(6)
def test_adaptivity_benefit(runs, verdict):
    # the acceptance dataset has two unseen_test classes per domain, so single-domain tasks are 2-way
    ca = seed_mean(runs, lambda r: mean_metric(r.report("castle", ways=(2,), domain="random"), "seen_joint"))
    ac = seed_mean(runs, lambda r: mean_metric(r.report("acastle", ways=(2,), domain="random"), "seen_joint"))
    diff = 100 * (ac - ca)
    verdict.check(diff >= 2.0, f"single-domain 2-way S->SuU: aCASTLE {100 * ac:.2f} vs CASTLE {100 * ca:.2f} "
                               f"(difference {diff:+.2f}, need >= +2)")


# ---------------------------------------------------------------- criterion 7

@pytest.mark.criterion(7)
def test_pretrain_reuse(runs, verdict):
    pre = seed_mean(runs, lambda r: mean_metric(r.report("castle"), "hm"))
    scratch = seed_mean(runs, lambda r: mean_metric(r.report("scratch"), "hm"))
    gap = 100 * (pre - scratch)
    verdict.check(gap >= 5.0, f"CASTLE HM pretrained init {100 * pre:.2f} vs from scratch {100 * scratch:.2f} "
                              f"(gap {gap:+.2f}, need >= +5)")


# ---------------------------------------------------------------- criterion 8

@pytest.mark.criterion(8)
def test_robust_sweep(runs, verdict):
    r = runs[0]
    methods = ("castle", "acastle", "castle-minus", "proto_proto", "mc_knn")
    columns = {}
    for name in methods:
        rep = r.report(name, ways=(5, 10))
        columns[name] = [row["hm"] for row in rep.sweep_table()]
    ok = all(col[0] >= col[1] for col in columns.values())
    verdict.check(ok, "; ".join(f"{k} HM@5 {100 * v[0]:.2f} HM@10 {100 * v[1]:.2f}" for k, v in columns.items()))


# ---------------------------------------------------------------- criterion 9

@pytest.mark.criterion(9)
def test_end_to_end_determinism(tmp_path, verdict):
    cfg = {"pretrain": {"epochs": 20}, "train": {"total_batches": 60, "val_every": 30, "val_tasks": 50, "lr": 0.001},
           "eval": {"tasks": 200, "ways": [5, 10]}}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    reports = []
    for name in ("a", "b"):
        out = tmp_path / name
        base = ["--config", str(tmp_path / "cfg.json"), "--seed", "11"]
        codes = [cli_run(["gen-data", *base, "--out", str(out / "data")])]
        data = f"data.path={out / 'data/dataset.jsonl'}"
        codes.append(cli_run(["pretrain", *base, "--out", str(out / "pre"), "--set", data]))
        codes.append(cli_run(["train", *base, "--out", str(out / "train"), "--set", data,
                              "--set", f"train.init={out / 'pre/pretrained.json'}"]))
        codes.append(cli_run(["eval", *base, "--out", str(out / "eval"), "--set", data,
                              "--set", f"eval.checkpoint={out / 'train/model.json'}"]))
        assert codes == [0, 0, 0, 0]
        reports.append((out / "eval/report.json").read_bytes())
    same = reports[0] == reports[1]
    verdict.check(same, f"report.json {'byte-identical' if same else 'differs'} across two runs "
                        f"({len(reports[0])} bytes)")
