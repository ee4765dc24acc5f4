import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gfsl.data import SyntheticSpec, gen_synthetic
from gfsl.evaluation import (METRICS, ModelScorer, TaskScores, ausuc, calibrate, calibration_grid, collect_scores,
                             delta_value, evaluate, harmonic_mean, hm_over_grid, mean_ci, select_gamma, task_metrics)
from gfsl.model import ModelConfig, init_state

rate = st.floats(0.0, 1.0)


# --------------------------------------------------------------- oracles

def joint_accuracies_oracle(seen_scores, unseen_scores, is_seen, label, gamma):
    """Per-side joint accuracy by scoring every instance over the concatenated label space."""
    hit_s = hit_u = n_s = n_u = 0
    for s_row, u_row, seen, y in zip(seen_scores, unseen_scores, is_seen, label):
        joint = [v - gamma for v in s_row] + list(u_row)
        pred = max(range(len(joint)), key=lambda j: (joint[j], -j))
        if seen:
            n_s += 1
            hit_s += pred == y
        else:
            n_u += 1
            hit_u += pred == len(s_row) + y
    return hit_s / n_s, hit_u / n_u


def ausuc_oracle(ts):
    """Area under the curve traced at thresholds between consecutive distinct gaps."""
    gaps = sorted(set(ts.gap.tolist()))
    cuts = [gaps[0] - 1.0] + [(a + b) / 2 for a, b in zip(gaps, gaps[1:])] + [gaps[-1] + 1.0]
    n_s, n_u = int(ts.is_seen.sum()), int((~ts.is_seen).sum())
    pts = []
    for g in cuts:
        s = sum(1 for i in range(ts.gap.size) if ts.is_seen[i] and ts.gap[i] >= g and ts.seen_arg[i] == ts.label[i])
        u = sum(1 for i in range(ts.gap.size) if not ts.is_seen[i] and ts.gap[i] < g and ts.unseen_arg[i] == ts.label[i])
        pts.append((u / n_u, s / n_s))
    return sum((u1 - u0) * (s0 + s1) / 2 for (u0, s0), (u1, s1) in zip(pts, pts[1:]))


def random_task(rng, n_seen_inst, n_unseen_inst, n_seen_cls=3, n_unseen_cls=2, integer=False):
    n = n_seen_inst + n_unseen_inst
    draw = (lambda size: rng.integers(-3, 4, size=size).astype(float)) if integer else (lambda size: rng.normal(size=size))
    seen_scores = draw((n, n_seen_cls))
    unseen_scores = draw((n, n_unseen_cls))
    is_seen = np.r_[np.ones(n_seen_inst, bool), np.zeros(n_unseen_inst, bool)]
    label = np.r_[rng.integers(0, n_seen_cls, n_seen_inst), rng.integers(0, n_unseen_cls, n_unseen_inst)]
    return seen_scores, unseen_scores, is_seen, label


# ------------------------------------------------------------ metric unit tests

def test_harmonic_mean_examples():
    assert harmonic_mean(0.5, 0.5) == 0.5
    assert harmonic_mean(0.7, 0.0) == 0.0
    assert harmonic_mean(0.0, 0.7) == 0.0
    assert abs(harmonic_mean(0.8032, 0.2942) - 0.4306) <= 0.0005


@settings(max_examples=200, deadline=None)
@given(rate, rate)
def test_harmonic_mean_properties(a, b):
    h = harmonic_mean(a, b)
    lo = min(a, b)
    assert lo - 1e-15 <= h <= 2 * lo + 1e-15
    assert h <= (a + b) / 2 + 1e-15
    assert h == harmonic_mean(b, a)


def test_delta_examples():
    assert abs(delta_value(0.9, 0.8, 0.6, 0.5) - 0.10) < 1e-15
    assert delta_value(0.7, 0.7, 0.4, 0.4) == 0.0
    rng = np.random.default_rng(0)
    for a, b, c, d in rng.random((50, 4)):
        assert delta_value(a, b, c, d) == ((a - b) + (c - d)) / 2


def test_ausuc_perfect_scores():
    seen = np.array([[5.0, 0.0], [0.0, 5.0], [-5.0, -5.0], [-5.0, -5.0]])
    unseen = np.array([[-5.0, -5.0], [-5.0, -5.0], [5.0, 0.0], [0.0, 5.0]])
    ts = TaskScores.from_scores(seen, unseen, [True, True, False, False], [0, 1, 0, 1])
    assert ausuc(ts) == 1.0
    m = task_metrics(ts)
    assert m["hm"] == 1.0 and m["mean_acc"] == 1.0 and m["delta"] == 0.0


def test_ausuc_unseen_always_wrong():
    rng = np.random.default_rng(1)
    s, u, is_seen, label = random_task(rng, 5, 5)
    u[~is_seen, :] = 0.0
    u[np.flatnonzero(~is_seen), 1 - label[~is_seen]] = 1.0
    assert ausuc(TaskScores.from_scores(s, u, is_seen, label)) == 0.0


def test_ausuc_four_instance_toy():
    # gaps: seen +2 (right), seen -1 (right), unseen +1 (right), unseen -3 (right)
    seen = np.array([[3.0], [0.0], [2.0], [0.0]])
    unseen = np.array([[1.0], [1.0], [1.0], [3.0]])
    ts = TaskScores.from_scores(seen, unseen, [True, True, False, False], [0, 0, 0, 0])
    # curve, gamma rising: (u, s) = (0,1) -> (.5,1) at -3 -> (.5,.5) at -1 -> (1,.5) at 1 -> (1,0) at 2
    assert abs(ausuc(ts) - (0.5 * 1.0 + 0.5 * 0.5)) < 1e-15
    assert abs(ausuc_oracle(ts) - 0.75) < 1e-15


def test_metric_oracles_random():
    rng = np.random.default_rng(7)
    for trial in range(150):
        ns, nu = rng.integers(1, 7, size=2)
        s, u, is_seen, label = random_task(rng, ns, nu, integer=trial % 2 == 0)
        ts = TaskScores.from_scores(s, u, is_seen, label)
        assert abs(ausuc(ts) - ausuc_oracle(ts)) < 1e-10
        gamma = float(rng.choice([0.0, rng.normal(), 1.0]))
        m = task_metrics(ts, gamma)
        acc_sj, acc_uj = joint_accuracies_oracle(s, u, is_seen, label, gamma)
        acc_ss = np.mean(s[is_seen].argmax(1) == label[is_seen])
        acc_uu = np.mean(u[~is_seen].argmax(1) == label[~is_seen])
        assert abs(m["seen_joint"] - acc_sj) < 1e-12
        assert abs(m["unseen_joint"] - acc_uj) < 1e-12
        hm = 0.0 if acc_sj == 0 or acc_uj == 0 else 2 * acc_sj * acc_uj / (acc_sj + acc_uj)
        assert abs(m["hm"] - hm) < 1e-10
        assert abs(m["delta"] - ((acc_ss - acc_sj) + (acc_uu - acc_uj)) / 2) < 1e-10
        assert m["seen_joint"] <= m["seen_acc"] and m["unseen_joint"] <= m["fsl_acc"]
        assert m["delta"] >= 0


def test_one_seen_one_unseen_enumeration():
    ts = TaskScores.from_scores([[2.0], [0.5]], [[1.0], [0.7]], [True, False], [0, 0])
    for gamma, (sj, uj) in {0.0: (1, 1), 1.5: (0, 1), -0.5: (1, 0), 1.0: (1, 1)}.items():
        m = task_metrics(ts, gamma)
        assert (m["seen_joint"], m["unseen_joint"]) == (sj, uj)
        assert m["mean_acc"] == (sj + uj) / 2
        assert m["hm"] == harmonic_mean(sj, uj)
    # gaps +1 (seen, right) and -0.2 (unseen, right): curve (0,1) (1,1) (1,0)
    assert ausuc(ts) == 1.0


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32), st.floats(-20, 20))
def test_ausuc_shift_invariance(seed, k):
    rng = np.random.default_rng(seed)
    s, u, is_seen, label = random_task(rng, 4, 4)
    a = ausuc(TaskScores.from_scores(s, u, is_seen, label))
    b = ausuc(TaskScores.from_scores(s + k, u, is_seen, label))
    assert abs(a - b) < 1e-12


def test_hm_zero_when_no_unseen_correct():
    rng = np.random.default_rng(2)
    s, u, is_seen, label = random_task(rng, 6, 6)
    s += 100.0
    m = task_metrics(TaskScores.from_scores(s, u, is_seen, label))
    assert m["unseen_joint"] == 0.0 and m["hm"] == 0.0


def test_hm_over_grid_matches_task_metrics():
    rng = np.random.default_rng(3)
    ts = TaskScores.from_scores(*random_task(rng, 8, 8))
    grid = np.linspace(-3, 3, 13)
    hm = hm_over_grid(ts, grid)
    for g, h in zip(grid, hm):
        assert abs(h - task_metrics(ts, g)["hm"]) < 1e-12


def test_mean_ci():
    out = mean_ci([1.0, 2.0, 3.0, 4.0])
    assert out["mean"] == 2.5
    assert abs(out["ci95"] - 1.96 * np.std([1, 2, 3, 4], ddof=1) / 2) < 1e-15
    assert mean_ci([0.3]) == {"mean": 0.3, "ci95": 0.0}


# --------------------------------------------------------------- calibration

def test_select_gamma_prefers_zero_on_shared_ranges():
    ts = TaskScores.from_scores([[2.0], [0.0]], [[0.0], [2.0]], [True, False], [0, 0])
    gamma, hm = select_gamma([ts])
    assert gamma == 0.0 and hm == 1.0


def test_select_gamma_ties_break_toward_zero():
    ts = TaskScores.from_scores([[2.0], [0.0]], [[0.0], [2.0]], [True, False], [0, 0])
    gamma, _ = select_gamma([ts], grid=np.array([-1.0, 0.5, 1.0, -0.5]))
    assert gamma == -0.5


def test_select_gamma_never_worse_than_zero():
    rng = np.random.default_rng(4)
    scores = []
    for _ in range(20):
        s, u, is_seen, label = random_task(rng, 5, 5)
        scores.append(TaskScores.from_scores(s + 1.5, u, is_seen, label))
    gamma, hm = select_gamma(scores)
    assert 0.0 in calibration_grid(scores)
    assert hm >= np.mean([task_metrics(ts, 0.0)["hm"] for ts in scores])
    assert gamma > 0


# ---------------------------------------------------------------- harness

@pytest.fixture(scope="module")
def wide_ds():
    return gen_synthetic(SyntheticSpec(num_domains=4, classes_per_domain=10, instances_per_class=60,
                                       feature_dim=8, num_seen=16, num_unseen_val=4, seed=5))


@pytest.fixture(scope="module")
def scorer():
    return ModelScorer(init_state(8, 16, ModelConfig(embed_dim=6, num_bases=8, variant="acastle"), seed=2))


def test_sweep_table_shape(wide_ds, scorer):
    rep = evaluate(scorer, wide_ds, ways=[5, 10, 15, 20], num_tasks=4, seed=0)
    table = rep.sweep_table()
    assert [r["way"] for r in table] == [5, 10, 15, 20]
    assert all(set(METRICS) <= r.keys() for r in table)
    doc = json.loads(json.dumps(rep.to_dict()))
    assert doc["ways"] == [5, 10, 15, 20]
    for w in ("5", "20"):
        assert doc["curves"][w][0][0] == "-inf"
        assert doc["metrics"][w]["hm"]["ci95"] >= 0


def test_tiny_gamma_changes_nothing(wide_ds, scorer):
    a = evaluate(scorer, wide_ds, num_tasks=10, seed=1, gamma=0.0).to_dict()
    b = evaluate(scorer, wide_ds, num_tasks=10, seed=1, gamma=1e-9).to_dict()
    a.pop("gamma"), b.pop("gamma")
    assert a == b


def test_evaluate_deterministic_across_threads(wide_ds, scorer):
    a = evaluate(scorer, wide_ds, ways=[5], num_tasks=12, seed=3, threads=1).to_dict()
    b = evaluate(scorer, wide_ds, ways=[5], num_tasks=12, seed=3, threads=4).to_dict()
    c = evaluate(scorer, wide_ds, ways=[5], num_tasks=12, seed=3, threads=1).to_dict()
    assert a == b == c


def test_ausuc_ignores_gamma(wide_ds, scorer):
    a = evaluate(scorer, wide_ds, num_tasks=5, seed=1, gamma=0.0)
    b = evaluate(scorer, wide_ds, num_tasks=5, seed=1, gamma=3.0)
    assert a.metrics[5]["ausuc"] == b.metrics[5]["ausuc"]


def test_collect_scores_order(wide_ds, scorer):
    all_ = collect_scores(scorer, wide_ds, "unseen_test", 1, 5, 6, seed=4)
    part = collect_scores(scorer, wide_ds, "unseen_test", 1, 5, 3, seed=4)
    for x, y in zip(all_[:3], part):
        assert np.array_equal(x.gap, y.gap)


def test_calibrate_uses_validation_classes(wide_ds, scorer):
    gamma = calibrate(scorer, wide_ds, num_tasks=20, seed=0, way=10)
    assert math.isfinite(gamma)
