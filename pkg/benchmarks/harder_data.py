"""Directional comparison on a noisier synthetic dataset (report only).

Usage: python benchmarks/harder_data.py [--noise 2.0] [--seed 0] [--tasks 1000]

Same protocol as the acceptance suite (pretrain, ProtoNet and CASTLE
training, calibration on unseen_val, 1-shot 5-way evaluation on
unseen_test) but with more within-class noise, so that the methods are
not all at the accuracy ceiling. Nothing here is asserted.
"""
import argparse
import dataclasses

from gfsl.baselines import BaselineKind, BaselineScorer, protonet_train
from gfsl.data import SyntheticSpec, gen_synthetic
from gfsl.evaluation import ModelScorer, calibrate, evaluate
from gfsl.model import ModelConfig, PretrainConfig, init_state, pretrain
from gfsl.trainer import TrainConfig, train


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--noise", type=float, default=2.0)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--tasks", type=int, default=1000)
    args = parser.parse_args(argv)
    ds = gen_synthetic(dataclasses.replace(SyntheticSpec(seed=0), noise=args.noise))
    tc = TrainConfig(lr=1e-3, total_batches=1000, val_every=250, halve_every=500, seed=args.seed)
    m0 = pretrain(ds, ModelConfig(), PretrainConfig(lr=0.01), args.seed)
    scratch0 = init_state(ds.feature_dim, ds.num_seen, ModelConfig(), args.seed)
    scorers = {
        "proto_proto": BaselineScorer(BaselineKind("proto_proto"), protonet_train(ds, m0, tc)[0], args.seed),
        "mc_knn": BaselineScorer(BaselineKind("mc_knn"), m0, args.seed),
        "castle": ModelScorer(train(ds, m0, tc)[0]),
        "acastle": ModelScorer(train(ds, m0.with_config(variant="acastle"), tc)[0]),
        "castle_scratch": ModelScorer(train(ds, scratch0, tc)[0]),
    }
    print(f"noise={args.noise} seed={args.seed} tasks={args.tasks}")
    print(f"{'method':<16}{'HM':>8}{'HM cal':>8}{'gamma':>9}{'S->SuU 2w':>11}")
    for name, scorer in scorers.items():
        gamma = calibrate(scorer, ds, 1, 5, 500, args.seed)
        raw = evaluate(scorer, ds, "unseen_test", 1, [5], args.tasks, 0.0, args.seed).metrics[5]["hm"]["mean"]
        cal = evaluate(scorer, ds, "unseen_test", 1, [5], args.tasks, gamma, args.seed).metrics[5]["hm"]["mean"]
        single = evaluate(scorer, ds, "unseen_test", 1, [2], args.tasks, 0.0, args.seed,
                          domain="random").metrics[2]["seen_joint"]["mean"]
        print(f"{name:<16}{100 * raw:>8.2f}{100 * cal:>8.2f}{gamma:>9.3f}{100 * single:>11.2f}")


if __name__ == "__main__":
    main()
