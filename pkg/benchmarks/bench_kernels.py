"""Compare the compiled sweep kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--n 20000] [--repeat 20]

Both backends are imported directly, checked for agreement on the same
inputs, then timed with ``timeit``.
"""
import argparse
import timeit

import numpy as np

from gfsl import _kernels_py

try:
    from gfsl._ext import _kernels as _kernels_c
except ImportError:
    _kernels_c = None


def make_inputs(n, seed):
    rng = np.random.default_rng(seed)
    gap = rng.normal(size=n)
    is_seen = rng.random(n) < 0.5
    seen_ok = is_seen & (rng.random(n) < 0.8)
    unseen_ok = ~is_seen & (rng.random(n) < 0.6)
    gammas = np.linspace(-3, 3, 201)
    return gap, seen_ok, unseen_ok, int(is_seen.sum()), int((~is_seen).sum()), gammas


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--n", type=int, default=20000)
    parser.add_argument("--repeat", type=int, default=20)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    gap, seen_ok, unseen_ok, n_seen, n_unseen, gammas = make_inputs(args.n, args.seed)
    calls = {
        "joint_correct_counts": lambda k: k.joint_correct_counts(gap, seen_ok, unseen_ok, gammas),
        "su_curve": lambda k: k.su_curve(gap, seen_ok, unseen_ok, n_seen, n_unseen),
        "ausuc_area": lambda k: k.ausuc_area(gap, seen_ok, unseen_ok, n_seen, n_unseen),
    }
    backends = {"python": _kernels_py}
    if _kernels_c is None:
        print("compiled extension not built; timing the numpy fallback only")
    else:
        backends["cython"] = _kernels_c
    print(f"n={args.n} repeat={args.repeat}")
    print(f"{'kernel':<22}" + "".join(f"{b:>14}" for b in backends) + ("      speedup" if len(backends) > 1 else ""))
    for name, call in calls.items():
        if _kernels_c is not None:
            a, b = call(_kernels_py), call(_kernels_c)
            for x, y in zip(np.atleast_1d(a) if np.isscalar(a) else a, np.atleast_1d(b) if np.isscalar(b) else b):
                np.testing.assert_allclose(np.asarray(x, dtype=float), np.asarray(y, dtype=float), atol=1e-12)
        times = {b: min(timeit.repeat(lambda k=k: call(k), number=1, repeat=args.repeat)) for b, k in backends.items()}
        line = f"{name:<22}" + "".join(f"{1e3 * t:>12.3f}ms" for t in times.values())
        if len(times) > 1:
            line += f"{times['python'] / times['cython']:>12.2f}x"
        print(line)


if __name__ == "__main__":
    main()
