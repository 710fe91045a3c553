"""Time each hot kernel under numba and under the pure-numpy fallback.

    python benchmarks/bench_kernels.py [--n 20000] [--repeat 5]

The numba column is skipped when numba is not importable (or when
PRUSC_DISABLE_NUMBA is set, since the kernels are then plain Python).
"""
import argparse
import timeit

import numpy as np

from prusc import kernels
from prusc._accel import HAVE_NUMBA


def cases(n, d=128, k=8, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    C = rng.normal(size=(k, d))
    labels = rng.integers(0, k, n)
    logits = rng.normal(size=n * 8)
    u1, u2 = rng.random(n * 8), rng.random(n * 8)
    y, a = rng.integers(0, 2, n), rng.integers(0, 2, n)
    ok = rng.random(n) < 0.9
    # optimizer state sized like one 500x500 layer; updates run in place
    p, m, v, g = (rng.normal(size=(500, 500)) for _ in range(4))
    v = np.abs(v)
    return {
        "gumbel_sigmoid": (lambda f: f(logits, u1, u2, 1.0), "gumbel_sigmoid"),
        "assign": (lambda f: f(X, C), "assign"),
        "centroid_sums": (lambda f: f(X, labels, k), "centroid_sums"),
        "sq_dist_to": (lambda f: f(X, C[0]), "sq_dist_to"),
        "sq_dist_rows": (lambda f: f(X, C, labels), "sq_dist_rows"),
        "group_counts": (lambda f: f(y, a, ok, 2, 2), "group_counts"),
        "sgd_update": (lambda f: f(p, m, g, 1e-6, 0.9, 1e-2), "sgd_update"),
        "adam_update": (lambda f: f(p, m, v, g, 1e-6, 0.9, 0.999, 0.1, 0.001, 1e-8), "adam_update"),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=20000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    print(f"{'kernel':16s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, (call, attr) in cases(args.n).items():
        f_np = getattr(kernels, f"_{attr}_np")
        t_np = min(timeit.repeat(lambda: call(f_np), number=1, repeat=args.repeat)) * 1e3
        if HAVE_NUMBA:
            f_nb = getattr(kernels, f"_{attr}_nb")
            call(f_nb)  # compile outside the timed region
            t_nb = min(timeit.repeat(lambda: call(f_nb), number=1, repeat=args.repeat)) * 1e3
            print(f"{name:16s} {t_np:10.3f} {t_nb:10.3f} {t_np / t_nb:8.2f}")
        else:
            print(f"{name:16s} {t_np:10.3f} {'-':>10s} {'-':>8s}")


if __name__ == "__main__":
    main()
