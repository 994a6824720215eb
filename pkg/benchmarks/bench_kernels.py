"""Compare the compiled and numpy likelihood kernels.

    python benchmarks/bench_kernels.py [--m 610] [--n 276] [--repeat 20]

Times one log-likelihood + gradient evaluation and one Hessian weight pass on
a synthetic panel of the given size, for each available backend, and checks
that both backends agree.
"""
import argparse
import time

import numpy as np

from zigpanel import kernels
from zigpanel.basis import make_basis
from zigpanel.model import Layout, ModelSpec, Problem


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--m", type=int, default=610)
    ap.add_argument("--n", type=int, default=276)
    ap.add_argument("--df", type=int, default=10)
    ap.add_argument("--zero-rate", type=float, default=0.93)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    spec = ModelSpec("Full", "eth_sale", make_basis(args.n, args.df))
    layout = Layout(spec, args.m, 2)
    theta = rng.normal(scale=0.2, size=layout.size)
    X = rng.normal(size=(args.n, 2))
    y = rng.gamma(1.5, 100.0, size=(args.m, args.n)) * (rng.random((args.m, args.n)) > args.zero_rate)

    backends = ["python"] + (["cython"] if kernels.BACKEND == "cython" else [])
    results = {}
    print(f"panel {args.m} x {args.n}, {layout.size} parameters, best of {args.repeat}")
    for name in backends:
        prob = Problem(spec, y, X, kernel=kernels.get_backend(name))
        t_grad = best_of(lambda: prob.loglik_and_grad(theta), args.repeat)
        t_ll = best_of(lambda: prob.loglik(theta), args.repeat)
        t_hess = best_of(lambda: prob.hessian(theta), max(1, args.repeat // 4))
        results[name] = (prob.loglik_and_grad(theta), t_ll, t_grad, t_hess)
        print(f"  {name:<7} loglik {1e3 * t_ll:8.3f} ms   loglik+grad {1e3 * t_grad:8.3f} ms"
              f"   hessian {1e3 * t_hess:8.3f} ms")
    if len(results) == 2:
        (lp, gp), *tp = results["python"]
        (lc, gc), *tc = results["cython"]
        print(f"  speedup loglik+grad {tp[1] / tc[1]:.1f}x; |dl| {abs(lp - lc):.1e}; "
              f"max |dgrad| {np.max(np.abs(gp - gc)):.1e}")
    else:
        print("  compiled kernel not available; only the numpy backend was timed")


if __name__ == "__main__":
    main()
