"""Time the numba kernels against their pure-numpy fallbacks.

Each backend runs in a fresh interpreter because the choice is made at import
time.  Numba compilation happens in a warm-up call and is not counted.

    python benchmarks/bench_accel.py            # default sizes
    python benchmarks/bench_accel.py --quick    # smaller problems
"""

import argparse
import json
import os
import subprocess
import sys
import textwrap

WORKER = textwrap.dedent(
    """
    import json, sys, time
    import numpy as np
    from jointembed import _accel
    from jointembed.estimator import PairedSample, fit
    from jointembed.kernels import GaussianKernel
    from jointembed.lowrank import biorthogonal_cholesky
    from jointembed.numerics import cholesky_dense, sym_eigen
    from jointembed.qpsolver import QuadraticProgram, solve

    n, m, reps = (int(v) for v in sys.argv[1:4])
    rng = np.random.default_rng(0)
    pts = rng.normal(scale=0.2, size=(n, 2))
    a = rng.normal(size=(m, m))
    sym, spd = a + a.T, a @ a.T + m * np.eye(m)
    qp = QuadraticProgram(rng.normal(size=400) * 10, rng.uniform(0.1, 1, 400), rng.normal(size=(5, 400)),
                          -np.ones(400), np.ones(400), 1.0)
    s = PairedSample(pts[:, :1], rng.normal(scale=0.2, size=(n, 2)))

    cases = {
        "pivoted_cholesky": lambda: biorthogonal_cholesky(GaussianKernel(0.1), pts, 1e-4),
        "jacobi_eigen": lambda: sym_eigen(sym, method="jacobi"),
        "dense_cholesky": lambda: cholesky_dense(spd),
        "qp_solve": lambda: solve(qp),
        "constrained_fit": lambda: fit(s, GaussianKernel(0.2), GaussianKernel(0.2), 1e-2, 0.0, "constrained"),
    }
    out = {}
    for name, fn in cases.items():
        fn()  # warm-up (and numba compilation)
        best = float("inf")
        for _ in range(reps):
            t0 = time.perf_counter()
            fn()
            best = min(best, time.perf_counter() - t0)
        out[name] = best
    print(json.dumps({"backend": _accel.backend(), "times": out}))
    """
)


def run(disable, n, m, reps):
    env = dict(os.environ)
    env.pop("JOINTEMBED_DISABLE_NUMBA", None)
    if disable:
        env["JOINTEMBED_DISABLE_NUMBA"] = "1"
    res = subprocess.run([sys.executable, "-c", WORKER, str(n), str(m), str(reps)],
                         env=env, capture_output=True, text=True, check=True)
    return json.loads(res.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=5000, help="points for the Cholesky and fit cases")
    ap.add_argument("--m", type=int, default=120, help="matrix size for the dense kernels")
    ap.add_argument("--reps", type=int, default=3)
    ap.add_argument("--quick", action="store_true")
    args = ap.parse_args()
    if args.quick:
        args.n, args.m, args.reps = 1000, 60, 2

    fast = run(False, args.n, args.m, args.reps)
    slow = run(True, args.n, args.m, args.reps)
    print(f"n={args.n} m={args.m} best of {args.reps}")
    print(f"{'kernel':18s} {fast['backend']:>10s} {slow['backend']:>10s} {'speedup':>8s}")
    for name, t_fast in fast["times"].items():
        t_slow = slow["times"][name]
        print(f"{name:18s} {t_fast:10.4f} {t_slow:10.4f} {t_slow / t_fast:8.1f}x")


if __name__ == "__main__":
    main()
