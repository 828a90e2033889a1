"""The numba kernels and their numpy fallbacks must agree.

The backend is fixed at import time, so each side runs in its own interpreter.
"""

import os
import subprocess
import sys
import textwrap

import numpy as np
import pytest

SCRIPT = textwrap.dedent(
    """
    import sys
    import numpy as np
    from jointembed import _accel
    from jointembed.estimator import PairedSample, fit
    from jointembed.kernels import GaussianKernel
    from jointembed.lowrank import biorthogonal_cholesky, marginal_basis
    from jointembed.numerics import cholesky_dense, sym_eigen
    from jointembed.qpsolver import QuadraticProgram, solve

    rng = np.random.default_rng(0)
    out = {"backend": np.array(_accel.backend())}
    a = rng.normal(size=(30, 30))
    e = sym_eigen(a + a.T, method="jacobi")
    out["eig_values"] = e.values
    out["eig_vectors"] = e.vectors
    spd = a @ a.T + 30 * np.eye(30)
    out["chol"] = cholesky_dense(spd)

    pts = rng.normal(scale=0.3, size=(200, 2))
    f = biorthogonal_cholesky(GaussianKernel(0.2), pts, 1e-6)
    out["pivots"] = f.pivots
    out["l"] = f.l
    out["b"] = f.b
    out["basis_q"] = marginal_basis(pts, GaussianKernel(0.2), 1e-4).q

    m = 8
    qp = QuadraticProgram(rng.normal(size=m) * 10, rng.uniform(0.1, 1, m), rng.normal(size=(2, m)),
                          -np.ones(m), np.ones(m), 1.0)
    out["qp_h"] = solve(qp).h

    x, y = rng.normal(scale=0.2, size=(150, 1)), rng.normal(scale=0.2, size=(150, 2))
    s = PairedSample(x, y)
    for variant in ("constrained", "unconstrained"):
        out["fit_" + variant] = fit(s, GaussianKernel(0.2), GaussianKernel(0.2), 1e-2, 0.0, variant).coeff_h
    np.savez(sys.argv[1], **out)
    """
)


def _run(tmp_path, name, disable):
    env = dict(os.environ)
    env.pop("JOINTEMBED_DISABLE_NUMBA", None)
    if disable:
        env["JOINTEMBED_DISABLE_NUMBA"] = "1"
    path = tmp_path / f"{name}.npz"
    subprocess.run([sys.executable, "-c", SCRIPT, str(path)], env=env, check=True, timeout=600)
    return dict(np.load(path))


@pytest.fixture(scope="module")
def results(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("backends")
    return _run(tmp, "numba", False), _run(tmp, "numpy", True)


def test_flag_selects_backend(results):
    fast, slow = results
    assert str(fast["backend"]) == "numba"
    assert str(slow["backend"]) == "numpy"


@pytest.mark.parametrize("key,atol", [
    ("eig_values", 1e-12),
    ("eig_vectors", 1e-10),
    ("chol", 1e-12),
    ("l", 1e-10),
    ("b", 1e-8),
    ("basis_q", 1e-6),
    ("qp_h", 1e-7),
    ("fit_constrained", 1e-6),
    ("fit_unconstrained", 1e-6),
])
def test_kernels_agree(results, key, atol):
    fast, slow = results
    assert fast[key].shape == slow[key].shape
    np.testing.assert_allclose(fast[key], slow[key], atol=atol * max(1.0, np.abs(slow[key]).max()))


def test_same_pivots(results):
    fast, slow = results
    np.testing.assert_array_equal(fast["pivots"], slow["pivots"])
