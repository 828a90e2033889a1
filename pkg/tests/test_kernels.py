import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from jointembed.kernels import (
    GaussianKernel,
    TensorKernel,
    gauss_eval,
    kernel_column,
    kernel_diag,
    tensor_eval,
)

from oracles import gauss_gram

coords = st.floats(-3, 3, allow_nan=False)


def test_zero_distance_is_one():
    assert gauss_eval(GaussianKernel(0.3), [0.1, 0.2], [0.1, 0.2]) == 1.0


def test_closed_form_value():
    got = gauss_eval(GaussianKernel(1.0), [0.0, 0.0], [1.0, 1.0])
    assert abs(got - 0.36787944117144233) < 1e-15


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        gauss_eval(GaussianKernel(1.0), [0.0, 0.0], [1.0])


def test_rejects_nonpositive_sigma():
    with pytest.raises(ValueError):
        GaussianKernel(0.0)


@given(arrays(float, 3, elements=coords), arrays(float, 3, elements=coords), st.floats(0.01, 10))
def test_symmetry(x, xp, sigma):
    k = GaussianKernel(sigma)
    assert gauss_eval(k, x, xp) == gauss_eval(k, xp, x)


def test_column_single_point():
    np.testing.assert_array_equal(kernel_column(GaussianKernel(1.0), [[0.5]], 0), [1.0])


def test_column_duplicates():
    pts = np.array([[0.0, 1.0], [2.0, 2.0], [0.0, 1.0]])
    col = kernel_column(GaussianKernel(0.5), pts, 0)
    assert col[0] == 1.0 and col[2] == 1.0


def test_column_matches_elementwise():
    pts = np.random.default_rng(0).normal(size=(5, 2))
    k = GaussianKernel(0.7)
    for j in range(5):
        expect = [gauss_eval(k, pts[i], pts[j]) for i in range(5)]
        np.testing.assert_allclose(kernel_column(k, pts, j), expect, rtol=1e-14)


def test_column_out_of_range():
    with pytest.raises(IndexError):
        kernel_column(GaussianKernel(1.0), np.zeros((3, 1)), 3)


def test_diag():
    pts = np.random.default_rng(1).normal(size=(7, 3))
    k = GaussianKernel(0.2)
    d = kernel_diag(k, pts)
    np.testing.assert_array_equal(d, np.ones(7))
    assert all(d[i] == kernel_column(k, pts, i)[i] for i in range(7))


def test_cross_matches_reference():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(9, 2)), rng.normal(size=(4, 2))
    np.testing.assert_allclose(GaussianKernel(0.4).cross(a, b), gauss_gram(a, b, 0.4), rtol=1e-13)


def test_tensor_same_point():
    k = TensorKernel(GaussianKernel(0.3), GaussianKernel(2.0))
    assert tensor_eval(k, ([0.1], [1.0, 2.0]), ([0.1], [1.0, 2.0])) == 1.0


def test_tensor_is_product():
    # kx term exp(-1) at sigma=1, distance sqrt(2); ky term exp(-2) at sigma=0.5, distance 1
    k = TensorKernel(GaussianKernel(1.0), GaussianKernel(0.5))
    got = tensor_eval(k, ([0.0, 0.0], [0.0]), ([1.0, 1.0], [1.0]))
    assert abs(got - np.exp(-3.0)) < 1e-15


def test_tensor_symmetry():
    k = TensorKernel(GaussianKernel(0.3), GaussianKernel(0.8))
    z, zp = ([0.2], [0.1, -0.4]), ([-0.3], [0.5, 0.0])
    assert tensor_eval(k, z, zp) == tensor_eval(k, zp, z)


def test_tensor_gram_is_kronecker():
    rng = np.random.default_rng(3)
    xs, ys = rng.normal(size=(4, 1)), rng.normal(size=(3, 2))
    kx, ky = GaussianKernel(0.6), GaussianKernel(0.9)
    k = TensorKernel(kx, ky)
    grid = [(x, y) for x in xs for y in ys]
    gram = np.array([[tensor_eval(k, z, zp) for zp in grid] for z in grid])
    np.testing.assert_allclose(gram, np.kron(kx.cross(xs, xs), ky.cross(ys, ys)), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 20), st.integers(1, 3), st.floats(0.05, 5), st.integers(0, 2**32 - 1))
def test_gram_is_psd(n, d, sigma, seed):
    pts = np.random.default_rng(seed).normal(size=(n, d))
    k = GaussianKernel(sigma)
    gram = np.column_stack([kernel_column(k, pts, j) for j in range(n)])
    assert np.linalg.eigvalsh(gram).min() >= -1e-10
