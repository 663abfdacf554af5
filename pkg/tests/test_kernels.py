import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cgs import _kernels as K

needs_numba = pytest.mark.skipif(not K._HAVE_NUMBA, reason="numba not installed")


def shapes():
    return st.tuples(st.integers(1, 3), st.integers(1, 4).map(lambda v: 2 * v),
                     st.integers(1, 4).map(lambda v: 2 * v), st.integers(1, 5))


@needs_numba
@settings(max_examples=40, deadline=None)
@given(shapes(), st.integers(1, 3), st.integers(1, 2), st.integers(0, 1 << 30))
def test_im2col_col2im_agree(shape, k, stride, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape)
    n, h, w, c = shape
    if k > h or k > w:
        return
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    a = K.im2col_numpy(x, k, k, stride, ho, wo)
    b = K.im2col_numba(x, k, k, stride, ho, wo)
    assert np.array_equal(a, b)
    g = rng.standard_normal(a.shape)
    np.testing.assert_allclose(K.col2im_numpy(g, h, w, stride), K.col2im_numba(g, h, w, stride),
                               rtol=1e-13, atol=1e-13)


@needs_numba
@settings(max_examples=40, deadline=None)
@given(shapes(), st.integers(0, 1 << 30))
def test_maxpool_agree_including_ties(shape, seed):
    rng = np.random.default_rng(seed)
    x = rng.integers(0, 3, shape).astype(np.float64)  # plenty of ties
    oa, ia = K.maxpool2_numpy(x)
    ob, ib = K.maxpool2_numba(x)
    assert np.array_equal(oa, ob) and np.array_equal(ia, ib)
    g = rng.standard_normal(oa.shape)
    assert np.array_equal(K.maxpool2_backward_numpy(g, ia), K.maxpool2_backward_numba(g, ib))


def test_maxpool_tie_goes_to_first_slot():
    x = np.ones((1, 2, 2, 1))
    _, idx = K.maxpool2(x)
    assert idx[0, 0, 0, 0] == 0


@needs_numba
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_bn_kernels_agree(dtype):
    rng = np.random.default_rng(0)
    x2 = (rng.standard_normal((300, 6)) * 3 + 1).astype(dtype)
    ma, va = K.channel_moments_numpy(x2)
    mb, vb = K.channel_moments_numba(x2)
    tol = 1e-5 if dtype == np.float32 else 1e-12
    np.testing.assert_allclose(ma, mb, rtol=tol, atol=tol)
    np.testing.assert_allclose(va, vb, rtol=tol, atol=tol)
    np.testing.assert_allclose(va, x2.astype(np.float64).var(0), rtol=tol)
    g2 = rng.standard_normal((300, 6)).astype(dtype)
    gamma = rng.standard_normal(6).astype(dtype)
    invstd = (1 / np.sqrt(va + 1e-5)).astype(dtype)
    xhat = ((x2 - ma) * invstd).astype(dtype)
    for a, b in zip(K.bn_backward_numpy(g2, xhat, gamma, invstd), K.bn_backward_numba(g2, xhat, gamma, invstd)):
        assert a.dtype == b.dtype == dtype
        np.testing.assert_allclose(a, b, rtol=10 * tol, atol=10 * tol)


def test_env_flag_selects_numpy_backend():
    code = ("import numpy as np; from cgs import _kernels, network;"
            "m = network.CGSModel(3, base_channels=2, depth=2, dtype=np.float64);"
            "p, _ = m.forward(np.linspace(0, 1, 64).reshape(1, 8, 8, 1), 'eval');"
            "print(_kernels.backend()); print(repr(float(p.data.sum() * 1000 + p.data[0, 3, 5, 1])))")
    outs = {}
    for flag in ("0", "1"):
        env = dict(os.environ, CGS_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        outs[flag] = res.stdout.split()
    assert outs["0"][0] == "numpy"
    if K._HAVE_NUMBA:
        assert outs["1"][0] == "numba"
        assert float(outs["0"][1]) == pytest.approx(float(outs["1"][1]), rel=1e-12)
