import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kvpack import kernels

pytestmark = pytest.mark.skipif(kernels.NUMBA is None, reason="numba unavailable")

NP, NB = kernels.NUMPY, kernels.NUMBA


def _arr(rng, *shape):
    return rng.standard_normal(shape).astype(np.float32)


@settings(max_examples=25, deadline=None)
@given(t=st.integers(1, 40), seed=st.integers(0, 2**31))
def test_backends_bit_identical(t, seed):
    rng = np.random.default_rng(seed)
    x, w = _arr(rng, t, 16), _arr(rng, 16, 24)
    assert np.array_equal(NP.matmul(x, w), NB.matmul(x, w))
    g = _arr(rng, 16)
    assert np.array_equal(NP.rmsnorm(x, g, np.float32(1e-5)), NB.rmsnorm(x, g, np.float32(1e-5)))
    assert np.array_equal(NP.silu(x), NB.silu(x))
    q, k, v = _arr(rng, t, 2, 8), _arr(rng, t + 3, 2, 8), _arr(rng, t + 3, 2, 8)
    cos, sin = _arr(rng, t, 4), _arr(rng, t, 4)
    assert np.array_equal(NP.rope(q, cos, sin), NB.rope(q, cos, sin))
    s = np.float32(0.35)
    assert np.array_equal(NP.attention(q, k, v, 3, s), NB.attention(q, k, v, 3, s))


@pytest.mark.parametrize("be", [NP, NB], ids=["numpy", "numba"])
def test_matmul_row_independent_of_batch(be):
    rng = np.random.default_rng(1)
    x, w = _arr(rng, 9, 64), _arr(rng, 64, 32)
    full = be.matmul(x, w)
    for i in range(9):
        assert np.array_equal(be.matmul(x[i:i + 1], w)[0], full[i])


@pytest.mark.parametrize("be", [NP, NB], ids=["numpy", "numba"])
def test_matmul_close_to_float64(be):
    rng = np.random.default_rng(2)
    x, w = _arr(rng, 5, 64), _arr(rng, 64, 7)
    ref = x.astype(np.float64) @ w.astype(np.float64)
    np.testing.assert_allclose(be.matmul(x, w), ref, rtol=1e-5, atol=1e-5)


@pytest.mark.parametrize("be", [NP, NB], ids=["numpy", "numba"])
def test_attention_matches_softmax_reference(be):
    rng = np.random.default_rng(3)
    t, past, h, d = 4, 3, 2, 8
    q, k, v = _arr(rng, t, h, d), _arr(rng, past + t, h, d), _arr(rng, past + t, h, d)
    got = be.attention(q, k, v, past, np.float32(1 / np.sqrt(d)))
    qd, kd, vd = (a.astype(np.float64) for a in (q, k, v))
    for i in range(t):
        s = np.einsum("hd,shd->hs", qd[i], kd[:past + i + 1]) / np.sqrt(d)
        p = np.exp(s - s.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(got[i], np.einsum("hs,shd->hd", p, vd[:past + i + 1]),
                                   rtol=1e-5, atol=1e-6)


def test_backend_selection(monkeypatch):
    monkeypatch.setenv("KVPACK_BACKEND", "numpy")
    assert kernels.get_backend().name == "numpy"
    monkeypatch.setenv("KVPACK_BACKEND", "numba")
    assert kernels.get_backend().name == "numba"
    with pytest.raises(ValueError):
        kernels.get_backend("cuda")
