"""Numeric kernels for the forward pass.

Two implementations share one contract: every output element is produced by
a strictly left-to-right float32 reduction, starting from the first term, with
no fused multiply-add.  Because the per-element operation sequence never
depends on how many rows are in the batch, a row computed alone is
bit-identical to the same row computed inside a longer sequence.

The numba kernels are explicit loops.  The numpy kernels get the same order
from ``np.add.accumulate`` (which is defined recursively, unlike
``np.add.reduce`` which is pairwise).  Transcendentals are evaluated in
float64 and rounded once to float32.

``KVPACK_BACKEND=numpy`` forces the pure-numpy path; the default is numba
when it imports.
"""
from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np

F32 = np.float32

# chunk sizes bound the temporaries of the numpy path
_ROW_CHUNK = 128
_QUERY_CHUNK = 64


# --------------------------------------------------------------------------
# numpy path


def matmul_np(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    m = x.shape[0]
    out = np.empty((m, w.shape[1]), dtype=F32)
    for lo in range(0, m, _ROW_CHUNK):
        xs = x[lo:lo + _ROW_CHUNK]
        prod = xs[:, :, None] * w[None, :, :]
        out[lo:lo + _ROW_CHUNK] = np.add.accumulate(prod, axis=1)[:, -1, :]
    return out


def rmsnorm_np(x: np.ndarray, gain: np.ndarray, eps: np.float32) -> np.ndarray:
    d = x.shape[1]
    ss = np.add.accumulate(x * x, axis=1)[:, -1]
    inv = F32(1.0) / np.sqrt(ss / F32(d) + eps)
    return (x * inv[:, None]) * gain[None, :]


def rope_np(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    # x: (T, H, D); cos/sin: (T, D/2); pairs are (2i, 2i+1)
    even = x[:, :, 0::2]
    odd = x[:, :, 1::2]
    c = cos[:, None, :]
    s = sin[:, None, :]
    out = np.empty_like(x)
    out[:, :, 0::2] = even * c - odd * s
    out[:, :, 1::2] = even * s + odd * c
    return out


def attention_np(q: np.ndarray, k: np.ndarray, v: np.ndarray, n_past: int,
                 scale: np.float32) -> np.ndarray:
    """Causal attention; query t sees cache rows 0..n_past+t inclusive."""
    t_new, n_heads, d_head = q.shape
    s_len = k.shape[0]
    kh = k.transpose(1, 0, 2)
    vh = v.transpose(1, 0, 2)
    out = np.empty_like(q)
    cols = np.arange(s_len)
    for lo in range(0, t_new, _QUERY_CHUNK):
        qs = q[lo:lo + _QUERY_CHUNK]
        rows = np.arange(lo, lo + qs.shape[0])
        # keys beyond the last visible one are dropped for the whole chunk
        hi = n_past + rows[-1] + 1
        valid = (cols[None, :hi] <= (n_past + rows)[:, None])[:, None, :]
        prod = qs[:, :, None, :] * kh[None, :, :hi, :]
        scores = np.add.accumulate(prod, axis=-1)[..., -1] * scale
        peak = np.where(valid, scores, F32(-np.inf)).max(axis=-1, keepdims=True)
        e = np.exp((scores - peak).astype(np.float64)).astype(F32)
        e = np.where(valid, e, F32(0.0))
        denom = np.add.accumulate(e, axis=-1)[..., -1:]
        p = e / denom
        wv = p[..., None] * vh[None, :, :hi, :]
        out[lo:lo + qs.shape[0]] = np.add.accumulate(wv, axis=2)[:, :, -1, :]
    return out


def silu_np(x: np.ndarray) -> np.ndarray:
    x64 = x.astype(np.float64)
    return (x64 / (1.0 + np.exp(-x64))).astype(F32)


NUMPY = SimpleNamespace(
    name="numpy",
    matmul=matmul_np,
    rmsnorm=rmsnorm_np,
    rope=rope_np,
    attention=attention_np,
    silu=silu_np,
)


# --------------------------------------------------------------------------
# numba path

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is a declared dependency
    njit = None


def _build_numba():
    @njit(cache=True)
    def matmul_nb(x, w):
        m, kdim = x.shape
        n = w.shape[1]
        out = np.empty((m, n), dtype=np.float32)
        for i in range(m):
            for j in range(n):
                acc = x[i, 0] * w[0, j]
                for kk in range(1, kdim):
                    acc += x[i, kk] * w[kk, j]
                out[i, j] = acc
        return out

    @njit(cache=True)
    def rmsnorm_nb(x, gain, eps):
        m, d = x.shape
        out = np.empty_like(x)
        fd = np.float32(d)
        one = np.float32(1.0)
        for i in range(m):
            ss = x[i, 0] * x[i, 0]
            for j in range(1, d):
                ss += x[i, j] * x[i, j]
            inv = one / np.sqrt(ss / fd + eps)
            for j in range(d):
                out[i, j] = (x[i, j] * inv) * gain[j]
        return out

    @njit(cache=True)
    def rope_nb(x, cos, sin):
        t_len, n_heads, d = x.shape
        out = np.empty_like(x)
        for t in range(t_len):
            for h in range(n_heads):
                for i in range(d // 2):
                    a = x[t, h, 2 * i]
                    b = x[t, h, 2 * i + 1]
                    c = cos[t, i]
                    s = sin[t, i]
                    out[t, h, 2 * i] = a * c - b * s
                    out[t, h, 2 * i + 1] = a * s + b * c
        return out

    @njit(cache=True)
    def attention_nb(q, k, v, n_past, scale):
        t_new, n_heads, d = q.shape
        out = np.empty_like(q)
        scores = np.empty(k.shape[0], dtype=np.float32)
        for t in range(t_new):
            last = n_past + t
            for h in range(n_heads):
                peak = np.float32(-np.inf)
                for j in range(last + 1):
                    acc = q[t, h, 0] * k[j, h, 0]
                    for dd in range(1, d):
                        acc += q[t, h, dd] * k[j, h, dd]
                    acc = acc * scale
                    scores[j] = acc
                    if acc > peak:
                        peak = acc
                for j in range(last + 1):
                    scores[j] = np.float32(np.exp(np.float64(scores[j] - peak)))
                denom = scores[0]
                for j in range(1, last + 1):
                    denom += scores[j]
                for j in range(last + 1):
                    scores[j] = scores[j] / denom
                for dd in range(d):
                    acc = scores[0] * v[0, h, dd]
                    for j in range(1, last + 1):
                        acc += scores[j] * v[j, h, dd]
                    out[t, h, dd] = acc
        return out

    @njit(cache=True)
    def silu_nb(x):
        m, n = x.shape
        out = np.empty_like(x)
        for i in range(m):
            for j in range(n):
                z = np.float64(x[i, j])
                out[i, j] = np.float32(z / (1.0 + np.exp(-z)))
        return out

    return SimpleNamespace(
        name="numba",
        matmul=matmul_nb,
        rmsnorm=rmsnorm_nb,
        rope=rope_nb,
        attention=attention_nb,
        silu=silu_nb,
    )


NUMBA = _build_numba() if njit is not None else None

BACKENDS = {"numpy": NUMPY}
if NUMBA is not None:
    BACKENDS["numba"] = NUMBA


def get_backend(name: str | None = None) -> SimpleNamespace:
    """Resolve a kernel backend by name, falling back to ``KVPACK_BACKEND``."""
    if name is None:
        name = os.environ.get("KVPACK_BACKEND", "numba" if NUMBA is not None else "numpy")
    name = name.strip().lower()
    if name not in BACKENDS:
        raise ValueError(f"unknown or unavailable backend {name!r}; have {sorted(BACKENDS)}")
    return BACKENDS[name]
