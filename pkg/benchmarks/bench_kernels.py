"""Time the numba kernels against the pure-numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--tokens 256]

Each kernel runs once untimed (numba compiles on first call), then the best
of ``--repeat`` runs is reported.  Outputs of the two backends are checked
for bit equality along the way.
"""
import argparse
import time

import numpy as np

from kvpack import kernels
from kvpack.model import Model


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases(t, d=64, h=4):
    rng = np.random.default_rng(0)
    dh = d // h
    x = rng.standard_normal((t, d)).astype(np.float32)
    w = rng.standard_normal((d, 4 * d)).astype(np.float32)
    gain = np.ones(d, dtype=np.float32)
    q = rng.standard_normal((t, h, dh)).astype(np.float32)
    k = rng.standard_normal((t, h, dh)).astype(np.float32)
    v = rng.standard_normal((t, h, dh)).astype(np.float32)
    ang = np.arange(t)[:, None] * 10000.0 ** (-np.arange(dh // 2) * 2.0 / dh)
    cos, sin = np.cos(ang).astype(np.float32), np.sin(ang).astype(np.float32)
    scale = np.float32(1 / np.sqrt(dh))
    return {
        "matmul": lambda b: b.matmul(x, w),
        "rmsnorm": lambda b: b.rmsnorm(x, gain, np.float32(1e-5)),
        "rope": lambda b: b.rope(q, cos, sin),
        "attention": lambda b: b.attention(q, k, v, 0, scale),
        "silu": lambda b: b.silu(x),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--tokens", type=int, default=256)
    args = ap.parse_args()
    if kernels.NUMBA is None:
        raise SystemExit("numba is not importable; nothing to compare")

    print(f"{'kernel':<12}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}  equal")
    for name, fn in kernel_cases(args.tokens).items():
        a, b = fn(kernels.NUMPY), fn(kernels.NUMBA)
        tn = best_of(lambda: fn(kernels.NUMPY), args.repeat)
        tb = best_of(lambda: fn(kernels.NUMBA), args.repeat)
        print(f"{name:<12}{tn * 1e3:>12.3f}{tb * 1e3:>12.3f}{tn / tb:>9.1f}x  {np.array_equal(a, b)}")

    prompt = [32 + i % 200 for i in range(args.tokens)]
    rows = []
    for backend in ("numpy", "numba"):
        m = Model(backend=backend)
        rows.append((backend, best_of(lambda: m.forward_pass(prompt), args.repeat),
                     best_of(lambda: m.generate_greedy(prompt[:32], max_new=32, stop_at_eos=False),
                             max(1, args.repeat // 2))))
    print()
    print(f"{'backend':<10}{'prefill ms':>14}{'decode 32 ms':>15}")
    for backend, pre, dec in rows:
        print(f"{backend:<10}{pre * 1e3:>14.2f}{dec * 1e3:>15.2f}")


if __name__ == "__main__":
    main()
