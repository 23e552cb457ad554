#!/usr/bin/env python3
"""Benchmark the compiled kernel extension against the pure numpy fallback.

Run as a script:

    python3 benchmarks/bench_kernels.py [--repeats 5]

Both backends are imported directly (the dispatch in ``faudit.kernels``
selects one at import time; here we want both side by side), checked for
agreement, then timed on audit-shaped workloads: batched 32x32 convolution
forward/backward, max pooling, and heatmap upsampling.
"""

import argparse
import time

import numpy as np

from faudit.kernels import _pykernels

try:
    from faudit.kernels import _cykernels
except ImportError:
    _cykernels = None


def _workloads(rng):
    x = rng.standard_normal((32, 16, 32, 32))
    k = rng.standard_normal((32, 16, 3, 3))
    gy = rng.standard_normal((32, 32, 32, 32))
    pooled, idx = _pykernels.maxpool2d_forward(gy, 2, 2)
    gpool = rng.standard_normal(pooled.shape)
    heat = rng.standard_normal((8, 8))
    return [
        ("conv2d_forward [32,16,32,32]*[32,16,3,3]",
         lambda impl: impl.conv2d_forward(x, k, 1, 1)),
        ("conv2d_backward_input",
         lambda impl: impl.conv2d_backward_input(gy, k, 1, 1, 32, 32)),
        ("conv2d_backward_kernel",
         lambda impl: impl.conv2d_backward_kernel(gy, x, 3, 3, 1, 1)),
        ("maxpool2d_forward [32,32,32,32]",
         lambda impl: impl.maxpool2d_forward(gy, 2, 2)),
        ("maxpool2d_backward",
         lambda impl: impl.maxpool2d_backward(gpool, idx, 32, 32)),
        ("bilinear_resize 8x8 -> 32x32 x4000",
         lambda impl: [impl.bilinear_resize(heat, 32, 32) for _ in range(4000)]),
    ]


def _first_array(result):
    if isinstance(result, tuple):
        return result[0]
    if isinstance(result, list):
        return result[0]
    return result


def _time(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    if _cykernels is None:
        print("compiled extension not importable; nothing to compare")
        return 1

    rng = np.random.default_rng(0)
    rows = []
    for name, call in _workloads(rng):
        pure_out = _first_array(call(_pykernels))
        comp_out = _first_array(call(_cykernels))
        worst = float(np.max(np.abs(np.asarray(pure_out) - np.asarray(comp_out))))
        t_pure = _time(lambda: call(_pykernels), args.repeats)
        t_comp = _time(lambda: call(_cykernels), args.repeats)
        rows.append((name, t_pure, t_comp, t_pure / t_comp, worst))

    header = f"{'kernel':<44} {'pure (s)':>10} {'compiled (s)':>13} {'speedup':>8} {'max |diff|':>11}"
    print(header)
    print("-" * len(header))
    for name, t_pure, t_comp, speedup, worst in rows:
        print(f"{name:<44} {t_pure:>10.4f} {t_comp:>13.4f} {speedup:>7.1f}x {worst:>11.2e}")
    if any(worst > 1e-9 for *_, worst in rows):
        print("WARNING: backends disagree beyond 1e-9")
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
