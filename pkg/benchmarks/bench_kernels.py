"""Compare the compiled and numpy convolution backends on shapes the training
loop actually produces.

Run:  python3 benchmarks/bench_kernels.py [--repeats N]

Reports per-call wall time and throughput for each backend plus the observed
max absolute difference (the backends are deterministic individually but not
bit-identical to each other; differences stay near float32 rounding).
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from uaseg._engine import available_backends, get_backend, set_backend
from uaseg._engine import kernels

# (label, x shape, w shape, pad): encoder/decoder/head stages for batch sizes
# used by the labeled, unlabeled, and test paths.
CASES = [
    ("enc0 b4", (4, 1, 32, 32), (8, 1, 3, 3), 1),
    ("enc1 b4", (4, 8, 16, 16), (16, 8, 3, 3), 1),
    ("enc0 b10", (10, 1, 32, 32), (8, 1, 3, 3), 1),
    ("enc1 b10", (10, 8, 16, 16), (16, 8, 3, 3), 1),
    ("dec0 b10", (10, 16, 16, 16), (8, 16, 3, 3), 1),
    ("dec1 b10", (10, 8, 32, 32), (8, 8, 3, 3), 1),
    ("head b10", (10, 8, 32, 32), (4, 8, 1, 1), 0),
    ("enc1 b50", (50, 8, 16, 16), (16, 8, 3, 3), 1),
]


def _macs(x_shape, w_shape, pad) -> int:
    n, _, h, wdt = x_shape
    o, c, kh, kw = w_shape
    ho = h + 2 * pad - kh + 1
    wo = wdt + 2 * pad - kw + 1
    return n * o * c * kh * kw * ho * wo


def _time(fn, repeats: int) -> float:
    fn()  # warm-up
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=30)
    args = parser.parse_args()

    backends = available_backends()
    print(f"backends: {', '.join(backends)} (default: {get_backend()})")
    if len(backends) < 2:
        print("compiled backend not built; nothing to compare")
        return

    rng = np.random.default_rng(0)
    header = f"{'case':<12}{'direction':<10}" + "".join(f"{b:>12}" for b in backends) + f"{'ratio':>8}{'maxdiff':>12}"
    print(header)
    print("-" * len(header))
    totals = {b: 0.0 for b in backends}
    for label, xs, ws, pad in CASES:
        x = rng.standard_normal(xs, dtype=np.float32)
        w = rng.standard_normal(ws, dtype=np.float32)
        g = rng.standard_normal(
            (xs[0], ws[0], xs[2] + 2 * pad - ws[2] + 1, xs[3] + 2 * pad - ws[3] + 1),
            dtype=np.float32)
        macs = _macs(xs, ws, pad)
        for direction, fn in (
            ("forward", lambda: kernels.conv2d_forward(x, w, pad)),
            ("bwd-wgt", lambda: kernels.conv2d_backward_weight(g, x, pad)),
        ):
            times = {}
            outs = {}
            for b in backends:
                set_backend(b)
                times[b] = _time(fn, args.repeats)
                outs[b] = fn()
                totals[b] += times[b]
            diff = float(np.max(np.abs(outs[backends[0]].astype(np.float64)
                                       - outs[backends[1]].astype(np.float64))))
            cols = "".join(f"{times[b] * 1e3:>10.2f}ms" for b in backends)
            ratio = times[backends[1]] / times[backends[0]]
            gmacs = macs / times[backends[0]] / 1e9
            print(f"{label:<12}{direction:<10}{cols}{ratio:>8.2f}{diff:>12.2e}"
                  f"   [{gmacs:.2f} GMAC/s {backends[0]}]")
    print("-" * len(header))
    for b in backends:
        print(f"summed per-call time {b}: {totals[b] * 1e3:.2f} ms")
    set_backend(backends[0])


if __name__ == "__main__":
    main()
