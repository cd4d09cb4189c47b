"""Benchmark the numba-compiled decode kernels against the numpy fallbacks.

Run:  python3 benchmarks/bench_kernels.py [--size 40] [--iters 200000]

The numbers answer one question: how much does JIT compilation buy on the
tiny per-position vectors these kernels actually see. With numba disabled
at import time (EDUPRM_NO_NUMBA=1) only the fallback column is populated.
"""

import argparse
import time

import numpy as np

from eduprm import _kernels
from eduprm._kernels import _entropy_np, _softmax_np, _top2_np


def time_call(fn, args_list, iters):
    fn(*args_list[0])  # warm any JIT outside the timed loop
    start = time.perf_counter()
    for i in range(iters):
        fn(*args_list[i % len(args_list)])
    return (time.perf_counter() - start) / iters


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--size", type=int, default=40,
                        help="logit vector length (vocabulary size)")
    parser.add_argument("--iters", type=int, default=200_000)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    logits = [rng.normal(0, 3, size=args.size) for _ in range(64)]
    probs = [_softmax_np(v, 1.0) for v in logits]

    cases = [
        ("softmax", _kernels.softmax, _softmax_np, [(v, 0.7) for v in logits]),
        ("entropy", _kernels.entropy, _entropy_np, [(p, 1e-10) for p in probs]),
        ("top2", _kernels.top2, _top2_np, [(p,) for p in probs]),
    ]

    backend = "numba" if _kernels.USE_NUMBA else "numpy (numba disabled)"
    print(f"vector size {args.size}, {args.iters} iterations, active backend: {backend}")
    print(f"{'kernel':<10} {'active (us)':>12} {'numpy (us)':>12} {'speedup':>9}")
    for name, active, fallback, case_args in cases:
        t_active = time_call(active, case_args, args.iters) * 1e6
        t_numpy = time_call(fallback, case_args, args.iters) * 1e6
        ratio = t_numpy / t_active if t_active > 0 else float("inf")
        print(f"{name:<10} {t_active:>12.3f} {t_numpy:>12.3f} {ratio:>8.1f}x")

    # sanity: both paths agree on the same inputs
    for v, p in zip(logits, probs):
        assert np.allclose(_kernels.softmax(v, 0.7), _softmax_np(v, 0.7), atol=1e-12)
        assert abs(_kernels.entropy(p, 1e-10) - _entropy_np(p, 1e-10)) < 1e-12
        assert _kernels.top2(p) == _top2_np(p)
    print("agreement check: OK")


if __name__ == "__main__":
    main()
