"""Hot numeric kernels for per-position decoding work.

Every decode position of every branch runs softmax + entropy + top-2 over
the logit vector, so these three small kernels dominate runtime. They are
compiled with numba when available; set ``EDUPRM_NO_NUMBA=1`` to force the
pure-numpy fallbacks (same signatures, same results for the vector sizes
used here).

``benchmarks/bench_kernels.py`` compares the two paths.
"""

import math
import os

import numpy as np

USE_NUMBA = os.environ.get("EDUPRM_NO_NUMBA", "") not in ("1", "true", "yes")

if USE_NUMBA:
    try:
        from numba import njit
    except ImportError:
        USE_NUMBA = False


def _softmax_loop(logits, temperature):
    out = np.empty(logits.shape[0], dtype=np.float64)
    m = logits[0] / temperature
    for i in range(logits.shape[0]):
        v = logits[i] / temperature
        if v > m:
            m = v
    s = 0.0
    for i in range(logits.shape[0]):
        e = math.exp(logits[i] / temperature - m)
        out[i] = e
        s += e
    for i in range(logits.shape[0]):
        out[i] /= s
    return out


def _entropy_loop(probs, eps):
    # zero-probability terms contribute exactly 0; clamp the one-hot
    # case (-log(1 + eps) < 0) back to 0
    h = 0.0
    for i in range(probs.shape[0]):
        p = probs[i]
        if p > 0.0:
            h -= p * math.log(p + eps)
    if h < 0.0:
        h = 0.0
    return h


def _top2_loop(probs):
    # ties broken toward the lower token id
    best = 0
    second = -1
    for i in range(1, probs.shape[0]):
        if probs[i] > probs[best]:
            second = best
            best = i
        elif second < 0 or probs[i] > probs[second]:
            second = i
    return best, second


def _softmax_np(logits, temperature):
    z = logits / temperature
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def _entropy_np(probs, eps):
    nz = probs[probs > 0.0]
    h = -float(np.sum(nz * np.log(nz + eps)))
    return h if h > 0.0 else 0.0


def _top2_np(probs):
    # stable argsort keeps the lower-id winner on ties
    order = np.argsort(-probs, kind="stable")
    return int(order[0]), int(order[1])


if USE_NUMBA:
    softmax = njit(cache=True)(_softmax_loop)
    entropy = njit(cache=True)(_entropy_loop)
    top2 = njit(cache=True)(_top2_loop)
else:
    softmax = _softmax_np
    entropy = _entropy_np
    top2 = _top2_np


def warmup():
    """Trigger JIT compilation outside of timed sections."""
    v = np.array([0.0, 1.0, 2.0])
    p = softmax(v, 1.0)
    entropy(p, 1e-10)
    top2(p)
