"""Hot numeric kernels with two interchangeable backends.

The trainer's inner loops that are not BLAS matmuls — causal softmax,
fused cross-entropy with its gradient, and the Adam parameter update —
are implemented twice: as plain vectorized numpy and as numba ``@njit``
loops that fuse the elementwise work and skip the masked upper triangle.

Backend selection happens once at import time via the ``HTSR_NUMBA``
environment variable: "0"/"false"/"numpy" forces the numpy fallback,
"1"/"true"/"numba" requires numba, and unset auto-detects. Both backends
compute the same quantities; reduction order may differ at the level of
float rounding, so results are deterministic per backend but not
bit-identical across backends. ``benchmarks/bench_kernels.py`` compares
their throughput.
"""

from __future__ import annotations

import math
import os

import numpy as np


def _pick_backend() -> str:
    flag = os.environ.get("HTSR_NUMBA", "").strip().lower()
    if flag in {"0", "false", "off", "numpy"}:
        return "numpy"
    if flag in {"1", "true", "on", "numba"}:
        import numba  # noqa: F401  (fail loudly when forced)

        return "numba"
    try:
        import numba  # noqa: F401

        return "numba"
    except ImportError:
        return "numpy"


BACKEND = _pick_backend()


# --- numpy implementations ------------------------------------------------

def softmax_causal_np(scores: np.ndarray) -> np.ndarray:
    """Row-wise softmax of (R, T, T) scores with the upper triangle masked."""
    T = scores.shape[-1]
    mask = np.triu(np.ones((T, T), dtype=bool), k=1)
    s = np.where(mask, -np.inf, scores)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy_np(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Summed token NLL and its gradient (softmax minus one-hot).

    The gradient is NOT divided by the token count; callers scale.
    """
    n = logits.shape[0]
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    z = e.sum(axis=1, keepdims=True)
    p = e / z
    idx = np.arange(n)
    loss = float(np.sum(m[:, 0] + np.log(z[:, 0]) - logits[idx, targets]))
    grad = p
    grad[idx, targets] -= 1.0
    return loss, grad


def adam_update_np(
    w: np.ndarray,
    g: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    step: int,
    lr: float,
    beta1: float,
    beta2: float,
    eps: float,
    decay: float,
    decoupled: bool,
) -> None:
    """In-place Adam step on flat arrays with coupled or decoupled decay."""
    if not decoupled and decay != 0.0:
        g = g + decay * w
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    bc1 = 1.0 - beta1 ** step
    bc2 = 1.0 - beta2 ** step
    w -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    if decoupled and decay != 0.0:
        w -= lr * decay * w


# --- numba implementations -------------------------------------------------

if BACKEND == "numba":
    from numba import njit

    @njit(cache=True)
    def _softmax_causal_nb(scores, out):
        R, T, _ = scores.shape
        for r in range(R):
            for i in range(T):
                hi = scores[r, i, 0]
                for j in range(1, i + 1):
                    if scores[r, i, j] > hi:
                        hi = scores[r, i, j]
                total = 0.0
                for j in range(i + 1):
                    e = math.exp(scores[r, i, j] - hi)
                    out[r, i, j] = e
                    total += e
                inv = 1.0 / total
                for j in range(i + 1):
                    out[r, i, j] *= inv
                for j in range(i + 1, T):
                    out[r, i, j] = 0.0

    @njit(cache=True)
    def _cross_entropy_nb(logits, targets, grad):
        n, vocab = logits.shape
        loss = 0.0
        for i in range(n):
            hi = logits[i, 0]
            for j in range(1, vocab):
                if logits[i, j] > hi:
                    hi = logits[i, j]
            total = 0.0
            for j in range(vocab):
                e = math.exp(logits[i, j] - hi)
                grad[i, j] = e
                total += e
            inv = 1.0 / total
            for j in range(vocab):
                grad[i, j] *= inv
            t = targets[i]
            loss += hi + math.log(total) - logits[i, t]
            grad[i, t] -= 1.0
        return loss

    @njit(cache=True)
    def _adam_update_nb(w, g, m, v, step, lr, beta1, beta2, eps, decay, decoupled):
        bc1 = 1.0 - beta1 ** step
        bc2 = 1.0 - beta2 ** step
        shrink = 1.0 - lr * decay
        for i in range(w.size):
            gi = g[i]
            if not decoupled and decay != 0.0:
                gi += decay * w[i]
            m[i] = beta1 * m[i] + (1.0 - beta1) * gi
            v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi
            wi = w[i] - lr * (m[i] / bc1) / (math.sqrt(v[i] / bc2) + eps)
            if decoupled and decay != 0.0:
                wi *= shrink
            w[i] = wi

    def softmax_causal_nb(scores: np.ndarray) -> np.ndarray:
        out = np.empty_like(scores)
        _softmax_causal_nb(scores, out)
        return out

    def cross_entropy_nb(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
        grad = np.empty_like(logits)
        loss = _cross_entropy_nb(logits, targets, grad)
        return float(loss), grad

    def adam_update_nb(w, g, m, v, step, lr, beta1, beta2, eps, decay, decoupled) -> None:
        _adam_update_nb(w, g, m, v, step, lr, beta1, beta2, eps, decay, decoupled)

    softmax_causal = softmax_causal_nb
    cross_entropy = cross_entropy_nb
    adam_update = adam_update_nb
else:
    softmax_causal = softmax_causal_np
    cross_entropy = cross_entropy_np
    adam_update = adam_update_np
