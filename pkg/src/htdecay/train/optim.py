"""Adam/AdamW with per-module decay, global-norm clipping, cosine LR.

Decay coupling follows the optimizer mode: ``adam`` adds ``decay * w``
to the (already clipped) gradient before the moment update, ``adamw``
shrinks the weights after the Adam update. The decay coefficient for
each parameter comes from the active :class:`~htdecay.schedule.DecayPlan`
(modules of kind=other fall back to the plan's base eta).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .. import kernels
from ..schedule import DecayPlan
from ..tensor_io import ModuleId

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8
COSINE_FLOOR = 0.1  # final LR as a fraction of the peak


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = BETA1
    beta2: float = BETA2
    eps: float = EPS


def init_optimizer(params: dict[str, np.ndarray]) -> OptimizerState:
    return OptimizerState(
        m={k: np.zeros_like(w) for k, w in params.items()},
        v={k: np.zeros_like(w) for k, w in params.items()},
    )


def lr_at(t: int, total_steps: int, warmup_fraction: float, lr_peak: float) -> float:
    """Linear warmup to the peak, then cosine down to COSINE_FLOOR * peak."""
    if not 0 <= t <= total_steps:
        raise ValueError(f"step {t} outside [0, {total_steps}]")
    warm = math.ceil(warmup_fraction * total_steps)
    if warm > 0 and t < warm:
        return lr_peak * t / warm
    lr_min = COSINE_FLOOR * lr_peak
    if total_steps == warm:
        return lr_peak
    progress = (t - warm) / (total_steps - warm)
    return lr_min + (lr_peak - lr_min) * 0.5 * (1.0 + math.cos(math.pi * progress))


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    """Euclidean norm over all gradients, reduced in sorted-name order."""
    total = 0.0
    for name in sorted(grads):
        g = grads[name]
        total += float(np.dot(g.ravel(), g.ravel()))
    return math.sqrt(total)


def optimizer_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr_t: float,
    plan: DecayPlan,
    mode: str,
    clip: float,
    module_ids: dict[str, ModuleId],
) -> float:
    """One in-place update; returns the pre-clip global gradient norm."""
    if mode not in ("adam", "adamw"):
        raise ValueError(f"optimizer mode must be 'adam' or 'adamw', got {mode!r}")
    for name, w in params.items():
        if name not in grads:
            raise ValueError(f"missing gradient for parameter {name!r}")
        if grads[name].shape != w.shape:
            raise ValueError(
                f"{name}: gradient shape {grads[name].shape} != weight shape {w.shape}"
            )
    gnorm = global_grad_norm(grads)
    scale = clip / gnorm if gnorm > clip else 1.0
    decoupled = mode == "adamw"
    state.step += 1
    for name in sorted(params):
        w = params[name]
        g = grads[name] if scale == 1.0 else grads[name] * scale
        decay = plan.decay_for(module_ids[name])
        kernels.adam_update(
            w.ravel(), np.ascontiguousarray(g).ravel(),
            state.m[name].ravel(), state.v[name].ravel(),
            state.step, lr_t, state.beta1, state.beta2, state.eps,
            decay, decoupled,
        )
    return gnorm
