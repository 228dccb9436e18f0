"""The training loop: periodic spectral analysis, per-module decay, Adam.

Every ``interval`` steps (including step 0) all scheduled weight
matrices are analyzed and the decay plan is recomputed; between
recomputes the previous plan stays in force. Optimizer steps run for
t = 0 .. steps-1; if ``steps`` itself lands on the recompute cadence a
final analysis of the trained weights is appended so the logged history
covers the full closed interval, matching the scheduling loop's
``for t = 0 to T`` shape.

Runs are bit-reproducible for a fixed seed on one thread: batches are
drawn from rng((seed, t)), all reductions have fixed order, and the
spectral analyses are pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .. import kernels
from ..schedule import DecayPlan, SchedulerConfig, MetricKind, SigmoidLike, scheduler_step
from ..spectral import FitMethod, SpectralReport, analyze_module
from ..tensor_io import ModuleId, WeightMatrix
from .data import sample_batch
from .model import Model, ModelConfig, build_model, forward, loss_and_grads
from .optim import init_optimizer, lr_at, optimizer_step


class DivergenceError(Exception):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss


class EmptyHeldOutError(ValueError):
    """The validation split yields no full evaluation window."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float
    steps: int
    scheduler: SchedulerConfig
    warmup_fraction: float = 0.1
    batch: int = 8
    seq_len: int = 64
    clip: float = 1.0
    seed: int = 0
    optimizer: str = "adam"
    eval_windows: int = 64

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ValueError("warmup_fraction must lie in [0, 1]")
        if self.warmup_fraction > 0 and self.warmup_fraction * self.steps < 1:
            raise ValueError("warmup enabled but warmup_fraction * steps < 1")
        if self.batch < 1 or self.seq_len < 1:
            raise ValueError("batch and seq_len must be positive")
        if self.clip <= 0:
            raise ValueError("clip must be positive")
        if self.optimizer not in ("adam", "adamw"):
            raise ValueError(f"optimizer must be 'adam' or 'adamw', got {self.optimizer!r}")


@dataclass
class StepRecord:
    step: int
    loss: float
    lr: float
    grad_norm: float


@dataclass
class RunLog:
    steps: list[StepRecord] = field(default_factory=list)
    plans: list[DecayPlan] = field(default_factory=list)
    reports: list[tuple[int, dict[ModuleId, SpectralReport]]] = field(default_factory=list)
    final_val_loss: Optional[float] = None
    perplexity: Optional[float] = None
    abort_step: Optional[int] = None


def _needs_grad_metric(cfg: SchedulerConfig) -> bool:
    return cfg.metric is MetricKind.GRAD_NORM or isinstance(cfg.assign, SigmoidLike)


def analyze_scheduled(
    model: Model,
    prev_grads: Optional[dict[str, np.ndarray]],
    fit: FitMethod,
    with_grads: bool,
) -> dict[ModuleId, SpectralReport]:
    """Spectral reports for the seven projection kinds, in fixed order."""
    reports: dict[ModuleId, SpectralReport] = {}
    for mid, values in model.scheduled_matrices().items():
        w = WeightMatrix(id=mid, values=values)
        grad = None
        if with_grads and prev_grads is not None and mid.raw_name in prev_grads:
            grad = WeightMatrix(id=mid, values=prev_grads[mid.raw_name])
        reports[mid] = analyze_module(w, grad=grad, method=fit)
    return reports


def evaluate(
    model: Model, held_out: np.ndarray, seq_len: int, batch: int, max_windows: int = 64
) -> tuple[float, float]:
    """Mean token cross-entropy and perplexity over deterministic windows.

    Windows are contiguous, non-overlapping spans of the held-out bytes,
    capped at ``max_windows``.
    """
    n_avail = (len(held_out) - 1) // seq_len
    n = min(n_avail, max_windows)
    if n < 1:
        raise EmptyHeldOutError(
            f"held-out split of {len(held_out)} bytes has no window of {seq_len + 1}"
        )
    total_loss = 0.0
    total_tok = 0
    vocab = model.cfg.vocab
    for lo in range(0, n, batch):
        rows = range(lo, min(lo + batch, n))
        windows = np.stack([held_out[i * seq_len : i * seq_len + seq_len + 1] for i in rows])
        windows = windows.astype(np.int64)
        x, y = windows[:, :-1], windows[:, 1:]
        logits = forward(model, x)
        n_tok = x.shape[0] * x.shape[1]
        loss_sum, _ = kernels.cross_entropy(
            np.ascontiguousarray(logits.reshape(n_tok, vocab)),
            np.ascontiguousarray(y.reshape(n_tok)),
        )
        total_loss += loss_sum
        total_tok += n_tok
    ce = total_loss / total_tok
    return ce, math.exp(ce) if ce < 700.0 else math.inf


def train_run(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    corpus: np.ndarray,
    split_offset: int,
) -> tuple[Model, RunLog]:
    """Full training run; raises :class:`DivergenceError` on non-finite loss."""
    if not 0 < split_offset < len(corpus):
        raise ValueError(f"split_offset {split_offset} outside corpus of {len(corpus)} bytes")
    train_bytes = corpus[:split_offset]
    val_bytes = corpus[split_offset:]

    model = build_model(model_cfg, train_cfg.seed)
    module_ids = model.module_ids()
    scheduled = list(model.scheduled_matrices().keys())
    state = init_optimizer(model.params)
    sched = train_cfg.scheduler
    want_grads = _needs_grad_metric(sched)

    log = RunLog()
    plan: Optional[DecayPlan] = None
    prev_grads: Optional[dict[str, np.ndarray]] = None

    for t in range(train_cfg.steps):
        if t % sched.interval == 0:
            reports = analyze_scheduled(model, prev_grads, sched.fit, want_grads)
            plan = scheduler_step(t, sched, reports, plan, expected_modules=scheduled)
            log.reports.append((t, reports))
            log.plans.append(plan)
        x, y = sample_batch(train_bytes, train_cfg.seed, t, train_cfg.batch, train_cfg.seq_len)
        loss, grads = loss_and_grads(model, x, y)
        if not math.isfinite(loss):
            log.abort_step = t
            raise DivergenceError(t, loss)
        lr_t = lr_at(t, train_cfg.steps, train_cfg.warmup_fraction, train_cfg.lr)
        gnorm = optimizer_step(
            model.params, grads, state, lr_t, plan, train_cfg.optimizer,
            train_cfg.clip, module_ids,
        )
        log.steps.append(StepRecord(step=t, loss=loss, lr=lr_t, grad_norm=gnorm))
        prev_grads = grads

    if train_cfg.steps % sched.interval == 0:
        t = train_cfg.steps
        reports = analyze_scheduled(model, prev_grads, sched.fit, want_grads)
        plan = scheduler_step(t, sched, reports, plan, expected_modules=scheduled)
        log.reports.append((t, reports))
        log.plans.append(plan)

    ce, ppl = evaluate(
        model, val_bytes, train_cfg.seq_len, train_cfg.batch, train_cfg.eval_windows
    )
    log.final_val_loss = ce
    log.perplexity = ppl
    return model, log
