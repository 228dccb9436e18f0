"""Per-module weight-decay assignment and the periodic scheduler.

The scheduler recomputes a decay plan every ``interval`` steps (including
step 0): it reads one scalar metric per scheduled module and maps the
metrics to decay coefficients. The linear map interpolates between
``s1*eta`` at the smallest metric and ``s2*eta`` at the largest:

    f(i) = eta * ((v_i - v_min) / (v_max - v_min) * (s2 - s1) + s1)

Sqrt and Log2 rescale eta by the module's transformed metric over the
mean transformed metric (mean decay stays exactly eta); the sigmoid-like
map squashes per-layer standardized gradient norms into (0, 2*eta).
Modules of kind ``other`` are never rescaled and always receive eta.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Optional, Union

from .spectral import FitMethod, SpectralReport
from .tensor_io import SCHEDULED_KINDS, ModuleId, ModuleKind


class ScheduleError(Exception):
    """Base class for assignment/scheduling failures."""


class NonpositiveMetricError(ScheduleError):
    """Sqrt assignment needs strictly positive metric values."""


class LogDomainError(ScheduleError):
    """Log2 assignment needs metric values strictly above 1."""


class MissingReportError(ScheduleError):
    """A scheduled module has no report at a recompute step."""


class ZeroWeightNormError(ScheduleError):
    """Global ratio decay is undefined for zero total weight norm."""


@dataclass(frozen=True)
class Uniform:
    """Every scheduled module receives eta."""


@dataclass(frozen=True)
class Linear:
    """Interpolate decay between s1*eta and s2*eta over the metric range."""

    s1: float = 0.67
    s2: float = 5.0

    def __post_init__(self) -> None:
        if not (0.0 < self.s1 <= self.s2):
            raise ValueError(f"require 0 < s1 <= s2, got s1={self.s1}, s2={self.s2}")


@dataclass(frozen=True)
class Sqrt:
    """decay_i = eta * sqrt(v_i) / mean_j sqrt(v_j)."""


@dataclass(frozen=True)
class Log2:
    """decay_i = eta * log2(v_i) / mean_j log2(v_j)."""


@dataclass(frozen=True)
class SigmoidLike:
    """decay_i = eta * 2 / (1 + exp(-beta * g~_i)), g~ standardized per layer."""

    beta: float = 4.0

    def __post_init__(self) -> None:
        if not self.beta > 0.0:
            raise ValueError(f"beta must be positive, got {self.beta}")


AssignFn = Union[Uniform, Linear, Sqrt, Log2, SigmoidLike]


class MetricKind(Enum):
    PL_ALPHA_HILL = "pl_alpha_hill"
    GRAD_NORM = "grad_norm"
    FROBENIUS_NORM = "frobenius_norm"
    SPECTRAL_NORM = "spectral_norm"


@dataclass(frozen=True)
class DecayPlan:
    """Decay coefficients in force for one scheduling interval.

    ``assignments`` covers exactly the scheduled module set; anything
    else (kind=other) falls back to the base eta via :meth:`decay_for`.
    Treat instances as immutable snapshots.
    """

    step: int
    eta: float
    assignments: Mapping[ModuleId, float]
    metric_values: Mapping[ModuleId, float] = field(default_factory=dict)

    def decay_for(self, mid: ModuleId) -> float:
        return self.assignments.get(mid, self.eta)


@dataclass(frozen=True)
class SchedulerConfig:
    eta: float
    assign: AssignFn = field(default_factory=Linear)
    metric: MetricKind = MetricKind.PL_ALPHA_HILL
    fit: FitMethod = FitMethod.MEDIAN
    interval: int = 500
    scheduled_kinds: frozenset[ModuleKind] = SCHEDULED_KINDS
    # Flip the metric ordering fed to Linear (norm metrics only; the
    # default orientation gives larger metric -> larger decay).
    invert_metric: bool = False
    # Compute the Linear min/max within each layer instead of model-wide.
    per_layer: bool = False

    def __post_init__(self) -> None:
        if self.eta < 0.0:
            raise ValueError(f"eta must be >= 0, got {self.eta}")
        if self.interval < 1:
            raise ValueError(f"interval must be >= 1, got {self.interval}")


def _uniform_plan(step: int, eta: float, modules: Iterable[ModuleId],
                  metrics: Optional[Mapping[ModuleId, float]] = None) -> DecayPlan:
    return DecayPlan(
        step=step,
        eta=eta,
        assignments={mid: eta for mid in modules},
        metric_values=dict(metrics) if metrics else {},
    )


def assign_linear(
    metrics: Mapping[ModuleId, float],
    eta: float,
    s1: float,
    s2: float,
    step: int = 0,
) -> DecayPlan:
    """Linear interpolation over the metric range; see module docstring.

    When every metric is equal the interpolation is undefined, so all
    modules receive the midpoint eta*(s1+s2)/2 (the continuous limit).
    Affine-invariant: rescaling the metrics by a>0 plus a shift leaves
    the plan unchanged.
    """
    if not metrics:
        raise ValueError("metrics must be nonempty")
    if not (0.0 < s1 <= s2):
        raise ValueError(f"require 0 < s1 <= s2, got s1={s1}, s2={s2}")
    values = metrics.values()
    vmin, vmax = min(values), max(values)
    if vmax == vmin:
        mid = eta * (s1 + s2) / 2.0
        assignments = {m: mid for m in metrics}
    else:
        span = vmax - vmin
        assignments = {
            m: eta * ((v - vmin) / span * (s2 - s1) + s1) for m, v in metrics.items()
        }
    return DecayPlan(step=step, eta=eta, assignments=assignments, metric_values=dict(metrics))


def assign_sqrt(metrics: Mapping[ModuleId, float], eta: float, step: int = 0) -> DecayPlan:
    """Square-root reweighting; mean assigned decay equals eta exactly."""
    if not metrics:
        raise ValueError("metrics must be nonempty")
    for m, v in metrics.items():
        if not v > 0.0:
            raise NonpositiveMetricError(f"{m.raw_name}: sqrt assignment needs v > 0, got {v}")
    weights = {m: math.sqrt(v) for m, v in metrics.items()}
    mean_w = sum(weights.values()) / len(weights)
    assignments = {m: eta * w / mean_w for m, w in weights.items()}
    return DecayPlan(step=step, eta=eta, assignments=assignments, metric_values=dict(metrics))


def assign_log2(metrics: Mapping[ModuleId, float], eta: float, step: int = 0) -> DecayPlan:
    """Log2 reweighting; requires every metric > 1 so weights stay positive."""
    if not metrics:
        raise ValueError("metrics must be nonempty")
    for m, v in metrics.items():
        if not v > 1.0:
            raise LogDomainError(f"{m.raw_name}: log2 assignment needs v > 1, got {v}")
    weights = {m: math.log2(v) for m, v in metrics.items()}
    mean_w = sum(weights.values()) / len(weights)
    assignments = {m: eta * w / mean_w for m, w in weights.items()}
    return DecayPlan(step=step, eta=eta, assignments=assignments, metric_values=dict(metrics))


def assign_sigmoid_like(
    grad_norms: Mapping[ModuleId, float],
    eta: float,
    beta: float = 4.0,
    step: int = 0,
) -> DecayPlan:
    """Per-layer standardized gradient norms squashed into (0, 2*eta).

    A module sitting at its layer's mean gradient norm receives exactly
    eta; a degenerate layer (zero std, or a single member) maps every
    member to eta.
    """
    if not grad_norms:
        raise ValueError("grad_norms must be nonempty")
    if not beta > 0.0:
        raise ValueError(f"beta must be positive, got {beta}")
    by_layer: dict[int, list[float]] = {}
    for m, g in grad_norms.items():
        by_layer.setdefault(m.layer, []).append(float(g))
    stats: dict[int, tuple[float, float]] = {}
    for layer, vals in by_layer.items():
        mu = sum(vals) / len(vals)
        sigma = math.sqrt(sum((v - mu) ** 2 for v in vals) / len(vals))
        stats[layer] = (mu, sigma)
    assignments = {}
    for m, g in grad_norms.items():
        mu, sigma = stats[m.layer]
        z = 0.0 if sigma == 0.0 else (float(g) - mu) / sigma
        assignments[m] = eta * 2.0 / (1.0 + math.exp(-beta * z))
    return DecayPlan(step=step, eta=eta, assignments=assignments, metric_values=dict(grad_norms))


def _extract_metric(reports: Mapping[ModuleId, SpectralReport], metric: MetricKind,
                    ) -> Optional[dict[ModuleId, float]]:
    """Metric values per module, or None when grad norms are not yet known."""
    if metric is MetricKind.PL_ALPHA_HILL:
        return {m: r.alpha.alpha for m, r in reports.items()}
    if metric is MetricKind.FROBENIUS_NORM:
        return {m: r.frobenius_norm for m, r in reports.items()}
    if metric is MetricKind.SPECTRAL_NORM:
        return {m: r.spectral_norm for m, r in reports.items()}
    if metric is MetricKind.GRAD_NORM:
        if any(r.grad_norm is None for r in reports.values()):
            return None
        return {m: float(r.grad_norm) for m, r in reports.items()}
    raise ValueError(f"unknown metric: {metric!r}")


def scheduler_step(
    t: int,
    cfg: SchedulerConfig,
    reports: Mapping[ModuleId, SpectralReport],
    previous: Optional[DecayPlan],
    expected_modules: Optional[Iterable[ModuleId]] = None,
) -> DecayPlan:
    """Recompute the plan when mod(t, interval) == 0, else return ``previous``.

    Step 0 always recomputes. Gradient-driven assignments (metric
    grad_norm, or the sigmoid-like map) fall back to a uniform plan when
    no gradient has been observed yet (the step-0 interval).
    """
    if t % cfg.interval != 0:
        if previous is None:
            raise ValueError(f"no previous plan to reuse at idle step {t}")
        return previous

    scheduled = {m: r for m, r in reports.items() if m.kind in cfg.scheduled_kinds}
    if expected_modules is not None:
        missing = [m for m in expected_modules if m.kind in cfg.scheduled_kinds and m not in scheduled]
        if missing:
            names = ", ".join(m.raw_name for m in missing)
            raise MissingReportError(f"step {t}: missing reports for scheduled modules: {names}")
    if not scheduled:
        raise MissingReportError(f"step {t}: no scheduled modules in reports")

    assign = cfg.assign
    if isinstance(assign, SigmoidLike):
        grads = _extract_metric(scheduled, MetricKind.GRAD_NORM)
        if grads is None:
            return _uniform_plan(t, cfg.eta, scheduled)
        return assign_sigmoid_like(grads, cfg.eta, assign.beta, step=t)

    metrics = _extract_metric(scheduled, cfg.metric)
    if metrics is None:
        return _uniform_plan(t, cfg.eta, scheduled)

    if isinstance(assign, Uniform):
        return _uniform_plan(t, cfg.eta, scheduled, metrics)
    if isinstance(assign, Linear):
        used = {m: -v for m, v in metrics.items()} if cfg.invert_metric else metrics
        if cfg.per_layer:
            assignments: dict[ModuleId, float] = {}
            layers = sorted({m.layer for m in used})
            for layer in layers:
                group = {m: v for m, v in used.items() if m.layer == layer}
                part = assign_linear(group, cfg.eta, assign.s1, assign.s2, step=t)
                assignments.update(part.assignments)
            return DecayPlan(step=t, eta=cfg.eta, assignments=assignments, metric_values=dict(metrics))
        plan = assign_linear(used, cfg.eta, assign.s1, assign.s2, step=t)
        return DecayPlan(step=t, eta=cfg.eta, assignments=dict(plan.assignments),
                         metric_values=dict(metrics))
    if isinstance(assign, Sqrt):
        return assign_sqrt(metrics, cfg.eta, step=t)
    if isinstance(assign, Log2):
        return assign_log2(metrics, cfg.eta, step=t)
    raise ValueError(f"unknown assignment function: {assign!r}")


class AwdBaseline:
    """Time-wise global decay: eta * ratio / running-mean(ratio).

    The ratio is total gradient norm over total weight norm; the running
    mean covers all ratios seen before the current call (initialized to
    the first ratio, so the first step returns exactly eta). Approximate
    baseline: the original formulation is not reproduced exactly.
    """

    def __init__(self) -> None:
        self._sum = 0.0
        self._count = 0

    def step(self, grad_norm_total: float, weight_norm_total: float, eta: float) -> float:
        if weight_norm_total <= 0.0:
            raise ZeroWeightNormError(f"total weight norm must be positive, got {weight_norm_total}")
        ratio = grad_norm_total / weight_norm_total
        mean = ratio if self._count == 0 else self._sum / self._count
        decay = eta if mean == 0.0 else eta * ratio / mean
        self._sum += ratio
        self._count += 1
        return decay


def awd_global(state: AwdBaseline, grad_norm_total: float, weight_norm_total: float,
               eta: float) -> float:
    """Functional wrapper over :class:`AwdBaseline.step`."""
    return state.step(grad_norm_total, weight_norm_total, eta)


# --- serialization -------------------------------------------------------

PLAN_CSV_HEADER = "step,module,metric_value,decay"


def plan_csv_rows(plan: DecayPlan, float_fmt: str = ".17g") -> list[str]:
    """Long-format CSV rows (step, module, metric_value, decay), sorted."""
    rows = []
    for mid in sorted(plan.assignments, key=ModuleId.sort_key):
        metric = plan.metric_values.get(mid)
        mtxt = "" if metric is None else format(metric, float_fmt)
        rows.append(
            f"{plan.step},{mid.raw_name},{mtxt},{format(plan.assignments[mid], float_fmt)}"
        )
    return rows


def plan_to_json_obj(plan: DecayPlan) -> dict:
    return {
        "step": plan.step,
        "eta": plan.eta,
        "assignments": {m.raw_name: v for m, v in sorted(plan.assignments.items(), key=lambda kv: kv[0].sort_key())},
        "metric_values": {m.raw_name: v for m, v in sorted(plan.metric_values.items(), key=lambda kv: kv[0].sort_key())},
    }


def parse_assign_fn(obj) -> AssignFn:
    """Build an assignment function from its JSON config form.

    Accepts either a bare kind string ("uniform") or an object like
    {"kind": "linear", "s1": 0.67, "s2": 5.0}.
    """
    if isinstance(obj, str):
        obj = {"kind": obj}
    if not isinstance(obj, dict) or "kind" not in obj:
        raise ValueError(f"assignment config must be a kind string or object with 'kind', got {obj!r}")
    kind = str(obj["kind"]).lower()
    if kind == "uniform":
        return Uniform()
    if kind == "linear":
        return Linear(s1=float(obj.get("s1", 0.67)), s2=float(obj.get("s2", 5.0)))
    if kind == "sqrt":
        return Sqrt()
    if kind == "log2":
        return Log2()
    if kind in ("sigmoid", "sigmoid_like", "sigmoidlike"):
        return SigmoidLike(beta=float(obj.get("beta", 4.0)))
    raise ValueError(f"unknown assignment kind: {kind!r}")


def assign_fn_to_json_obj(fn: AssignFn) -> dict:
    if isinstance(fn, Uniform):
        return {"kind": "uniform"}
    if isinstance(fn, Linear):
        return {"kind": "linear", "s1": fn.s1, "s2": fn.s2}
    if isinstance(fn, Sqrt):
        return {"kind": "sqrt"}
    if isinstance(fn, Log2):
        return {"kind": "log2"}
    if isinstance(fn, SigmoidLike):
        return {"kind": "sigmoid_like", "beta": fn.beta}
    raise ValueError(f"unknown assignment function: {fn!r}")
