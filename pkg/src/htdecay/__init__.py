"""Module-wise weight decay scheduling from heavy-tailed spectral analysis."""

from .schedule import (
    AssignFn,
    AwdBaseline,
    DecayPlan,
    Linear,
    Log2,
    MetricKind,
    SchedulerConfig,
    SigmoidLike,
    Sqrt,
    Uniform,
    assign_linear,
    assign_log2,
    assign_sigmoid_like,
    assign_sqrt,
    awd_global,
    scheduler_step,
)
from .spectral import (
    Esd,
    FitMethod,
    HillFit,
    SpectralReport,
    analyze_module,
    compute_esd,
    fit_esd,
    frobenius_norm,
    hill_alpha,
    select_k,
    spectral_norm,
)
from .tensor_io import (
    SCHEDULED_KINDS,
    Checkpoint,
    ModuleId,
    ModuleKind,
    WeightMatrix,
    format_module_name,
    parse_module_name,
    read_checkpoint,
    write_checkpoint,
)

__version__ = "0.1.0"

__all__ = [
    "AssignFn",
    "AwdBaseline",
    "Checkpoint",
    "DecayPlan",
    "Esd",
    "FitMethod",
    "HillFit",
    "Linear",
    "Log2",
    "MetricKind",
    "ModuleId",
    "ModuleKind",
    "SCHEDULED_KINDS",
    "SchedulerConfig",
    "SigmoidLike",
    "SpectralReport",
    "Sqrt",
    "Uniform",
    "WeightMatrix",
    "analyze_module",
    "assign_linear",
    "assign_log2",
    "assign_sigmoid_like",
    "assign_sqrt",
    "awd_global",
    "compute_esd",
    "fit_esd",
    "format_module_name",
    "frobenius_norm",
    "hill_alpha",
    "parse_module_name",
    "read_checkpoint",
    "scheduler_step",
    "select_k",
    "spectral_norm",
    "write_checkpoint",
    "__version__",
]
