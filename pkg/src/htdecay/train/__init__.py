from .data import load_corpus, sample_batch, synthetic_corpus
from .loop import (
    DivergenceError,
    EmptyHeldOutError,
    RunLog,
    StepRecord,
    TrainConfig,
    analyze_scheduled,
    evaluate,
    train_run,
)
from .model import Model, ModelConfig, build_model, forward, loss_and_grads
from .optim import OptimizerState, global_grad_norm, init_optimizer, lr_at, optimizer_step

__all__ = [
    "DivergenceError",
    "EmptyHeldOutError",
    "Model",
    "ModelConfig",
    "OptimizerState",
    "RunLog",
    "StepRecord",
    "TrainConfig",
    "analyze_scheduled",
    "build_model",
    "evaluate",
    "forward",
    "global_grad_norm",
    "init_optimizer",
    "load_corpus",
    "loss_and_grads",
    "lr_at",
    "optimizer_step",
    "sample_batch",
    "synthetic_corpus",
    "train_run",
]
