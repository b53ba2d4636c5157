"""Knowledge transfer between heterogeneous models through their low-rank weight factors."""

from .adapters import KtlStack, LpkaAdapter, MlpAdapter, build_stack, ktl_apply, lpka_forward, mlp_forward
from .autodiff import GradTape, Tensor, grad_check
from .codec import ContractError, LowRankParam, load_checkpoint, reencode_truncated_svd, save_checkpoint
from .config import ExperimentConfig, emit_config, parse_config, preset
from .engine import TransferPair, TransferPlan, adapter_update, run_training, should_transfer, strip_adapter, train_vanilla
from .harness import emit_curves, run_experiment, sweep
from .zoo import ConfigError, build_model

__all__ = [
    "ConfigError", "ContractError", "ExperimentConfig", "GradTape", "KtlStack", "LowRankParam", "LpkaAdapter",
    "MlpAdapter", "Tensor", "TransferPair", "TransferPlan", "adapter_update", "build_model", "build_stack",
    "emit_config", "emit_curves", "grad_check", "ktl_apply", "load_checkpoint", "lpka_forward", "mlp_forward",
    "parse_config", "preset", "reencode_truncated_svd", "run_experiment", "run_training", "save_checkpoint",
    "should_transfer", "strip_adapter", "sweep", "train_vanilla",
]
