"""Dilated-window 3D transformer segmentation (D-Former) on a small numpy autodiff engine."""

from .analyzer import ComplexityReport, analyze, bench_attention, count_flops, count_params
from .attention import (AttentionParams, GridDims, UnitDims, UnitPartition, attention_complexity,
                        gs_msa, ls_msa, partition_global, partition_local, unit_attention)
from .config import ModelConfig, RunConfig, load_config, parse_config
from .losses import combined_loss, dice_score
from .model import Model, build_model, forward
from .tensor import FlopCounter, Tensor, backward, finite_diff_oracle, no_grad

__version__ = "0.1.0"

__all__ = [
    "AttentionParams", "ComplexityReport", "FlopCounter", "GridDims", "Model", "ModelConfig",
    "RunConfig", "Tensor", "UnitDims", "UnitPartition", "analyze", "attention_complexity",
    "backward", "bench_attention", "build_model", "combined_loss", "count_flops", "count_params",
    "dice_score", "finite_diff_oracle", "forward", "gs_msa", "load_config", "ls_msa", "no_grad",
    "parse_config", "partition_global", "partition_local", "unit_attention",
]
