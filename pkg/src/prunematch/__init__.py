"""Detector-free image matching with hierarchical candidate pruning, on a numpy autodiff core."""

from .config import PipelineConfig, ablation_configs, baseline_config
from .tensor import Tensor, grad_check

__version__ = "0.1.0"

__all__ = ["PipelineConfig", "Tensor", "ablation_configs", "baseline_config", "grad_check"]
