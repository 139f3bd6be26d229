"""Desk-scale simulator for differentially private backward workflows.

The package models a linear layer's backward pass under four execution
strategies and counts their memory traffic, flops, and synchronization
exactly through a simulated two-level memory hierarchy.
"""

from .dpcore import (DPConfig, OptimizerState, accumulate_micro_batches, clip_factor,
                     dp_adam_step, dp_sgd_step, finalize_gradient, keyed_gaussian,
                     per_layer_process)
from .memmodel import MemSim, MemSpec, TrafficReport
from .tensor import Tensor, frob_norm_sq, matmul, per_sample_grad
from .tiling import BlockPlan, LayerDims, footprint, plan_blocks
from .workflows import (BackwardResult, WorkflowKind, backward_explicit, backward_flashdp,
                        backward_implicit, backward_nondp, run_backward)
from .bench import (ComparisonRow, ScenarioConfig, TrainDemoConfig, emit_report,
                    run_scenario, train_demo)

__all__ = [
    "BackwardResult", "BlockPlan", "ComparisonRow", "DPConfig", "LayerDims", "MemSim",
    "MemSpec", "OptimizerState", "ScenarioConfig", "Tensor", "TrafficReport",
    "TrainDemoConfig", "WorkflowKind", "accumulate_micro_batches", "backward_explicit",
    "backward_flashdp", "backward_implicit", "backward_nondp", "clip_factor",
    "dp_adam_step", "dp_sgd_step", "emit_report", "finalize_gradient", "footprint",
    "frob_norm_sq", "keyed_gaussian", "matmul", "per_layer_process", "per_sample_grad",
    "plan_blocks", "run_backward", "run_scenario", "train_demo",
]
