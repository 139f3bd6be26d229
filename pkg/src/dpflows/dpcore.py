"""Clipping, noise, and optimizer arithmetic for DP training.

All randomness is counter-based (see rng): one draw per gradient element
per step, keyed by (seed, layer_id, step, flat_index). Tiled execution of
the same step therefore produces bitwise-identical noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import rng
from .errors import UsageError
from .tensor import Tensor

REDUCTIONS = ("sum", "mean")


@dataclass(frozen=True)
class DPConfig:
    clip_c: float
    sigma: float
    reduction: str = "sum"
    seed: int = 0
    layer_id: int = 0
    step: int = 0

    def __post_init__(self):
        if not (self.clip_c > 0):
            raise UsageError(f"clip_c must be positive, got {self.clip_c}")
        if self.sigma < 0:
            raise UsageError(f"sigma must be >= 0, got {self.sigma}")
        if self.reduction not in REDUCTIONS:
            raise UsageError(f"reduction must be one of {REDUCTIONS}, got {self.reduction!r}")


def clip_factor(norm_sq: float, clip_c: float) -> float:
    """min(1, C / ||g||); a zero-norm gradient passes through unscaled."""
    if norm_sq < 0:
        raise UsageError(f"norm_sq must be >= 0, got {norm_sq}")
    if norm_sq == 0.0:
        return 1.0
    return min(1.0, clip_c / math.sqrt(norm_sq))


def keyed_gaussian(seed: int, layer_id: int, step: int, flat_index: int) -> float:
    """Standard-normal draw, a pure function of its key."""
    return rng.keyed_normal(seed, layer_id, step, flat_index)


def noise_for_indices(cfg: DPConfig, flat_indices) -> np.ndarray:
    """Keyed draws for a set of flat gradient indices (vectorized)."""
    return rng.keyed_normal_array(cfg.seed, cfg.layer_id, cfg.step, flat_indices)


def finalize_gradient(grad_sum: Tensor, batch: int, cfg: DPConfig) -> Tensor:
    """Reduce a clipped per-sample sum and add calibrated noise.

    sum:  out[i] = grad_sum[i] + sigma * C * draw(i)
    mean: out[i] = grad_sum[i] / batch + sigma * C * draw(i)
    """
    if batch < 1:
        raise UsageError(f"batch must be >= 1, got {batch}")
    base = grad_sum.data if cfg.reduction == "sum" else grad_sum.data / batch
    if cfg.sigma == 0.0:
        return Tensor(grad_sum.shape, base.copy() if cfg.reduction == "sum" else base)
    scale = cfg.sigma * cfg.clip_c
    noise = noise_for_indices(cfg, np.arange(grad_sum.element_count))
    return Tensor(grad_sum.shape, base + scale * noise)


def per_layer_process(per_sample_grads: Sequence[Tensor], cfg: DPConfig) -> Tensor:
    """Clip each sample's gradient, sum, and finalize. Reference composition."""
    if not per_sample_grads:
        raise UsageError("per_layer_process needs at least one per-sample gradient")
    shape = per_sample_grads[0].shape
    acc = np.zeros(shape, dtype=np.float64)
    for g in per_sample_grads:
        if g.shape != shape:
            raise UsageError(f"per-sample gradient shapes differ: {g.shape} vs {shape}")
        factor = clip_factor(float(np.dot(g.data, g.data)), cfg.clip_c)
        acc += factor * g.array
    return finalize_gradient(Tensor(shape, acc.ravel()), len(per_sample_grads), cfg)


def accumulate_micro_batches(partials: Sequence[Tensor], total_batch: int, cfg: DPConfig) -> Tensor:
    """Sum clipped micro-batch sums, then finalize once for the logical batch.

    ``partials`` must be clipped per-sample sums without noise; noise is
    drawn exactly once here, for the whole logical batch.
    """
    if not partials:
        raise UsageError("accumulate_micro_batches needs at least one partial")
    shape = partials[0].shape
    acc = np.zeros(shape, dtype=np.float64)
    for part in partials:
        if part.shape != shape:
            raise UsageError(f"partial shapes differ: {part.shape} vs {shape}")
        acc += part.array
    return finalize_gradient(Tensor(shape, acc.ravel()), total_batch, cfg)


@dataclass(frozen=True)
class OptimizerState:
    theta: Tensor
    m: Tensor
    v: Tensor
    eta: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    step: int = 0

    def __post_init__(self):
        if self.m.shape != self.theta.shape or self.v.shape != self.theta.shape:
            raise UsageError("optimizer state shapes must match theta")
        for name in ("beta1", "beta2"):
            val = getattr(self, name)
            if not (0.0 <= val < 1.0):
                raise UsageError(f"{name} must lie in [0, 1), got {val}")

    @classmethod
    def fresh(cls, theta: Tensor, eta: float, **kwargs) -> "OptimizerState":
        return cls(theta=theta.copy(), m=Tensor(theta.shape), v=Tensor(theta.shape),
                   eta=eta, **kwargs)


def dp_sgd_step(theta: Tensor, grad: Tensor, eta: float) -> Tensor:
    """Plain descent step on the finalized gradient."""
    if theta.shape != grad.shape:
        raise UsageError(f"theta shape {theta.shape} != grad shape {grad.shape}")
    return Tensor(theta.shape, theta.data - eta * grad.data)


def dp_adam_step(state: OptimizerState, grad: Tensor) -> OptimizerState:
    """Adam on the finalized gradient, without bias correction.

    m <- beta1*m + (1-beta1)*g;  v <- beta2*v + (1-beta2)*g^2
    theta <- theta - (eta / (sqrt(v) + eps)) * m          (post-update v)
    """
    if grad.shape != state.theta.shape:
        raise UsageError(f"grad shape {grad.shape} != theta shape {state.theta.shape}")
    g = grad.data
    m = state.beta1 * state.m.data + (1.0 - state.beta1) * g
    v = state.beta2 * state.v.data + (1.0 - state.beta2) * (g * g)
    eta_hat = state.eta / (np.sqrt(v) + state.eps_adam)
    theta = state.theta.data - eta_hat * m
    return replace(state,
                   theta=Tensor(state.theta.shape, theta),
                   m=Tensor(state.theta.shape, m),
                   v=Tensor(state.theta.shape, v),
                   step=state.step + 1)
