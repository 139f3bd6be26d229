"""Deliberately naive reference path for the DP backward computation.

Everything here is explicit scalar loops over Python floats so the fast
implementations have something independent to be checked against. Noise
comes from the same keyed construction as the workflows, so outputs are
directly comparable draw for draw.
"""

from __future__ import annotations

from .dpcore import DPConfig, clip_factor, finalize_gradient
from .tensor import Tensor
from .errors import ShapeError


def per_sample_grads_naive(x: Tensor, dy: Tensor) -> list[Tensor]:
    """Per-sample gradients G_b[d][p] = sum_t dY[b][t][d] * X[b][t][p]."""
    if len(x.shape) != 3 or len(dy.shape) != 3:
        raise ShapeError(f"expected 3-D inputs, got {x.shape} and {dy.shape}")
    if x.shape[0] != dy.shape[0] or x.shape[1] != dy.shape[1]:
        raise ShapeError(f"batch/time extents differ: {x.shape} vs {dy.shape}")
    bsz, tsz, psz = x.shape
    dsz = dy.shape[2]
    xa = x.array
    ya = dy.array
    grads = []
    for b in range(bsz):
        g = [[0.0] * psz for _ in range(dsz)]
        for d in range(dsz):
            for p in range(psz):
                acc = 0.0
                for t in range(tsz):
                    acc += float(ya[b][t][d]) * float(xa[b][t][p])
                g[d][p] = acc
        grads.append(Tensor.from_nested(g))
    return grads


def per_sample_norms_sq_naive(grads: list[Tensor]) -> list[float]:
    norms = []
    for g in grads:
        acc = 0.0
        for v in g.data:
            acc += float(v) * float(v)
        norms.append(acc)
    return norms


def dp_backward_reference(x: Tensor, dy: Tensor, cfg: DPConfig) -> tuple[Tensor, list[float]]:
    """Clip-sum-noise pipeline built on the naive gradients.

    Returns the finalized gradient and the per-sample squared norms.
    """
    grads = per_sample_grads_naive(x, dy)
    norms_sq = per_sample_norms_sq_naive(grads)
    dsz, psz = grads[0].shape
    acc = [[0.0] * psz for _ in range(dsz)]
    for g, ns in zip(grads, norms_sq):
        factor = clip_factor(ns, cfg.clip_c)
        ga = g.array
        for d in range(dsz):
            for p in range(psz):
                acc[d][p] += factor * float(ga[d][p])
    final = finalize_gradient(Tensor.from_nested(acc), len(grads), cfg)
    return final, norms_sq
