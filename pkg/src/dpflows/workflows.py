"""The four linear-layer backward workflows, executed through the memory sim.

Shapes follow the layer convention Y = X W^T with X of shape (B, T, P) and
dY of shape (B, T, D), so every per-sample gradient and the layer gradient
are (D, P).

Traffic accounting charges each element's journey between main memory and
scratch exactly as the workflow's dataflow dictates: a fused single-pass
kernel reads each input element once (later touches by sibling blocks of
the same kernel reuse the on-chip copy and are not recharged); a second
pass over the inputs pays in full again. Partial-sum accumulators that
stay inside one kernel are block-local state and move no main-memory
bytes; state that must cross a kernel boundary always goes through
counted main-memory traffic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .dpcore import DPConfig, noise_for_indices
from .errors import ShapeError, UsageError
from .memmodel import MemSim, MemSpec, Region, TrafficReport
from .tensor import Tensor
from .tiling import BlockPlan, LayerDims, plan_blocks


class WorkflowKind(Enum):
    NON_DP = "non_dp"
    EXPLICIT_DP = "explicit_dp"
    IMPLICIT_DP = "implicit_dp"
    FLASHDP = "flashdp"


@dataclass
class BackwardResult:
    grad_w: Tensor
    report: TrafficReport
    per_sample_norms_sq: np.ndarray


def _dims(x: Tensor, dy: Tensor) -> LayerDims:
    if len(x.shape) != 3 or len(dy.shape) != 3:
        raise ShapeError(f"expected (B,T,P) and (B,T,D), got {x.shape} and {dy.shape}")
    if x.shape[0] != dy.shape[0] or x.shape[1] != dy.shape[1]:
        raise ShapeError(f"batch/time extents differ: {x.shape} vs {dy.shape}")
    return LayerDims(B=x.shape[0], T=x.shape[1], P=x.shape[2], D=dy.shape[2])


def _ranges(extent: int, tile: int) -> list[tuple[int, int]]:
    return [(lo, min(lo + tile, extent)) for lo in range(0, extent, tile)]


def _clip_factors(norms_sq: np.ndarray, clip_c: float) -> np.ndarray:
    """Vectorized min(1, C/||g||) with the zero-norm passthrough."""
    ns = np.asarray(norms_sq, dtype=np.float64)
    factors = np.ones_like(ns)
    pos = ns > 0.0
    factors[pos] = np.minimum(1.0, clip_c / np.sqrt(ns[pos]))
    return factors


class _OncePerKernel:
    """First touch of a tile loads it (charged); later touches reuse it.

    Models the fused kernel keeping an input tile on chip for every block
    that consumes it, so a single logical pass pays for each element once.
    """

    def __init__(self, sim: MemSim, region: Region, tag: str):
        self._sim = sim
        self._region = region
        self._tag = tag
        self._vals: dict = {}

    def fetch(self, key, index) -> tuple[np.ndarray, Optional[Region]]:
        if key in self._vals:
            return self._vals[key], None
        r = self._sim.load_to_scratch(self._region, index=index, tag=self._tag)
        vals = r.data.copy()
        self._vals[key] = vals
        return vals, r


def _release(sim: MemSim, *regions: Optional[Region]):
    for r in regions:
        if r is not None:
            sim.free_scratch(r)


def _noise_tile(cfg: DPConfig, d_rng, p_rng, p_total: int) -> Optional[np.ndarray]:
    if cfg.sigma == 0.0:
        return None
    flat = np.arange(d_rng[0], d_rng[1])[:, None] * p_total + np.arange(p_rng[0], p_rng[1])[None, :]
    return noise_for_indices(cfg, flat)


def _emit_output_tile(sim: MemSim, acc: np.ndarray, w_main: Region, d_rng, p_rng,
                      batch: int, cfg: Optional[DPConfig], p_total: int):
    """Reduce (mean), add keyed noise, and store one (d, p) tile of grad_w."""
    base = acc if (cfg is None or cfg.reduction == "sum") else acc / batch
    if cfg is not None:
        noise = _noise_tile(cfg, d_rng, p_rng, p_total)
        if noise is not None:
            base = base + (cfg.sigma * cfg.clip_c) * noise
        sim.record_flops(base.size)  # noise/reduction add
    out = sim.alloc_scratch(base.shape, name="w_tile")
    out.data[...] = base
    sim.store_to_main(out, w_main, index=np.s_[d_rng[0]:d_rng[1], p_rng[0]:p_rng[1]])
    sim.free_scratch(out)


# --------------------------------------------------------------------- non-DP


def backward_nondp(x: Tensor, dy: Tensor, spec: MemSpec, *, sim: Optional[MemSim] = None) -> BackwardResult:
    """Standard backward: grad_w = sum_b sum_t dY^T X, one fused reduction.

    No per-sample quantity is ever materialized, so there is nothing to
    clip; per_sample_norms_sq comes back empty.
    """
    dims = _dims(x, dy)
    plan = plan_blocks(dims, spec)
    sim = sim or MemSim(spec)
    x_main = sim.alloc_main((dims.B, dims.T, dims.P), values=x.array, name="x")
    dy_main = sim.alloc_main((dims.B, dims.T, dims.D), values=dy.array, name="dy")
    w_main = sim.alloc_main((dims.D, dims.P), name="grad_w")

    with sim.kernel():
        xc = _OncePerKernel(sim, x_main, "input")
        yc = _OncePerKernel(sim, dy_main, "input")
        for p0, p1 in _ranges(dims.P, plan.p):
            for d0, d1 in _ranges(dims.D, plan.d):
                acc = np.zeros((d1 - d0, p1 - p0))
                for b0, b1 in _ranges(dims.B, plan.b):
                    for t0, t1 in _ranges(dims.T, plan.t):
                        xv, xr = xc.fetch((b0, p0, t0), np.s_[b0:b1, t0:t1, p0:p1])
                        yv, yr = yc.fetch((b0, d0, t0), np.s_[b0:b1, t0:t1, d0:d1])
                        acc += np.einsum("btd,btp->dp", yv, xv)
                        sim.record_flops(2 * (b1 - b0) * (t1 - t0) * (d1 - d0) * (p1 - p0))
                        _release(sim, xr, yr)
                _emit_output_tile(sim, acc, w_main, (d0, d1), (p0, p1), dims.B, None, dims.P)

    grad = Tensor((dims.D, dims.P), sim.read_main(w_main).ravel())
    return BackwardResult(grad, sim.report(), np.zeros(0))


# ----------------------------------------------------------------- explicit DP


def backward_explicit(x: Tensor, dy: Tensor, cfg: DPConfig, spec: MemSpec,
                      *, sim: Optional[MemSim] = None) -> BackwardResult:
    """Four-stage DP backward that materializes per-sample gradients.

    Stage 1 computes and stores G (B, D, P); stage 2 reduces per-sample
    squared norms; stage 3 rescales G into clipped G'; stage 4 aggregates
    and finalizes. Both G and G' count toward per_sample_grad_bytes_stored.
    """
    dims = _dims(x, dy)
    plan = plan_blocks(dims, spec)
    sim = sim or MemSim(spec)
    x_main = sim.alloc_main((dims.B, dims.T, dims.P), values=x.array, name="x")
    dy_main = sim.alloc_main((dims.B, dims.T, dims.D), values=dy.array, name="dy")
    g_main = sim.alloc_main((dims.B, dims.D, dims.P), name="per_sample_grads")
    gp_main = sim.alloc_main((dims.B, dims.D, dims.P), name="clipped_grads")
    norm_main = sim.alloc_main(dims.B, name="norms_sq")
    w_main = sim.alloc_main((dims.D, dims.P), name="grad_w")

    b_tiles = _ranges(dims.B, plan.b)
    t_tiles = _ranges(dims.T, plan.t)
    d_tiles = _ranges(dims.D, plan.d)
    p_tiles = _ranges(dims.P, plan.p)

    # Stage 1: per-sample gradients, written out in full.
    with sim.kernel():
        xc = _OncePerKernel(sim, x_main, "input")
        yc = _OncePerKernel(sim, dy_main, "input")
        for b0, b1 in b_tiles:
            for p0, p1 in p_tiles:
                for d0, d1 in d_tiles:
                    gt = sim.alloc_scratch((b1 - b0, d1 - d0, p1 - p0), name="g_tile")
                    for t0, t1 in t_tiles:
                        xv, xr = xc.fetch((b0, p0, t0), np.s_[b0:b1, t0:t1, p0:p1])
                        yv, yr = yc.fetch((b0, d0, t0), np.s_[b0:b1, t0:t1, d0:d1])
                        gt.data += np.einsum("btd,btp->bdp", yv, xv)
                        sim.record_flops(2 * (b1 - b0) * (t1 - t0) * (d1 - d0) * (p1 - p0))
                        _release(sim, xr, yr)
                    sim.store_to_main(gt, g_main, index=np.s_[b0:b1, d0:d1, p0:p1],
                                      tag="per_sample_grad")
                    sim.free_scratch(gt)

    # Stage 2: squared norms per sample.
    with sim.kernel():
        for b0, b1 in b_tiles:
            acc = np.zeros(b1 - b0)
            for d0, d1 in d_tiles:
                for p0, p1 in p_tiles:
                    gt = sim.load_to_scratch(g_main, index=np.s_[b0:b1, d0:d1, p0:p1])
                    acc += np.einsum("bdp,bdp->b", gt.data, gt.data)
                    sim.record_flops(2 * gt.element_count)
                    sim.free_scratch(gt)
            nt = sim.alloc_scratch(b1 - b0, name="norm_tile")
            nt.data[...] = acc
            sim.store_to_main(nt, norm_main, index=np.s_[b0:b1])
            sim.free_scratch(nt)

    # Stage 3: rescale each sample's gradient.
    with sim.kernel():
        for b0, b1 in b_tiles:
            nr = sim.load_to_scratch(norm_main, index=np.s_[b0:b1])
            factors = _clip_factors(nr.data, cfg.clip_c)
            sim.free_scratch(nr)
            for d0, d1 in d_tiles:
                for p0, p1 in p_tiles:
                    gt = sim.load_to_scratch(g_main, index=np.s_[b0:b1, d0:d1, p0:p1])
                    gt.data *= factors[:, None, None]
                    sim.record_flops(gt.element_count)
                    sim.store_to_main(gt, gp_main, index=np.s_[b0:b1, d0:d1, p0:p1],
                                      tag="per_sample_grad")
                    sim.free_scratch(gt)

    # Stage 4: aggregate over samples and finalize.
    with sim.kernel():
        for d0, d1 in d_tiles:
            for p0, p1 in p_tiles:
                acc = np.zeros((d1 - d0, p1 - p0))
                for b0, b1 in b_tiles:
                    gt = sim.load_to_scratch(gp_main, index=np.s_[b0:b1, d0:d1, p0:p1])
                    acc += gt.data.sum(axis=0)
                    sim.record_flops(gt.element_count)
                    sim.free_scratch(gt)
                _emit_output_tile(sim, acc, w_main, (d0, d1), (p0, p1), dims.B, cfg, dims.P)

    grad = Tensor((dims.D, dims.P), sim.read_main(w_main).ravel())
    return BackwardResult(grad, sim.report(), sim.read_main(norm_main))


# ----------------------------------------------------------------- implicit DP


def backward_implicit(x: Tensor, dy: Tensor, cfg: DPConfig, spec: MemSpec,
                      *, sim: Optional[MemSim] = None) -> BackwardResult:
    """Two-pass DP backward that recomputes instead of materializing.

    Pass 1 streams per-sample gradient tiles just long enough to reduce
    squared norms. Pass 2 reloads the inputs, recomputes every tile (the
    recompute is counted as redundant flops), clips, aggregates, and
    finalizes. Nothing per-sample ever reaches main memory except the B
    norm values.
    """
    dims = _dims(x, dy)
    plan = plan_blocks(dims, spec)
    sim = sim or MemSim(spec)
    x_main = sim.alloc_main((dims.B, dims.T, dims.P), values=x.array, name="x")
    dy_main = sim.alloc_main((dims.B, dims.T, dims.D), values=dy.array, name="dy")
    norm_main = sim.alloc_main(dims.B, name="norms_sq")
    w_main = sim.alloc_main((dims.D, dims.P), name="grad_w")

    b_tiles = _ranges(dims.B, plan.b)
    t_tiles = _ranges(dims.T, plan.t)
    d_tiles = _ranges(dims.D, plan.d)
    p_tiles = _ranges(dims.P, plan.p)

    def stream_g_tiles(redundant: bool, on_tile):
        """One full pass over per-sample gradient tiles, inputs loaded once."""
        xc = _OncePerKernel(sim, x_main, "input")
        yc = _OncePerKernel(sim, dy_main, "input")
        for b0, b1 in b_tiles:
            for p0, p1 in p_tiles:
                for d0, d1 in d_tiles:
                    gt = sim.alloc_scratch((b1 - b0, d1 - d0, p1 - p0), name="g_tile")
                    for t0, t1 in t_tiles:
                        xv, xr = xc.fetch((b0, p0, t0), np.s_[b0:b1, t0:t1, p0:p1])
                        yv, yr = yc.fetch((b0, d0, t0), np.s_[b0:b1, t0:t1, d0:d1])
                        gt.data += np.einsum("btd,btp->bdp", yv, xv)
                        sim.record_flops(2 * (b1 - b0) * (t1 - t0) * (d1 - d0) * (p1 - p0),
                                         redundant=redundant)
                        _release(sim, xr, yr)
                    on_tile((b0, b1), (d0, d1), (p0, p1), gt)
                    sim.free_scratch(gt)

    # Pass 1: squared norms only.
    with sim.kernel():
        norm_acc = np.zeros(dims.B)

        def reduce_norm(b_rng, d_rng, p_rng, gt):
            norm_acc[b_rng[0]:b_rng[1]] += np.einsum("bdp,bdp->b", gt.data, gt.data)
            sim.record_flops(2 * gt.element_count)

        stream_g_tiles(False, reduce_norm)
        for b0, b1 in b_tiles:
            nt = sim.alloc_scratch(b1 - b0, name="norm_tile")
            nt.data[...] = norm_acc[b0:b1]
            sim.store_to_main(nt, norm_main, index=np.s_[b0:b1])
            sim.free_scratch(nt)

    # Pass 2: recompute, clip, aggregate, finalize.
    with sim.kernel():
        factors_by_chunk: dict = {}
        w_acc = np.zeros((dims.D, dims.P))  # block-local partial sums

        def clip_and_sum(b_rng, d_rng, p_rng, gt):
            if b_rng not in factors_by_chunk:
                nr = sim.load_to_scratch(norm_main, index=np.s_[b_rng[0]:b_rng[1]])
                factors_by_chunk[b_rng] = _clip_factors(nr.data, cfg.clip_c)
                sim.free_scratch(nr)
            gt.data *= factors_by_chunk[b_rng][:, None, None]
            sim.record_flops(gt.element_count)
            w_acc[d_rng[0]:d_rng[1], p_rng[0]:p_rng[1]] += gt.data.sum(axis=0)
            sim.record_flops(gt.element_count)

        stream_g_tiles(True, clip_and_sum)
        for d0, d1 in d_tiles:
            for p0, p1 in p_tiles:
                _emit_output_tile(sim, w_acc[d0:d1, p0:p1], w_main, (d0, d1), (p0, p1),
                                  dims.B, cfg, dims.P)

    grad = Tensor((dims.D, dims.P), sim.read_main(w_main).ravel())
    return BackwardResult(grad, sim.report(), sim.read_main(norm_main))


# -------------------------------------------------------------------- flashdp


def _check_plan(plan: BlockPlan, dims: LayerDims):
    pairs = ((plan.b, dims.B, plan.n_b, "b"), (plan.t, dims.T, plan.n_t, "t"),
             (plan.d, dims.D, plan.n_d, "d"), (plan.p, dims.P, plan.n_p, "p"))
    for tile, extent, count, name in pairs:
        if not (1 <= tile <= extent):
            raise UsageError(f"plan tile {name}={tile} does not fit extent {extent}")
        if count != math.ceil(extent / tile):
            raise UsageError(f"plan count n_{name}={count} inconsistent with {extent}/{tile}")


def backward_flashdp(x: Tensor, dy: Tensor, cfg: DPConfig, plan: BlockPlan, spec: MemSpec,
                     *, sim: Optional[MemSim] = None, skip_barrier: bool = False) -> BackwardResult:
    """Fused DP backward: one logical kernel per batch chunk.

    Within a chunk, every (p, d) block computes its gradient tile once,
    publishes its per-sample squared-norm contribution with an atomic
    add, waits at a barrier, then reloads the fully reduced norms to clip
    the tile it kept on chip. Inputs are read exactly once in total; the
    only per-sample values that touch main memory are the B norm scalars.
    Clipped tiles accumulate into a main-memory gradient buffer (chunks
    are separate kernels, so cross-chunk state must be spilled), and the
    last kernel finalizes that buffer with the keyed noise.

    ``skip_barrier`` is a fault-injection hook for regression tests: it
    removes the synchronization wait so the premature norm read trips the
    memory model's ordering check.
    """
    dims = _dims(x, dy)
    _check_plan(plan, dims)
    sim = sim or MemSim(spec)
    x_main = sim.alloc_main((dims.B, dims.T, dims.P), values=x.array, name="x")
    dy_main = sim.alloc_main((dims.B, dims.T, dims.D), values=dy.array, name="dy")
    norm_main = sim.alloc_main(dims.B, name="norms_sq")
    wacc_main = sim.alloc_main((dims.D, dims.P), name="grad_acc")
    w_main = sim.alloc_main((dims.D, dims.P), name="grad_w")

    chunks = _ranges(dims.B, plan.b)
    t_tiles = _ranges(dims.T, plan.t)
    d_tiles = _ranges(dims.D, plan.d)
    p_tiles = _ranges(dims.P, plan.p)

    for ci, (b0, b1) in enumerate(chunks):
        with sim.kernel():
            xc = _OncePerKernel(sim, x_main, "input")
            yc = _OncePerKernel(sim, dy_main, "input")
            parked: dict = {}  # each block keeps its gradient tile on chip

            for p0, p1 in p_tiles:
                for d0, d1 in d_tiles:
                    gt = sim.alloc_scratch((b1 - b0, d1 - d0, p1 - p0), name="g_tile")
                    ns = sim.alloc_scratch(b1 - b0, name="norm_part")
                    for t0, t1 in t_tiles:
                        xv, xr = xc.fetch((p0, t0), np.s_[b0:b1, t0:t1, p0:p1])
                        yv, yr = yc.fetch((d0, t0), np.s_[b0:b1, t0:t1, d0:d1])
                        gt.data += np.einsum("btd,btp->bdp", yv, xv)
                        sim.record_flops(2 * (b1 - b0) * (t1 - t0) * (d1 - d0) * (p1 - p0))
                        _release(sim, xr, yr)
                    ns.data[...] = np.einsum("bdp,bdp->b", gt.data, gt.data)
                    sim.record_flops(2 * gt.element_count)
                    sim.atomic_accumulate(norm_main, ns.data.copy(), index=np.s_[b0:b1])
                    parked[(p0, d0)] = gt.data.copy()
                    sim.free_scratch(ns)
                    sim.free_scratch(gt)

            if not skip_barrier:
                sim.barrier()

            for p0, p1 in p_tiles:
                for d0, d1 in d_tiles:
                    nr = sim.load_to_scratch(norm_main, index=np.s_[b0:b1])
                    factors = _clip_factors(nr.data, cfg.clip_c)
                    sim.free_scratch(nr)
                    gs = sim.alloc_scratch((b1 - b0, d1 - d0, p1 - p0), name="g_clipped")
                    gs.data[...] = parked.pop((p0, d0)) * factors[:, None, None]
                    sim.record_flops(gs.element_count)
                    partial = gs.data.sum(axis=0)
                    sim.record_flops(gs.element_count)
                    sim.atomic_accumulate(wacc_main, partial, index=np.s_[d0:d1, p0:p1])
                    sim.free_scratch(gs)

            if ci == len(chunks) - 1:
                sim.barrier()  # make the gradient accumulator visible
                for d0, d1 in d_tiles:
                    for p0, p1 in p_tiles:
                        acct = sim.load_to_scratch(wacc_main, index=np.s_[d0:d1, p0:p1])
                        acc = acct.data.copy()
                        sim.free_scratch(acct)
                        _emit_output_tile(sim, acc, w_main, (d0, d1), (p0, p1), dims.B,
                                          cfg, dims.P)

    grad = Tensor((dims.D, dims.P), sim.read_main(w_main).ravel())
    return BackwardResult(grad, sim.report(), sim.read_main(norm_main))


# ------------------------------------------------------------------- dispatch


def run_backward(kind: WorkflowKind, x: Tensor, dy: Tensor, cfg: DPConfig, spec: MemSpec,
                 plan: Optional[BlockPlan] = None, *, sim: Optional[MemSim] = None) -> BackwardResult:
    """Run one workflow; flashdp derives a block plan if none is given."""
    if kind == WorkflowKind.NON_DP:
        return backward_nondp(x, dy, spec, sim=sim)
    if kind == WorkflowKind.EXPLICIT_DP:
        return backward_explicit(x, dy, cfg, spec, sim=sim)
    if kind == WorkflowKind.IMPLICIT_DP:
        return backward_implicit(x, dy, cfg, spec, sim=sim)
    if kind == WorkflowKind.FLASHDP:
        if plan is None:
            plan = plan_blocks(_dims(x, dy), spec)
        return backward_flashdp(x, dy, cfg, plan, spec, sim=sim)
    raise UsageError(f"unknown workflow kind {kind!r}")
