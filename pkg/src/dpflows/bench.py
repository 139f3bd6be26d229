"""Scenario runner: build comparison tables across workflows and layer shapes.

Configs are single JSON documents; any unknown key is an error that names
the offending path, so typos never silently change a run. Reports are
plot-ready CSV (or JSON) with one row per (workflow, layer, batch) cell,
fully determined by the config: the same file always serializes to the
same bytes.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import rng
from .dpcore import DPConfig, accumulate_micro_batches
from .errors import ConfigError, TrainingDivergedError, UsageError
from .memmodel import MemSpec, merge_reports
from .tensor import Tensor
from .tiling import LayerDims
from .workflows import (BackwardResult, WorkflowKind, backward_nondp, run_backward)

# Layer shapes mimic small transformer blocks: attention projections are
# square, the MLP expands to H and back. Desk-scale stand-ins, not models.
_PRESETS = {
    "gpt2-small-mini": {"P": 64, "H": 256, "T": 32},
    "gpt2-medium-mini": {"P": 96, "H": 384, "T": 32},
    "gpt2-large-mini": {"P": 128, "H": 512, "T": 32},
}

_INPUT_STREAM_X = 101
_INPUT_STREAM_DY = 202


@dataclass(frozen=True)
class LayerSpec:
    label: str
    T: int
    P: int
    D: int


@dataclass(frozen=True)
class MicroBatchSpec:
    size: int
    accumulation_steps: int


def preset_layers(name: str) -> list[LayerSpec]:
    if name not in _PRESETS:
        raise ConfigError(f"unknown model_preset {name!r}; choose from {sorted(_PRESETS)}")
    p = _PRESETS[name]
    P, H, T = p["P"], p["H"], p["T"]
    return [
        LayerSpec("w_q", T, P, P),
        LayerSpec("w_k", T, P, P),
        LayerSpec("w_v", T, P, P),
        LayerSpec("w_1", T, P, H),
        LayerSpec("w_2", T, H, P),
    ]


# ------------------------------------------------------------- config parsing


def _check_keys(obj: dict, path: str, allowed: Sequence[str], required: Sequence[str]):
    if not isinstance(obj, dict):
        raise ConfigError(f"expected an object at {path}")
    for key in obj:
        if key not in allowed:
            raise ConfigError(f"unknown key at {path}.{key}")
    for key in required:
        if key not in obj:
            raise ConfigError(f"missing key {path}.{key}")


def _as_int(value, path: str, minimum: int = 1) -> int:
    if not isinstance(value, int) or isinstance(value, bool) or value < minimum:
        raise ConfigError(f"{path} must be an integer >= {minimum}, got {value!r}")
    return value


def _as_number(value, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{path} must be a number, got {value!r}")
    return float(value)


def _parse_mem(obj, path: str) -> MemSpec:
    _check_keys(obj, path, ("scratchpad_capacity_bytes", "dtype_width_bytes"),
                ("scratchpad_capacity_bytes",))
    cap = _as_int(obj["scratchpad_capacity_bytes"], f"{path}.scratchpad_capacity_bytes")
    width = obj.get("dtype_width_bytes", 8)
    if width not in (2, 4, 8):
        raise ConfigError(f"{path}.dtype_width_bytes must be 2, 4, or 8, got {width!r}")
    return MemSpec(scratchpad_capacity_bytes=cap, dtype_width_bytes=width)


def _parse_dp(obj, path: str) -> DPConfig:
    _check_keys(obj, path, ("clip_c", "sigma", "reduction", "seed"), ("clip_c", "sigma"))
    clip_c = _as_number(obj["clip_c"], f"{path}.clip_c")
    sigma = _as_number(obj["sigma"], f"{path}.sigma")
    reduction = obj.get("reduction", "sum")
    if reduction not in ("sum", "mean"):
        raise ConfigError(f"{path}.reduction must be 'sum' or 'mean', got {reduction!r}")
    seed = obj.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError(f"{path}.seed must be an integer, got {seed!r}")
    try:
        return DPConfig(clip_c=clip_c, sigma=sigma, reduction=reduction, seed=seed)
    except UsageError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _parse_workflows(value, path: str) -> list[WorkflowKind]:
    if not isinstance(value, list) or not value:
        raise ConfigError(f"{path} must be a non-empty list")
    kinds = []
    for i, name in enumerate(value):
        try:
            kinds.append(WorkflowKind(name))
        except ValueError:
            raise ConfigError(f"{path}[{i}]: unknown workflow {name!r}") from None
    return kinds


@dataclass(frozen=True)
class ScenarioConfig:
    layers: tuple[LayerSpec, ...]
    batch_sizes: tuple[int, ...]
    workflows: tuple[WorkflowKind, ...]
    mem: MemSpec
    dp: DPConfig
    micro_batch: Optional[MicroBatchSpec] = None
    repetitions: int = 1

    @classmethod
    def from_dict(cls, doc: dict) -> "ScenarioConfig":
        _check_keys(doc, "$", ("model_preset", "layers", "batch_sizes", "micro_batch",
                               "workflows", "mem", "dp", "repetitions"),
                    ("batch_sizes", "workflows", "mem", "dp"))
        if ("model_preset" in doc) == ("layers" in doc):
            raise ConfigError("$: exactly one of model_preset or layers is required")
        if "model_preset" in doc:
            layers = preset_layers(doc["model_preset"])
        else:
            raw = doc["layers"]
            if not isinstance(raw, list) or not raw:
                raise ConfigError("$.layers must be a non-empty list")
            layers = []
            for i, entry in enumerate(raw):
                path = f"$.layers[{i}]"
                _check_keys(entry, path, ("label", "T", "P", "D"), ("label", "T", "P", "D"))
                layers.append(LayerSpec(str(entry["label"]),
                                        _as_int(entry["T"], f"{path}.T"),
                                        _as_int(entry["P"], f"{path}.P"),
                                        _as_int(entry["D"], f"{path}.D")))
        batch_sizes = doc["batch_sizes"]
        if not isinstance(batch_sizes, list) or not batch_sizes:
            raise ConfigError("$.batch_sizes must be a non-empty list")
        batch_sizes = tuple(_as_int(b, f"$.batch_sizes[{i}]") for i, b in enumerate(batch_sizes))
        micro = None
        if "micro_batch" in doc:
            _check_keys(doc["micro_batch"], "$.micro_batch", ("size", "accumulation_steps"),
                        ("size", "accumulation_steps"))
            micro = MicroBatchSpec(_as_int(doc["micro_batch"]["size"], "$.micro_batch.size"),
                                   _as_int(doc["micro_batch"]["accumulation_steps"],
                                           "$.micro_batch.accumulation_steps"))
            for b in batch_sizes:
                if b != micro.size * micro.accumulation_steps:
                    raise ConfigError(
                        f"$.batch_sizes: {b} != micro_batch.size * accumulation_steps "
                        f"({micro.size} * {micro.accumulation_steps})")
        return cls(
            layers=tuple(layers),
            batch_sizes=batch_sizes,
            workflows=tuple(_parse_workflows(doc["workflows"], "$.workflows")),
            mem=_parse_mem(doc["mem"], "$.mem"),
            dp=_parse_dp(doc["dp"], "$.dp"),
            micro_batch=micro,
            repetitions=_as_int(doc.get("repetitions", 1), "$.repetitions"),
        )

    @classmethod
    def from_file(cls, path) -> "ScenarioConfig":
        return cls.from_dict(_load_json(path))


def _load_json(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc


# ------------------------------------------------------------- scenario cells


REPORT_FIELDNAMES = [
    "workflow", "layer", "B",
    "bytes_loaded", "bytes_stored", "per_sample_grad_bytes_stored",
    "flops", "redundant_flops", "kernel_launches", "barriers",
    "peak_scratch_bytes", "relative_traffic", "grad_checksum",
]


@dataclass(frozen=True)
class ComparisonRow:
    workflow: str
    layer: str
    B: int
    bytes_loaded: int
    bytes_stored: int
    per_sample_grad_bytes_stored: int
    flops: int
    redundant_flops: int
    kernel_launches: int
    barriers: int
    peak_scratch_bytes: int
    relative_traffic: float
    grad_checksum: float

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in REPORT_FIELDNAMES}


def cell_inputs(dp: DPConfig, layer_index: int, layer: LayerSpec, batch: int) -> tuple[Tensor, Tensor]:
    """Deterministic inputs shared by every workflow of one scenario cell."""
    x = rng.keyed_uniform_array((dp.seed, _INPUT_STREAM_X, layer_index, batch),
                                batch * layer.T * layer.P)
    dy = rng.keyed_uniform_array((dp.seed, _INPUT_STREAM_DY, layer_index, batch),
                                 batch * layer.T * layer.D)
    return (Tensor((batch, layer.T, layer.P), x),
            Tensor((batch, layer.T, layer.D), dy))


def _run_cell(cfg: ScenarioConfig, kind: WorkflowKind, x: Tensor, dy: Tensor,
              cell_cfg: DPConfig, dims: LayerDims) -> BackwardResult:
    if cfg.micro_batch is None:
        return run_backward(kind, x, dy, cell_cfg, cfg.mem)

    size = cfg.micro_batch.size
    parts, reports, norms = [], [], []
    for i in range(cfg.micro_batch.accumulation_steps):
        sl = np.s_[i * size:(i + 1) * size]
        xs = Tensor((size, dims.T, dims.P), x.array[sl].ravel())
        dys = Tensor((size, dims.T, dims.D), dy.array[sl].ravel())
        if kind == WorkflowKind.NON_DP:
            res = backward_nondp(xs, dys, cfg.mem)
        else:
            # Micro runs produce clipped sums only; noise is drawn once below.
            micro_cfg = replace(cell_cfg, sigma=0.0, reduction="sum")
            res = run_backward(kind, xs, dys, micro_cfg, cfg.mem)
        parts.append(res.grad_w)
        reports.append(res.report)
        norms.append(res.per_sample_norms_sq)
    report = merge_reports(reports)
    if kind == WorkflowKind.NON_DP:
        total = parts[0].data.copy()
        for part in parts[1:]:
            total += part.data
        return BackwardResult(Tensor(parts[0].shape, total), report, np.zeros(0))
    grad = accumulate_micro_batches(parts, dims.B, cell_cfg)
    return BackwardResult(grad, report, np.concatenate(norms))


def run_scenario(cfg: ScenarioConfig) -> list[ComparisonRow]:
    """Execute every (layer, batch, workflow) cell and tabulate counters.

    The non_dp cell is always computed as the traffic baseline for
    relative_traffic, whether or not it was requested as a row.
    """
    rows = []
    for _ in range(cfg.repetitions):
        for li, layer in enumerate(cfg.layers):
            for batch in cfg.batch_sizes:
                dims = LayerDims(B=batch, T=layer.T, P=layer.P, D=layer.D)
                x, dy = cell_inputs(cfg.dp, li, layer, batch)
                cell_cfg = replace(cfg.dp, layer_id=li, step=0)
                results = {WorkflowKind.NON_DP: _run_cell(cfg, WorkflowKind.NON_DP,
                                                          x, dy, cell_cfg, dims)}
                base = results[WorkflowKind.NON_DP].report
                base_traffic = base.bytes_loaded + base.bytes_stored
                for kind in cfg.workflows:
                    if kind not in results:
                        results[kind] = _run_cell(cfg, kind, x, dy, cell_cfg, dims)
                    res = results[kind]
                    rep = res.report
                    rows.append(ComparisonRow(
                        workflow=kind.value,
                        layer=layer.label,
                        B=batch,
                        bytes_loaded=rep.bytes_loaded,
                        bytes_stored=rep.bytes_stored,
                        per_sample_grad_bytes_stored=rep.per_sample_grad_bytes_stored,
                        flops=rep.flops,
                        redundant_flops=rep.redundant_flops,
                        kernel_launches=rep.kernel_launches,
                        barriers=rep.barriers,
                        peak_scratch_bytes=rep.peak_scratch_bytes,
                        relative_traffic=(rep.bytes_loaded + rep.bytes_stored) / base_traffic,
                        grad_checksum=float(res.grad_w.data.sum()),
                    ))
    return rows


# -------------------------------------------------------------------- reports


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render_report(rows: Sequence[ComparisonRow], fmt: str = "csv") -> str:
    if not rows:
        raise UsageError("no rows to emit")
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_FIELDNAMES)
        for row in rows:
            writer.writerow([_fmt(getattr(row, name)) for name in REPORT_FIELDNAMES])
        return buf.getvalue()
    if fmt == "json":
        return json.dumps([row.to_dict() for row in rows], indent=2) + "\n"
    raise UsageError(f"format must be 'csv' or 'json', got {fmt!r}")


def emit_report(rows: Sequence[ComparisonRow], fmt: str = "csv", path=None, stream=None) -> str:
    """Serialize rows; write to ``path`` or ``stream`` when given."""
    text = render_report(rows, fmt)
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    if stream is not None:
        stream.write(text)
    return text


# ----------------------------------------------------------------- train demo


TRAIN_FIELDNAMES = ["sigma", "workflow", "step", "loss"]


@dataclass(frozen=True)
class TrainDemoConfig:
    dims: LayerDims
    steps: int
    workflows: tuple[WorkflowKind, ...]
    sigmas: tuple[float, ...]
    optimizer: str
    eta: float
    beta1: float
    beta2: float
    eps_adam: float
    mem: MemSpec
    dp: DPConfig

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainDemoConfig":
        _check_keys(doc, "$", ("train", "mem", "dp"), ("train", "mem", "dp"))
        train = doc["train"]
        _check_keys(train, "$.train",
                    ("dims", "steps", "workflows", "sigmas", "optimizer", "eta",
                     "beta1", "beta2", "eps_adam"),
                    ("dims", "steps", "workflows", "sigmas", "eta"))
        _check_keys(train["dims"], "$.train.dims", ("B", "T", "P", "D"), ("B", "T", "P", "D"))
        dims = LayerDims(**{k: _as_int(train["dims"][k], f"$.train.dims.{k}")
                            for k in ("B", "T", "P", "D")})
        workflows = tuple(_parse_workflows(train["workflows"], "$.train.workflows"))
        dp_count = sum(1 for w in workflows if w != WorkflowKind.NON_DP)
        if dp_count < 2:
            raise ConfigError("$.train.workflows must name at least two DP workflows")
        sigmas = train["sigmas"]
        if not isinstance(sigmas, list) or not sigmas:
            raise ConfigError("$.train.sigmas must be a non-empty list")
        sigmas = tuple(_as_number(s, f"$.train.sigmas[{i}]") for i, s in enumerate(sigmas))
        optimizer = train.get("optimizer", "sgd")
        if optimizer not in ("sgd", "adam"):
            raise ConfigError(f"$.train.optimizer must be 'sgd' or 'adam', got {optimizer!r}")
        return cls(
            dims=dims,
            steps=_as_int(train["steps"], "$.train.steps"),
            workflows=workflows,
            sigmas=sigmas,
            optimizer=optimizer,
            eta=_as_number(train["eta"], "$.train.eta"),
            beta1=_as_number(train.get("beta1", 0.9), "$.train.beta1"),
            beta2=_as_number(train.get("beta2", 0.999), "$.train.beta2"),
            eps_adam=_as_number(train.get("eps_adam", 1e-8), "$.train.eps_adam"),
            mem=_parse_mem(doc["mem"], "$.mem"),
            dp=_parse_dp(doc["dp"], "$.dp"),
        )

    @classmethod
    def from_file(cls, path) -> "TrainDemoConfig":
        return cls.from_dict(_load_json(path))


def train_demo(cfg: TrainDemoConfig) -> dict[float, dict[str, list[float]]]:
    """Least-squares training of one linear layer under each workflow.

    All workflows see identical data, identical noise keys, and identical
    optimizer settings, so trajectories measure only the numerical
    difference between backward implementations. Returns
    {sigma: {workflow: [loss per step]}} with losses recorded before each
    update.
    """
    from .dpcore import OptimizerState, dp_adam_step, dp_sgd_step

    dims = cfg.dims
    x = Tensor((dims.B, dims.T, dims.P),
               rng.keyed_uniform_array((cfg.dp.seed, 11), dims.B * dims.T * dims.P))
    w0 = Tensor((dims.D, dims.P),
                rng.keyed_uniform_array((cfg.dp.seed, 12), dims.D * dims.P, -0.5, 0.5))
    y_target = rng.keyed_uniform_array((cfg.dp.seed, 13), dims.B * dims.T * dims.D) \
        .reshape(dims.B, dims.T, dims.D)
    denom = dims.B * dims.T * dims.D

    out: dict[float, dict[str, list[float]]] = {}
    for sigma in cfg.sigmas:
        per_wf: dict[str, list[float]] = {}
        for kind in cfg.workflows:
            theta = w0.copy()
            state = None
            if cfg.optimizer == "adam":
                state = OptimizerState.fresh(theta, cfg.eta, beta1=cfg.beta1,
                                             beta2=cfg.beta2, eps_adam=cfg.eps_adam)
            losses = []
            for step in range(cfg.steps):
                # overflow here is the divergence signal, not an error
                with np.errstate(over="ignore", invalid="ignore"):
                    y = np.einsum("btp,dp->btd", x.array, theta.array)
                    resid = y - y_target
                    loss = float((resid * resid).sum() / denom)
                if not np.isfinite(loss):
                    raise TrainingDivergedError(step, loss)
                losses.append(loss)
                dy = Tensor((dims.B, dims.T, dims.D), (2.0 / denom) * resid.ravel())
                step_cfg = replace(cfg.dp, sigma=sigma, layer_id=0, step=step)
                grad = run_backward(kind, x, dy, step_cfg, cfg.mem).grad_w
                if cfg.optimizer == "adam":
                    state = dp_adam_step(state, grad)
                    theta = state.theta
                else:
                    theta = dp_sgd_step(theta, grad, cfg.eta)
            per_wf[kind.value] = losses
        out[sigma] = per_wf
    return out


def train_rows(trajectories: dict[float, dict[str, list[float]]]) -> list[dict]:
    rows = []
    for sigma in trajectories:
        for workflow, losses in trajectories[sigma].items():
            for step, loss in enumerate(losses):
                rows.append({"sigma": sigma, "workflow": workflow, "step": step, "loss": loss})
    return rows


def render_train_report(rows: Sequence[dict], fmt: str = "csv") -> str:
    if not rows:
        raise UsageError("no rows to emit")
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TRAIN_FIELDNAMES)
        for row in rows:
            writer.writerow([_fmt(row[name]) for name in TRAIN_FIELDNAMES])
        return buf.getvalue()
    if fmt == "json":
        return json.dumps(rows, indent=2) + "\n"
    raise UsageError(f"format must be 'csv' or 'json', got {fmt!r}")
