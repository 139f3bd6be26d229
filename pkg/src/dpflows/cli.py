"""Command-line interface: plan, run, train-demo."""

from __future__ import annotations

import argparse
import json
import sys

from .bench import (ScenarioConfig, TrainDemoConfig, emit_report, render_train_report,
                    run_scenario, train_demo, train_rows)
from .errors import ConfigError, InfeasiblePlanError, TrainingDivergedError, UsageError
from .memmodel import MemSpec
from .tiling import LayerDims, plan_blocks


def _parse_dims(text: str) -> LayerDims:
    parts = text.split(",")
    if len(parts) != 4:
        raise ConfigError(f"--dims expects B,T,P,D, got {text!r}")
    try:
        b, t, p, d = (int(v) for v in parts)
    except ValueError:
        raise ConfigError(f"--dims expects integers, got {text!r}") from None
    return LayerDims(B=b, T=t, P=p, D=d)


def _write_out(text: str, out: str | None):
    if out is None:
        sys.stdout.write(text)
    else:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)


def _cmd_plan(args) -> int:
    if args.config is not None:
        cfg = ScenarioConfig.from_file(args.config)
        entries = []
        for layer in cfg.layers:
            for batch in cfg.batch_sizes:
                dims = LayerDims(B=batch, T=layer.T, P=layer.P, D=layer.D)
                plan = plan_blocks(dims, cfg.mem)
                entries.append({"layer": layer.label, "B": batch, "plan": plan.to_dict()})
        _write_out(json.dumps(entries, indent=2) + "\n", args.out)
        return 0
    if args.dims is None or args.capacity_bytes is None:
        raise ConfigError("plan needs either --config or both --dims and --capacity-bytes")
    dims = _parse_dims(args.dims)
    spec = MemSpec(scratchpad_capacity_bytes=args.capacity_bytes,
                   dtype_width_bytes=args.width)
    plan = plan_blocks(dims, spec)
    _write_out(json.dumps(plan.to_dict(), indent=2) + "\n", args.out)
    return 0


def _cmd_run(args) -> int:
    cfg = ScenarioConfig.from_file(args.config)
    rows = run_scenario(cfg)
    if args.out is None:
        emit_report(rows, fmt=args.format, stream=sys.stdout)
    else:
        emit_report(rows, fmt=args.format, path=args.out)
    if args.figures is not None:
        from .plots import render_traffic_figures
        for path in render_traffic_figures(rows, args.figures):
            print(f"wrote {path}", file=sys.stderr)
    return 0


def _cmd_train_demo(args) -> int:
    cfg = TrainDemoConfig.from_file(args.config)
    trajectories = train_demo(cfg)
    text = render_train_report(train_rows(trajectories), fmt=args.format)
    _write_out(text, args.out)
    if args.figures is not None:
        from .plots import render_loss_figures
        for path in render_loss_figures(trajectories, args.figures):
            print(f"wrote {path}", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dpflows",
        description="Compare memory traffic of DP linear-layer backward workflows.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_plan = sub.add_parser("plan", help="print the block plan for dims and a scratchpad size")
    p_plan.add_argument("--config", help="scenario config; plans every (layer, B) cell")
    p_plan.add_argument("--dims", help="B,T,P,D")
    p_plan.add_argument("--capacity-bytes", type=int, help="scratchpad capacity in bytes")
    p_plan.add_argument("--width", type=int, default=8, choices=(2, 4, 8),
                        help="element width in bytes (default 8)")
    p_plan.add_argument("--out", help="output path (default stdout)")
    p_plan.set_defaults(func=_cmd_plan)

    p_run = sub.add_parser("run", help="run a scenario and emit the comparison report")
    p_run.add_argument("--config", required=True, help="scenario config JSON")
    p_run.add_argument("--out", help="report path (default stdout)")
    p_run.add_argument("--format", choices=("csv", "json"), default="csv")
    p_run.add_argument("--figures", metavar="DIR",
                       help="also render per-layer PNG charts into DIR")
    p_run.set_defaults(func=_cmd_run)

    p_train = sub.add_parser("train-demo", help="train a linear layer under each workflow")
    p_train.add_argument("--config", required=True, help="train-demo config JSON")
    p_train.add_argument("--out", help="loss table path (default stdout)")
    p_train.add_argument("--format", choices=("csv", "json"), default="csv")
    p_train.add_argument("--figures", metavar="DIR",
                         help="also render loss-curve PNGs into DIR")
    p_train.set_defaults(func=_cmd_train_demo)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UsageError, InfeasiblePlanError, TrainingDivergedError,
            FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
