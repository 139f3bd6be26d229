"""Render report figures next to the delimited output.

Figures are a convenience view of the same rows the CSV carries; the CSV
stays the canonical artifact.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .bench import ComparisonRow


def render_traffic_figures(rows: Sequence[ComparisonRow], out_dir) -> list[Path]:
    """One PNG per layer: bytes moved and flops, grouped by workflow."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    layers = []
    for row in rows:
        if row.layer not in layers:
            layers.append(row.layer)
    paths = []
    for layer in layers:
        layer_rows = [r for r in rows if r.layer == layer]
        batches = sorted({r.B for r in layer_rows})
        workflows = []
        for r in layer_rows:
            if r.workflow not in workflows:
                workflows.append(r.workflow)
        fig, (ax_bytes, ax_flops) = plt.subplots(1, 2, figsize=(10, 4))
        width = 0.8 / max(len(workflows), 1)
        for wi, wf in enumerate(workflows):
            by_batch = {r.B: r for r in layer_rows if r.workflow == wf}
            xs = [bi + wi * width for bi in range(len(batches))]
            moved = [by_batch[b].bytes_loaded + by_batch[b].bytes_stored
                     if b in by_batch else 0 for b in batches]
            flops = [by_batch[b].flops if b in by_batch else 0 for b in batches]
            redundant = [by_batch[b].redundant_flops if b in by_batch else 0 for b in batches]
            ax_bytes.bar(xs, moved, width=width, label=wf)
            ax_flops.bar(xs, flops, width=width, label=wf)
            ax_flops.bar(xs, redundant, width=width, color="none",
                         edgecolor="black", hatch="//")
        ticks = [bi + 0.4 - width / 2 for bi in range(len(batches))]
        for ax, title in ((ax_bytes, "bytes moved"), (ax_flops, "flops (hatched: redundant)")):
            ax.set_xticks(ticks)
            ax.set_xticklabels([str(b) for b in batches])
            ax.set_xlabel("batch size")
            ax.set_title(f"{layer}: {title}")
        ax_bytes.set_ylabel("bytes")
        ax_bytes.legend(fontsize="small")
        fig.tight_layout()
        path = out_dir / f"traffic_{layer}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        paths.append(path)
    return paths


def render_loss_figures(trajectories: dict[float, dict[str, list[float]]], out_dir) -> list[Path]:
    """One PNG per noise level with each workflow's loss curve."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for sigma, per_wf in trajectories.items():
        fig, ax = plt.subplots(figsize=(6, 4))
        for workflow, losses in per_wf.items():
            ax.plot(range(len(losses)), losses, label=workflow)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_title(f"sigma = {sigma}")
        ax.legend(fontsize="small")
        fig.tight_layout()
        tag = repr(float(sigma)).replace(".", "p").replace("-", "m")
        path = out_dir / f"loss_sigma_{tag}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        paths.append(path)
    return paths
