"""Figure rendering from parsed telemetry.

Four figure kinds: per-expert activated-parameter trajectories, loss versus
training FLOPs, similarity/synergy heatmaps annotated with expert sizes, and
per-difficulty-class activation bars.  Inputs are never modified; output is
deterministic for identical inputs.
"""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .schema import Telemetry, read_telemetry_dir

FIGURE_KINDS = ("trajectory", "loss_curve", "heatmap", "bars")
_FIGSIZE = (6.4, 4.2)
_DPI = 120


@dataclass
class FigureSpec:
    kind: str
    telemetry_dir: str
    output_path: str


def _placeholder(ax, message: str) -> None:
    ax.text(0.5, 0.5, message, ha="center", va="center", transform=ax.transAxes)
    ax.set_xticks([])
    ax.set_yticks([])


def _warn(message: str) -> None:
    print(f"warning: {message}", file=sys.stderr)


def _save(fig, path: str) -> None:
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def render_trajectory(t: Telemetry, path: str) -> None:
    fig, ax = plt.subplots(figsize=_FIGSIZE, layout="constrained")
    if not t.rows:
        _warn("no telemetry rows; trajectory figure is a placeholder")
        _placeholder(ax, "no telemetry rows")
    else:
        steps = t.steps
        sizes = t.expert_sizes
        tokens = t.tokens_per_step
        for expert, series in t.per_expert_series("activated_params").items():
            values = np.asarray(series)
            if tokens:
                values = values / tokens
            ax.plot(steps, values, label=f"width {sizes[expert]}")
        ax.set_xlabel("step")
        ax.set_ylabel("activated parameters" + (" / token" if tokens else " (batch total)"))
        ax.legend(fontsize=8, ncols=2)
    ax.set_title("Per-expert activated parameters during training")
    _save(fig, path)


def render_loss_curve(t: Telemetry, path: str) -> None:
    fig, ax = plt.subplots(figsize=_FIGSIZE, layout="constrained")
    curve = t.loss_curve
    if not curve:
        _warn("no loss curve in telemetry.json; loss figure is a placeholder")
        _placeholder(ax, "no loss curve")
    else:
        flops = [e["cum_flops"] for e in curve]
        ax.plot(flops, [e["lm_loss"] for e in curve], label="language modeling")
        if all(e.get("combined_loss") is not None for e in curve):
            ax.plot(flops, [e["combined_loss"] for e in curve], label="combined", alpha=0.7)
        ax.set_xlabel("cumulative training FLOPs")
        ax.set_ylabel("loss")
        ax.legend(fontsize=8)
    ax.set_title("Loss versus training FLOPs")
    _save(fig, path)


def render_heatmap(t: Telemetry, path: str) -> None:
    similarity = t.matrix("similarity")
    synergy = t.matrix("synergy")
    sizes = t.analysis.get("expert_sizes")
    fig, axes = plt.subplots(1, 2, figsize=(10.5, 4.4), layout="constrained")
    for ax, matrix, title in (
        (axes[0], similarity, "token-distribution distance"),
        (axes[1], synergy, "token-distribution divergence"),
    ):
        if matrix is None or matrix.size == 0:
            _warn(f"no {title} matrix; heatmap panel is a placeholder")
            _placeholder(ax, "no data")
            ax.set_title(title)
            continue
        masked = np.ma.masked_invalid(matrix)
        image = ax.imshow(masked, cmap="viridis")
        fig.colorbar(image, ax=ax, shrink=0.85)
        labels = [str(s) for s in sizes] if sizes else [str(i) for i in range(len(matrix))]
        ax.set_xticks(range(len(matrix)), labels, rotation=45, fontsize=7)
        ax.set_yticks(range(len(matrix)), labels, fontsize=7)
        ax.set_xlabel("expert width")
        ax.set_ylabel("expert width")
        ax.set_title(title)
    _save(fig, path)


def render_bars(t: Telemetry, path: str) -> None:
    ratios = t.analysis.get("activation_ratios", {})
    sizes = t.analysis.get("expert_sizes")
    fig, ax = plt.subplots(figsize=_FIGSIZE, layout="constrained")
    if not ratios:
        _warn("no activation ratios; bars figure is a placeholder")
        _placeholder(ax, "no activation ratios")
    else:
        classes = sorted(ratios)
        n_experts = len(next(iter(ratios.values())))
        x = np.arange(n_experts, dtype=np.float64)
        width = 0.8 / len(classes)
        for i, name in enumerate(classes):
            ax.bar(x + (i - (len(classes) - 1) / 2) * width, ratios[name], width, label=name)
        labels = [str(s) for s in sizes] if sizes else [str(i) for i in range(n_experts)]
        ax.set_xticks(x, labels)
        ax.set_xlabel("expert width")
        ax.set_ylabel("share of class activations")
        ax.legend(fontsize=8)
    ax.set_title("Expert activation share by token difficulty")
    _save(fig, path)


_RENDERERS = {
    "trajectory": render_trajectory,
    "loss_curve": render_loss_curve,
    "heatmap": render_heatmap,
    "bars": render_bars,
}


def render_figures(telemetry_dir: str, out_dir: str) -> list[FigureSpec]:
    """Render all four figure kinds; returns the specs that were written."""
    telemetry = read_telemetry_dir(telemetry_dir)
    os.makedirs(out_dir, exist_ok=True)
    specs = []
    for kind in FIGURE_KINDS:
        spec = FigureSpec(
            kind=kind,
            telemetry_dir=telemetry_dir,
            output_path=os.path.join(out_dir, f"{kind}.png"),
        )
        _RENDERERS[kind](telemetry, spec.output_path)
        specs.append(spec)
    return specs
