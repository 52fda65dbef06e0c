"""Figure and comparison-strip emission for fit runs and metric tables.

Everything here is batch output: static PNGs written next to the CSVs they
summarize, suitable for later inspection.  No interactive surface.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Optional, Sequence

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import io_formats

_FIG_DPI = 110


def _read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [dict(row) for row in csv.DictReader(fh)]


def _column(rows: list[dict], name: str) -> np.ndarray:
    return np.array([float(r[name]) for r in rows])


# --------------------------------------------------------------------------
# fit-run figures
# --------------------------------------------------------------------------

def plot_loss_curves(run_dir, out_path=None) -> Path:
    """Stage-1 loss breakdown (and stage-2 total, when present) on log axes."""
    run_dir = Path(run_dir)
    out_path = Path(out_path) if out_path else run_dir / "loss_curves.png"
    rows = _read_csv(run_dir / "losses.csv")
    s2_path = run_dir / "stage2_losses.csv"
    s2_rows = _read_csv(s2_path) if s2_path.is_file() else []

    ncols = 2 if s2_rows else 1
    fig, axes = plt.subplots(1, ncols, figsize=(6.4 * ncols, 4.2))
    ax = axes[0] if s2_rows else axes
    it = _column(rows, "iter")
    for name in ("total", "alpha", "silhouette", "flow", "distribution"):
        vals = _column(rows, name)
        ax.plot(it, np.maximum(vals, 1e-12), label=name,
                lw=1.6 if name == "total" else 1.0)
    ax.set_yscale("log")
    ax.set_xlabel("stage-1 iteration")
    ax.set_ylabel("loss")
    ax.set_title("stage 1: joint physics/geometry/scale")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)

    if s2_rows:
        ax2 = axes[1]
        it2 = _column(s2_rows, "iter")
        ax2.plot(it2, np.maximum(_column(s2_rows, "total"), 1e-12),
                 label="total", lw=1.0)
        ax2.set_yscale("log")
        ax2.set_xlabel("stage-2 iteration")
        ax2.set_title("stage 2: appearance refinement")
        tw = ax2.twinx()
        tw.plot(it2, _column(s2_rows, "psnr"), color="tab:green", alpha=0.6,
                lw=0.8)
        tw.set_ylabel("PSNR [dB]", color="tab:green")
        ax2.grid(alpha=0.3)

    fig.tight_layout()
    fig.savefig(out_path, dpi=_FIG_DPI)
    plt.close(fig)
    return out_path


def plot_param_trace(run_dir, out_path=None,
                     truth: Optional[dict] = None) -> Path:
    """Decoded parameter trajectories; optional dashed truth lines.

    ``truth`` may carry E, nu, sigma_y, v0 (3-vector), s.
    """
    run_dir = Path(run_dir)
    out_path = Path(out_path) if out_path else run_dir / "param_trace.png"
    rows = _read_csv(run_dir / "params_trace.csv")
    it = _column(rows, "iter")
    truth = truth or {}

    fig, axes = plt.subplots(2, 3, figsize=(12.0, 6.4))

    def panel(ax, cols, title, log=False, truth_vals=()):
        for name in cols:
            ax.plot(it, _column(rows, name), lw=1.0, label=name)
        for tv in truth_vals:
            if tv is not None:
                ax.axhline(float(tv), ls="--", color="k", alpha=0.5, lw=0.8)
        if log:
            ax.set_yscale("log")
        ax.set_title(title)
        ax.grid(alpha=0.3)
        if len(cols) > 1:
            ax.legend(fontsize=7)

    panel(axes[0, 0], ["E"], "Young's modulus E [Pa]", log=True,
          truth_vals=[truth.get("E")])
    panel(axes[0, 1], ["nu"], "Poisson ratio ν",
          truth_vals=[truth.get("nu")])
    panel(axes[0, 2], ["sigma_y"], "yield stress σ_y [Pa]", log=True,
          truth_vals=[truth.get("sigma_y")])
    v0 = truth.get("v0")
    panel(axes[1, 0], ["v0x", "v0y", "v0z"], "initial velocity v0 [m/s]",
          truth_vals=list(v0) if v0 is not None else [])
    panel(axes[1, 1], ["s"], "global scale s",
          truth_vals=[truth.get("s")])
    axes[1, 2].axis("off")
    for ax in axes[1, :2]:
        ax.set_xlabel("iteration")

    fig.tight_layout()
    fig.savefig(out_path, dpi=_FIG_DPI)
    plt.close(fig)
    return out_path


# --------------------------------------------------------------------------
# metric-table figures
# --------------------------------------------------------------------------

def plot_metrics_summary(rows: list[dict], out_path,
                         group_by: str = "config") -> Path:
    """Grouped mean±std bars for each numeric metric column present."""
    out_path = Path(out_path)
    numeric = [c for c in rows[0].keys()
               if c not in ("scene", "seed", "config")] if rows else []
    numeric = [c for c in numeric
               if any(not math.isnan(float(r.get(c, "nan"))) for r in rows)]
    groups: dict[str, list[dict]] = {}
    for r in rows:
        groups.setdefault(str(r.get(group_by, "")), []).append(r)
    names = sorted(groups)

    ncols = max(1, len(numeric))
    fig, axes = plt.subplots(1, ncols, figsize=(3.0 * ncols, 3.4),
                             squeeze=False)
    for j, col in enumerate(numeric):
        ax = axes[0, j]
        means, stds = [], []
        for name in names:
            vals = [float(r[col]) for r in groups[name]
                    if not math.isnan(float(r.get(col, "nan")))]
            means.append(sum(vals) / len(vals) if vals else float("nan"))
            stds.append(float(np.std(vals)) if len(vals) > 1 else 0.0)
        ax.bar(range(len(names)), means, yerr=stds, capsize=3,
               color="tab:blue", alpha=0.8)
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=30, ha="right", fontsize=7)
        ax.set_title(col, fontsize=9)
        ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(out_path, dpi=_FIG_DPI)
    plt.close(fig)
    return out_path


# --------------------------------------------------------------------------
# comparison strips
# --------------------------------------------------------------------------

def comparison_strip(observed: np.ndarray, rendered: np.ndarray,
                     out_path) -> Path:
    """One side-by-side [observed | rendered | 5x abs diff] strip."""
    out_path = Path(out_path)
    obs = np.asarray(observed, dtype=np.float64)
    ren = np.asarray(rendered, dtype=np.float64)
    if obs.shape != ren.shape:
        raise ValueError(f"frame shape mismatch: {obs.shape} vs {ren.shape}")
    diff = np.clip(5.0 * np.abs(obs - ren), 0.0, 1.0)
    gap = np.ones((obs.shape[0], 2, obs.shape[2]))
    strip = np.concatenate([obs, gap, ren, gap, diff], axis=1)
    io_formats.write_png(out_path, strip)
    return out_path


def emit_comparison_strips(bundle, run_dir, frames: Sequence[int],
                           out_dir=None) -> list[Path]:
    """Write one comparison strip per requested frame index.

    Uses the run's rendered frames (renders/%04d.png) against the bundle's
    observed frames.
    """
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir else run_dir / "comparisons"
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for t in frames:
        obs = bundle.frame(t).numpy()
        ren = io_formats.read_png(run_dir / "renders" / f"{t:04d}.png").numpy()
        written.append(
            comparison_strip(obs, ren, out_dir / f"compare_{t:04d}.png"))
    return written
