"""Shared plumbing for the figure scripts.

Figures are rendered straight from the simulator's CSV output: the CSV is the
only input, nothing is re-simulated.  Each renderer checks the columns it
needs and exits loudly when one is missing.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

FIGURE_KINDS = ("trace", "variance_time", "loglog_scan", "heatmap")


class MissingColumnError(RuntimeError):
    def __init__(self, path, column):
        super().__init__(f"{path}: missing required column '{column}'")
        self.column = column


@dataclass
class FigureSpec:
    inputs: list
    kind: str
    output: str
    fitted_slopes: dict = field(default_factory=dict)


def read_csv(path):
    """CSV with '# key = value' comment headers: (config, column arrays)."""
    config = {}
    names = None
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.rstrip("\n")
            if line.startswith("#"):
                body = line[1:].strip()
                if "=" in body:
                    key, _, val = body.partition("=")
                    config[key.strip()] = val.strip()
                continue
            if not line:
                continue
            if names is None:
                names = line.split(",")
            else:
                rows.append(line.split(","))
    cols = {}
    if names:
        for j, name in enumerate(names):
            try:
                cols[name] = np.array([float(r[j]) for r in rows])
            except ValueError:
                cols[name] = np.array([r[j] for r in rows])
    return config, cols


def require(cols, path, *names):
    for name in names:
        if name not in cols:
            raise MissingColumnError(path, name)
    return [cols[name] for name in names]


def render(spec: FigureSpec):
    """Render one figure kind; returns the matplotlib figure for inspection."""
    if spec.kind == "trace":
        fig = _render_trace(spec)
    elif spec.kind == "variance_time":
        fig = _render_variance_time(spec)
    elif spec.kind == "loglog_scan":
        fig = _render_loglog_scan(spec)
    elif spec.kind == "heatmap":
        fig = _render_heatmap(spec)
    else:
        raise RuntimeError(f"unknown figure kind '{spec.kind}' (expected one of {FIGURE_KINDS})")
    fig.savefig(spec.output, dpi=150)
    return fig


def _render_trace(spec):
    path = spec.inputs[0]
    _, cols = read_csv(path)
    t, xf, xc, cf, cc = require(cols, path, "time", "x_fine", "x_coarse", "fine_collided", "coarse_collided")
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(t, xf, label="fine", lw=1.2)
    ax.plot(t, xc, label="coarse", lw=1.2)
    fmask = cf > 0
    cmask = cc > 0
    ax.plot(t[fmask], xf[fmask], "*", ms=7, color="C0", label="fine collision")
    ax.plot(t[cmask], xc[cmask], "*", ms=9, color="C1", label="coarse collision")
    ax.set_xlabel("time")
    ax.set_ylabel("position")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    return fig


def _render_variance_time(spec):
    path = spec.inputs[0]
    _, cols = read_csv(path)
    t, vf, vc, vd = require(cols, path, "time", "var_fine", "var_coarse", "var_diff")
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(t, vf, "s-", ms=2.5, label="fine")
    ax.plot(t, vc, "o-", ms=2.5, label="coarse")
    ax.plot(t, vd, "^-", ms=2.5, label="difference")
    ax.set_xlabel("time")
    ax.set_ylabel("variance")
    ax.legend(loc="upper left", fontsize=8)
    fig.tight_layout()
    return fig


def _render_loglog_scan(spec):
    path = spec.inputs[0]
    _, cols = read_csv(path)
    dt, mean_diff, var_diff = require(cols, path, "dt", "mean_diff", "var_diff")
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    panels = [("|mean difference|", np.abs(mean_diff)), ("difference variance", var_diff)]
    for ax, (label, values) in zip(axes, panels):
        ax.loglog(dt, values, "o-", ms=3, label=label)
        slope = np.polyfit(np.log2(dt), np.log2(values), 1)[0]
        spec.fitted_slopes[label] = float(slope)
        ax.set_title(f"{label}: slope {slope:.2f}")
        ax.set_xlabel("dt")
        if "var_bound" in cols and np.all(np.isfinite(cols["var_bound"])) and label.startswith("difference"):
            ax.loglog(dt, cols["var_bound"], "--", label="analytic bound")
        ax.legend(fontsize=8)
    fig.tight_layout()
    return fig


def _render_heatmap(spec):
    path = spec.inputs[0]
    _, cols = read_csv(path)
    eps, t_end, root = require(cols, path, "epsilon", "t_end", "m_root")
    eps_vals = np.unique(eps)
    t_vals = np.unique(t_end)
    grid = np.full((t_vals.size, eps_vals.size), np.nan)
    for e, t, r in zip(eps, t_end, root):
        grid[np.searchsorted(t_vals, t), np.searchsorted(eps_vals, e)] = r
    fig, ax = plt.subplots(figsize=(6, 4.5))
    mesh = ax.pcolormesh(eps_vals, t_vals, grid, shading="nearest")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("epsilon")
    ax.set_ylabel("t*")
    lo, hi = np.nanmin(grid), np.nanmax(grid)
    ax.set_title(f"break-even M (range [{lo:.1f}, {hi:.1f}])")
    fig.colorbar(mesh, ax=ax, label="M root")
    fig.tight_layout()
    return fig


def script_main(kind, argv=None):
    """Entry point shared by the per-kind scripts: input CSV, output image."""
    import argparse

    parser = argparse.ArgumentParser(description=f"render a {kind} figure from a simulator CSV")
    parser.add_argument("input", help="input CSV produced by the kinetic-mlmc CLI")
    parser.add_argument("output", help="output image path (png/pdf/svg)")
    args = parser.parse_args(argv)
    try:
        render(FigureSpec(inputs=[args.input], kind=kind, output=args.output))
    except (MissingColumnError, FileNotFoundError, RuntimeError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1
    return 0
