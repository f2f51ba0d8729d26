"""Figure rendering for training runs and evaluation reports.

Renders matplotlib figures to files next to the CSV/JSON outputs: loss
curves on a log scale from a training history, and a per-case overlap
chart from an evaluation report.  Everything uses the Agg backend, so
no display is required.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluation import read_cases_csv
from .training import read_history_csv


def _smooth(values, window: int):
    values = np.asarray(values, dtype=np.float64)
    if window <= 1 or values.size < window:
        return values
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")


def render_loss_curves(history_path, out_path, window: int = 50) -> Path:
    """Loss components over iterations, smoothed, log-scale y."""
    records = read_history_csv(history_path)
    iters = np.array([r.iteration for r in records])
    series = [
        ("image-level", [r.global_loss for r in records], "tab:blue"),
        ("voxel-level (annotated)", [r.labeled_local_loss for r in records],
         "tab:orange"),
        ("bag-level (unlabeled)", [r.unlabeled_local_loss for r in records],
         "tab:green"),
    ]
    fig, (ax, ax_lr) = plt.subplots(
        2, 1, figsize=(7, 6), sharex=True,
        gridspec_kw={"height_ratios": [3, 1]},
    )
    for label, values, color in series:
        values = np.asarray(values, dtype=np.float64)
        active = values > 0
        if not active.any():
            continue
        sm = _smooth(values[active], window)
        xs = iters[active][len(iters[active]) - len(sm):]
        ax.plot(xs, np.maximum(sm, 1e-12), label=label, color=color, lw=1.2)
    ax.set_yscale("log")
    ax.set_ylabel("loss (smoothed)")
    ax.legend(frameon=False, fontsize=9)
    ax.set_title("training loss components")

    ax_lr.plot(iters, [r.lr for r in records], color="tab:gray", lw=1.0)
    ax_lr.set_ylabel("lr")
    ax_lr.set_xlabel("iteration")
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=130)
    plt.close(fig)
    return out_path


def render_case_scores(cases_path, out_path) -> Path:
    """Per-case overlap bars plus image-level probabilities."""
    cases = read_cases_csv(cases_path)
    fig, (ax, ax_p) = plt.subplots(2, 1, figsize=(8, 6), sharex=True)
    ids = [c.case_id for c in cases]
    xs = np.arange(len(cases))

    scored = [(i, c.dsc) for i, c in enumerate(cases) if c.dsc is not None]
    if scored:
        pos_x, pos_dsc = zip(*scored)
        ax.bar(pos_x, pos_dsc, color="tab:orange", width=0.7)
    ax.set_ylim(0, 1)
    ax.set_ylabel("overlap (positives)")
    ax.set_title("per-case results")

    colors = ["tab:red" if c.pred_label != c.true_label else "tab:blue"
              for c in cases]
    ax_p.scatter(xs, [c.global_probability for c in cases], c=colors, s=18)
    ax_p.axhline(0.5, color="tab:gray", lw=0.8, ls="--")
    ax_p.set_ylim(-0.02, 1.02)
    ax_p.set_ylabel("image probability")
    ax_p.set_xticks(xs)
    ax_p.set_xticklabels(ids, rotation=90, fontsize=6)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=130)
    plt.close(fig)
    return out_path


def render_run_figures(run_dir, out_dir=None) -> list[Path]:
    """Render every figure the run directory has inputs for."""
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir else run_dir / "figures"
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    history = run_dir / "history.csv"
    if history.exists():
        written.append(render_loss_curves(history, out_dir / "loss_curves.png"))
    cases = run_dir / "cases.csv"
    if cases.exists():
        written.append(render_case_scores(cases, out_dir / "case_scores.png"))
    if not written:
        raise FileNotFoundError(
            f"{run_dir}: nothing to render (no history.csv or cases.csv)"
        )
    return written
