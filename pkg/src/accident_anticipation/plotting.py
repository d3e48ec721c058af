"""Report figures written next to the CSV exports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import EvalBundle, pr_curve, tta_curve  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 7,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 120,
    "savefig.bbox": "tight",
}
GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


def _figure(width=4.5):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(width, width * GOLDEN))
    return fig, ax


def _save(fig, path):
    with plt.rc_context(STYLE):
        fig.savefig(path)
    plt.close(fig)


def score_curves(bundle: EvalBundle, path, threshold: float = 0.5, max_clips: int = 6):
    fig, ax = _figure()
    pos = bundle.positives[: max_clips // 2]
    neg = [c for c in bundle.clips if c.label == 0][: max_clips - len(pos)]
    for c in pos:
        t = np.arange(1, len(c.score.s) + 1) / c.fps
        (line,) = ax.plot(t, c.score.s, lw=1.2)
        ax.axvline(c.tau / c.fps, color=line.get_color(), ls=":", lw=0.8)
    for c in neg:
        t = np.arange(1, len(c.score.s) + 1) / c.fps
        ax.plot(t, c.score.s, lw=1.0, color="0.6")
    ax.axhline(threshold, color="k", ls="--", lw=0.8)
    ax.set(xlabel="time (s)", ylabel="accident probability", ylim=(0, 1.02),
           title="Per-frame scores (colour: positive, grey: negative)")
    _save(fig, path)


def pr_figure(bundle: EvalBundle, path, mode: str = "frame"):
    fig, ax = _figure(3.6)
    scores, labels = bundle.ranking_data(mode)
    if labels.any():
        r, p = pr_curve(scores, labels)
        ax.plot(r, p, lw=1.2)
    ax.set(xlabel="recall", ylabel="precision", xlim=(0, 1), ylim=(0, 1.02), title=f"Precision-recall ({mode})")
    _save(fig, path)


def tta_sweep(bundle: EvalBundle, path):
    fig, ax = _figure(3.6)
    pos = bundle.positives
    if pos:
        mean = np.mean([tta_curve(c.score.s, bundle.threshold_grid, c.tau, c.fps) for c in pos], axis=0)
        ax.plot(bundle.threshold_grid, mean, lw=1.2)
    ax.set(xlabel="threshold", ylabel="mean TTA (s)", title="TTA over thresholds")
    _save(fig, path)


def iteration_sweep(rows: list[dict], path):
    fig, ax = _figure(3.6)
    n = [r["n_iter"] for r in rows]
    ax.plot(n, [r["AP"] for r in rows], marker="o", lw=1.2, label="AP")
    ax.set(xlabel="test routing iterations", ylabel="AP", title="Test-iteration sweep")
    ax.set_xticks(n)
    _save(fig, path)


def history_figure(rows: list[dict], path):
    fig, ax = _figure()
    epochs = [r["epoch"] for r in rows]
    for key in ("L_S", "L_A", "L_M"):
        vals = [r.get(key) for r in rows]
        if any(v is not None for v in vals):
            ax.plot(epochs, [np.nan if v is None else v for v in vals], marker=".", label=key)
    ax.set(xlabel="epoch", ylabel="loss", title="Training history")
    ax.legend(frameon=False)
    _save(fig, path)
