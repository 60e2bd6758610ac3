"""Report figures: loss curves, mel/alignment panels and metric summaries.

Everything renders off-screen with the Agg backend and is written straight to
PNG files; PNG metadata is stripped so reruns give identical bytes.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "figure.dpi": 100,
    "savefig.dpi": 100,
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "image.cmap": "magma",
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return path


def plot_losses(records: Sequence[Mapping[str, float]], path, names: Sequence[str],
                window: int = 20, title: str = "training loss") -> Path:
    """One line per loss component (trailing moving average), log-scaled y axis."""
    from .training import smoothed

    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        steps = [r["step"] for r in records]
        for name in names:
            vals = [r[name] for r in records if name in r]
            if len(vals) != len(steps):
                continue
            ax.plot(steps, smoothed(vals, window), lw=1.2, label=name)
        ax.set_yscale("symlog", linthresh=1e-3)
        ax.set_xlabel("step")
        ax.set_ylabel(f"loss (moving avg, {window})")
        ax.set_title(title)
        ax.legend(frameon=False, ncol=2)
        fig.tight_layout()
        return _save(fig, path)


def plot_mel(mel: np.ndarray, path, alignment: np.ndarray | None = None,
             title: str = "mel spectrogram") -> Path:
    """Mel image, with the decoder alignment underneath when given."""
    rows = 2 if alignment is not None else 1
    with plt.rc_context(RC):
        fig, axes = plt.subplots(rows, 1, figsize=(6, 2.4 * rows), squeeze=False)
        ax = axes[0, 0]
        im = ax.imshow(np.asarray(mel).T, origin="lower", aspect="auto", interpolation="nearest")
        fig.colorbar(im, ax=ax, pad=0.01)
        ax.set_ylabel("mel bin")
        ax.set_title(title)
        if alignment is not None:
            ax2 = axes[1, 0]
            im2 = ax2.imshow(np.asarray(alignment).T, origin="lower", aspect="auto",
                             interpolation="nearest", cmap="viridis", vmin=0, vmax=1)
            fig.colorbar(im2, ax=ax2, pad=0.01)
            ax2.set_ylabel("phoneme")
            ax2.set_xlabel("decoder step")
        else:
            ax.set_xlabel("frame")
        fig.tight_layout()
        return _save(fig, path)


def plot_metrics(report, path) -> Path:
    """Per-accent bars for MCD, F0 RMSE and frame disturbance."""
    rows = report.pairs
    accents = sorted({r.accent for r in rows})
    cols = [("mcd_db", "MCD (dB)"), ("f0_rmse_hz", "F0 RMSE (Hz)"), ("fd_frames", "FD (frames)")]
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, len(cols), figsize=(8, 2.8))
        for ax, (key, label) in zip(axes, cols):
            means = []
            for a in accents:
                vals = [getattr(r, key) for r in rows if r.accent == a]
                vals = [v for v in vals if v is not None and np.isfinite(v)]
                means.append(float(np.mean(vals)) if vals else 0.0)
            ax.bar(range(len(accents)), means, color="0.35")
            ax.set_xticks(range(len(accents)), accents)
            ax.set_title(label)
        fig.tight_layout()
        return _save(fig, path)


def plot_aecs(scores: Mapping[str, float], path, title: str = "within-accent cosine") -> Path:
    accents = sorted(scores)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4, 2.8))
        ax.bar(range(len(accents)), [scores[a] for a in accents], color="0.35")
        ax.set_xticks(range(len(accents)), accents)
        ax.set_ylim(min(0.0, min(scores.values(), default=0.0)), 1.0)
        ax.set_title(title)
        fig.tight_layout()
        return _save(fig, path)
