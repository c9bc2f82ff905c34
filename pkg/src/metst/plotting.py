"""Static SVG panels of spotting/recognition curves with interval bands."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .data import EMOTION_NAMES, ExpressionInterval  # noqa: E402
from .model import AnalysisOutput  # noqa: E402


def class_names(n_emotions: int) -> list[str]:
    names = [EMOTION_NAMES[i] if i < len(EMOTION_NAMES) else f"class{i}" for i in range(n_emotions)]
    return names + ["neutral"]


def write_curves_csv(out: AnalysisOutput, path) -> None:
    names = class_names(out.recog.shape[1] - 1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "spot"] + [f"p_{n}" for n in names])
        for t in range(len(out.spot)):
            w.writerow([t, f"{out.spot[t]:.9g}"] + [f"{v:.9g}" for v in out.recog[t]])


def plot_video(out: AnalysisOutput, path, title: str = "",
               gts: Sequence[ExpressionInterval] = (),
               preds: Sequence[ExpressionInterval] = ()) -> Path:
    """Two stacked panels: spotting score and per-class probabilities."""
    names = class_names(out.recog.shape[1] - 1)
    plt.rcParams["svg.hashsalt"] = "metst"
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(12, 5), sharex=True)
    # bands carry SVG ids ("gt-band-*", "pred-band-*") so consumers can find them
    for a, ax in enumerate((ax1, ax2)):
        for i, iv in enumerate(gts):
            ax.axvspan(iv.onset, iv.offset + 1, color="tab:green", alpha=0.25, lw=0,
                       gid=f"gt-band-{a}-{i}")
        for i, iv in enumerate(preds):
            ax.axvspan(iv.onset, iv.offset + 1, color="tab:red", alpha=0.2, lw=0,
                       gid=f"pred-band-{a}-{i}")
    ax1.plot(out.spot, color="black", lw=1)
    ax1.set_ylim(0, 1)
    ax1.set_ylabel("spot")
    for k, name in enumerate(names):
        ax2.plot(out.recog[:, k], lw=1, label=name)
    ax2.set_ylim(0, 1)
    ax2.set_ylabel("p(class)")
    ax2.set_xlabel("frame")
    ax2.legend(loc="upper right", fontsize=7, ncol=len(names))
    if title:
        ax1.set_title(title)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return Path(path)
