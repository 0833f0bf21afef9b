"""PNG figures for reports, rendered off-screen."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import SegmentHistogram  # noqa: E402


def plot_histogram(hist: SegmentHistogram, path: str | Path, title: str = "Segment and word lengths") -> Path:
    """Overlay segment lengths and reference word lengths (both normalised) in ms."""
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    seg = hist.segments
    if seg.counts.size:
        width = seg.frame_ms
        left = seg.edges_ms[:-1]
        ax.bar(left, seg.counts / max(seg.total, 1), width=width, align="edge", alpha=0.6,
               label=f"segments (n={seg.total})")
        if hist.reference is not None and hist.reference.total:
            ref = hist.reference
            ax.step(ref.edges_ms, list(ref.counts / ref.total) + [0.0], where="post", color="k",
                    label=f"words (n={ref.total})")
    else:
        ax.text(0.5, 0.5, "no segment crossings", ha="center", va="center", transform=ax.transAxes)
    ax.set_xlabel("length (ms)")
    ax.set_ylabel("fraction")
    ax.set_title(title)
    ax.legend(loc="upper right")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_training(history: list[dict], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    xs = list(range(1, len(history) + 1))
    ax.plot(xs, [h["ce"] for h in history], label="cross-entropy")
    ax.plot(xs, [h["word"] for h in history], label="word loss")
    ax.set_yscale("log")
    ax.set_xlabel("epoch (all stages)")
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
