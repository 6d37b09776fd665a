"""Figure rendering for scenario runs.

Renders PNG summaries of a metrics series next to the CSV: the healing
convergence curves, channel frame counts with horizon completeness, and
per-tick byte volumes on the patch and uplink paths.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .sim import TickMetrics  # noqa: E402


def render_figures(metrics: list[TickMetrics], out_dir: str | Path) -> list[Path]:
    """Write healing.png, channel.png and bytes.png into out_dir."""
    if not metrics:
        raise ValueError("no metrics to render")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ticks = [m.tick for m in metrics]
    written = []

    fig, ax = plt.subplots(figsize=(8.0, 4.5))
    ax.step(ticks, [m.master_mismatch for m in metrics], where="post",
            label="master vs ground truth", lw=1.8)
    ax.step(ticks, [m.cache_mismatch for m in metrics], where="post",
            label="worst cache vs master", lw=1.4)
    ax.step(ticks, [m.open_deviations for m in metrics], where="post",
            label="open deviation keys", lw=1.2, ls="--")
    ax.set_xlabel("tick")
    ax.set_ylabel("mismatching keys")
    ax.set_title("Healing convergence")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    path = out / "healing.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(8.0, 4.5))
    ax.plot(ticks, [m.frames_sent for m in metrics], label="frames sent", lw=1.4)
    ax.plot(ticks, [m.frames_dropped for m in metrics], label="frames dropped",
            lw=1.4)
    ax.set_xlabel("tick")
    ax.set_ylabel("frames per tick")
    ax.grid(alpha=0.3)
    ax2 = ax.twinx()
    ratio = [
        sum(m.horizon_complete) / len(m.horizon_complete) for m in metrics
    ]
    ax2.plot(ticks, ratio, color="tab:green", ls=":",
             label="horizon completeness")
    ax2.set_ylabel("complete fraction")
    ax2.set_ylim(-0.05, 1.05)
    lines, labels = ax.get_legend_handles_labels()
    lines2, labels2 = ax2.get_legend_handles_labels()
    ax.legend(lines + lines2, labels + labels2, loc="center right")
    ax.set_title("Bus behavior")
    fig.tight_layout()
    path = out / "channel.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(8.0, 4.5))
    ax.bar([t - 0.2 for t in ticks], [m.uplink_bytes for m in metrics],
           width=0.4, label="uplink bytes")
    ax.bar([t + 0.2 for t in ticks], [m.patch_bytes for m in metrics],
           width=0.4, label="patch bytes served")
    ax.set_xlabel("tick")
    ax.set_ylabel("bytes")
    ax.set_title("Data volumes")
    ax.grid(alpha=0.3, axis="y")
    ax.legend()
    fig.tight_layout()
    path = out / "bytes.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    return written
