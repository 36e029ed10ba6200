"""Figure rendering for the command-line report path.

The metric suite itself stays plot-free; these helpers turn finished reports
and replay artifacts into PNG files written next to the delimited output.
Rendering is headless (Agg) and avoids volatile PNG metadata so identical
inputs produce identical bytes.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = ["rate_bar_chart", "trajectory_overlay"]

_PNG_METADATA = {"Software": "parkslam"}


def rate_bar_chart(reports, path) -> str:
    """Relocalization rate per scene as a labeled bar chart."""
    fig, ax = plt.subplots(figsize=(7.5, 4.0))
    labels = [r.scene for r in reports]
    rates = [r.relocalization_rate_percent for r in reports]
    ax.bar(range(len(labels)), rates, color="steelblue")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("relocalization rate (%)")
    ax.set_ylim(0.0, 105.0)
    ax.set_title("relocalization rate by scene")
    for k, rate in enumerate(rates):
        ax.annotate(f"{rate:.2f}", (k, rate), ha="center", va="bottom", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_PNG_METADATA)
    plt.close(fig)
    return str(path)


def trajectory_overlay(truths, results, keyframe_poses, path) -> str:
    """Top-down overlay: trained keyframes, replay ground truth, estimates.

    Localized frames plot at their estimated positions; lost frames are
    marked at their ground-truth positions.
    """
    fig, ax = plt.subplots(figsize=(6.5, 5.0))
    kf = np.array([p.t[:2] for p in keyframe_poses])
    gt = np.array([p.t[:2] for p in truths])
    ax.plot(kf[:, 0], kf[:, 1], "o", color="lightgray", markersize=4, label="trained keyframes")
    ax.plot(gt[:, 0], gt[:, 1], "-", color="black", linewidth=1.0, label="replay ground truth")
    est = np.array([r.estimated_pose.t[:2] for r in results if r.localized()])
    if est.size:
        ax.plot(est[:, 0], est[:, 1], "x", color="tab:blue", markersize=4, label="localized estimate")
    lost = np.array(
        [truths[k].t[:2] for k, r in enumerate(results) if not r.localized()]
    )
    if lost.size:
        ax.plot(lost[:, 0], lost[:, 1], "s", color="tab:red", markersize=4, label="lost frame")
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    ax.set_aspect("equal")
    ax.legend(fontsize=8, loc="best")
    ax.set_title("replay localization overlay")
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_PNG_METADATA)
    plt.close(fig)
    return str(path)
