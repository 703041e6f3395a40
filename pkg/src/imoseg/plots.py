"""Figures written next to CLI outputs.  Uses the non-interactive Agg backend."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_LABELS = ("v_x", "v_y", "v_z", "omega_x", "omega_y", "omega_z")


def _save(fig, path):
    # no timestamp metadata, so identical inputs give identical files
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def plot_velocity_trace(times, theta, failed, path):
    """Linear and angular velocity per slice; failed slices are marked on the time axis."""
    times = np.asarray(times, dtype=float)
    theta = np.asarray(theta, dtype=float).reshape(-1, 6)
    failed = np.asarray(failed, dtype=bool)
    fig, (ax_v, ax_w) = plt.subplots(2, 1, sharex=True, figsize=(7, 5))
    for j in range(3):
        ax_v.plot(times, theta[:, j], marker=".", label=_LABELS[j])
        ax_w.plot(times, theta[:, j + 3], marker=".", label=_LABELS[j + 3])
    for ax in (ax_v, ax_w):
        if failed.any():
            ax.plot(times[failed], np.zeros(failed.sum()), "kx", label="failed")
        ax.legend(loc="upper right", fontsize="small")
        ax.grid(alpha=0.3)
    ax_v.set_ylabel("linear (m/s)")
    ax_w.set_ylabel("angular (rad/s)")
    ax_w.set_xlabel("slice time (s)")
    fig.tight_layout()
    _save(fig, path)


def plot_iou(per_slice, threshold, path):
    """Per-slice event-masked IoU with the detection threshold; unscored slices shown as gaps."""
    times = np.array([t for t, _ in per_slice], dtype=float)
    ious = np.array([np.nan if v is None else v for _, v in per_slice], dtype=float)
    fig, ax = plt.subplots(figsize=(7, 3))
    ax.bar(times, np.nan_to_num(ious), width=0.8 * (np.min(np.diff(times)) if times.size > 1 else 1.0))
    ax.axhline(threshold, color="r", linestyle="--", label=f"detection @ {threshold:g}")
    ax.set_ylim(0, 1.05)
    ax.set_xlabel("slice time (s)")
    ax.set_ylabel("IoU")
    ax.legend(loc="lower right", fontsize="small")
    fig.tight_layout()
    _save(fig, path)
