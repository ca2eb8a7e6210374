"""Static figures: trajectory panels, reconstruction panels, accuracy-vs-FPS scatter."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402

from .backbone import Backbone, featurize, make_mask_plan  # noqa: E402
from .metrics import PredictionRecord  # noqa: E402
from .scenario import Sample  # noqa: E402


def _lanes(ax, sample: Sample) -> None:
    for lane in sample.lanes:
        ax.plot(lane[:, 0], lane[:, 1], color="0.85", lw=1, zorder=0)


def trajectory_panel(path: str | Path, sample: Sample, record: PredictionRecord,
                     title: str = "", max_actors: int = 8) -> Path:
    """History, K predicted modes and ground truth for the closest actors."""
    fig, ax = plt.subplots(figsize=(6, 6))
    _lanes(ax, sample)
    cur = np.nan_to_num(sample.history[:, -1])
    order = np.argsort(np.hypot(cur[:, 0], cur[:, 1]))[:max_actors]
    for n in order:
        h = sample.history[n]
        ax.plot(h[:, 0], h[:, 1], color="tab:blue", lw=2)
        for k in range(record.pred.shape[1]):
            ax.plot(record.pred[n, k, :, 0], record.pred[n, k, :, 1], color="tab:orange", lw=0.8, alpha=0.7)
        gt = record.gt[n]
        ax.plot(gt[:, 0], gt[:, 1], color="tab:green", lw=1.5, ls="--")
    ax.plot([], [], color="tab:blue", label="history")
    ax.plot([], [], color="tab:orange", label="predicted modes")
    ax.plot([], [], color="tab:green", ls="--", label="ground truth")
    ax.set_aspect("equal")
    ax.set_xlim(-40, 60)
    ax.set_ylim(-50, 50)
    ax.legend(loc="upper left", fontsize=8)
    ax.set_title(title or f"scene {record.scene_id}, t={record.t}")
    path = Path(path)
    fig.savefig(path, dpi=110, bbox_inches="tight")
    plt.close(fig)
    return path


@torch.no_grad()
def reconstruction_panel(path: str | Path, sample: Sample, models: Sequence[tuple[str, Backbone]],
                         tokens: Sequence[torch.Tensor | None] | None = None, seed: int = 0,
                         actor_ratio: float = 0.4, lane_ratio: float = 0.3) -> Path:
    """One column per model: masked input, then reconstruction of the masked elements."""
    fig, axes = plt.subplots(1, len(models), figsize=(5 * len(models), 5), squeeze=False)
    for col, (label, model) in enumerate(models):
        ax = axes[0, col]
        batch = featurize(sample, model.cfg, next(model.parameters()).dtype)
        plan = make_mask_plan(sample, actor_ratio, lane_ratio, seed)
        tok = tokens[col] if tokens and tokens[col] is not None else model.class_token_rows(batch)
        x_hat, y_hat, m_hat = (t.double().numpy() for t in model.reconstruct(batch, tok, plan))
        cur = batch.current.double().numpy()
        for i, lane in enumerate(sample.lanes):
            ax.plot(lane[:, 0], lane[:, 1], color="0.8" if not plan.lane_masked[i] else "0.95", lw=1)
            if plan.lane_masked[i]:
                c = np.nanmean(lane, axis=0)
                ax.plot(m_hat[i, :, 0] + c[0], m_hat[i, :, 1] + c[1], color="tab:purple", lw=1)
        for n in range(sample.num_actors):
            if plan.history_masked[n]:
                ax.plot(x_hat[n, :, 0] + cur[n, 0], x_hat[n, :, 1] + cur[n, 1], color="tab:red", lw=1.5)
            else:
                ax.plot(sample.history[n, :, 0], sample.history[n, :, 1], color="tab:blue", lw=1.5)
            if plan.future_masked[n]:
                ax.plot(y_hat[n, :, 0] + cur[n, 0], y_hat[n, :, 1] + cur[n, 1], color="tab:red", lw=1.5)
            elif sample.future is not None:
                ax.plot(sample.future[n, :, 0], sample.future[n, :, 1], color="tab:cyan", lw=1.5)
        ax.set_aspect("equal")
        ax.set_xlim(-40, 60)
        ax.set_ylim(-50, 50)
        ax.set_title(label)
    axes[0, 0].plot([], [], color="tab:red", label="reconstructed (masked)")
    axes[0, 0].plot([], [], color="tab:purple", label="reconstructed lane")
    axes[0, 0].legend(loc="upper left", fontsize=8)
    path = Path(path)
    fig.savefig(path, dpi=110, bbox_inches="tight")
    plt.close(fig)
    return path


def accuracy_fps_scatter(path: str | Path, points: Sequence[tuple[str, float, float]],
                         realtime_fps: float | None = None) -> Path:
    """``points`` are ``(label, fps, mADE_6)``."""
    fig, ax = plt.subplots(figsize=(5, 4))
    for label, fps, err in points:
        ax.scatter(fps, err, s=30)
        ax.annotate(label, (fps, err), textcoords="offset points", xytext=(4, 4), fontsize=8)
    if realtime_fps:
        ax.axvline(realtime_fps, color="0.5", ls=":", lw=1)
    ax.set_xlabel("FPS (adapt + predict)")
    ax.set_ylabel("mADE$_6$ [m]")
    path = Path(path)
    fig.savefig(path, dpi=110, bbox_inches="tight")
    plt.close(fig)
    return path
