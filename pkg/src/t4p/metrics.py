"""Displacement metrics for multi-modal predictions and throughput accounting.

A *record* is one evaluated sample: predictions ``(N, K, T, 2)`` and ground
truth ``(N, T, 2)``. Ground-truth rows containing NaN (actor left before the
end of the horizon) are excluded. ``k < K`` uses the first ``k`` modes in
emitted order, since the decoder emits no mode probabilities.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

MISS_THRESHOLD_M = 2.0


@dataclass
class PredictionRecord:
    scene_id: int
    t: int
    actor_ids: np.ndarray  # (N,)
    pred: np.ndarray  # (N, K, T, 2)
    gt: np.ndarray  # (N, T, 2), NaN rows for incomplete futures


def _check(pred: np.ndarray, gt: np.ndarray, k: int) -> None:
    if pred.ndim != 4 or gt.ndim != 3 or pred.shape[0] != gt.shape[0] or pred.shape[2:] != gt.shape[1:]:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    if not 1 <= k <= pred.shape[1]:
        raise ValueError(f"k={k} outside [1, {pred.shape[1]}]")


def mode_errors(pred: np.ndarray, gt: np.ndarray, k: int):
    """Per valid actor and mode: (ADE, FDE, max pointwise distance), each (N_valid, k)."""
    _check(pred, gt, k)
    valid = ~np.isnan(gt).any(axis=(1, 2))
    dist = np.linalg.norm(pred[valid, :k] - gt[valid][:, None], axis=-1)  # (Nv, k, T)
    return dist.mean(-1), dist[..., -1], dist.max(-1)


def _pairs(records) -> Iterable[tuple[np.ndarray, np.ndarray]]:
    for r in records:
        if isinstance(r, PredictionRecord):
            yield r.pred, r.gt
        else:
            yield r


def _sample_mean(records, k: int, which: int) -> float:
    per_sample = []
    for pred, gt in _pairs(records):
        errs = mode_errors(pred, gt, k)[which]
        if len(errs):
            per_sample.append(errs.min(axis=1).mean())
    return float(np.mean(per_sample)) if per_sample else float("nan")


def made(records: Sequence, k: int) -> float:
    """Minimum-over-k ADE, averaged over actors then over evaluated samples."""
    return _sample_mean(records, k, 0)


def mfde(records: Sequence, k: int) -> float:
    return _sample_mean(records, k, 1)


def miss_rate(records: Sequence, k: int, threshold: float = MISS_THRESHOLD_M) -> float:
    """Fraction of actor predictions whose best of k modes strays more than ``threshold``.

    The best mode is the one with the smallest maximum pointwise distance, so
    a prediction is a miss exactly when none of its k modes stays within the
    threshold everywhere. Exactly ``threshold`` is not a miss.
    """
    misses = total = 0
    for pred, gt in _pairs(records):
        maxd = mode_errors(pred, gt, k)[2]
        if len(maxd):
            misses += int((maxd.min(axis=1) > threshold).sum())
            total += len(maxd)
    return misses / total if total else float("nan")


@dataclass
class TimingLog:
    rows: list[tuple[int, str, float]] = field(default_factory=list)

    def add(self, step: int, phase: str, seconds: float) -> None:
        if phase not in ("adapt", "predict"):
            raise ValueError(phase)
        self.rows.append((step, phase, seconds))

    def phase_rows(self, phase: str) -> list[tuple[int, str, float]]:
        return [r for r in self.rows if r[1] == phase]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "phase", "seconds"])
        for step, phase, sec in self.rows:
            w.writerow([step, phase, f"{sec:.9f}"])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TimingLog":
        rows = list(csv.DictReader(io.StringIO(text)))
        return cls([(int(r["step"]), r["phase"], float(r["seconds"])) for r in rows])


def fps(log: TimingLog, include_adapt: bool = True) -> float:
    """Evaluated steps per second of wall time."""
    if not log.rows:
        raise ValueError("empty timing log")
    steps = len({r[0] for r in log.phase_rows("predict")}) or len({r[0] for r in log.rows})
    phases = ("adapt", "predict") if include_adapt else ("predict",)
    seconds = sum(r[2] for r in log.rows if r[1] in phases)
    return steps / seconds if seconds > 0 else float("inf")


@dataclass
class MetricsReport:
    made_1: float
    made_6: float
    mfde_1: float
    mfde_6: float
    miss_rate: float
    miss_rate_1: float
    steps_evaluated: int
    fps: float = float("nan")
    fps_predict: float = float("nan")
    per_scene: dict[int, dict[str, float]] = field(default_factory=dict)

    @classmethod
    def from_records(cls, records: Sequence[PredictionRecord], timing: TimingLog | None = None,
                     k_max: int = 6) -> "MetricsReport":
        scenes: dict[int, list[PredictionRecord]] = {}
        for r in records:
            scenes.setdefault(r.scene_id, []).append(r)
        per_scene = {sid: {"made_6": made(rs, k_max), "mfde_6": mfde(rs, k_max),
                           "miss_rate": miss_rate(rs, k_max), "steps": float(len(rs))}
                     for sid, rs in scenes.items()}
        return cls(
            made_1=made(records, 1), made_6=made(records, k_max),
            mfde_1=mfde(records, 1), mfde_6=mfde(records, k_max),
            miss_rate=miss_rate(records, k_max), miss_rate_1=miss_rate(records, 1),
            steps_evaluated=len(records),
            fps=fps(timing) if timing and timing.rows else float("nan"),
            fps_predict=fps(timing, include_adapt=False) if timing and timing.rows else float("nan"),
            per_scene=per_scene,
        )

    def to_csv(self) -> str:
        rows = [("made", 1, self.made_1), ("made", 6, self.made_6), ("mfde", 1, self.mfde_1),
                ("mfde", 6, self.mfde_6), ("miss_rate", 1, self.miss_rate_1),
                ("miss_rate", 6, self.miss_rate), ("steps_evaluated", "", self.steps_evaluated),
                ("fps", "", self.fps), ("fps_predict", "", self.fps_predict)]
        return "metric,k,value\n" + "".join(f"{m},{k},{v}\n" for m, k, v in rows)

    def table(self) -> str:
        lines = [f"{'metric':<12}{'k=1':>10}{'k=6':>10}",
                 f"{'mADE':<12}{self.made_1:>10.3f}{self.made_6:>10.3f}",
                 f"{'mFDE':<12}{self.mfde_1:>10.3f}{self.mfde_6:>10.3f}",
                 f"{'MissRate':<12}{self.miss_rate_1:>10.3f}{self.miss_rate:>10.3f}",
                 f"steps evaluated: {self.steps_evaluated}   FPS: {self.fps:.1f} "
                 f"(prediction only: {self.fps_predict:.1f})"]
        return "\n".join(lines)


# --- prediction dump ------------------------------------------------------

def write_prediction_dump(records: Sequence[PredictionRecord], fh) -> None:
    """Lines ``P <scene_id> <t> <actor_id> <k> <step> <x> <y>``."""
    for r in records:
        N, K, T, _ = r.pred.shape
        for n in range(N):
            aid = int(r.actor_ids[n])
            for k in range(K):
                for s in range(T):
                    x, y = r.pred[n, k, s]
                    fh.write(f"P {r.scene_id} {r.t} {aid} {k} {s} {x:.6f} {y:.6f}\n")


def read_prediction_dump(fh) -> dict[tuple[int, int], dict[int, np.ndarray]]:
    """``{(scene_id, t): {actor_id: (K, T, 2)}}``."""
    raw: dict[tuple[int, int], dict[int, dict[tuple[int, int], tuple[float, float]]]] = {}
    for lineno, line in enumerate(fh, start=1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] != "P" or len(parts) != 8:
            raise ValueError(f"line {lineno}: bad prediction record")
        sid, t, aid, k, s = (int(v) for v in parts[1:6])
        raw.setdefault((sid, t), {}).setdefault(aid, {})[(k, s)] = (float(parts[6]), float(parts[7]))
    out: dict[tuple[int, int], dict[int, np.ndarray]] = {}
    for key, actors in raw.items():
        out[key] = {}
        for aid, pts in actors.items():
            K = max(k for k, _ in pts) + 1
            T = max(s for _, s in pts) + 1
            arr = np.full((K, T, 2), np.nan)
            for (k, s), xy in pts.items():
                arr[k, s] = xy
            out[key][aid] = arr
    return out
