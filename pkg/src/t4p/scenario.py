"""Scenes, samples, lane maps, the scenario text format and the delayed stream."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

LANE_RADIUS_M = 50.0
LANE_SPACING_M = 1.0
MAX_SEGMENT_M = 20.0
# points per padded lane segment: 20 m at 1 m spacing
LANE_POINTS = int(MAX_SEGMENT_M / LANE_SPACING_M) + 1

HEADER_MAGIC = "T4P-SCENE"
HEADER_VERSION = "v1"


class ActorClass(IntEnum):
    UNKNOWN = 0
    VEHICLE = 1
    PEDESTRIAN = 2
    BICYCLE = 3
    MOTORCYCLE = 4


NUM_CLASSES = len(ActorClass)


class SceneFormatError(ValueError):
    """Malformed scenario file. Carries the offending line number when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class InvariantError(ValueError):
    """A scene or sample invariant does not hold."""


@dataclass(frozen=True)
class TimeConfig:
    t_h: int
    t_f: int
    dt: float
    tau: int | None = None

    def __post_init__(self):
        if self.t_h < 1 or self.t_f < 1:
            raise ValueError("t_h and t_f must be positive")
        if self.tau is not None and not 0 < self.tau <= self.t_f:
            raise ValueError(f"tau must lie in (0, t_f], got {self.tau}")

    @property
    def delay(self) -> int:
        return self.t_f if self.tau is None else self.tau

    @classmethod
    def named(cls, name: str, tau: int | None = None) -> "TimeConfig":
        presets = {"short": (10, 30, 0.1), "long": (5, 12, 0.5)}
        if name not in presets:
            raise ValueError(f"unknown time config {name!r}; expected one of {sorted(presets)}")
        t_h, t_f, dt = presets[name]
        return cls(t_h, t_f, dt, tau)


SHORT = TimeConfig.named("short")
LONG = TimeConfig.named("long")


@dataclass(frozen=True)
class LaneSegment:
    segment_id: int
    points: np.ndarray  # (P, 2), meters

    @property
    def length(self) -> float:
        return float(np.linalg.norm(np.diff(self.points, axis=0), axis=1).sum())


def resample_polyline(points: np.ndarray, spacing: float = LANE_SPACING_M) -> np.ndarray:
    """Resample a polyline so consecutive output points are exactly ``spacing`` apart.

    Walks along the input and places each new point where a circle of radius
    ``spacing`` around the previous one first crosses the polyline. The tail
    shorter than ``spacing`` is dropped.
    """
    points = np.asarray(points, dtype=float)
    out = [points[0]]
    cur = points[0]
    i = 0  # index of the segment start currently searched
    r2 = spacing * spacing
    while i < len(points) - 1:
        a, b = points[i], points[i + 1]
        d = b - a
        f = a - cur
        qa = d @ d
        if qa == 0.0:
            i += 1
            continue
        qb = 2 * (f @ d)
        qc = f @ f - r2
        disc = qb * qb - 4 * qa * qc
        if disc >= 0:
            u = (-qb + math.sqrt(disc)) / (2 * qa)
            if 0.0 <= u <= 1.0:
                cur = a + u * d
                out.append(cur)
                points = np.concatenate([cur[None], points[i + 1:]])
                i = 0
                continue
        i += 1
    return np.array(out)


def split_lane(points: np.ndarray, first_id: int, max_len: float = MAX_SEGMENT_M,
               spacing: float = LANE_SPACING_M) -> list[LaneSegment]:
    """Cut a 1 m resampled centerline into segments of at most ``max_len`` meters."""
    step = int(round(max_len / spacing))
    segments = []
    start = 0
    while start < len(points) - 1:
        stop = min(start + step, len(points) - 1)
        segments.append(LaneSegment(first_id + len(segments), points[start:stop + 1].copy()))
        start = stop
    return segments


@dataclass
class Sample:
    """One timestep of one scene, in the ego frame at that step.

    Invalid history/future points are NaN and flagged False in the masks.
    ``future`` is None in the consumer-facing view of the current step.
    """

    scene_id: int
    t: int
    actor_ids: np.ndarray  # (N,)
    classes: np.ndarray  # (N,)
    history: np.ndarray  # (N, t_h, 2)
    history_mask: np.ndarray  # (N, t_h)
    future: np.ndarray | None  # (N, t_f, 2)
    future_mask: np.ndarray | None  # (N, t_f)
    lanes: np.ndarray  # (L, LANE_POINTS, 2)
    lane_mask: np.ndarray  # (L, LANE_POINTS)
    lane_ids: np.ndarray  # (L,)
    ego_index: int
    origin: np.ndarray = field(default_factory=lambda: np.zeros(2))
    heading: float = 0.0

    @property
    def num_actors(self) -> int:
        return len(self.actor_ids)

    @property
    def num_lanes(self) -> int:
        return len(self.lane_ids)

    @property
    def has_future(self) -> bool:
        return self.future is not None

    def without_future(self) -> "Sample":
        return replace(self, future=None, future_mask=None)

    def complete_future(self) -> np.ndarray:
        """Boolean (N,) marking actors whose whole horizon is observed."""
        if self.future_mask is None:
            return np.zeros(self.num_actors, dtype=bool)
        return self.future_mask.all(axis=1)

    def to_world(self, xy: np.ndarray) -> np.ndarray:
        c, s = math.cos(self.heading), math.sin(self.heading)
        rot = np.array([[c, -s], [s, c]])
        return xy @ rot.T + self.origin


@dataclass(frozen=True, eq=False)
class Scene:
    """Raw world-frame tracks of one recording.

    ``positions[a, t]`` is NaN when actor ``a`` is not observed at ``t``.
    Samples are built on demand in the ego frame of each step.
    """

    scene_id: int
    time: TimeConfig
    ego_id: int
    actor_ids: np.ndarray  # (A,)
    classes: np.ndarray  # (A,)
    positions: np.ndarray  # (A, T, 2)
    lanes: tuple[LaneSegment, ...] = ()

    def __post_init__(self):
        ids = np.asarray(self.actor_ids)
        if len(np.unique(ids)) != len(ids):
            raise InvariantError("duplicate actor id")
        if self.ego_id not in set(ids.tolist()):
            raise InvariantError(f"ego id {self.ego_id} not among actors")
        if self.positions.shape[:1] != ids.shape or self.positions.ndim != 3:
            raise InvariantError("positions must have shape (A, T, 2)")
        if self.length < 1:
            raise InvariantError("scene must have at least one step")
        ego = self.positions[self.ego_row]
        if np.isnan(ego).any():
            raise InvariantError("ego actor must be observed at every step")
        if not np.isfinite(self.positions[~np.isnan(self.positions)]).all():
            raise InvariantError("positions must be finite")
        for a in range(len(ids)):
            if not 0 <= int(self.classes[a]) < NUM_CLASSES:
                raise InvariantError(f"invalid class id {self.classes[a]}")
        object.__setattr__(self, "_lane_points", _stack_lanes(self.lanes))
        padded = np.full((len(self.lanes), LANE_POINTS, 2), np.nan)
        for i, seg in enumerate(self.lanes):
            padded[i, :len(seg.points)] = seg.points
        object.__setattr__(self, "_lane_padded", padded)

    @property
    def length(self) -> int:
        return self.positions.shape[1]

    @property
    def ego_row(self) -> int:
        return int(np.flatnonzero(np.asarray(self.actor_ids) == self.ego_id)[0])

    @property
    def samples(self) -> list[Sample]:
        return [self.sample(t) for t in range(self.length)]

    def truncated(self, max_len: int) -> "Scene":
        if max_len >= self.length:
            return self
        keep = ~np.isnan(self.positions[:, :max_len, 0]).all(axis=1)
        return Scene(self.scene_id, self.time, self.ego_id, self.actor_ids[keep],
                     self.classes[keep], self.positions[keep, :max_len], self.lanes)

    def ego_pose(self, t: int) -> tuple[np.ndarray, float]:
        """Ego position and heading; heading follows the nearest lane direction."""
        origin = self.positions[self.ego_row, t]
        pts, seg_dir = self._lane_points
        if len(pts) == 0:
            if t > 0:
                d = origin - self.positions[self.ego_row, t - 1]
                if np.hypot(*d) > 1e-9:
                    return origin, math.atan2(d[1], d[0])
            return origin, 0.0
        i = int(np.argmin(((pts - origin) ** 2).sum(axis=1)))
        return origin, float(math.atan2(seg_dir[i, 1], seg_dir[i, 0]))

    def sample(self, t: int, with_future: bool = True) -> Sample:
        return self._build(t, with_future)

    def ground_truth(self, t: int) -> np.ndarray:
        """Future (N, t_f, 2) of the actors present at ``t``, ego frame of ``t``.

        Meant for scoring only; adaptation code reads futures through the
        delayed samples of :func:`stream`.
        """
        return self._build(t, True).future

    def _build(self, t: int, with_future: bool) -> Sample:
        if not 0 <= t < self.length:
            raise IndexError(t)
        th, tf = self.time.t_h, self.time.t_f
        present = ~np.isnan(self.positions[:, t, 0])
        rows = np.flatnonzero(present)
        origin, heading = self.ego_pose(t)
        c, s = math.cos(heading), math.sin(heading)
        rot = np.array([[c, s], [-s, c]])  # world -> ego

        T = self.length
        hist = np.full((len(rows), th, 2), np.nan)
        lo = t - th + 1
        src_lo = max(lo, 0)
        hist[:, src_lo - lo:] = self.positions[rows, src_lo:t + 1]
        hist = (hist - origin) @ rot.T
        hmask = ~np.isnan(hist[..., 0])

        future = fmask = None
        if with_future:
            future = np.full((len(rows), tf, 2), np.nan)
            hi = min(t + tf, T - 1)
            if hi > t:
                future[:, :hi - t] = self.positions[rows, t + 1:hi + 1]
            future = (future - origin) @ rot.T
            fmask = ~np.isnan(future[..., 0])

        lanes, lmask, lids = self._lanes_near(origin, rot)
        ego_index = int(np.flatnonzero(rows == self.ego_row)[0])
        return Sample(
            scene_id=self.scene_id, t=t, actor_ids=np.asarray(self.actor_ids)[rows].copy(),
            classes=np.asarray(self.classes)[rows].copy(), history=hist, history_mask=hmask,
            future=future, future_mask=fmask, lanes=lanes, lane_mask=lmask, lane_ids=lids,
            ego_index=ego_index, origin=origin.copy(), heading=heading,
        )

    def _lanes_near(self, origin, rot):
        rel = self._lane_padded - origin
        near = np.fmin.reduce(((rel ** 2).sum(axis=-1)), axis=1) <= LANE_RADIUS_M ** 2 \
            if len(rel) else np.zeros(0, dtype=bool)
        keep = np.flatnonzero(near)
        lanes = rel[keep] @ rot.T
        ids = np.array([self.lanes[i].segment_id for i in keep], dtype=np.int64)
        return lanes, ~np.isnan(lanes[..., 0]), ids


def _stack_lanes(lanes: Sequence[LaneSegment]):
    if not lanes:
        return np.zeros((0, 2)), np.zeros((0, 2))
    pts, dirs = [], []
    for seg in lanes:
        d = np.diff(seg.points, axis=0)
        d = np.concatenate([d, d[-1:]], axis=0)
        pts.append(seg.points)
        dirs.append(d)
    return np.concatenate(pts), np.concatenate(dirs)


# --- scenario text format -------------------------------------------------

def _fmt(v: float) -> str:
    return f"{v:.6f}"


def write_scene_file(scene: Scene, path: str | Path) -> None:
    """Write one scene in the line-oriented scenario format."""
    tc = scene.time
    lines = [f"{HEADER_MAGIC} {HEADER_VERSION} dt={tc.dt!r} th={tc.t_h} tf={tc.t_f} "
             f"ego={scene.ego_id} frame=world"]
    for seg in scene.lanes:
        coords = " ".join(_fmt(v) for v in seg.points.reshape(-1))
        lines.append(f"L {scene.scene_id} {seg.segment_id} {coords}")
    ids = np.asarray(scene.actor_ids)
    order = np.argsort(ids, kind="stable")
    for t in range(scene.length):
        for a in order:
            x, y = scene.positions[a, t]
            if np.isnan(x):
                continue
            lines.append(f"A {scene.scene_id} {t} {ids[a]} {int(scene.classes[a])} {_fmt(x)} {_fmt(y)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_header(line: str) -> tuple[TimeConfig, int]:
    parts = line.split()
    if len(parts) < 2 or parts[0] != HEADER_MAGIC:
        raise SceneFormatError("missing T4P-SCENE header", 1)
    if parts[1] != HEADER_VERSION:
        raise SceneFormatError(f"unsupported version {parts[1]}", 1)
    kv = {}
    for tok in parts[2:]:
        if "=" not in tok:
            raise SceneFormatError(f"bad header field {tok!r}", 1)
        k, v = tok.split("=", 1)
        kv[k] = v
    try:
        tc = TimeConfig(t_h=int(kv["th"]), t_f=int(kv["tf"]), dt=float(kv["dt"]))
        ego = int(kv["ego"])
    except (KeyError, ValueError) as exc:
        raise SceneFormatError(f"bad header: {exc}", 1) from None
    return tc, ego


def load_scene_file(path: str | Path) -> Scene:
    """Parse a scenario file, checking every scene invariant."""
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text:
        raise SceneFormatError("empty file", 1)
    tc, ego = _parse_header(text[0])
    scene_id = None
    lanes: list[LaneSegment] = []
    records: dict[int, dict[int, tuple[float, float]]] = {}
    classes: dict[int, int] = {}
    last_t = -1
    seen_at_t: set[int] = set()
    for lineno, raw in enumerate(text[1:], start=2):
        parts = raw.split()
        if not parts:
            continue
        kind = parts[0]
        try:
            sid = int(parts[1])
            if scene_id is None:
                scene_id = sid
            elif sid != scene_id:
                raise SceneFormatError("mixed scene ids in one file", lineno)
            if kind == "L":
                coords = np.array([float(v) for v in parts[3:]])
                if len(coords) < 4 or len(coords) % 2:
                    raise SceneFormatError("lane needs an even number (>= 4) of coordinates", lineno)
                lanes.append(LaneSegment(int(parts[2]), coords.reshape(-1, 2)))
            elif kind == "A":
                if len(parts) != 7:
                    raise SceneFormatError("actor record needs 7 fields", lineno)
                t, aid, cls = int(parts[2]), int(parts[3]), int(parts[4])
                x, y = float(parts[5]), float(parts[6])
                if not (math.isfinite(x) and math.isfinite(y)):
                    raise SceneFormatError("non-finite position", lineno)
                if t < last_t:
                    raise SceneFormatError("non-monotonic time", lineno)
                if t != last_t:
                    seen_at_t = set()
                    last_t = t
                if aid in seen_at_t:
                    raise SceneFormatError("duplicate actor id", lineno)
                seen_at_t.add(aid)
                if classes.setdefault(aid, cls) != cls:
                    raise SceneFormatError(f"actor {aid} changes class", lineno)
                records.setdefault(aid, {})[t] = (x, y)
            else:
                raise SceneFormatError(f"unknown record type {kind!r}", lineno)
        except (ValueError, IndexError) as exc:
            if isinstance(exc, SceneFormatError):
                raise
            raise SceneFormatError(str(exc), lineno) from None
    if not records:
        raise SceneFormatError("no actor records")
    T = last_t + 1
    ids = np.array(sorted(records), dtype=np.int64)
    pos = np.full((len(ids), T, 2), np.nan)
    for a, aid in enumerate(ids):
        for t, xy in records[aid].items():
            pos[a, t] = xy
    step_present = ~np.isnan(pos[:, :, 0]).all(axis=0)
    if not step_present.all():
        raise InvariantError("non-contiguous time: step without actors")
    cls_arr = np.array([classes[i] for i in ids], dtype=np.int64)
    return Scene(scene_id, tc, ego, ids, cls_arr, pos, tuple(lanes))


def scenes_equal(a: Scene, b: Scene) -> bool:
    if (a.scene_id, a.time, a.ego_id) != (b.scene_id, b.time, b.ego_id):
        return False
    if not (np.array_equal(a.actor_ids, b.actor_ids) and np.array_equal(a.classes, b.classes)):
        return False
    if not np.array_equal(a.positions, b.positions, equal_nan=True):
        return False
    if len(a.lanes) != len(b.lanes):
        return False
    return all(x.segment_id == y.segment_id and np.array_equal(x.points, y.points)
               for x, y in zip(a.lanes, b.lanes))


# --- streaming ------------------------------------------------------------

@dataclass
class StreamStep:
    index: int  # global step counter
    current: Sample  # future withheld
    delayed: Sample | None
    scene_boundary: bool
    scene: Scene


def stream(scenes: Sequence[Scene], time: TimeConfig | None = None) -> Iterator[StreamStep]:
    """Yield scenes step by step with delayed supervision.

    At scene-relative step ``t`` the delayed sample is the one at ``t - tau``
    with every future point up to ``t`` observed; later points are masked out
    so no supervision beyond the current step ever leaves the stream.
    """
    g = 0
    for s_idx, scene in enumerate(scenes):
        tau = (time or scene.time).delay
        if tau < 1:
            raise ValueError("tau must be >= 1")
        for t in range(scene.length):
            current = scene.sample(t, with_future=False)
            delayed = None
            if t >= tau:
                delayed = scene.sample(t - tau, with_future=True)
                horizon = scene.time.t_f
                if tau < horizon:
                    delayed.future[:, tau:] = np.nan
                    delayed.future_mask[:, tau:] = False
            yield StreamStep(g, current, delayed, s_idx > 0 and t == 0, scene)
            g += 1
