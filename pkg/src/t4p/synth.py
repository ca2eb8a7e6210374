"""Deterministic synthetic driving scenes with controllable domain shift.

Every scene lives on a one-way multi-lane road whose reference line is a chain
of constant-curvature pieces. Vehicles, motorcycles and bicycles follow their
lane with pure-pursuit steering; pedestrians and unknown objects move as free
unicycles. Each actor instance draws persistent habit multipliers on its speed
and turn rate once, at spawn.

Randomness comes from numpy's PCG64 generator seeded per scene through
``SeedSequence((seed, scene_index))``, so datasets are reproducible across
platforms and scenes can be generated independently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .config import flatten, nest, resolve_preset
from .scenario import (ActorClass, NUM_CLASSES, LaneSegment, Scene, TimeConfig,
                       resample_polyline, split_lane)

LANE_WIDTH_M = 3.5
REFERENCE_DT = 0.1
LANE_FOLLOWERS = (ActorClass.VEHICLE, ActorClass.BICYCLE, ActorClass.MOTORCYCLE)
_CLASS_NAMES = [c.name.lower() for c in ActorClass]
_ID_STRIDE = 100_000


@dataclass(frozen=True)
class DomainParams:
    """Generator settings. Per-class tuples are indexed by :class:`ActorClass`.

    Scene lengths are counted in steps of ``REFERENCE_DT`` (0.1 s) and rescaled
    to the sampling interval of the time configuration in use.
    """

    seed: int = 0
    speed_mean: tuple[float, ...] = (1.0, 8.0, 1.4, 4.5, 9.0)
    speed_std: tuple[float, ...] = (0.2, 1.0, 0.2, 0.5, 1.0)
    turn_rate_max: tuple[float, ...] = (0.2, 0.6, 0.3, 0.6, 0.6)
    class_weights: tuple[float, ...] = (0.1, 0.5, 0.2, 0.1, 0.1)
    lane_curvature: float = 0.002
    lane_count: int = 3
    actor_count_range: tuple[int, int] = (6, 10)
    scene_length_range: tuple[int, int] = (180, 220)
    observation_noise_std: float = 0.05
    actor_churn_rate: float = 0.002
    habit_spread: float = 0.05
    occlusion_rate: float = 0.0

    def __post_init__(self):
        for name in ("speed_mean", "speed_std", "turn_rate_max", "class_weights"):
            vals = getattr(self, name)
            if len(vals) != NUM_CLASSES:
                raise ValueError(f"{name} needs {NUM_CLASSES} per-class values")
            if any(v < 0 for v in vals):
                raise ValueError(f"{name} must be non-negative")
        if sum(self.class_weights[c] for c in range(NUM_CLASSES)) <= 0:
            raise ValueError("class_weights must not all be zero")
        for name in ("lane_curvature", "observation_noise_std", "habit_spread"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("actor_churn_rate", "occlusion_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be a probability")
        for name in ("actor_count_range", "scene_length_range"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 1:
                raise ValueError(f"{name} needs 1 <= min <= max")
        if self.lane_count < 1:
            raise ValueError("lane_count must be >= 1")

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> "DomainParams":
        nested = nest(values)
        kwargs: dict[str, Any] = {}
        names = {f.name for f in fields(cls)}
        for key, value in nested.items():
            if key not in names:
                raise ValueError(f"unknown domain parameter {key!r}")
            if isinstance(value, dict):
                base = list(getattr(cls(), key))
                for cname, v in value.items():
                    if cname not in _CLASS_NAMES:
                        raise ValueError(f"unknown actor class {cname!r} in {key}")
                    base[_CLASS_NAMES.index(cname)] = float(v)
                value = tuple(base)
            elif key in ("actor_count_range", "scene_length_range"):
                value = tuple(int(v) for v in value)
            kwargs[key] = value
        return cls(**kwargs)

    def to_mapping(self) -> dict[str, Any]:
        nested: dict[str, Any] = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name in ("speed_mean", "speed_std", "turn_rate_max", "class_weights"):
                value = {n: float(v) for n, v in zip(_CLASS_NAMES, value)}
            nested[f.name] = value
        return flatten(nested)


def load_domain(name_or_path: str | Path) -> DomainParams:
    return DomainParams.from_mapping(resolve_preset(name_or_path))


# --- road geometry --------------------------------------------------------

def _reference_line(rng: np.random.Generator, length: float, kappa_max: float) -> np.ndarray:
    n = int(math.ceil(length)) + 1
    kappa = np.empty(n)
    i = 0
    while i < n:
        piece = int(rng.uniform(40, 120))
        kappa[i:i + piece] = rng.uniform(-kappa_max, kappa_max)
        i += piece
    heading = np.concatenate([[0.0], np.cumsum(kappa[:-1])])
    pts = np.zeros((n, 2))
    pts[1:, 0] = np.cumsum(np.cos(heading[:-1]))
    pts[1:, 1] = np.cumsum(np.sin(heading[:-1]))
    return pts


def _offset(line: np.ndarray, d: float) -> np.ndarray:
    tang = np.gradient(line, axis=0)
    tang /= np.linalg.norm(tang, axis=1, keepdims=True)
    normal = np.stack([-tang[:, 1], tang[:, 0]], axis=1)
    return line + d * normal


@dataclass
class _Road:
    centers: list[np.ndarray]  # per lane, 1 m resampled
    normals: list[np.ndarray]

    def nearest(self, lane: int, p: np.ndarray, hint: int) -> int:
        pts = self.centers[lane]
        lo = max(hint - 5, 0)
        hi = min(hint + 40, len(pts))
        j = lo + int(np.argmin(((pts[lo:hi] - p) ** 2).sum(axis=1)))
        if j == hi - 1 and hi < len(pts):
            j = int(np.argmin(((pts - p) ** 2).sum(axis=1)))
        return j


def _build_road(rng, params: DomainParams, length: float) -> _Road:
    ref = _reference_line(rng, length, params.lane_curvature)
    centers, normals = [], []
    for k in range(params.lane_count):
        d = (k - (params.lane_count - 1) / 2) * LANE_WIDTH_M
        lane = resample_polyline(_offset(ref, d))
        tang = np.gradient(lane, axis=0)
        tang /= np.linalg.norm(tang, axis=1, keepdims=True)
        centers.append(lane)
        normals.append(np.stack([-tang[:, 1], tang[:, 0]], axis=1))
    return _Road(centers, normals)


# --- actors ---------------------------------------------------------------

@dataclass
class _Actor:
    actor_id: int
    cls: int
    pos: np.ndarray
    heading: float
    cruise: float
    turn_habit: float
    lane: int = -1
    lateral_bias: float = 0.0
    hint: int = 0
    speed_dev: float = 0.0
    turn_dev: float = 0.0
    hidden_until: int = -1
    track: dict[int, np.ndarray] = field(default_factory=dict)


class _SceneSim:
    def __init__(self, rng: np.random.Generator, params: DomainParams, scene_id: int, n_steps: int):
        self.rng = rng
        self.p = params
        self.scene_id = scene_id
        self.n_steps = n_steps
        vmax = max(params.speed_mean[c] + 5 * params.speed_std[c] for c in range(NUM_CLASSES))
        self.road = _build_road(rng, params, 200.0 + vmax * n_steps * REFERENCE_DT + 100.0)
        self.next_index = 0
        self.actors: list[_Actor] = []
        self.retired: list[_Actor] = []
        weights = np.asarray(params.class_weights, dtype=float)
        self.class_p = weights / weights.sum()

    def new_id(self) -> int:
        aid = self.scene_id * _ID_STRIDE + self.next_index
        self.next_index += 1
        return aid

    def speed_cap(self, cls: int) -> float:
        return self.p.speed_mean[cls] + 5 * self.p.speed_std[cls]

    def spawn(self, cls: int, near: np.ndarray | None, ego_j: int, ego: bool = False) -> _Actor:
        p, rng = self.p, self.rng
        hs = p.habit_spread
        speed_habit = float(np.clip(1 + hs * rng.standard_normal(), 1 - 3 * hs, 1 + 3 * hs))
        turn_habit = float(np.clip(1 + hs * rng.standard_normal(), 1 - 3 * hs, 1 + 3 * hs))
        cruise = min(p.speed_mean[cls] * speed_habit, self.speed_cap(cls))
        sign_turn = rng.uniform(-1, 1)
        actor = _Actor(self.new_id(), cls, np.zeros(2), 0.0, cruise,
                       turn_habit * sign_turn * p.turn_rate_max[cls])
        if cls in LANE_FOLLOWERS:
            lane = 0 if cls == ActorClass.BICYCLE else int(rng.integers(p.lane_count))
            if ego:
                lane = p.lane_count // 2
            centers = self.road.centers[lane]
            j = ego_j if ego else int(np.clip(ego_j + rng.uniform(-35, 55), 0, len(centers) - 30))
            actor.lane = lane
            actor.lateral_bias = 0.0 if ego else float(hs * 2.0 * rng.standard_normal())
            if cls == ActorClass.BICYCLE:
                actor.lateral_bias -= 1.0
            nrm = self.road.normals[lane][j]
            actor.pos = centers[j] + actor.lateral_bias * nrm
            d = centers[min(j + 1, len(centers) - 1)] - centers[j]
            actor.heading = math.atan2(d[1], d[0])
            actor.hint = j
        else:
            outer = self.road.centers[0] if rng.random() < 0.5 else self.road.centers[-1]
            side = -1.0 if outer is self.road.centers[0] else 1.0
            nrm_set = self.road.normals[0] if side < 0 else self.road.normals[-1]
            j = int(np.clip(ego_j + rng.uniform(-30, 45), 0, len(outer) - 2))
            actor.pos = outer[j] + side * (LANE_WIDTH_M / 2 + 2.0 + rng.uniform(0, 3)) * nrm_set[j]
            d = outer[j + 1] - outer[j]
            along = math.atan2(d[1], d[0])
            actor.heading = along + (math.pi if rng.random() < 0.5 else 0.0) + rng.normal(0, 0.2)
        return actor

    def step_actor(self, a: _Actor, dt: float) -> None:
        p, rng = self.p, self.rng
        rho = math.exp(-dt / 2.0)
        a.speed_dev = rho * a.speed_dev + math.sqrt(1 - rho ** 2) * p.speed_std[a.cls] * rng.standard_normal()
        v = float(np.clip(a.cruise + a.speed_dev, 0.0, self.speed_cap(a.cls)))
        wmax = p.turn_rate_max[a.cls]
        if a.lane >= 0:
            centers = self.road.centers[a.lane]
            a.hint = self.road.nearest(a.lane, a.pos, a.hint)
            look = int(round(max(4.0, 0.8 * v)))
            j = min(a.hint + look, len(centers) - 1)
            target = centers[j] + a.lateral_bias * self.road.normals[a.lane][j]
            desired = math.atan2(target[1] - a.pos[1], target[0] - a.pos[0])
            err = (desired - a.heading + math.pi) % (2 * math.pi) - math.pi
            omega = float(np.clip(2.0 * err, -wmax, wmax))
        else:
            a.turn_dev = rho * a.turn_dev + math.sqrt(1 - rho ** 2) * 0.3 * wmax * rng.standard_normal()
            omega = float(np.clip(a.turn_habit + a.turn_dev, -wmax, wmax))
        a.heading += omega * dt
        a.pos = a.pos + v * dt * np.array([math.cos(a.heading), math.sin(a.heading)])

    def run(self) -> tuple[list[_Actor], int]:
        p, rng = self.p, self.rng
        ego_j = 60
        ego = self.spawn(ActorClass.VEHICLE, None, ego_j, ego=True)
        self.actors.append(ego)
        target_n = int(rng.integers(p.actor_count_range[0], p.actor_count_range[1] + 1))
        for _ in range(target_n - 1):
            self.actors.append(self.spawn(int(rng.choice(NUM_CLASSES, p=self.class_p)), None, ego_j))
        for t in range(self.n_steps):
            if t > 0:
                for a in self.actors:
                    self.step_actor(a, REFERENCE_DT)
            ego_j = self.road.nearest(ego.lane, ego.pos, ego.hint)
            survivors = [ego]
            for a in self.actors[1:]:
                far = np.hypot(*(a.pos - ego.pos)) > 70.0
                if far or (t > 0 and rng.random() < p.actor_churn_rate):
                    self.retired.append(a)
                else:
                    survivors.append(a)
            self.actors = survivors
            if t > 0 and len(self.actors) < target_n and rng.random() < 0.2:
                self.actors.append(self.spawn(int(rng.choice(NUM_CLASSES, p=self.class_p)), None, ego_j))
            for a in self.actors:
                if a is not ego and a.hidden_until < t and a.track and rng.random() < p.occlusion_rate:
                    a.hidden_until = t + int(rng.integers(3, 11))
                if a.hidden_until >= t:
                    continue
                obs = a.pos.copy()
                if a is not ego and p.observation_noise_std > 0:
                    obs = obs + p.observation_noise_std * rng.standard_normal(2)
                a.track[t] = obs
        return self.retired + self.actors, ego.actor_id


def generate_scene(params: DomainParams, scene_index: int, time: TimeConfig) -> Scene:
    rng = np.random.default_rng(np.random.SeedSequence((params.seed, scene_index)))
    lo, hi = params.scene_length_range
    n_ref = int(rng.integers(lo, hi + 1))
    stride = max(1, int(round(time.dt / REFERENCE_DT)))
    sim = _SceneSim(rng, params, scene_index, n_ref)
    actors, ego_id = sim.run()
    T = (n_ref - 1) // stride + 1
    actors = [a for a in actors if any(t % stride == 0 for t in a.track)]
    actors.sort(key=lambda a: a.actor_id)
    pos = np.full((len(actors), T, 2), np.nan)
    for i, a in enumerate(actors):
        for t, xy in a.track.items():
            if t % stride == 0:
                pos[i, t // stride] = np.round(xy, 6)
    lanes: list[LaneSegment] = []
    for lane in sim.road.centers:
        lanes.extend(split_lane(np.round(lane, 6), first_id=len(lanes)))
    return Scene(scene_index, TimeConfig(time.t_h, time.t_f, time.dt), ego_id,
                 np.array([a.actor_id for a in actors], dtype=np.int64),
                 np.array([a.cls for a in actors], dtype=np.int64), pos, tuple(lanes))


def generate_dataset(params: DomainParams, n_scenes: int, time: TimeConfig) -> list[Scene]:
    """Generate ``n_scenes`` scenes; deterministic in its arguments."""
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    return [generate_scene(params, i, time) for i in range(n_scenes)]


def occlusion_events(scene: Scene) -> list[tuple[int, int]]:
    """(actor row, first step after the gap) for every interior gap in a track."""
    events = []
    observed = ~np.isnan(scene.positions[:, :, 0])
    for a in range(len(scene.actor_ids)):
        steps = np.flatnonzero(observed[a])
        gaps = np.flatnonzero(np.diff(steps) > 1)
        events.extend((a, int(steps[g + 1])) for g in gaps)
    return events


def simulate_tracker_ids(scene: Scene, id_failure_rate: float, seed: int) -> tuple[Scene, dict[int, int]]:
    """Simulate a tracker that sometimes fails to restore an ID after occlusion.

    Returns the re-labelled scene and a sidecar ``{new_id: original_id}`` for
    analysis only.
    """
    if not 0.0 <= id_failure_rate <= 1.0:
        raise ValueError("id_failure_rate must be in [0, 1]")
    events = occlusion_events(scene)
    if id_failure_rate == 0.0 or not events:
        return scene, {}
    rng = np.random.default_rng(np.random.SeedSequence((seed, scene.scene_id)))
    fail = rng.random(len(events)) < id_failure_rate
    next_id = int(np.max(scene.actor_ids)) + 1
    ids = list(np.asarray(scene.actor_ids).tolist())
    classes = list(np.asarray(scene.classes).tolist())
    rows = [scene.positions[a].copy() for a in range(len(ids))]
    sidecar: dict[int, int] = {}
    splits: dict[int, list[int]] = {}
    for (a, start), f in zip(events, fail):
        if f:
            splits.setdefault(a, []).append(start)
    for a0 in sorted(splits):
        root = int(scene.actor_ids[a0])
        a = a0
        for start in sorted(splits[a0]):
            track = np.full_like(rows[a], np.nan)
            track[start:] = rows[a][start:]
            rows[a][start:] = np.nan
            sidecar[next_id] = root
            ids.append(next_id)
            classes.append(classes[a0])
            rows.append(track)
            next_id += 1
            a = len(rows) - 1
    order = np.argsort(ids, kind="stable")
    return (Scene(scene.scene_id, scene.time, scene.ego_id, np.asarray(ids)[order],
                  np.asarray(classes)[order], np.stack(rows)[order], scene.lanes), sidecar)
