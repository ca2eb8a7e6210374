"""Offline training, test-time training on delayed labels, and online evaluation.

Test-time optimization is plain gradient descent: the joint gradient over
the selected tensors (and the actor tokens) is clipped to ``grad_clip`` in
global L2 norm, then ``p <- p - lr * (g + weight_decay * p)`` is applied to
model tensors and ``tok <- tok - lr_tokens * g`` to tokens.
"""

from __future__ import annotations

import copy
import math
import time as _time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .backbone import (ADAPTABLE_GROUPS, Backbone, BackboneConfig, LossSwitches,
                       featurize, make_mask_plan, reg_loss, total_loss)
from .memory import TokenMemory
from .metrics import MetricsReport, PredictionRecord, TimingLog
from .scenario import Sample, Scene, TimeConfig, stream

METHODS = ("source_only", "joint_training", "dua", "tent_sup", "last_layer_reg", "t4p")


class NumericError(RuntimeError):
    """A loss or gradient became non-finite."""


@dataclass(frozen=True)
class OptimSettings:
    lr_model: float = 0.01
    lr_tokens: float = 0.5
    weight_decay: float = 0.001
    grad_clip: float = 15.0
    layer_groups: tuple[str, ...] = ADAPTABLE_GROUPS
    update_frequency: int = 1
    loss_switches: LossSwitches = LossSwitches()
    actor_mask_ratio: float = 0.4
    lane_mask_ratio: float = 0.3
    steps_per_update: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.lr_model <= 0 or self.lr_tokens <= 0:
            raise ValueError("learning rates must be positive")
        if self.weight_decay < 0 or self.grad_clip <= 0:
            raise ValueError("weight_decay must be >= 0 and grad_clip > 0")
        if self.update_frequency < 1 or self.steps_per_update < 1:
            raise ValueError("update_frequency and steps_per_update must be >= 1")
        object.__setattr__(self, "layer_groups", tuple(self.layer_groups))
        bad = set(self.layer_groups) - set(ADAPTABLE_GROUPS)
        if bad:
            raise ValueError(f"layer_groups must be a subset of {ADAPTABLE_GROUPS}, got {sorted(bad)}")
        for r in (self.actor_mask_ratio, self.lane_mask_ratio):
            if not 0.0 <= r <= 1.0:
                raise ValueError("masking ratios must lie in [0, 1]")


@dataclass(frozen=True)
class AdaptMethod:
    kind: str = "t4p"
    use_memory: bool = True
    dua_momentum: float = 0.1
    dua_decay: float = 0.94
    dua_min_momentum: float = 0.005

    def __post_init__(self):
        if self.kind not in METHODS:
            raise ValueError(f"unknown method {self.kind!r}; expected one of {METHODS}")
        if min(self.dua_momentum, self.dua_decay, self.dua_min_momentum) <= 0:
            raise ValueError("DUA settings must be positive")

    @property
    def adapts(self) -> bool:
        return self.kind not in ("source_only", "joint_training")

    @property
    def label(self) -> str:
        if self.kind == "last_layer_reg":
            return "last_layer_reg (MEK-class proxy)"
        if self.kind == "t4p" and not self.use_memory:
            return "t4p (class tokens only)"
        return self.kind


# --- gradient descent core --------------------------------------------------

@dataclass
class StepInfo:
    loss: float
    parts: dict[str, float]
    grad_norm: float
    applied_norm: float


def _check_finite(loss: torch.Tensor, what: str) -> None:
    if not torch.isfinite(loss.detach()).all():
        raise NumericError(f"non-finite {what} loss: {float(loss.detach())}")


def gd_step(loss: torch.Tensor, params: dict[str, torch.nn.Parameter], settings: OptimSettings,
            tokens: torch.Tensor | None = None, parts: dict[str, float] | None = None
            ) -> tuple[StepInfo, torch.Tensor | None]:
    """Clipped gradient step on ``params``; returns the clipped token gradient.

    Tensors that receive no gradient are left untouched (weight decay
    included).
    """
    _check_finite(loss, "adaptation")
    plist = list(params.values())
    targets = plist + ([tokens] if tokens is not None else [])
    grads = torch.autograd.grad(loss, targets, allow_unused=True) if targets else []
    present = [g for g in grads if g is not None]
    norm = float(torch.linalg.vector_norm(torch.stack([g.double().norm() for g in present]))) \
        if present else 0.0
    if not math.isfinite(norm):
        raise NumericError("non-finite gradient norm")
    scale = min(1.0, settings.grad_clip / (norm + 1e-12))
    with torch.no_grad():
        for p, g in zip(plist, grads):
            if g is not None:
                p.sub_(settings.lr_model * (g * scale + settings.weight_decay * p))
    tok_grad = None
    if tokens is not None and grads[-1] is not None:
        tok_grad = grads[-1].detach() * scale
    info = StepInfo(float(loss.detach()), dict(parts or {}), norm, norm * scale)
    return info, tok_grad


def _dtype(model: Backbone) -> torch.dtype:
    return next(model.parameters()).dtype


def ttt_step(model: Backbone, memory: TokenMemory | None, delayed: Sample, settings: OptimSettings,
             rng: np.random.Generator, step: int = 0,
             token_ids: Iterable[int] | None = None) -> StepInfo | None:
    """One test-time training step on a delayed sample.

    With ``memory`` the actor tokens are read from (and written back to) the
    memory; without it the trained class tokens are used and left fixed.
    ``token_ids`` limits token updates to the listed actors (by default all
    actors of the delayed sample). Returns None when every loss is off.
    """
    sw = settings.loss_switches
    if not sw.any:
        return None
    if delayed.future is None:
        raise ValueError("ttt_step needs a sample with observed futures")
    batch = featurize(delayed, model.cfg, _dtype(model))
    if memory is not None:
        tok_np = memory.tokens_for(delayed.actor_ids, delayed.classes, step)
        tokens = torch.tensor(tok_np, dtype=_dtype(model), requires_grad=True)
    else:
        tokens = model.class_token_rows(batch).detach()
    plan = None
    if sw.actor_recon or sw.lane_recon:
        plan = make_mask_plan(batch, settings.actor_mask_ratio, settings.lane_mask_ratio, rng)
    loss, parts = total_loss(model, batch, tokens, plan, sw)
    info, tok_grad = gd_step(loss, model.group_params(settings.layer_groups), settings,
                             tokens if memory is not None else None, parts)
    if memory is not None and tok_grad is not None:
        allowed = None if token_ids is None else {int(a) for a in token_ids}
        g = tok_grad.double().numpy()
        grads = {int(a): g[i] for i, a in enumerate(delayed.actor_ids)
                 if allowed is None or int(a) in allowed}
        memory.apply_token_gradients(grads, settings.lr_tokens)
    return info


def _reg_only_step(model: Backbone, delayed: Sample, params: dict[str, torch.nn.Parameter],
                   settings: OptimSettings) -> StepInfo:
    batch = featurize(delayed, model.cfg, _dtype(model))
    loss = reg_loss(model, batch, model.class_token_rows(batch).detach())
    info, _ = gd_step(loss, params, settings, parts={"reg": float(loss.detach())})
    return info


def tent_sup_step(model: Backbone, delayed: Sample, settings: OptimSettings) -> StepInfo:
    """Regression-loss step on the affine parameters of normalization layers only."""
    return _reg_only_step(model, delayed, model.norm_affine_params(), settings)


def last_layer_reg_step(model: Backbone, delayed: Sample, settings: OptimSettings) -> StepInfo:
    """Regression-loss step on the decoder's final affine map only."""
    return _reg_only_step(model, delayed, model.last_layer_params(), settings)


@dataclass
class DUAState:
    momentum: float = 0.1
    decay: float = 0.94
    floor: float = 0.005

    def next(self) -> float:
        """Momentum for this update; the schedule then decays geometrically to the floor."""
        m = self.momentum
        self.momentum = max(self.momentum * self.decay, self.floor)
        return m


@torch.no_grad()
def dua_step(model: Backbone, delayed: Sample, state: DUAState) -> float:
    """Momentum update of batch-statistics running estimates; no learnable tensor moves."""
    batch = featurize(delayed, model.cfg, _dtype(model))
    m = state.next()
    norms = model.batch_norms()
    for bn in norms:
        bn.adapt_momentum = m
    try:
        model.embed(batch, model.class_token_rows(batch))
    finally:
        for bn in norms:
            bn.adapt_momentum = None
    return m


# --- offline training ---------------------------------------------------------

@dataclass
class TrainLog:
    rows: list[dict[str, float]] = field(default_factory=list)

    def to_csv(self) -> str:
        keys = ["epoch", "loss", "recon", "reg", "batches"]
        out = [",".join(keys)]
        for r in self.rows:
            out.append(",".join(str(r.get(k, "")) for k in keys))
        return "\n".join(out) + "\n"


def training_samples(scenes: Sequence[Scene], stride: int = 5) -> list[Sample]:
    """Samples every ``stride`` steps that have at least one observed future point."""
    out = []
    for scene in scenes:
        for t in range(scene.time.t_h - 1, scene.length - 1, stride):
            s = scene.sample(t)
            if s.future_mask.any():
                out.append(s)
    return out


def offline_train(scenes: Sequence[Scene], cfg: BackboneConfig, epochs: int, seed: int,
                  switches: LossSwitches = LossSwitches(), lr: float = 1e-3, batch_size: int = 16,
                  stride: int = 5, actor_mask_ratio: float = 0.4, lane_mask_ratio: float = 0.3,
                  model: Backbone | None = None, dtype: torch.dtype = torch.float32,
                  progress: Callable[[dict], None] | None = None) -> tuple[Backbone, np.ndarray, TrainLog]:
    """Train every layer group plus class and mask tokens with Adam on shuffled samples.

    Returns ``(model, class_tokens, log)``. Passing ``model`` continues
    training from it.
    """
    if not scenes:
        raise ValueError("no training scenes")
    if not switches.any:
        raise ValueError("enable at least one loss")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    if model is None:
        model = Backbone(cfg).to(dtype)
    samples = training_samples(scenes, stride)
    if not samples:
        raise ValueError("scenes contain no trainable samples")
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    log = TrainLog()
    model.train()
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(samples))
        sums = {"loss": 0.0, "recon": 0.0, "reg": 0.0}
        nb = 0
        for b0 in range(0, len(order), batch_size):
            batch = featurize([samples[i] for i in order[b0:b0 + batch_size]], model.cfg, _dtype(model))
            plan = make_mask_plan(batch, actor_mask_ratio, lane_mask_ratio, rng) \
                if (switches.actor_recon or switches.lane_recon) else None
            loss, parts = total_loss(model, batch, model.class_token_rows(batch), plan, switches)
            if not torch.isfinite(loss.detach()):
                raise NumericError(f"training diverged at epoch {epoch}, batch {nb}: loss {parts}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sums["loss"] += float(loss.detach())
            for k, v in parts.items():
                sums[k] += v
            nb += 1
        row = {"epoch": epoch, **{k: v / nb for k, v in sums.items()}, "batches": nb}
        log.rows.append(row)
        if progress:
            progress(row)
    model.eval()
    return model, model.class_tokens.detach().double().numpy().copy(), log


# --- online loop --------------------------------------------------------------

@dataclass
class OnlineResult:
    report: MetricsReport
    timing: TimingLog
    records: list[PredictionRecord]
    model: Backbone
    memory: TokenMemory | None
    updates: int
    step_infos: list[StepInfo]


def run_online(scenes: Sequence[Scene], model: Backbone, method: AdaptMethod,
               settings: OptimSettings = OptimSettings(), time: TimeConfig | None = None,
               max_scene_len: int | None = None, keep_records: bool = True) -> OnlineResult:
    """Stream the scenes, adapting on delayed samples and predicting every step.

    The input model is not modified. Opportunities are counted over the
    whole stream; with ``update_frequency`` f only every f-th one is used.
    """
    if max_scene_len is not None:
        scenes = [s.truncated(max_scene_len) for s in scenes]
    model = copy.deepcopy(model).eval()
    dtype = _dtype(model)
    alpha_train = model.class_tokens.detach().double().numpy()
    use_memory = method.kind == "t4p" and method.use_memory
    memory = TokenMemory.init_from_training(alpha_train) if use_memory else None
    rng = np.random.default_rng(settings.seed)
    dua = DUAState(method.dua_momentum, method.dua_decay, method.dua_min_momentum)
    timing = TimingLog()
    records: list[PredictionRecord] = []
    infos: list[StepInfo] = []
    opportunities = updates = 0

    for st in stream(scenes, time):
        if st.scene_boundary and memory is not None:
            memory.scene_transition()
        cur = st.current
        if method.adapts and st.delayed is not None:
            if opportunities % settings.update_frequency == 0:
                t0 = _time.perf_counter()
                for _ in range(settings.steps_per_update):
                    info = _adapt(model, memory, st.delayed, cur, method, settings, rng, dua, st.index)
                    if info is not None:
                        infos.append(info)
                timing.add(st.index, "adapt", _time.perf_counter() - t0)
                updates += 1
            opportunities += 1

        t0 = _time.perf_counter()
        with torch.no_grad():
            batch = featurize(cur, model.cfg, dtype)
            if memory is not None:
                tokens = torch.as_tensor(memory.tokens_for(cur.actor_ids, cur.classes, st.index),
                                         dtype=dtype)
            else:
                tokens = model.class_token_rows(batch)
            pred = model.predict(batch, tokens).double().numpy()
        timing.add(st.index, "predict", _time.perf_counter() - t0)
        if not np.isfinite(pred).all():
            raise NumericError(f"non-finite prediction at step {st.index}")

        gt = st.scene.ground_truth(cur.t)
        if keep_records and not np.isnan(gt).any(axis=(1, 2)).all():
            records.append(PredictionRecord(cur.scene_id, cur.t, cur.actor_ids.copy(), pred, gt))

    report = MetricsReport.from_records(records, timing, k_max=model.cfg.num_modes)
    return OnlineResult(report, timing, records, model, memory, updates, infos)


def _adapt(model, memory, delayed, current, method, settings, rng, dua, step):
    kind = method.kind
    if kind == "t4p":
        return ttt_step(model, memory, delayed, settings, rng, step, token_ids=current.actor_ids)
    if kind == "dua":
        dua_step(model, delayed, dua)
        return None
    if kind == "tent_sup":
        return tent_sup_step(model, delayed, settings)
    if kind == "last_layer_reg":
        return last_layer_reg_step(model, delayed, settings)
    raise AssertionError(kind)
