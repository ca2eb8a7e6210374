"""Masked-autoencoder trajectory prediction backbone.

Every actor contributes one history token and (when its future is known) one
future token; every lane segment contributes one lane token. A shared
transformer encoder attends jointly over all of them. Two heads sit on top:

* the reconstructor rebuilds history, future and lane geometry from the
  visible encodings plus learned mask tokens;
* the motion decoder maps history encodings (computed without any future
  token) to ``K`` candidate futures per actor.

Per-actor tokens (class tokens offline, actor-specific tokens at test time)
are added to the trajectory embeddings before the encoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .scenario import LANE_POINTS, NUM_CLASSES, Sample

LAYER_GROUPS = ("decoder", "encoder", "embeddings", "class_tokens", "mask_tokens")
ADAPTABLE_GROUPS = ("decoder", "encoder", "embeddings")
RECON_WEIGHTS = (1.0, 1.0, 0.35)


@dataclass(frozen=True)
class BackboneConfig:
    t_h: int = 10
    t_f: int = 30
    d_model: int = 128
    num_heads: int = 4
    encoder_blocks: int = 2
    recon_blocks: int = 2
    ffn_dim: int = 256
    num_modes: int = 6
    num_classes: int = NUM_CLASSES
    lane_points: int = LANE_POINTS
    pos_scale: float = 20.0
    traj_scale: float = 10.0

    @property
    def hist_features(self) -> int:
        return 2 * (self.t_h - 1) + self.t_h + 2

    @property
    def fut_features(self) -> int:
        return 3 * self.t_f + 2

    @property
    def lane_features(self) -> int:
        return 3 * self.lane_points + 2


# --- featurization --------------------------------------------------------

def _backfill(points: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Replace invalid points by the next valid one along axis 1 (last point valid)."""
    out = points.copy()
    for i in range(out.shape[1] - 2, -1, -1):
        bad = ~mask[:, i]
        out[bad, i] = out[bad, i + 1]
    return out


def _forwardfill(points: np.ndarray, mask: np.ndarray, start: np.ndarray) -> np.ndarray:
    out = points.copy()
    prev = start
    for i in range(out.shape[1]):
        bad = ~mask[:, i]
        out[bad, i] = prev[bad]
        prev = out[:, i]
    return out


@dataclass
class Batch:
    """Model-ready tensors for one or more samples packed into one token set."""

    hist_feat: torch.Tensor  # (Na, Fh)
    fut_feat: torch.Tensor  # (Na, Ff)
    lane_feat: torch.Tensor  # (Nl, Fl)
    actor_pos: torch.Tensor  # (Na, 2) scaled current positions
    lane_pos: torch.Tensor  # (Nl, 2) scaled lane centroids
    hist_target: torch.Tensor  # (Na, t_h, 2) meters, relative to current position
    hist_mask: torch.Tensor  # (Na, t_h)
    fut_target: torch.Tensor  # (Na, t_f, 2)
    fut_mask: torch.Tensor  # (Na, t_f)
    lane_target: torch.Tensor  # (Nl, P, 2) relative to centroid
    lane_mask: torch.Tensor  # (Nl, P)
    current: torch.Tensor  # (Na, 2) meters, ego frame
    classes: torch.Tensor  # (Na,)
    actor_sample: np.ndarray  # (Na,)
    lane_sample: np.ndarray  # (Nl,)
    num_samples: int

    @property
    def num_actors(self) -> int:
        return self.hist_feat.shape[0]

    @property
    def num_lanes(self) -> int:
        return self.lane_feat.shape[0]

    @property
    def has_future(self) -> torch.Tensor:
        return self.fut_mask.any(dim=1)


def featurize(samples: Sample | Sequence[Sample], cfg: BackboneConfig,
              dtype: torch.dtype = torch.float32) -> Batch:
    if isinstance(samples, Sample):
        samples = [samples]
    parts: dict[str, list[np.ndarray]] = {k: [] for k in (
        "hist_feat", "fut_feat", "lane_feat", "actor_pos", "lane_pos", "hist_target", "hist_mask",
        "fut_target", "fut_mask", "lane_target", "lane_mask", "current", "classes",
        "actor_sample", "lane_sample")}
    for si, s in enumerate(samples):
        n = s.num_actors
        hmask = s.history_mask
        hist = _backfill(np.nan_to_num(s.history), hmask)
        cur = hist[:, -1]
        disp = np.diff(hist, axis=1).reshape(n, -1)
        apos = cur / cfg.pos_scale
        parts["hist_feat"].append(np.concatenate([disp, hmask, apos], axis=1))
        parts["hist_target"].append(hist - cur[:, None])
        parts["hist_mask"].append(hmask)
        if s.future is not None:
            fmask = s.future_mask
            fut = _forwardfill(np.nan_to_num(s.future), fmask, cur) - cur[:, None]
        else:
            fmask = np.zeros((n, cfg.t_f), dtype=bool)
            fut = np.zeros((n, cfg.t_f, 2))
        parts["fut_feat"].append(np.concatenate(
            [fut.reshape(n, -1) / cfg.traj_scale, fmask, apos], axis=1))
        parts["fut_target"].append(fut)
        parts["fut_mask"].append(fmask)
        parts["actor_pos"].append(apos)
        parts["current"].append(cur)
        parts["classes"].append(s.classes)
        parts["actor_sample"].append(np.full(n, si))

        L = s.num_lanes
        lmask = s.lane_mask
        lanes = np.nan_to_num(s.lanes)
        cnt = np.maximum(lmask.sum(axis=1, keepdims=True), 1)
        centroid = (lanes * lmask[..., None]).sum(axis=1) / cnt
        rel = (lanes - centroid[:, None]) * lmask[..., None]
        lpos = centroid / cfg.pos_scale
        parts["lane_feat"].append(np.concatenate(
            [rel.reshape(L, 2 * cfg.lane_points) / cfg.traj_scale, lmask, lpos], axis=1))
        parts["lane_pos"].append(lpos)
        parts["lane_target"].append(rel)
        parts["lane_mask"].append(lmask)
        parts["lane_sample"].append(np.full(L, si))

    def cat(key, width=None):
        arrs = parts[key]
        return np.concatenate(arrs, axis=0) if arrs else np.zeros((0,) + (width or ()))

    def ft(key):
        return torch.as_tensor(cat(key), dtype=dtype)

    def bt(key):
        return torch.as_tensor(cat(key).astype(bool))

    return Batch(
        hist_feat=ft("hist_feat"), fut_feat=ft("fut_feat"),
        lane_feat=ft("lane_feat").reshape(-1, cfg.lane_features),
        actor_pos=ft("actor_pos"), lane_pos=ft("lane_pos").reshape(-1, 2),
        hist_target=ft("hist_target"), hist_mask=bt("hist_mask"),
        fut_target=ft("fut_target"), fut_mask=bt("fut_mask"),
        lane_target=ft("lane_target").reshape(-1, cfg.lane_points, 2),
        lane_mask=bt("lane_mask").reshape(-1, cfg.lane_points),
        current=ft("current"), classes=torch.as_tensor(cat("classes").astype(np.int64)),
        actor_sample=cat("actor_sample").astype(np.int64),
        lane_sample=cat("lane_sample").astype(np.int64), num_samples=len(samples),
    )


# --- masking --------------------------------------------------------------

@dataclass
class MaskPlan:
    """Which elements the reconstructor must infer.

    ``future_masked[n]`` True puts actor ``n`` in the future-masked group
    (history visible); False puts it in the history-masked group. Actors with
    no observed future always sit in the future-masked group.
    """

    future_masked: np.ndarray  # (N,)
    history_masked: np.ndarray  # (N,)
    lane_masked: np.ndarray  # (L,)
    actor_ratio: float = 0.0
    lane_ratio: float = 0.0
    rng_seed: int | None = None

    @classmethod
    def none(cls, num_actors: int, num_lanes: int) -> "MaskPlan":
        z = np.zeros(num_actors, dtype=bool)
        return cls(z, z.copy(), np.zeros(num_lanes, dtype=bool))


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _plan_arrays(has_future: np.ndarray, num_lanes: int, actor_ratio: float, lane_ratio: float,
                 rng: np.random.Generator):
    n = len(has_future)
    forced = ~has_future
    want = max(_round_half_up(actor_ratio * n), int(forced.sum()))
    fm = forced.copy()
    free = np.flatnonzero(has_future)
    pick = rng.permutation(free)[:want - int(forced.sum())]
    fm[pick] = True
    lm = np.zeros(num_lanes, dtype=bool)
    lm[rng.permutation(num_lanes)[:_round_half_up(lane_ratio * num_lanes)]] = True
    return fm, ~fm, lm


def make_mask_plan(sample: Sample | Batch, actor_ratio: float, lane_ratio: float,
                   seed: int | np.random.Generator) -> MaskPlan:
    """Complementary actor masking plus random lane masking.

    Accepts a single sample or a packed batch (one independent draw per
    packed sample). Deterministic in ``seed``.
    """
    if not (0.0 <= actor_ratio <= 1.0 and 0.0 <= lane_ratio <= 1.0):
        raise ValueError("masking ratios must lie in [0, 1]")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if isinstance(sample, Sample):
        has_f = sample.future_mask.any(axis=1) if sample.future_mask is not None \
            else np.zeros(sample.num_actors, dtype=bool)
        fm, hm, lm = _plan_arrays(has_f, sample.num_lanes, actor_ratio, lane_ratio, rng)
    else:
        has_f_all = sample.has_future.numpy()
        fms, hms, lms = [], [], []
        for si in range(sample.num_samples):
            a = sample.actor_sample == si
            lanes = int((sample.lane_sample == si).sum())
            fm, hm, lm = _plan_arrays(has_f_all[a], lanes, actor_ratio, lane_ratio, rng)
            fms.append(fm), hms.append(hm), lms.append(lm)
        fm, hm, lm = (np.concatenate(x) if x else np.zeros(0, dtype=bool) for x in (fms, hms, lms))
    return MaskPlan(fm, hm, lm, actor_ratio, lane_ratio,
                    None if isinstance(seed, np.random.Generator) else int(seed))


# --- modules --------------------------------------------------------------

class BatchStatNorm(nn.Module):
    """Per-feature batch normalization over tokens with running statistics.

    In training mode batch statistics are used (when more than one token is
    present) and folded into the running estimates. ``adapt_momentum`` turns
    on statistics-only updates during an evaluation-mode forward pass.
    """

    def __init__(self, dim: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))
        self.register_buffer("running_mean", torch.zeros(dim))
        self.register_buffer("running_var", torch.ones(dim))
        self.adapt_momentum: float | None = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.training and x.shape[0] > 1:
            mean = x.mean(0)
            var = x.var(0, unbiased=False)
            self._update(x.detach(), self.momentum)
        else:
            if self.adapt_momentum is not None and x.shape[0] > 1:
                self._update(x.detach(), self.adapt_momentum)
            mean, var = self.running_mean, self.running_var
        return (x - mean) / torch.sqrt(var + self.eps) * self.weight + self.bias

    @torch.no_grad()
    def _update(self, x: torch.Tensor, momentum: float) -> None:
        n = x.shape[0]
        self.running_mean.mul_(1 - momentum).add_(momentum * x.mean(0))
        self.running_var.mul_(1 - momentum).add_(momentum * x.var(0, unbiased=False) * n / (n - 1))


def _embedding(in_dim: int, d: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(in_dim, d), BatchStatNorm(d), nn.ReLU(), nn.Linear(d, d))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, d: int, heads: int, ffn: int):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.norm2 = nn.LayerNorm(d)
        self.ffn = nn.Sequential(nn.Linear(d, ffn), nn.GELU(), nn.Linear(ffn, d))

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        S, d = x.shape
        h = self.heads
        q, k, v = self.qkv(self.norm1(x)).view(S, 3, h, d // h).permute(1, 2, 0, 3)
        att = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
        x = x + self.proj(att.transpose(0, 1).reshape(S, d))
        return x + self.ffn(self.norm2(x))


class Stack(nn.Module):
    def __init__(self, d: int, heads: int, ffn: int, depth: int):
        super().__init__()
        self.blocks = nn.ModuleList(Block(d, heads, ffn) for _ in range(depth))
        self.norm = nn.LayerNorm(d)

    def forward(self, x, mask=None):
        for blk in self.blocks:
            x = blk(x, mask)
        return self.norm(x)


class Reconstructor(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        d = cfg.d_model
        self.pos = nn.Sequential(nn.Linear(2, d), nn.ReLU(), nn.Linear(d, d))
        self.kind = nn.Parameter(torch.zeros(3, d))
        self.stack = Stack(d, cfg.num_heads, cfg.ffn_dim, cfg.recon_blocks)
        self.hist_head = nn.Linear(d, cfg.t_h * 2)
        self.fut_head = nn.Linear(d, cfg.t_f * 2)
        self.lane_head = nn.Linear(d, cfg.lane_points * 2)
        nn.init.normal_(self.kind, std=0.02)


class MotionDecoder(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        d = cfg.d_model
        self.mlp = nn.Sequential(nn.Linear(d, cfg.ffn_dim), nn.ReLU(),
                                 nn.Linear(cfg.ffn_dim, cfg.ffn_dim), nn.ReLU())
        self.out = nn.Linear(cfg.ffn_dim, cfg.num_modes * cfg.t_f * 2)

    def forward(self, x):
        return self.out(self.mlp(x))


def _block_mask(groups: np.ndarray) -> torch.Tensor | None:
    if len(groups) == 0 or (groups == groups[0]).all():
        return None
    g = torch.as_tensor(groups)
    return g[:, None] == g[None, :]


class Backbone(nn.Module):
    def __init__(self, cfg: BackboneConfig = BackboneConfig()):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.embed_hist = _embedding(cfg.hist_features, d)
        self.embed_fut = _embedding(cfg.fut_features, d)
        self.embed_lane = _embedding(cfg.lane_features, d)
        self.class_tokens = nn.Parameter(0.02 * torch.randn(cfg.num_classes, d))
        self.mask_traj = nn.Parameter(0.02 * torch.randn(d))
        self.mask_lane = nn.Parameter(0.02 * torch.randn(d))
        self.encoder = Stack(d, cfg.num_heads, cfg.ffn_dim, cfg.encoder_blocks)
        self.recon = Reconstructor(cfg)
        self.decoder = MotionDecoder(cfg)

    # -- parameter bookkeeping
    @staticmethod
    def group_of(name: str) -> str:
        if name.startswith("embed_"):
            return "embeddings"
        if name == "class_tokens":
            return "class_tokens"
        if name.startswith("mask_"):
            return "mask_tokens"
        if name.startswith("encoder."):
            return "encoder"
        if name.startswith(("decoder.", "recon.")):
            return "decoder"
        raise KeyError(name)

    def group_params(self, groups: Iterable[str]) -> dict[str, nn.Parameter]:
        groups = set(groups)
        unknown = groups - set(LAYER_GROUPS)
        if unknown:
            raise ValueError(f"unknown layer groups {sorted(unknown)}")
        return {n: p for n, p in self.named_parameters() if self.group_of(n) in groups}

    def norm_affine_params(self) -> dict[str, nn.Parameter]:
        out = {}
        for mname, mod in self.named_modules():
            if isinstance(mod, (BatchStatNorm, nn.LayerNorm)):
                for pname, p in mod.named_parameters(recurse=False):
                    out[f"{mname}.{pname}"] = p
        return out

    def last_layer_params(self) -> dict[str, nn.Parameter]:
        return {f"decoder.out.{n}": p for n, p in self.decoder.out.named_parameters()}

    def batch_norms(self) -> list[BatchStatNorm]:
        return [m for m in self.modules() if isinstance(m, BatchStatNorm)]

    # -- forward pieces
    def class_token_rows(self, batch: Batch) -> torch.Tensor:
        return self.class_tokens[batch.classes]

    def embed(self, batch: Batch, tokens: torch.Tensor, with_future: bool = True):
        """Trajectory embeddings plus per-actor tokens; lane embeddings without tokens."""
        if tokens.shape != (batch.num_actors, self.cfg.d_model):
            raise ValueError(f"need one {self.cfg.d_model}-dim token per actor, got {tuple(tokens.shape)}")
        h_x = self.embed_hist(batch.hist_feat) + tokens
        h_y = None
        if with_future:
            h_y = self.embed_fut(batch.fut_feat) + tokens
        h_m = self.embed_lane(batch.lane_feat)
        return h_x, h_y, h_m

    def encode(self, h_x, h_y, h_m, groups: np.ndarray | None = None):
        """Joint self-attention over actor and lane tokens.

        ``groups`` gives the packed-sample index of every row of the
        concatenation (history, future, lanes); attention never crosses
        samples.
        """
        parts = [h_x] + ([h_y] if h_y is not None else []) + [h_m]
        x = torch.cat(parts, dim=0)
        mask = _block_mask(groups) if groups is not None else None
        out = self.encoder(x, mask)
        nx = h_x.shape[0]
        ny = h_y.shape[0] if h_y is not None else 0
        return out[:nx], (out[nx:nx + ny] if h_y is not None else None), out[nx + ny:]

    def reconstruct(self, batch: Batch, tokens: torch.Tensor, plan: MaskPlan):
        """Rebuild history, future and lane points with masked elements hidden.

        Masked elements are withheld from the encoder so their content cannot
        leak into visible encodings through attention; at the reconstructor
        input they are replaced by the trajectory or lane mask token.
        """
        cfg = self.cfg
        h_x, h_y, h_m = self.embed(batch, tokens)
        has_f = batch.has_future.numpy()
        hist_vis = ~plan.history_masked
        fut_vis = ~plan.future_masked & has_f
        lane_vis = ~plan.lane_masked
        hv, fv, lv = (torch.as_tensor(np.flatnonzero(m)) for m in (hist_vis, fut_vis, lane_vis))
        groups = np.concatenate([batch.actor_sample[hist_vis], batch.actor_sample[fut_vis],
                                 batch.lane_sample[lane_vis]])
        Fx, Fy, Fm = self.encode(h_x[hv], h_y[fv], h_m[lv], groups)

        na, nl = batch.num_actors, batch.num_lanes
        d = cfg.d_model
        rx = self.mask_traj.expand(na, d).index_put((hv,), Fx)
        ry = self.mask_traj.expand(na, d).index_put((fv,), Fy)
        rm = self.mask_lane.expand(nl, d).index_put((lv,), Fm)
        r = self.recon
        rx = rx + r.pos(batch.actor_pos) + r.kind[0]
        ry = ry + r.pos(batch.actor_pos) + r.kind[1]
        rm = rm + r.pos(batch.lane_pos) + r.kind[2]
        x = torch.cat([rx, ry, rm], dim=0)
        groups = np.concatenate([batch.actor_sample, batch.actor_sample, batch.lane_sample])
        out = r.stack(x, _block_mask(groups))
        s = cfg.traj_scale
        x_hat = r.hist_head(out[:na]).view(na, cfg.t_h, 2) * s
        y_hat = r.fut_head(out[na:2 * na]).view(na, cfg.t_f, 2) * s
        m_hat = r.lane_head(out[2 * na:]).view(nl, cfg.lane_points, 2) * s
        return x_hat, y_hat, m_hat

    def predict(self, batch: Batch, tokens: torch.Tensor) -> torch.Tensor:
        """K candidate futures per actor, (N, K, t_f, 2) in the ego frame."""
        cfg = self.cfg
        h_x, _, h_m = self.embed(batch, tokens, with_future=False)
        groups = np.concatenate([batch.actor_sample, batch.lane_sample])
        Fx, _, _ = self.encode(h_x, None, h_m, groups)
        out = self.decoder(Fx).view(-1, cfg.num_modes, cfg.t_f, 2) * cfg.traj_scale
        return out + batch.current[:, None, None, :]


# --- losses ---------------------------------------------------------------

def _masked_point_mse(diff: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Per-element mean over valid points of squared L2 distance, (E,)."""
    sq = (diff ** 2).sum(-1) * mask
    return sq.sum(-1) / mask.sum(-1).clamp(min=1)


def recon_loss(batch: Batch, x_hat, y_hat, m_hat, weights=RECON_WEIGHTS,
               actor: bool = True, lane: bool = True) -> torch.Tensor:
    """Weighted reconstruction MSE: history and future averaged over actors, lanes over lanes."""
    w_h, w_f, w_l = weights
    zero = x_hat.sum() * 0.0
    total = zero
    if actor:
        hm = batch.hist_mask
        if hm.any():
            e = _masked_point_mse(x_hat - batch.hist_target, hm)
            total = total + w_h * e[hm.any(-1)].mean()
        fm = batch.fut_mask
        if fm.any():
            e = _masked_point_mse(y_hat - batch.fut_target, fm)
            total = total + w_f * e[fm.any(-1)].mean()
    if lane and batch.num_lanes:
        lm = batch.lane_mask
        e = _masked_point_mse(m_hat - batch.lane_target, lm)
        total = total + w_l * e[lm.any(-1)].mean()
    return total


def wta_loss(pred: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Winner-takes-all regression loss.

    pred (N, K, T, 2), gt (N, T, 2), mask (N, T). Each actor contributes the
    mean squared point error of its best mode; actors without any valid
    point are skipped.
    """
    valid = mask.any(-1)
    if not valid.any():
        return pred.sum() * 0.0
    diff = pred[valid] - gt[valid][:, None]
    per_mode = _masked_point_mse(diff, mask[valid][:, None, :].expand(-1, pred.shape[1], -1))
    return per_mode.min(dim=1).values.mean()


def reg_loss(model: Backbone, batch: Batch, tokens: torch.Tensor) -> torch.Tensor:
    pred = model.predict(batch, tokens)
    return wta_loss(pred, batch.fut_target + batch.current[:, None], batch.fut_mask)


@dataclass(frozen=True)
class LossSwitches:
    actor_recon: bool = True
    lane_recon: bool = True
    reg: bool = True

    @property
    def any(self) -> bool:
        return self.actor_recon or self.lane_recon or self.reg


def total_loss(model: Backbone, batch: Batch, tokens: torch.Tensor, plan: MaskPlan | None,
               switches: LossSwitches = LossSwitches()) -> tuple[torch.Tensor, dict[str, float]]:
    parts: dict[str, float] = {}
    total = tokens.sum() * 0.0
    if switches.actor_recon or switches.lane_recon:
        x_hat, y_hat, m_hat = model.reconstruct(batch, tokens, plan)
        rec = recon_loss(batch, x_hat, y_hat, m_hat, actor=switches.actor_recon,
                         lane=switches.lane_recon)
        parts["recon"] = float(rec.detach())
        total = total + rec
    if switches.reg:
        reg = reg_loss(model, batch, tokens)
        parts["reg"] = float(reg.detach())
        total = total + reg
    return total, parts


def gradients(loss_fn: Callable[[], torch.Tensor], model: Backbone,
              groups: Iterable[str]) -> dict[str, torch.Tensor]:
    """Exact gradients of ``loss_fn()`` for every tensor in the selected groups."""
    groups = list(groups)
    if not groups:
        raise ValueError("select at least one layer group")
    params = model.group_params(groups)
    loss = loss_fn()
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    return {n: (g if g is not None else torch.zeros_like(p))
            for (n, p), g in zip(params.items(), grads)}


@dataclass
class PredictionSet:
    trajectories: np.ndarray  # (N, K, t_f, 2) meters, ego frame

    def __post_init__(self):
        if self.trajectories.ndim != 4 or self.trajectories.shape[-1] != 2:
            raise ValueError("trajectories must be (N, K, t_f, 2)")
        if not np.isfinite(self.trajectories).all():
            raise ValueError("non-finite prediction")


@torch.no_grad()
def predict_sample(model: Backbone, sample: Sample, tokens: torch.Tensor | None = None) -> PredictionSet:
    dtype = next(model.parameters()).dtype
    batch = featurize(sample.without_future(), model.cfg, dtype)
    if tokens is None:
        tokens = model.class_token_rows(batch)
    return PredictionSet(model.predict(batch, tokens).double().numpy())
