"""Experiment plumbing shared by the command line and the acceptance suite.

An :class:`ExperimentConfig` is a flat record whose keys mirror the
adaptation settings; it round-trips through the ``key = value`` format so
every run can be recreated from its snapshot. Offline checkpoints are cached
by a hash of the settings that influence them, so sweeps reuse one model.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import torch

from .adapt import AdaptMethod, OnlineResult, OptimSettings, TrainLog, offline_train, run_online
from .backbone import ADAPTABLE_GROUPS, Backbone, BackboneConfig, LossSwitches
from .checkpoint import load_checkpoint, save_checkpoint
from .config import dump_kv, load_kv
from .scenario import Scene, TimeConfig
from .synth import DomainParams, generate_dataset, load_domain

LOSS_WORDS = {
    "none": LossSwitches(False, False, False),
    "actor_recon": LossSwitches(True, False, False),
    "lane_recon": LossSwitches(False, True, False),
    "recon": LossSwitches(True, True, False),
    "reg": LossSwitches(False, False, True),
    "all": LossSwitches(True, True, True),
}


def parse_loss(text: str) -> LossSwitches:
    """``reg``, ``reg+recon``, ``actor_recon+lane_recon``, ``all``, ``none``..."""
    on = {"actor_recon": False, "lane_recon": False, "reg": False}
    for word in str(text).replace(",", "+").split("+"):
        word = word.strip()
        if word not in LOSS_WORDS:
            raise ValueError(f"unknown loss term {word!r}; use {', '.join(LOSS_WORDS)}")
        for k, v in asdict(LOSS_WORDS[word]).items():
            on[k] = on[k] or v
    return LossSwitches(**on)


def loss_name(sw: LossSwitches) -> str:
    parts = [n for n, v in (("actor_recon", sw.actor_recon), ("lane_recon", sw.lane_recon),
                            ("reg", sw.reg)) if v]
    return "+".join(parts) if parts else "none"


@dataclass(frozen=True)
class ExperimentConfig:
    # data
    time: str = "short"
    tau: int = 0  # 0 means tau = t_f
    source: str = "source"
    target: str = "target"
    source_scenes: int = 16
    target_scenes: int = 20
    # offline training
    train_loss: str = "reg+recon"
    train_epochs: int = 30
    train_seed: int = 0
    train_lr: float = 1e-3
    train_stride: int = 3
    train_batch: int = 16
    d_model: int = 128
    num_heads: int = 4
    encoder_blocks: int = 2
    recon_blocks: int = 2
    ffn_dim: int = 256
    # online adaptation
    method: str = "t4p"
    use_memory: bool = True
    lr_model: float = 0.01
    lr_tokens: float = 0.5
    weight_decay: float = 0.001
    grad_clip: float = 15.0
    layer_groups: tuple[str, ...] = ADAPTABLE_GROUPS
    update_frequency: int = 1
    loss: str = "actor_recon+lane_recon+reg"
    actor_mask_ratio: float = 0.4
    lane_mask_ratio: float = 0.3
    steps_per_update: int = 1
    seed: int = 0
    dua_momentum: float = 0.1
    dua_decay: float = 0.94
    dua_min_momentum: float = 0.005
    max_scene_len: int = 0  # 0 means no truncation

    def __post_init__(self):
        TimeConfig.named(self.time)
        parse_loss(self.loss)
        parse_loss(self.train_loss)
        object.__setattr__(self, "layer_groups", _groups(self.layer_groups))
        self.optim_settings()
        self.adapt_method()

    # -- conversions
    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> "ExperimentConfig":
        names = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, value in values.items():
            key = key.replace("-", "_")
            if key not in names:
                raise ValueError(f"unknown experiment key {key!r}")
            kwargs[key] = value
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_mapping(load_kv(path))

    def to_mapping(self) -> dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def dump(self) -> str:
        return dump_kv(self.to_mapping())

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})

    # -- derived objects
    def time_config(self) -> TimeConfig:
        return TimeConfig.named(self.time, self.tau or None)

    def backbone_config(self) -> BackboneConfig:
        tc = self.time_config()
        return BackboneConfig(t_h=tc.t_h, t_f=tc.t_f, d_model=self.d_model, num_heads=self.num_heads,
                              encoder_blocks=self.encoder_blocks, recon_blocks=self.recon_blocks,
                              ffn_dim=self.ffn_dim)

    def optim_settings(self) -> OptimSettings:
        return OptimSettings(self.lr_model, self.lr_tokens, self.weight_decay, self.grad_clip,
                             self.layer_groups, self.update_frequency, parse_loss(self.loss),
                             self.actor_mask_ratio, self.lane_mask_ratio, self.steps_per_update,
                             self.seed)

    def adapt_method(self) -> AdaptMethod:
        return AdaptMethod(self.method, self.use_memory, self.dua_momentum, self.dua_decay,
                           self.dua_min_momentum)

    def training_key(self) -> str:
        """Hash of everything that determines the offline checkpoint."""
        src = load_domain(self.source).to_mapping()
        keys = ("time", "source_scenes", "train_loss", "train_epochs", "train_seed", "train_lr",
                "train_stride", "train_batch", "d_model", "num_heads", "encoder_blocks",
                "recon_blocks", "ffn_dim")
        blob = json.dumps({"domain": src, **{k: getattr(self, k) for k in keys}},
                          sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _groups(value) -> tuple[str, ...]:
    if isinstance(value, str):
        value = [v for v in value.replace("+", ",").split(",") if v.strip()]
    short = {"D": "decoder", "E": "encoder", "f": "embeddings"}
    out = tuple(short.get(v.strip(), v.strip()) for v in value)
    bad = set(out) - set(ADAPTABLE_GROUPS)
    if bad:
        raise ValueError(f"unknown layer groups {sorted(bad)}")
    return out


def domain(name_or_path: str, seed: int | None = None) -> DomainParams:
    params = load_domain(name_or_path)
    return params if seed is None else replace(params, seed=seed)


def source_scenes(cfg: ExperimentConfig) -> list[Scene]:
    return generate_dataset(domain(cfg.source), cfg.source_scenes, cfg.time_config())


def target_scenes(cfg: ExperimentConfig) -> list[Scene]:
    return generate_dataset(domain(cfg.target), cfg.target_scenes, cfg.time_config())


def train_model(cfg: ExperimentConfig, scenes: Sequence[Scene] | None = None,
                progress=None) -> tuple[Backbone, TrainLog]:
    scenes = source_scenes(cfg) if scenes is None else scenes
    model, _, log = offline_train(scenes, cfg.backbone_config(), cfg.train_epochs, cfg.train_seed,
                                  parse_loss(cfg.train_loss), lr=cfg.train_lr,
                                  batch_size=cfg.train_batch, stride=cfg.train_stride,
                                  actor_mask_ratio=cfg.actor_mask_ratio,
                                  lane_mask_ratio=cfg.lane_mask_ratio, progress=progress)
    return model, log


def cached_model(cfg: ExperimentConfig, cache_dir: str | Path, progress=None) -> Backbone:
    """Train once per training key; later calls load the stored checkpoint."""
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    path = cache_dir / f"model-{cfg.training_key()}.t4pckpt"
    if path.exists():
        return load_checkpoint(path)[0]
    model, log = train_model(cfg, progress=progress)
    tmp = path.with_suffix(".tmp")
    save_checkpoint(tmp, model, {"training_key": cfg.training_key(), "train_loss": cfg.train_loss})
    tmp.replace(path)
    (cache_dir / f"model-{cfg.training_key()}.train.csv").write_text(log.to_csv())
    return model


def run_cell(cfg: ExperimentConfig, model: Backbone, scenes: Sequence[Scene],
             keep_records: bool = True) -> OnlineResult:
    return run_online(scenes, model, cfg.adapt_method(), cfg.optim_settings(), cfg.time_config(),
                      cfg.max_scene_len or None, keep_records=keep_records)


# --- sweep grids -----------------------------------------------------------

SWEEP_AXES = ("mask_ratios", "loss_switches", "layer_groups", "update_frequency", "max_scene_len")
MASK_GRID = (0.1, 0.3, 0.5, 0.7, 0.9)
LOSS_ROWS = ("none", "actor_recon", "actor_recon+lane_recon", "reg", "actor_recon+lane_recon+reg")
LAYER_COLUMNS = ("decoder", "decoder,encoder", "decoder,encoder,embeddings")
FREQUENCIES = (1, 5, 20)
SCENE_LENGTHS = (200, 100, 50, 25)


def sweep_cells(axis: str) -> list[tuple[dict[str, Any], dict[str, Any]]]:
    """``[(labels, config overrides)]`` for one sweep axis."""
    if axis == "mask_ratios":
        return [({"actor_mask_ratio": a, "lane_mask_ratio": l},
                 {"actor_mask_ratio": a, "lane_mask_ratio": l}) for a in MASK_GRID for l in MASK_GRID]
    if axis == "loss_switches":
        return [({"loss": row}, {"loss": row}) for row in LOSS_ROWS]
    if axis == "layer_groups":
        return [({"loss": loss, "layer_groups": cols}, {"loss": loss, "layer_groups": cols})
                for loss in ("reg", "actor_recon+lane_recon+reg") for cols in LAYER_COLUMNS]
    if axis == "update_frequency":
        return [({"update_frequency": f}, {"update_frequency": f}) for f in FREQUENCIES]
    if axis == "max_scene_len":
        return [({"max_scene_len": n, "use_memory": m}, {"max_scene_len": n, "use_memory": m})
                for n in SCENE_LENGTHS for m in (True, False)]
    raise ValueError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")


def sweep_table(axis: str, rows: list[tuple[dict[str, Any], OnlineResult]]) -> str:
    """Text table laid out along the swept axes."""
    def cell(r: OnlineResult) -> str:
        return f"{r.report.made_6:.3f} / {r.report.mfde_6:.3f}"

    if axis == "mask_ratios":
        by = {(lab["actor_mask_ratio"], lab["lane_mask_ratio"]): r for lab, r in rows}
        head = "actor\\lane " + "".join(f"{l:>16}" for l in MASK_GRID)
        lines = [head] + [f"{a:<11}" + "".join(f"{cell(by[(a, l)]):>16}" if (a, l) in by else f"{'-':>16}"
                                               for l in MASK_GRID) for a in MASK_GRID]
    elif axis == "layer_groups":
        by = {(lab["loss"], lab["layer_groups"]): r for lab, r in rows}
        head = f"{'loss':<28}" + "".join(f"{'+'.join(c[0].upper() if c != 'embeddings' else 'f' for c in g.split(',')):>18}"
                                         for g in LAYER_COLUMNS)
        lines = [head]
        for loss in ("reg", "actor_recon+lane_recon+reg"):
            lines.append(f"{loss:<28}" + "".join(f"{cell(by[(loss, g)]):>18}" if (loss, g) in by else f"{'-':>18}"
                                                 for g in LAYER_COLUMNS))
    elif axis == "max_scene_len":
        by = {(lab["max_scene_len"], lab["use_memory"]): r for lab, r in rows}
        lines = [f"{'max_scene_len':<15}{'with memory':>18}{'class tokens':>18}{'gap':>10}"]
        for n in SCENE_LENGTHS:
            if (n, True) in by and (n, False) in by:
                a, b = by[(n, True)], by[(n, False)]
                lines.append(f"{n:<15}{cell(a):>18}{cell(b):>18}{b.report.made_6 - a.report.made_6:>10.3f}")
    else:
        key = "loss" if axis == "loss_switches" else "update_frequency"
        lines = [f"{key:<30}{'mADE6 / mFDE6':>18}{'FPS':>10}{'FPS pred':>10}"]
        for lab, r in rows:
            lines.append(f"{str(lab[key]):<30}{cell(r):>18}{r.report.fps:>10.1f}{r.report.fps_predict:>10.1f}")
    return "\n".join(lines)


def set_threads(n: int = 1) -> None:
    """Single-threaded torch keeps timings and results reproducible."""
    torch.set_num_threads(n)
