"""Command line: ``t4p gen | train | run | sweep | report``.

Every command writes its outputs under ``--out``, together with a
``config.cfg`` snapshot of the resolved settings and a ``manifest`` listing
inputs and output digests. Exit codes: 0 success, 1 usage, 2 data error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .adapt import NumericError, offline_train
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import dump_kv, load_kv
from .experiments import (SWEEP_AXES, ExperimentConfig, domain, parse_loss, run_cell, set_threads,
                          sweep_cells, sweep_table, train_model)
from .metrics import (MetricsReport, PredictionRecord, TimingLog, read_prediction_dump,
                      write_prediction_dump)
from .scenario import InvariantError, Scene, SceneFormatError, load_scene_file, write_scene_file
from .synth import generate_dataset

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SCENE_GLOB = "scene-*.scene"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# --- helpers -------------------------------------------------------------------

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out: Path, command: str, cfg: ExperimentConfig | None,
                    inputs: dict[str, str] | None = None, extra: dict[str, Any] | None = None) -> None:
    if cfg is not None:
        (out / "config.cfg").write_text(cfg.dump(), encoding="utf-8")
    files = {str(p.relative_to(out)): _sha256(p) for p in sorted(out.rglob("*"))
             if p.is_file() and p.name != "manifest"}
    manifest = {"tool": "t4p", "version": __version__, "command": command,
                "inputs": inputs or {}, "files": files, **(extra or {})}
    (out / "manifest").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _resolve_config(args) -> ExperimentConfig:
    """Defaults, then ``--config`` (a file, or a time preset name), then flags."""
    values: dict[str, Any] = {}
    conf = getattr(args, "config", None)
    if conf:
        if conf in ("short", "long"):
            values["time"] = conf
        else:
            path = Path(conf)
            if not path.exists():
                raise DataError(f"config file not found: {conf}")
            values.update(load_kv(path))
    flag_map = {"method": "method", "update_freq": "update_frequency", "max_scene_len": "max_scene_len",
                "layers": "layer_groups", "seed": "seed", "tau": "tau", "lr_model": "lr_model",
                "lr_tokens": "lr_tokens", "actor_mask_ratio": "actor_mask_ratio",
                "lane_mask_ratio": "lane_mask_ratio", "epochs": "train_epochs",
                "train_seed": "train_seed"}
    cmd = getattr(args, "command", "")
    if cmd == "gen":
        flag_map.pop("seed")
    for flag, key in flag_map.items():
        v = getattr(args, flag, None)
        if v is not None and key is not None:
            values[key] = v
    if getattr(args, "no_memory", False):
        values["use_memory"] = False
    loss = getattr(args, "loss", None)
    if loss is not None:
        values["train_loss" if cmd == "train" else "loss"] = loss
    try:
        return ExperimentConfig.from_mapping(values)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from exc


def _load_scenes(data: str | None) -> list[Scene]:
    if not data:
        raise UsageError("--data is required")
    folder = Path(data)
    if folder.is_dir() and (folder / "scenes").is_dir():
        folder = folder / "scenes"
    files = sorted(folder.glob(SCENE_GLOB)) if folder.is_dir() else []
    if not files:
        raise DataError(f"no scenario files under {data}")
    return [load_scene_file(f) for f in files]


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _check_model_time(model, scenes: Sequence[Scene]) -> None:
    tc = scenes[0].time
    if (model.cfg.t_h, model.cfg.t_f) != (tc.t_h, tc.t_f):
        raise DataError(f"checkpoint expects t_h={model.cfg.t_h}, t_f={model.cfg.t_f}; "
                        f"data has t_h={tc.t_h}, t_f={tc.t_f}")


# --- commands ------------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = _resolve_config(args)
    try:
        params = domain(args.domain, args.seed)
    except (KeyError, FileNotFoundError, ValueError) as exc:
        raise DataError(f"invalid domain preset: {exc}") from exc
    n = args.scenes
    if n < 1:
        raise UsageError("--scenes must be >= 1")
    out = _out_dir(args)
    folder = out / "scenes"
    folder.mkdir(exist_ok=True)
    for old in folder.glob(SCENE_GLOB):
        old.unlink()
    scenes = generate_dataset(params, n, cfg.time_config())
    for s in scenes:
        write_scene_file(s, folder / f"scene-{s.scene_id:04d}.scene")
    (out / "domain.cfg").write_text(dump_kv(params.to_mapping()), encoding="utf-8")
    lengths = [s.length for s in scenes]
    _write_manifest(out, "gen", cfg, {"domain": args.domain},
                    {"scenes": n, "steps": sum(lengths), "time": cfg.time})
    print(f"wrote {n} scenes ({sum(lengths)} steps, lengths {min(lengths)}-{max(lengths)}) to {folder}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    scenes = _load_scenes(args.data)
    tc = scenes[0].time
    cfg = replace(cfg, time="long" if tc.dt == 0.5 else "short")
    out = _out_dir(args)
    start = None
    if args.resume:
        start, meta, _, _ = _load_ckpt(args.resume)
        _check_model_time(start, scenes)

    def progress(row):
        print(f"epoch {row['epoch']:>3}  loss {row['loss']:.4f}  recon {row['recon']:.4f}  reg {row['reg']:.4f}",
              flush=True)

    if start is None:
        model, log = train_model(cfg, scenes, progress=progress)
    else:
        model, _, log = offline_train(scenes, start.cfg, cfg.train_epochs, cfg.train_seed,
                                      parse_loss(cfg.train_loss), lr=cfg.train_lr,
                                      batch_size=cfg.train_batch, stride=cfg.train_stride,
                                      model=start, progress=progress)
    save_checkpoint(out / "model.t4pckpt", model, {"train_loss": cfg.train_loss,
                                                   "epochs": cfg.train_epochs, "seed": cfg.train_seed})
    (out / "train_log.csv").write_text(log.to_csv(), encoding="utf-8")
    _write_manifest(out, "train", cfg, {"data": str(args.data), "resume": str(args.resume or "")})
    print(f"checkpoint written to {out / 'model.t4pckpt'}")
    return EXIT_OK


def _load_ckpt(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint not found: {path}") from exc
    except (CheckpointError, KeyError, ValueError) as exc:
        raise DataError(f"unreadable checkpoint {path}: {exc}") from exc


def _run_inputs(args):
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    model = _load_ckpt(args.checkpoint)[0]
    scenes = _load_scenes(args.data)
    _check_model_time(model, scenes)
    return model, scenes


def cmd_run(args) -> int:
    cfg = _resolve_config(args)
    model, scenes = _run_inputs(args)
    out = _out_dir(args)
    result = run_cell(cfg, model, scenes)
    report = result.report
    (out / "metrics.csv").write_text(report.to_csv(), encoding="utf-8")
    (out / "timing.csv").write_text(result.timing.to_csv(), encoding="utf-8")
    with open(out / "predictions.txt", "w", encoding="utf-8") as fh:
        write_prediction_dump(result.records, fh)
    label = cfg.adapt_method().label
    table = f"method: {label}\nadaptation updates: {result.updates}\n{report.table()}\n"
    (out / "report.txt").write_text(table, encoding="utf-8")
    if args.plots:
        _run_plots(out, cfg, scenes, result, model)
    _write_manifest(out, "run", cfg, {"checkpoint": str(args.checkpoint), "data": str(args.data)},
                    {"updates": result.updates})
    print(table, end="")
    return EXIT_OK


def _run_plots(out: Path, cfg, scenes, result, source_model) -> None:
    from .plots import accuracy_fps_scatter, reconstruction_panel, trajectory_panel
    scene_of = {s.scene_id: s for s in scenes}
    if result.records:
        t_h = scenes[0].time.t_h
        rec = next((r for r in result.records[len(result.records) // 3:] if r.t >= 2 * t_h),
                   result.records[len(result.records) // 2])
        scene = scene_of[rec.scene_id]
        sample = scene.sample(rec.t, with_future=False)
        trajectory_panel(out / "trajectories.png", sample, rec, f"{cfg.method}: scene {rec.scene_id}, t={rec.t}")
        reconstruction_panel(out / "reconstruction.png", scene.sample(rec.t),
                             [("before adaptation", source_model), ("after adaptation", result.model)])
    accuracy_fps_scatter(out / "accuracy_fps.png", [(cfg.method, result.report.fps, result.report.made_6)],
                         1.0 / scenes[0].time.dt)


def cmd_sweep(args) -> int:
    cfg = _resolve_config(args)
    if args.axis not in SWEEP_AXES:
        raise UsageError(f"invalid sweep axis {args.axis!r}; expected one of {', '.join(SWEEP_AXES)}")
    model, scenes = _run_inputs(args)
    out = _out_dir(args)
    rows = []
    lines = ["cell,metric,k,value"]
    for i, (labels, overrides) in enumerate(sweep_cells(args.axis)):
        cell_cfg = replace(cfg, **overrides)
        result = run_cell(cell_cfg, model, scenes, keep_records=True)
        rows.append((labels, result))
        tag = ";".join(f"{k}={v}" for k, v in labels.items())
        for line in result.report.to_csv().splitlines()[1:]:
            lines.append(f"\"{tag}\",{line}")
        print(f"[{i + 1}] {tag}: mADE6 {result.report.made_6:.3f}  FPS {result.report.fps:.1f}", flush=True)
    table = sweep_table(args.axis, rows)
    (out / "sweep.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out / "sweep.txt").write_text(table + "\n", encoding="utf-8")
    if args.plots and args.axis == "update_frequency":
        from .plots import accuracy_fps_scatter
        accuracy_fps_scatter(out / "accuracy_fps.png",
                             [(f"freq {lab['update_frequency']}", r.report.fps, r.report.made_6) for lab, r in rows],
                             1.0 / scenes[0].time.dt)
    _write_manifest(out, f"sweep {args.axis}", cfg, {"checkpoint": str(args.checkpoint), "data": str(args.data)})
    print(table)
    return EXIT_OK


def cmd_report(args) -> int:
    """Recompute metrics from prediction dumps and scenario files."""
    out_lines = []
    csv_rows = ["run,metric,k,value"]
    for run in args.runs:
        run = Path(run)
        manifest_path = run / "manifest"
        if not manifest_path.exists():
            raise DataError(f"{run}: no manifest")
        manifest = json.loads(manifest_path.read_text())
        data = args.data or manifest.get("inputs", {}).get("data")
        scenes = {s.scene_id: s for s in _load_scenes(data)}
        dump_path = run / "predictions.txt"
        if not dump_path.exists():
            raise DataError(f"{run}: no predictions.txt")
        with open(dump_path, encoding="utf-8") as fh:
            dump = read_prediction_dump(fh)
        records = []
        for (sid, t), actors in sorted(dump.items()):
            if sid not in scenes:
                raise DataError(f"{run}: scene {sid} missing from {data}")
            scene = scenes[sid]
            cur = scene.sample(t, with_future=False)
            gt = scene.ground_truth(t)
            ids = [int(a) for a in cur.actor_ids]
            if set(ids) != set(actors):
                raise DataError(f"{run}: actor set mismatch at scene {sid} t={t}")
            pred = np.stack([actors[a] for a in ids])
            records.append(PredictionRecord(sid, t, cur.actor_ids, pred, gt))
        timing = None
        if (run / "timing.csv").exists():
            timing = TimingLog.from_csv((run / "timing.csv").read_text())
        report = MetricsReport.from_records(records, timing)
        out_lines.append(f"== {run}\n{report.table()}")
        csv_rows += [f"{run},{line}" for line in report.to_csv().splitlines()[1:]]
    text = "\n".join(out_lines)
    print(text)
    if args.out:
        out = _out_dir(args)
        (out / "report.csv").write_text("\n".join(csv_rows) + "\n", encoding="utf-8")
        (out / "report.txt").write_text(text + "\n", encoding="utf-8")
        _write_manifest(out, "report", None, {"runs": ",".join(str(r) for r in args.runs)})
    return EXIT_OK


# --- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="t4p", description="Test-time training for trajectory prediction on synthetic scenes.")
    p.add_argument("--version", action="version", version=f"t4p {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="config file (key = value), or a time preset: short | long")
        sp.add_argument("--out", required=out_required, help="output directory")

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    common(g)
    g.add_argument("--domain", required=True, help="domain preset name or .cfg path")
    g.add_argument("--scenes", type=int, default=10)
    g.add_argument("--seed", type=int, help="override the preset's seed")

    t = sub.add_parser("train", help="offline training on a generated dataset")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--loss", help="reg (source only) or reg+recon (joint training)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--train-seed", type=int, dest="train_seed")
    t.add_argument("--resume", help="continue from this checkpoint")

    def online(sp):
        common(sp)
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--data", required=True, help="target dataset directory")
        sp.add_argument("--method", help="source_only | joint_training | dua | tent_sup | last_layer_reg | t4p")
        sp.add_argument("--update-freq", type=int, dest="update_freq")
        sp.add_argument("--loss", help="test-time losses, e.g. actor_recon+lane_recon+reg, reg, none")
        sp.add_argument("--layers", help="layer groups, e.g. decoder,encoder")
        sp.add_argument("--max-scene-len", type=int, dest="max_scene_len")
        sp.add_argument("--tau", type=int)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--no-memory", action="store_true", dest="no_memory",
                        help="t4p with trained class tokens only")
        sp.add_argument("--plots", action="store_true", help="write static figures")

    r = sub.add_parser("run", help="online adaptation and evaluation on a target dataset")
    online(r)
    s = sub.add_parser("sweep", help="grid of online runs along one axis")
    online(s)
    s.add_argument("--axis", required=True, help=" | ".join(SWEEP_AXES))

    rp = sub.add_parser("report", help="recompute metrics from run directories")
    rp.add_argument("runs", nargs="+")
    rp.add_argument("--data", help="scenario directory (defaults to the one in each run manifest)")
    rp.add_argument("--out")
    return p


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "run": cmd_run, "sweep": cmd_sweep, "report": cmd_report}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        set_threads(1)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"t4p: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, SceneFormatError, InvariantError, FileNotFoundError) as exc:
        print(f"t4p: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"t4p: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
