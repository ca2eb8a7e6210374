import numpy as np
import pytest
import torch

from conftest import tiny_config
from t4p.backbone import ADAPTABLE_GROUPS, Backbone, LossSwitches
from t4p.checkpoint import CheckpointError, load_checkpoint, read_container, save_checkpoint
from t4p.config import dump_kv, flatten, nest, parse_kv, parse_value, preset_names, resolve_preset
from t4p.experiments import ExperimentConfig, loss_name, parse_loss, sweep_cells
from t4p.memory import TokenMemory
from t4p.synth import DomainParams, load_domain


# --- key = value files ----------------------------------------------------------

def test_parse_values():
    assert parse_value("3") == 3 and isinstance(parse_value("3"), int)
    assert parse_value("0.25") == 0.25
    assert parse_value("true") is True and parse_value("off") is False
    assert parse_value("6, 10") == (6, 10)
    assert parse_value("decoder") == "decoder"


def test_parse_kv_comments_and_errors():
    text = "# header\nseed = 1  # trailing\n\nspeed_mean.vehicle = 8.0\n"
    assert parse_kv(text) == {"seed": 1, "speed_mean.vehicle": 8.0}
    with pytest.raises(ValueError, match=":2:"):
        parse_kv("a = 1\nbroken line\n")


def test_dump_parse_round_trip():
    values = {"a": 1, "b": 0.1, "c": True, "d": (6, 10), "e": ("decoder",), "f": "x"}
    assert parse_kv(dump_kv(values)) == values


def test_nest_flatten():
    flat = {"seed": 1, "speed_mean.vehicle": 8.0, "speed_mean.bicycle": 4.5}
    assert nest(flat) == {"seed": 1, "speed_mean": {"vehicle": 8.0, "bicycle": 4.5}}
    assert flatten(nest(flat)) == flat


def test_presets_ship_and_resolve():
    assert {"source", "target"} <= set(preset_names())
    assert resolve_preset("source")["seed"] == 1
    with pytest.raises(KeyError, match="unknown preset"):
        resolve_preset("no-such-domain")


def test_presets_differ_in_shift_directions():
    src, tgt = load_domain("source"), load_domain("target")
    assert isinstance(src, DomainParams)
    assert tgt.lane_curvature > src.lane_curvature
    assert tgt.habit_spread > src.habit_spread
    assert tgt.occlusion_rate > 0 == src.occlusion_rate


# --- experiment configs ---------------------------------------------------------

def test_experiment_round_trip(tmp_path):
    cfg = ExperimentConfig(method="dua", layer_groups=("decoder",), max_scene_len=50)
    path = tmp_path / "exp.cfg"
    path.write_text(cfg.dump())
    assert ExperimentConfig.load(path) == cfg


def test_layer_shorthand_and_validation():
    assert ExperimentConfig(layer_groups="D+E").layer_groups == ("decoder", "encoder")
    assert ExperimentConfig(layer_groups="D,E,f").layer_groups == ADAPTABLE_GROUPS
    with pytest.raises(ValueError):
        ExperimentConfig(layer_groups="decoder,heads")
    with pytest.raises(ValueError):
        ExperimentConfig.from_mapping({"no_such_key": 1})
    with pytest.raises(ValueError):
        ExperimentConfig(time="medium")


def test_parse_loss_words():
    assert parse_loss("reg") == LossSwitches(False, False, True)
    assert parse_loss("reg+recon") == LossSwitches(True, True, True)
    assert parse_loss("actor_recon,reg") == LossSwitches(True, False, True)
    assert loss_name(parse_loss("all")) == "actor_recon+lane_recon+reg"
    assert loss_name(parse_loss("none")) == "none"
    with pytest.raises(ValueError):
        parse_loss("reg+kl")


def test_training_key_ignores_online_settings():
    base = ExperimentConfig()
    assert base.training_key() == ExperimentConfig(method="dua", lr_model=0.1).training_key()
    assert base.training_key() != ExperimentConfig(train_epochs=5).training_key()
    assert base.training_key() != ExperimentConfig(time="long").training_key()


def test_sweep_grids():
    assert len(sweep_cells("mask_ratios")) == 25
    assert len(sweep_cells("layer_groups")) == 6
    assert len(sweep_cells("loss_switches")) == 5
    with pytest.raises(ValueError):
        sweep_cells("learning_rate")


# --- checkpoints -----------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(0)
    model = Backbone(tiny_config()).double().eval()
    path = tmp_path / "m.t4pckpt"
    save_checkpoint(path, model, {"note": "x"}, extra={"aux": {"v": np.arange(3.0)}})
    back, meta, memory, extra = load_checkpoint(path)
    assert meta["note"] == "x" and memory is None
    assert np.array_equal(extra["aux"]["v"], np.arange(3.0))
    for (k, a), (_, b) in zip(model.state_dict().items(), back.state_dict().items()):
        assert a.dtype == b.dtype and torch.equal(a, b), k


def test_checkpoint_index_is_keyed_by_group(tmp_path):
    model = Backbone(tiny_config())
    path = tmp_path / "m.t4pckpt"
    save_checkpoint(path, model)
    assert path.read_bytes().startswith(b"T4P-CKPT v1\n")
    _, sections = read_container(path)
    groups = {attrs["group"] for _, attrs in sections["backbone"].values()}
    assert set(ADAPTABLE_GROUPS) <= groups


def test_checkpoint_memory_section(tmp_path):
    model = Backbone(tiny_config())
    mem = TokenMemory.init_from_training(np.random.default_rng(0).standard_normal((5, 16)))
    mem.lookup_or_register(4, 1, 3)
    mem.on_tracker_id_change(4, 9)
    path = tmp_path / "m.t4pckpt"
    save_checkpoint(path, model, memory=mem)
    _, _, back, _ = load_checkpoint(path)
    assert np.array_equal(back.scene_class_tokens, mem.scene_class_tokens)
    assert back.bank[4].retired and back.bank[4].last_seen == 3


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "bad.t4pckpt"
    path.write_bytes(b"PK\x03\x04 not ours")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
