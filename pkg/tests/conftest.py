import numpy as np
import pytest
import torch

from t4p.backbone import Backbone, BackboneConfig
from t4p.scenario import Scene, TimeConfig, split_lane
from t4p.synth import DomainParams, generate_scene

torch.set_num_threads(1)

TINY_TIME = TimeConfig(t_h=4, t_f=6, dt=0.1)


def tiny_config(d: int = 16, heads: int = 2, blocks: int = 1, t_h: int = 4, t_f: int = 6) -> BackboneConfig:
    return BackboneConfig(t_h=t_h, t_f=t_f, d_model=d, num_heads=heads, encoder_blocks=blocks,
                          recon_blocks=blocks, ffn_dim=2 * d)


def straight_scene(scene_id: int = 0, n_actors: int = 3, length: int = 20, time: TimeConfig = TINY_TIME,
                   speeds=None, classes=None, lanes: bool = True, id_base: int = 0) -> Scene:
    """Actors driving along parallel lines in +x, one lane each."""
    speeds = speeds or [5.0 + i for i in range(n_actors)]
    classes = classes or [1] * n_actors
    t = np.arange(length) * time.dt
    pos = np.round(np.stack([np.stack([s * t, np.full(length, 3.5 * i)], axis=-1)
                             for i, s in enumerate(speeds)]), 6)
    segs = []
    if lanes:
        for i in range(n_actors):
            line = np.stack([np.linspace(-10, 40, 51), np.full(51, 3.5 * i)], axis=-1)
            segs.extend(split_lane(line, first_id=len(segs)))
    ids = np.arange(n_actors, dtype=np.int64) + id_base
    return Scene(scene_id, time, int(ids[0]), ids, np.array(classes, dtype=np.int64), pos, tuple(segs))


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    return Backbone(tiny_config()).double().eval()


@pytest.fixture
def tiny_scene():
    params = DomainParams(seed=3, actor_count_range=(3, 4), scene_length_range=(40, 40))
    return generate_scene(params, 0, TINY_TIME)



# --- acceptance verdicts ---------------------------------------------------------

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
