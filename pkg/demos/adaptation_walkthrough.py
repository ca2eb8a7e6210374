"""Walk through offline training and online adaptation at toy scale.

Trains a small backbone on the source preset, then streams target scenes
three ways: no adaptation, last-layer adaptation and full test-time training
with the actor token memory. Runs in about a minute on one CPU core.

    python demos/adaptation_walkthrough.py
"""

from dataclasses import replace

from t4p.adapt import AdaptMethod, OptimSettings, offline_train, run_online
from t4p.backbone import BackboneConfig
from t4p.experiments import set_threads
from t4p.synth import generate_dataset, load_domain
from t4p.scenario import TimeConfig


def main():
    set_threads(1)
    time = TimeConfig(t_h=6, t_f=12, dt=0.1)
    shorter = {"scene_length_range": (60, 70), "actor_count_range": (4, 6)}
    source = generate_dataset(replace(load_domain("source"), **shorter), 6, time)
    target = generate_dataset(replace(load_domain("target"), **shorter), 4, time)
    print(f"source: {len(source)} scenes, target: {len(target)} scenes")

    cfg = BackboneConfig(t_h=time.t_h, t_f=time.t_f, d_model=32, num_heads=2, encoder_blocks=1,
                         recon_blocks=1, ffn_dim=64)
    model, _, log = offline_train(source, cfg, epochs=8, seed=0, stride=3)
    print(f"offline training: loss {log.rows[0]['loss']:.3f} -> {log.rows[-1]['loss']:.3f}")

    for method in ("joint_training", "last_layer_reg", "t4p"):
        res = run_online(target, model, AdaptMethod(method), OptimSettings())
        rep = res.report
        print(f"{method:>15}: mADE6 {rep.made_6:.3f}  mFDE6 {rep.mfde_6:.3f}  "
              f"MR {rep.miss_rate:.2f}  updates {res.updates}  FPS {rep.fps:.0f}")
    if res.memory is not None:
        print(f"token memory after the stream: scene {res.memory.scene_id}, "
              f"{len(res.memory.bank)} actors banked in the last scene")


if __name__ == "__main__":
    main()
