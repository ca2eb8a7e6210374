import io
import math

import numpy as np
import pytest

from t4p.metrics import (MetricsReport, PredictionRecord, TimingLog, fps, made, mfde, miss_rate,
                         read_prediction_dump, write_prediction_dump)


def _rec(pred, gt, sid=0, t=0):
    pred, gt = np.asarray(pred, float), np.asarray(gt, float)
    return PredictionRecord(sid, t, np.arange(len(gt)), pred, gt)


def _offsets(gt, offs):
    """Modes at constant offsets along +x from the ground truth."""
    return np.stack([gt + np.array([o, 0.0]) for o in offs], axis=1)


# --- brute-force oracle -------------------------------------------------------

def oracle(records, k, kind):
    """Explicit loops over samples, actors, modes and points."""
    per_sample, misses, total = [], 0, 0
    for r in records:
        actor_vals = []
        for n in range(r.gt.shape[0]):
            if any(math.isnan(v) for v in r.gt[n].ravel()):
                continue
            best_ade = best_fde = best_max = math.inf
            for m in range(k):
                dists = [math.hypot(r.pred[n, m, s, 0] - r.gt[n, s, 0], r.pred[n, m, s, 1] - r.gt[n, s, 1])
                         for s in range(r.gt.shape[1])]
                best_ade = min(best_ade, sum(dists) / len(dists))
                best_fde = min(best_fde, dists[-1])
                best_max = min(best_max, max(dists))
            actor_vals.append(best_ade if kind == "ade" else best_fde)
            misses += best_max > 2.0
            total += 1
        if actor_vals:
            per_sample.append(sum(actor_vals) / len(actor_vals))
    if kind == "mr":
        return misses / total
    return sum(per_sample) / len(per_sample)


def random_records(seed):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(int(rng.integers(1, 5))):
        n, T = int(rng.integers(1, 6)), int(rng.integers(2, 8))
        gt = rng.normal(0, 5, (n, T, 2))
        pred = gt[:, None] + rng.normal(0, rng.uniform(0.3, 3), (n, 6, T, 2))
        if n > 1 and rng.random() < 0.3:
            gt[0, -1] = np.nan  # incomplete future is excluded
        out.append(PredictionRecord(i % 2, i, np.arange(n), pred, gt))
    return out


@pytest.mark.parametrize("seed", range(50))
def test_matches_oracle(seed):
    recs = random_records(seed)
    for k in range(1, 7):
        assert made(recs, k) == pytest.approx(oracle(recs, k, "ade"), abs=1e-9)
        assert mfde(recs, k) == pytest.approx(oracle(recs, k, "fde"), abs=1e-9)
        assert miss_rate(recs, k) == pytest.approx(oracle(recs, k, "mr"), abs=1e-9)


@pytest.mark.parametrize("seed", range(20))
def test_monotone_in_k(seed):
    recs = random_records(100 + seed)
    for k in range(1, 6):
        assert made(recs, k + 1) <= made(recs, k) + 1e-12
        assert mfde(recs, k + 1) <= mfde(recs, k) + 1e-12
        assert miss_rate(recs, k + 1) <= miss_rate(recs, k)
    assert 0.0 <= miss_rate(recs, 6) <= 1.0


def test_invariant_to_actor_and_mode_order():
    recs = random_records(7)
    rng = np.random.default_rng(0)
    shuffled = []
    for r in recs:
        perm = rng.permutation(len(r.gt))
        modes = rng.permutation(6)
        shuffled.append(PredictionRecord(r.scene_id, r.t, r.actor_ids[perm], r.pred[perm][:, modes], r.gt[perm]))
    assert made(shuffled, 6) == pytest.approx(made(recs, 6), abs=1e-12)
    assert miss_rate(shuffled, 6) == miss_rate(recs, 6)


# --- worked examples ----------------------------------------------------------

def test_exact_mode_contributes_zero():
    gt = np.random.default_rng(0).normal(size=(1, 5, 2))
    pred = np.stack([gt[0] + 4.0, gt[0]])[None]
    assert made([_rec(pred, gt)], 2) == 0.0
    assert mfde([_rec(pred, gt)], 2) == 0.0


def test_offset_modes_ade():
    gt = np.zeros((1, 5, 2))
    assert made([_rec(_offsets(gt, [1.0, 3.0]), gt)], 2) == pytest.approx(1.0)
    assert made([_rec(_offsets(gt, [3.0, 1.0]), gt)], 1) == pytest.approx(3.0)
    assert made([_rec(_offsets(gt, [1.0, 3.0]), gt)], 1) == pytest.approx(1.0)


def test_final_point_distances():
    gt = np.zeros((1, 4, 2))
    pred = np.zeros((1, 2, 4, 2))
    pred[0, 0, -1] = [2.0, 0.0]
    pred[0, 1, -1] = [0.0, 5.0]
    assert mfde([_rec(pred, gt)], 2) == pytest.approx(2.0)


def test_miss_rate_examples():
    gt = np.zeros((4, 3, 2))
    near = _offsets(gt, [0.5, 1.9, 2.0])
    assert miss_rate([_rec(near, gt)], 3) == 0.0
    far = _offsets(gt, [2.5, 2.5, 2.5])
    assert miss_rate([_rec(far, gt)], 3) == 1.0
    gt10 = np.zeros((10, 3, 2))
    pred = _offsets(gt10, [1.0, 2.5])
    pred[:3, 0] += [3.0, 0.0]  # three actors miss with both modes
    assert miss_rate([_rec(pred, gt10)], 2) == pytest.approx(0.3)


def test_threshold_is_strict():
    gt = np.zeros((1, 3, 2))
    assert miss_rate([_rec(_offsets(gt, [2.0]), gt)], 1) == 0.0
    assert miss_rate([_rec(_offsets(gt, [2.0 + 1e-9]), gt)], 1) == 1.0


def test_shape_checks():
    with pytest.raises(ValueError):
        made([_rec(np.zeros((2, 6, 5, 2)), np.zeros((3, 5, 2)))], 6)
    with pytest.raises(ValueError):
        made([_rec(np.zeros((2, 6, 5, 2)), np.zeros((2, 5, 2)))], 7)


# --- throughput -------------------------------------------------------------------

def test_fps_100_steps_in_10_seconds():
    log = TimingLog()
    for s in range(100):
        log.add(s, "predict", 0.1)
    assert fps(log) == pytest.approx(10.0)


def test_fps_counts_adapt_time_and_flag():
    log = TimingLog()
    for s in range(10):
        log.add(s, "adapt", 0.3)
        log.add(s, "predict", 0.2)
    assert fps(log) == pytest.approx(2.0)
    assert fps(log, include_adapt=False) == pytest.approx(5.0)
    with pytest.raises(ValueError):
        fps(TimingLog())
    with pytest.raises(ValueError):
        log.add(0, "train", 1.0)


def test_timing_csv_round_trip():
    log = TimingLog()
    log.add(0, "adapt", 0.0125)
    log.add(0, "predict", 0.0025)
    text = log.to_csv()
    assert text.splitlines()[0] == "step,phase,seconds"
    back = TimingLog.from_csv(text)
    assert [(s, p) for s, p, _ in back.rows] == [(0, "adapt"), (0, "predict")]
    assert back.rows[0][2] == pytest.approx(0.0125)


# --- reports and dumps ----------------------------------------------------------

def test_report_fields_and_csv():
    recs = random_records(3)
    log = TimingLog([(0, "predict", 0.5)])
    rep = MetricsReport.from_records(recs, log)
    assert rep.made_6 <= rep.made_1 and rep.mfde_6 <= rep.mfde_1
    assert rep.steps_evaluated == len(recs)
    assert set(rep.per_scene) == {r.scene_id for r in recs}
    lines = rep.to_csv().splitlines()
    assert lines[0] == "metric,k,value"
    assert "made,6," + str(rep.made_6) in lines
    assert "mADE" in rep.table()


def test_prediction_dump_round_trip():
    recs = random_records(5)
    buf = io.StringIO()
    write_prediction_dump(recs, buf)
    first = buf.getvalue().splitlines()[0].split()
    assert first[0] == "P" and len(first) == 8
    back = read_prediction_dump(io.StringIO(buf.getvalue()))
    for r in recs:
        for n, aid in enumerate(r.actor_ids):
            assert np.allclose(back[(r.scene_id, r.t)][int(aid)], r.pred[n], atol=5e-7)
