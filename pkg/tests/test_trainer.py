import json
import math
from concurrent.futures import ThreadPoolExecutor
from fractions import Fraction

import numpy as np
import pytest

from crhash.assignment import CostAccumulator, initial_assignment
from crhash.data import Dataset, SynthSpec, generate_synthetic
from crhash.errors import ConfigError, EmptyClassError, InfeasibleAssignmentError
from crhash.hamming import BinaryCode, HeadLayout, pack_signs, sample_codebook_unique
from crhash.model import checkpoint_bytes
from crhash.trainer import (
    TrainConfig,
    UpdateSchedule,
    accumulate_costs,
    initialize,
    should_update,
    spawn_streams,
    train,
    write_run,
)


@pytest.fixture(scope="module")
def small_data():
    return generate_synthetic(SynthSpec(C=8, G=2, D=12, per_class=20, seed=1)).dataset


def quick(**kw):
    base = dict(K=16, M=16, d=8, epochs=6, batch_size=32, lr=3e-3, seed=0)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# config and schedule


def test_should_update_default_schedule():
    s = UpdateSchedule()
    assert should_update(7, s)
    assert all(should_update(e, s) for e in range(1, 21))
    assert not should_update(23, s) and should_update(25, s)
    assert [e for e in range(21, 61) if should_update(e, s)] == [25, 30, 35, 40, 45, 50, 55, 60]
    assert not should_update(0, s)


def test_should_update_never_and_every():
    assert not any(should_update(e, UpdateSchedule.never()) for e in range(1, 200))
    assert [e for e in range(1, 31) if should_update(e, UpdateSchedule.every(10))] == [10, 20, 30]


def test_schedule_json_round_trip():
    s = UpdateSchedule(10, 2, "inf")
    assert s.later_interval == math.inf
    assert UpdateSchedule(**s.to_dict()) == s
    with pytest.raises(ConfigError):
        UpdateSchedule(20, 0, 5)


def test_config_json_round_trip():
    cfg = quick(update_schedule=UpdateSchedule.every(10), lam=0.0, solver="hungarian")
    data = json.loads(json.dumps(cfg.to_dict()))
    assert data["lambda"] == 0.0
    assert TrainConfig.from_dict(data) == cfg


def test_config_validation():
    for kw in ({"mode": "CRH-X"}, {"solver": "auction"}, {"epochs": -1}, {"s": -1.0},
               {"codebook_sampling": "sobol"}, {"cost_source": "cached"}):
        with pytest.raises(ConfigError):
            quick(**kw)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"K": 16, "unknown": 1})


def test_layout_resolution():
    assert TrainConfig(K=16, M=32, d=8).layout(32) == HeadLayout(2, 8)
    assert TrainConfig(K=16, M=32, d=8, mode="CRH-M").layout(32) == HeadLayout(1, 16)
    assert TrainConfig(K=16, M=32, d=8, mode="CRH-U").layout(32) == HeadLayout(2, 8)
    # default d: smallest power of two covering ceil(log2 M)
    assert TrainConfig(K=64).layout(32) == HeadLayout(8, 8)
    assert TrainConfig(K=16).layout(392) == HeadLayout(1, 16)
    with pytest.raises(ConfigError):
        TrainConfig(K=16, H=4, strict_heads=True).layout(32)


def test_codebook_size_defaults_and_feasibility():
    assert TrainConfig().codebook_size(10) == 20
    with pytest.raises(InfeasibleAssignmentError):
        TrainConfig(M=5).codebook_size(10)


# ---------------------------------------------------------------------------
# initialization


def test_initialize_deterministic(small_data):
    a = initialize(quick(), small_data)
    b = initialize(quick(), small_data)
    assert a[0] == b[0]
    assert a[1].same_maps(b[1])
    assert checkpoint_bytes(a[2]) == checkpoint_bytes(b[2])


def test_initialize_m_equals_c_is_permutation(small_data):
    _, assignment, _ = initialize(quick(M=8, d=None, H=1), small_data)
    assert sorted(assignment.per_head[0].tolist()) == list(range(8))


def test_initialize_rejects_small_codebook_and_empty_class(small_data):
    with pytest.raises(InfeasibleAssignmentError):
        initialize(quick(M=4), small_data)
    y = np.zeros((3, 3), bool)
    y[:, 0] = True
    with pytest.raises(EmptyClassError):
        initialize(quick(M=4), Dataset(np.ones((3, 2)), y))


def test_initial_columns_uniform_monte_carlo():
    cb = sample_codebook_unique(8, 16, seed=0)
    trials = 10_000
    counts = np.zeros(16)
    for child in np.random.SeedSequence(99).spawn(trials):
        counts[initial_assignment(cb, HeadLayout(1, 8), 8, np.random.default_rng(child)).per_head[0]] += 1
    freq = counts / trials
    sigma = math.sqrt(0.25 / trials)
    assert np.abs(freq - 0.5).max() < 3.5 * sigma


def test_streams_are_independent():
    a = spawn_streams(3)
    b = spawn_streams(3)
    assert a["batch_order"].integers(0, 1 << 30) == b["batch_order"].integers(0, 1 << 30)
    assert a["codebook"].integers(0, 1 << 30) != a["init"].integers(0, 1 << 30)


# ---------------------------------------------------------------------------
# training


def test_train_is_deterministic(small_data):
    a = train(quick(), small_data)
    b = train(quick(), small_data)
    assert checkpoint_bytes(a.model) == checkpoint_bytes(b.model)
    assert a.assignment.same_maps(b.assignment)
    assert a.history.to_jsonl() == b.history.to_jsonl()


def test_threads_do_not_change_results(small_data):
    a = train(quick(K=32, d=8), small_data)
    with ThreadPoolExecutor(4) as ex:
        b = train(quick(K=32, d=8), small_data, executor=ex)
    assert checkpoint_bytes(a.model) == checkpoint_bytes(b.model)
    assert a.assignment.same_maps(b.assignment)


def test_crh_u_keeps_initial_assignment(small_data):
    res = train(quick(mode="CRH-U"), small_data)
    assert res.assignment.same_maps(res.initial)
    assert not any(r.reassigned for r in res.history)
    assert all(r.change_fraction is None for r in res.history)


def test_infinite_interval_equals_crh_u(small_data):
    a = train(quick(update_schedule=UpdateSchedule.never()), small_data)
    b = train(quick(mode="CRH-U"), small_data)
    assert checkpoint_bytes(a.model) == checkpoint_bytes(b.model)
    assert a.assignment.same_maps(b.assignment)


def test_single_head_crh_equals_crh_m(small_data):
    a = train(quick(H=1, d=None), small_data)
    b = train(quick(mode="CRH-M"), small_data)
    assert checkpoint_bytes(a.model) == checkpoint_bytes(b.model)
    assert a.assignment.to_json_dict() == b.assignment.to_json_dict()


def test_crh_m_without_updates_equals_crh_u(small_data):
    a = train(quick(mode="CRH-M", update_schedule=UpdateSchedule.never()), small_data)
    b = train(quick(mode="CRH-U"), small_data)
    assert checkpoint_bytes(a.model) == checkpoint_bytes(b.model)
    np.testing.assert_array_equal(a.assignment.center_signs(), b.assignment.center_signs())


def test_epochs_zero_returns_initial_state(small_data):
    res = train(quick(epochs=0), small_data)
    _, assignment, model = initialize(quick(epochs=0), small_data)
    assert len(res.history) == 0
    assert res.assignment.same_maps(assignment)
    assert checkpoint_bytes(res.model) == checkpoint_bytes(model)


def test_history_records(small_data):
    res = train(quick(epochs=8, update_schedule=UpdateSchedule(4, 2, 3)), small_data)
    assert [r.epoch for r in res.history] == list(range(1, 9))
    assert [r.epoch for r in res.history if r.reassigned] == [2, 4, 7]
    for r in res.history:
        assert (r.change_fraction is not None) == r.reassigned
        if r.reassigned:
            assert 0 <= r.change_fraction <= 1
            assert len(r.head_costs) == 2
    assert res.history.change_fractions()[0][0] == 2
    lines = res.history.to_jsonl().splitlines()
    assert len(lines) == 8 and json.loads(lines[0])["epoch"] == 1


def test_reassignment_keeps_injectivity_and_membership(small_data):
    res = train(quick(epochs=5, M=10, K=32, d=None, H=2), small_data)
    layout = res.assignment.layout
    for h, cols in enumerate(res.assignment.per_head):
        assert len(set(cols.tolist())) == 8 and cols.max() < 10
        assert np.unique(res.codebook.head_words(layout, h)[cols], axis=0).shape[0] == 8


def test_fixed_point_dataset_reports_zero_change():
    # features built so the frozen initial model maps every sample to its class center
    n_per, c, d, k = 5, 6, 24, 16
    cfg = TrainConfig(K=k, M=12, H=1, epochs=4, lr=0.0, batch_size=8, seed=3, solver="greedy",
                      early_stop=False)
    dummy_y = np.eye(c, dtype=bool)[np.repeat(np.arange(c), n_per)]
    dummy = Dataset(np.ones((c * n_per, d), np.float32), dummy_y)
    _, assignment, model = initialize(cfg, dummy)
    target = np.repeat(assignment.center_signs(), n_per, axis=0) * 2.0 - model.b
    x, *_ = np.linalg.lstsq(model.W.T, target.T, rcond=None)
    ds = Dataset(x.T.astype(np.float32), dummy_y)
    res = train(cfg, ds)
    assert [r.change_fraction for r in res.history] == [0.0] * 4
    assert all(cost == 0 for r in res.history for cost in r.head_costs)
    assert res.assignment.same_maps(res.initial)


def test_early_stop_on_converged_run():
    n_per, c, d, k = 5, 6, 24, 16
    cfg = TrainConfig(K=k, M=12, H=1, epochs=10, lr=0.0, batch_size=8, seed=3)
    y = np.eye(c, dtype=bool)[np.repeat(np.arange(c), n_per)]
    _, assignment, model = initialize(cfg, Dataset(np.ones((c * n_per, d), np.float32), y))
    target = np.repeat(assignment.center_signs(), n_per, axis=0) * 2.0 - model.b
    x, *_ = np.linalg.lstsq(model.W.T, target.T, rcond=None)
    res = train(cfg, Dataset(x.T.astype(np.float32), y))
    assert res.stopped_early and len(res.history) == 2


def test_incremental_equals_exact_when_frozen(small_data):
    a = train(quick(lr=0.0, cost_source="incremental", early_stop=False), small_data)
    b = train(quick(lr=0.0, early_stop=False), small_data)
    assert a.history.to_jsonl() == b.history.to_jsonl()
    assert a.assignment.same_maps(b.assignment)


def test_accumulate_costs_two_batch_worked_example():
    cb = sample_codebook_unique(2, 4, seed=0)
    layout = HeadLayout(1, 2)
    codes = [BinaryCode.from_bitstring(s) for s in ("11", "00", "10", "11")]
    labels = np.array([[1, 0], [1, 1], [0, 1], [1, 0]], bool)
    words = np.stack([c.words for c in codes])
    mats = accumulate_costs([(words[:2], labels[:2]), (words[2:], labels[2:])], cb, layout, 2)
    cand = [cb[int(j)] for j in mats[0].columns]
    for j, z in enumerate(cand):
        d = [4 * sum(a != b for a, b in zip(c.bitstring(), z.bitstring())) for c in codes]
        # class 0: samples 0 (w 1), 1 (w 1/2), 3 (w 1); class 1: samples 1 (w 1/2), 2 (w 1)
        assert mats[0].entry(0, j) == (d[0] + Fraction(d[1], 2) + d[3]) / Fraction(5, 2)
        assert mats[0].entry(1, j) == (Fraction(d[1], 2) + d[2]) / Fraction(3, 2)


def test_empty_accumulator_errors():
    acc = CostAccumulator(3, pack_signs(np.ones((4, 2), int)), 2)
    with pytest.raises(EmptyClassError):
        acc.matrix()
    acc.add(pack_signs(np.ones((1, 2), int)), np.array([[1, 0, 0]], bool))
    with pytest.raises(EmptyClassError, match="class 1"):
        acc.matrix()


def test_infeasible_head_aborts_with_epoch(small_data):
    # K=6, H=3: 2-bit heads hold at most 4 distinct sub-codes for 8 classes
    with pytest.raises(InfeasibleAssignmentError, match="epoch 1"):
        train(quick(K=6, M=40, H=3, d=None, epochs=2), small_data)


# ---------------------------------------------------------------------------
# run directories


def test_write_run_manifest(tmp_path, small_data):
    res = train(quick(mode="CRH-U", epochs=2), small_data)
    manifest = write_run(res, tmp_path / "run")
    names = {"config.json", "assignment.json", "initial_assignment.json", "model.ckpt",
             "history.jsonl", "codebook.crhc"}
    assert set(manifest["files"]) == names
    assert (tmp_path / "run" / "manifest.json").exists()
    assert json.loads((tmp_path / "run" / "assignment.json").read_text()) == manifest["initial_assignment"]
    assert manifest["seed"] == 0 and manifest["epochs_run"] == 2
