import math
import struct

import numpy as np
import pytest

from anytimenet.arch import NestedNetwork, StagePlan, extract_standalone
from anytimenet.checkpoint import load_checkpoint, save_checkpoint
from anytimenet.data import Dataset, gen_spiral, load_csv, load_idx, read_idx
from anytimenet.errors import CheckpointError, ConfigError, DatasetError, FormatError
from anytimenet.optim import OptimizerConfig
from anytimenet.arch import forward_stage
from anytimenet.errors import NumericError
from anytimenet.train import (HISTORY_COLUMNS, DataConfig, LRSchedule, TrainConfig, evaluate, history_csv,
                              load_data, lr_at, params_hash, train, train_seed)


def small_config(strategy="sgd", n=2, epochs=4, seeds=(0,), **kw):
    return TrainConfig(StagePlan(n, "width", 3, 1), OptimizerConfig(strategy, **kw),
                       DataConfig(n_train=240, n_val=120), epochs=epochs, batch_size=32, seeds=seeds)


# ---------------------------------------------------------------- data

def test_spiral_deterministic():
    a, b = gen_spiral(3, 50), gen_spiral(3, 50)
    assert np.array_equal(a.inputs, b.inputs) and np.array_equal(a.labels, b.labels)


def test_spiral_partition():
    ds = gen_spiral(0, 4, num_classes=2)
    assert sorted(ds.labels.tolist()) == [0, 0, 1, 1]


def test_spiral_noise_free_arms_disjoint():
    ds = gen_spiral(0, 600, num_classes=3, noise=0.0)
    # nearest neighbour from another arm is never closer than from the same arm
    # at the sampled density, so a lookup classifier is perfect on train
    d = np.linalg.norm(ds.inputs[:, None] - ds.inputs[None], axis=2)
    np.fill_diagonal(d, np.inf)
    assert np.mean(ds.labels[np.argmin(d, axis=1)] != ds.labels) <= 0.01


def test_spiral_rejects_one_arm():
    with pytest.raises(DatasetError):
        gen_spiral(0, 10, num_classes=1)


def test_csv_fixture(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("a,b,label\n0,10,0\n5,20,1\n10,30,2\n")
    ds = load_csv(p)
    assert len(ds) == 3 and ds.num_classes == 3
    assert np.array_equal(ds.inputs, [[0, 0], [0.5, 0.5], [1, 1]])
    assert ds.labels.tolist() == [0, 1, 2]


def test_csv_empty(tmp_path):
    p = tmp_path / "e.csv"
    p.write_text("")
    with pytest.raises(DatasetError, match="empty"):
        load_csv(p)


def test_csv_bad_row_reports_line(tmp_path):
    p = tmp_path / "b.csv"
    p.write_text("1,2,0\n3,x,1\n")
    with pytest.raises(DatasetError, match=":2:"):
        load_csv(p)


def test_csv_label_range(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("1,2,0\n3,4,5\n")
    with pytest.raises(DatasetError, match=":2:"):
        load_csv(p, num_classes=3)


def _write_idx(path, arr, code=0x08):
    arr = np.asarray(arr)
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, code, arr.ndim]))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(arr.astype(">u1").tobytes())


def test_idx_roundtrip(tmp_path):
    imgs = np.arange(2 * 2 * 3, dtype=np.uint8).reshape(2, 2, 3)
    _write_idx(tmp_path / "i", imgs)
    _write_idx(tmp_path / "l", np.array([1, 0]))
    assert np.array_equal(read_idx(tmp_path / "i"), imgs)
    ds = load_idx(tmp_path / "i", tmp_path / "l", num_classes=2)
    assert ds.inputs.shape == (2, 6) and ds.inputs.max() <= 1.0


def test_idx_bad_magic(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(b"\x01\x02\x08\x01\x00\x00\x00\x01\x05")
    with pytest.raises(FormatError):
        read_idx(p)


def test_batches_cover_every_example():
    ds = gen_spiral(0, 50)
    seen = np.concatenate([y for _, y in ds.batches(8, np.random.default_rng(0))])
    assert sorted(seen.tolist()) == sorted(ds.labels.tolist())


# ---------------------------------------------------------------- schedule

def test_lr_endpoints_and_midpoint():
    s = LRSchedule(0.1, 0.0008, 101)
    assert lr_at(s, 0) == 0.1
    assert lr_at(s, 100) == pytest.approx(0.0008, rel=1e-14)
    assert lr_at(s, 50) == pytest.approx(math.sqrt(0.1 * 0.0008), rel=1e-14)


def test_lr_validation():
    with pytest.raises(ConfigError):
        LRSchedule(0.001, 0.1, 10)
    with pytest.raises(ConfigError):
        lr_at(LRSchedule(0.1, 0.01, 10), 10)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        small_config(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(StagePlan(2, "width", 2, 1), lr_start=0.001, lr_end=0.01)


# ---------------------------------------------------------------- evaluate

def test_evaluate_chance_level():
    net = NestedNetwork(StagePlan(1, "width", 2, 1, num_classes=10, input_dim=2), seed=0)
    rng = np.random.default_rng(1)
    ds = Dataset(rng.normal(size=(4000, 2)), rng.integers(0, 10, 4000), 10, "val")
    err = evaluate(net, ds)[0]
    assert abs(err - 0.9) <= 3 * math.sqrt(0.9 * 0.1 / 4000) + 0.01


def test_evaluate_perfect_when_labels_are_predictions():
    net = NestedNetwork(StagePlan(2, "width", 2, 1), seed=0)
    x = np.random.default_rng(0).normal(size=(30, 2))
    for i in (1, 2):
        ds = Dataset(x, np.argmax(forward_stage(net, i, x), axis=1), 3, "val")
        assert evaluate(net, ds)[i - 1] == 0.0


def test_evaluate_matches_standalone_and_is_order_invariant():
    net = NestedNetwork(StagePlan(3, "width", 2, 1), seed=4)
    ds = gen_spiral(1, 200)
    errs = evaluate(net, ds)
    for i in (1, 2, 3):
        pred = np.argmax(extract_standalone(net, i).forward(ds.inputs), axis=1)
        assert errs[i - 1] == np.mean(pred != ds.labels)
    perm = np.random.default_rng(0).permutation(len(ds))
    assert np.array_equal(evaluate(net, ds.subset(perm)), errs)


# ---------------------------------------------------------------- train

def test_n1_sgd_equals_osgd():
    runs = []
    for strat in ("sgd", "osgd"):
        cfg = TrainConfig(StagePlan(1, "width", 3, 1), OptimizerConfig(strat),
                          DataConfig(n_train=240, n_val=120), epochs=3, batch_size=32)
        tr, va = load_data(cfg.data)
        runs.append(train_seed(cfg, 0, tr, va))
    assert runs[0].records == runs[1].records
    assert np.array_equal(runs[0].net.params, runs[1].net.params)


def test_summary_std_over_three_seeds():
    h = train(small_config(seeds=(0, 1, 2), epochs=2))
    s = h.summary()
    assert len(s["final_val_error_std"]) == 2
    expect = np.std(h.final_matrix(), axis=0, ddof=1)
    assert np.allclose(s["final_val_error_std"], expect)


def test_single_seed_std_absent():
    assert train(small_config(epochs=1)).summary()["final_val_error_std"] is None


def test_history_one_record_per_epoch_stage():
    h = train(small_config(n=3, epochs=3))
    recs = h.runs[0].records
    keys = {(r["epoch"], r["stage"], r["split"]) for r in recs}
    assert len(keys) == len(recs) == 3 * 3 * 2
    header = history_csv(recs).splitlines()[0]
    assert tuple(header.split(",")) == HISTORY_COLUMNS


@pytest.mark.parametrize("strategy", ["sgd", "normsgd", "osgd", "osgd-norm", "greedy"])
def test_every_strategy_beats_chance(strategy):
    cfg = TrainConfig(StagePlan(4, "width", 4, 2), OptimizerConfig(strategy),
                      DataConfig(n_train=600, n_val=300), epochs=30, batch_size=32)
    h = train(cfg)
    assert h.final_matrix()[0, -1] < 1 - 1 / 3


def test_greedy_freezes_earlier_stages():
    cfg = small_config("greedy", n=3, epochs=6)
    tr, va = load_data(cfg.data)
    run = train_seed(cfg, 0, tr, va)
    net = run.net
    # stage-i parameters hashed at the end of phase i are still intact at the end
    for i, h in enumerate(run.stage_hashes[:-1], start=1):
        assert params_hash(net.params[net.stage_mask(i)]) == h


def test_train_reproducible_bytes(tmp_path):
    for d in ("a", "b"):
        train(small_config("osgd", seeds=(0, 1), epochs=2), tmp_path / d)
    for rel in ("config.json", "summary.json", "seed_0/history.csv", "seed_1/checkpoint.json"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_numeric_abort_flushes_partial(tmp_path):
    cfg = small_config("sgd", epochs=3)
    cfg.lr_start = 1e300
    cfg.lr_end = 1e299
    with pytest.raises(NumericError):
        train(cfg, tmp_path)
    assert (tmp_path / "seed_0" / "history.csv").exists()


# ---------------------------------------------------------------- checkpoint

def test_checkpoint_roundtrip(tmp_path):
    net = NestedNetwork(StagePlan(3, "alternating", 2, 1), seed=5)
    net.params += 1e-17 * np.arange(net.num_params)
    rng = np.random.default_rng(3)
    save_checkpoint(tmp_path / "c.json", net, rng.bit_generator.state, {"steps": 7}, {"k": 1})
    ck = load_checkpoint(tmp_path / "c.json")
    assert ck.net.plan == net.plan
    assert np.array_equal(ck.net.params, net.params)
    assert ck.optimizer_state == {"steps": 7} and ck.extra == {"k": 1}
    rng2 = np.random.default_rng()
    rng2.bit_generator.state = ck.rng_state
    assert rng2.integers(1 << 60) == rng.integers(1 << 60)


def test_checkpoint_errors(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.json")
    (tmp_path / "x.json").write_text("{not json")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "x.json")
    (tmp_path / "y.json").write_text('{"format": "other"}')
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "y.json")
