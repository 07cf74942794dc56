import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anytimenet.arch import NestedNetwork, StagePlan
from anytimenet.data import Dataset, gen_spiral
from anytimenet.errors import InputError
from anytimenet.runtime import (CostModel, Independent, StagedPredictor, curves_csv, default_deadlines,
                                oracle_curve, simulate_nested, simulate_oracle_all,
                                simulate_oracle_each, sweep, tradeoff_curve)
from anytimenet.train import evaluate


@pytest.fixture(scope="module")
def net_and_data():
    net = NestedNetwork(StagePlan(3, "width", 3, 1), seed=2)
    return net, gen_spiral(5, 400, split="val")


def test_cost_model_strict():
    with pytest.raises(InputError):
        CostModel((1, 1, 2))
    cm = CostModel((10, 20, 40))
    assert [cm.last_feasible(d) for d in (9, 10, 19, 20, 39, 40, 1e9)] == [-1, 0, 0, 1, 1, 2, 2]


def test_full_budget_equals_last_stage(net_and_data):
    net, ds = net_and_data
    errs = evaluate(net, ds)
    assert simulate_nested(net, ds, net.flops(3)) == errs[-1]
    assert simulate_nested(net, ds, math.inf) == errs[-1]


def test_boundary_inclusive(net_and_data):
    net, ds = net_and_data
    errs = evaluate(net, ds)
    assert simulate_nested(net, ds, net.flops(2)) == errs[1]
    assert simulate_nested(net, ds, net.flops(2) - 1) == errs[0]
    mid = (net.flops(1) + net.flops(2)) / 2
    assert simulate_nested(net, ds, mid) == errs[0]


def test_below_first_stage_is_chance():
    rng = np.random.default_rng(0)
    n, K = 5000, 10
    ds = Dataset(np.zeros((n, 2)), rng.integers(0, K, n), K, "val")
    model = StagedPredictor(np.zeros((2, n), dtype=int), CostModel((5, 9)))
    err = simulate_nested(model, ds, 4, np.random.default_rng(1))
    assert abs(err - 0.9) <= 3 * math.sqrt(0.9 * 0.1 / n)


def test_negative_deadline():
    with pytest.raises(InputError):
        simulate_nested(StagedPredictor(np.zeros((1, 1), int), CostModel((1,))),
                        Dataset(np.zeros((1, 1)), [0], 2), -1)


def _ds(labels, K=3):
    labels = np.asarray(labels)
    return Dataset(np.zeros((labels.size, 1)), labels, K, "val")


def test_oracle_all_cases():
    ds = _ds([0, 1, 2, 0])
    a = Independent(10, np.array([0, 1, 0, 0]), 0.25)
    b = Independent(20, np.array([0, 1, 2, 1]), 0.20)
    assert simulate_oracle_all([a, b], ds, 100) == 0.25     # b is better by val error
    assert simulate_oracle_all([a, b], ds, 15) == 0.25      # only a feasible
    g = np.array([1, 1, 1, 1])
    assert simulate_oracle_all([a, b], ds, 5, guesses=g) == 0.75


def test_oracle_each_cases():
    ds = _ds([0, 1, 2, 0])
    a = Independent(10, np.array([0, 1, 0, 1]), 0.5)
    b = Independent(20, np.array([1, 0, 2, 0]), 0.5)
    assert simulate_oracle_each([a], ds, 10) == simulate_oracle_all([a], ds, 10)
    # mistakes are disjoint: every input is right for at least one network
    assert simulate_oracle_each([a, b], ds, 20) == 0.0
    c = Independent(20, np.array([1, 1, 1, 0]), 0.5)
    missed = np.mean((a.predictions != ds.labels) & (c.predictions != ds.labels))
    assert simulate_oracle_each([a, c], ds, 20) == missed


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 4), st.integers(2, 5))
def test_oracle_each_dominates(seed, m, K):
    rng = np.random.default_rng(seed)
    n = 60
    ds = _ds(rng.integers(0, K, n), K)
    inds = [Independent(float(c), rng.integers(0, K, n), float(rng.random())) for c in range(1, m + 1)]
    for d in (0.5, 1, 2.5, m, math.inf):
        g = rng.integers(0, K, n)
        assert simulate_oracle_each(inds, ds, d, guesses=g) <= simulate_oracle_all(inds, ds, d, guesses=g)


def test_default_sweep_shape(net_and_data):
    net, ds = net_and_data
    d = default_deadlines(net.flops(3))
    assert len(d) == 8 and d[0] == 0.5 * net.flops(3) and d[6] == net.flops(3) and math.isinf(d[7])
    assert d == sorted(d)
    rep = sweep(net, [], ds)
    assert len(rep.rows) == 8 and rep.schemes() == ["nested"]


def test_sweep_all_schemes(net_and_data):
    net, ds = net_and_data
    inds = [Independent.from_network(NestedNetwork(StagePlan(1, "width", w, 1), seed=w), ds)
            for w in (3, 6, 12)]
    rep = sweep(net, inds, ds, baseline=NestedNetwork(StagePlan(3, "eann", 3, 1), seed=0))
    assert len(rep.rows) == 4 * 8
    assert rep.get("nested", math.inf) == evaluate(net, ds)[-1]
    assert rep.get("oracle-all", math.inf) == min(i.val_error for i in inds)
    for d in rep.deadlines():
        assert rep.get("oracle-each", d) <= rep.get("oracle-all", d)


def test_sweep_monotone_when_stages_monotone():
    rng = np.random.default_rng(3)
    n = 300
    labels = rng.integers(0, 3, n)
    preds = np.stack([np.where(rng.random(n) < p, labels, (labels + 1) % 3) for p in (0.5, 0.7, 0.9)])
    # force nested correctness sets so stage errors are non-increasing
    preds[1][preds[0] == labels] = labels[preds[0] == labels]
    preds[2][preds[1] == labels] = labels[preds[1] == labels]
    model = StagedPredictor(preds, CostModel((10, 20, 40)))
    ds = _ds(labels)
    errs = model.stage_errors(labels)
    assert np.all(np.diff(errs) <= 0)
    rep = sweep(model, [], ds, deadlines=[10, 15, 20, 30, 40, math.inf])
    e = rep.errors("nested")
    assert all(b <= a for a, b in zip(e, e[1:]))


def test_sweep_reproducible(net_and_data):
    net, ds = net_and_data
    a = sweep(net, [], ds, deadlines=[1, 2, math.inf], seed=4)
    b = sweep(net, [], ds, deadlines=[1, 2, math.inf], seed=4)
    assert a.to_csv() == b.to_csv() and a.to_json() == b.to_json()


def test_report_serialization(net_and_data):
    net, ds = net_and_data
    rep = sweep(net, [], ds)
    lines = rep.to_csv().splitlines()
    assert lines[0] == "scheme,deadline_macs,error"
    assert lines[-1].split(",")[1] == "inf"
    assert '"deadline_macs": null' in rep.to_json()


def test_tradeoff_curve(net_and_data):
    net, ds = net_and_data
    pts = tradeoff_curve(net, ds)
    assert len(pts) == 3
    assert all(b[0] > a[0] for a, b in zip(pts, pts[1:]))
    assert pts[-1][1] == evaluate(net, ds)[-1]
    text = curves_csv({"nested": pts, "oracle": oracle_curve([Independent(5, np.zeros(1), 0.3)])})
    assert text.splitlines()[0] == "scheme,stage,macs,error"
    assert len(text.splitlines()) == 5
