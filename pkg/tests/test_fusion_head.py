import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from maple import tensor as T
from maple.fusion_head import (GateNet, Head, LevelTargets, adaptive_level_loss, fuse, gate, init_gate_params,
                               init_head_params, per_level_argmax, predict, replicate, total_loss)
from maple.hierarchy import level_partition, load_fixture

from oracles import level_loss_ref, predict_ref


def gate_net(d, seed=0, zero=False):
    raw = init_gate_params(d, np.random.default_rng(seed), np.float64)
    if zero:
        raw["gate.weight"][:] = 0
    return GateNet.from_params({k: T.Tensor(v, requires_grad=True) for k, v in raw.items()})


def test_gate_range_and_zero_weights(rng):
    z, E = T.Tensor(rng.standard_normal((2, 4))), T.Tensor(rng.standard_normal((2, 5, 4)))
    g = gate(z, E, gate_net(4)).data
    assert g.shape == (2, 5, 4) and np.all((g > 0) & (g < 1))
    assert np.all(gate(z, E, gate_net(4, zero=True)).data == 0.5)


def test_gates_are_node_specific(rng):
    z, E = T.Tensor(rng.standard_normal((1, 4))), T.Tensor(rng.standard_normal((1, 6, 4)))
    g = gate(z, E, gate_net(4)).data[0]
    assert len({tuple(row) for row in g}) == 6


def test_fuse_boundaries(rng):
    z, E = T.Tensor(rng.standard_normal((3, 4))), T.Tensor(rng.standard_normal((3, 5, 4)))
    assert np.array_equal(fuse(z, E, T.Tensor(np.ones((3, 5, 4)))).data, E.data)
    assert np.array_equal(fuse(z, E, T.Tensor(np.zeros((3, 5, 4)))).data, replicate(z, 5).data)
    with pytest.raises(ValueError):
        fuse(z, E, T.Tensor(np.ones((3, 4, 4))))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_fuse_convex(seed):
    r = np.random.default_rng(seed)
    z, E = r.standard_normal((2, 4)), r.standard_normal((2, 3, 4))
    out = fuse(T.Tensor(z), T.Tensor(E), T.Tensor(r.random((2, 3, 4)))).data
    lo = np.minimum(E, z[:, None, :]) - 1e-7
    hi = np.maximum(E, z[:, None, :]) + 1e-7
    assert np.all((out >= lo) & (out <= hi))


def test_predict_oracle_and_shapes(rng):
    H, z = rng.standard_normal((3, 35, 4)), rng.standard_normal((3, 4))
    raw = init_head_params(8, 35, rng, np.float64)
    raw["head.bias"] = rng.standard_normal(35)
    head = Head.from_params({k: T.Tensor(v) for k, v in raw.items()})
    out = predict(T.Tensor(H), T.Tensor(z), head).data
    assert out.shape == (3, 35)
    assert np.max(np.abs(out - predict_ref(H, z, raw["head.weight"], raw["head.bias"]))) < 1e-6
    head.weight.data[:] = 0
    assert np.array_equal(predict(T.Tensor(H), T.Tensor(z), head).data, np.tile(raw["head.bias"], (3, 1)))


def closed(logits, y):
    return float(adaptive_level_loss(T.Tensor(np.array(logits, float)), np.array(y)).data)


def test_loss_closed_forms():
    assert abs(closed([[0, 0, 0]], [[0, 1, 0]]) - math.log(3)) < 1e-12
    assert abs(closed([[0, 0, 0]], [[1, 1, 0]]) - math.log(2)) < 1e-12
    assert abs(closed([[0, 0]], [[0, 0]]) - math.log(2)) < 1e-12
    # mixed batch: one CE row, one BCE row
    assert abs(closed([[0, 0, 0], [0, 0, 0]], [[0, 1, 0], [1, 1, 0]]) - (math.log(3) + math.log(2)) / 2) < 1e-12
    with pytest.raises(ValueError):
        closed([[0, 0]], [[0, 1, 0]])


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.integers(0, 2**31))
def test_loss_matches_row_oracle(batch, width, seed):
    r = np.random.default_rng(seed)
    logits = 3 * r.standard_normal((batch, width))
    y = (r.random((batch, width)) < 0.4).astype(int)
    assert abs(closed(logits, y) - level_loss_ref(logits.tolist(), y.tolist())) < 1e-9


def test_total_loss_is_level_mean(rng):
    h = load_fixture("aid")
    part = level_partition(h)
    logits = rng.standard_normal((4, len(h)))
    y = (rng.random((4, len(h))) < 0.3).astype(int)
    joint = float(total_loss(T.Tensor(logits), y, part).data)
    per_level = [level_loss_ref(logits[:, ids].tolist(), y[:, ids].tolist()) for ids in part[0]]
    assert abs(joint - sum(per_level) / len(per_level)) < 1e-12
    one = ([list(range(len(h)))], h.leaf_ids)
    assert abs(float(total_loss(T.Tensor(logits), y, one).data) - level_loss_ref(logits.tolist(), y.tolist())) < 1e-12
    with pytest.raises(ValueError):
        total_loss(T.Tensor(logits[:, :5]), y[:, :5], part)


def test_level_targets_partition(rng):
    h = load_fixture("dfc15")
    y = (rng.random((3, len(h))) < 0.5).astype(int)
    lt = LevelTargets.split(y, level_partition(h))
    assert sum(t.shape[1] for t in lt.levels) == len(h)
    assert np.array_equal(np.concatenate(lt.levels, axis=1), y)
    assert lt.leaves.shape == (3, 8)


def test_per_level_argmax():
    logits = np.array([[0.1, 0.9, 0.3, 0.2, 0.5]])
    got = per_level_argmax(logits, [[0, 1], [2, 3, 4]])
    assert [int(a[0]) for a in got] == [1, 4]


def test_loss_can_be_driven_to_zero():
    y = np.array([[0, 1, 0], [1, 1, 0]])
    x = T.Tensor(np.zeros((2, 3)), requires_grad=True, dtype=np.float64)
    for _ in range(2000):
        loss = adaptive_level_loss(x, y)
        T.backward(loss)
        x.data -= 5.0 * x.grad
    assert 0 <= float(adaptive_level_loss(x, y).data) < 1e-3
