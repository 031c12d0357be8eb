import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from maple import tensor as T
from maple.graph_refine import (AdjacencyPlan, GnnLayer, build_adjacency, init_gnn_params, message_pass,
                                plan_from_edges, refine)
from maple.hierarchy import from_dict, load_fixture

from oracles import message_pass_ref, random_graph


def layers_for(num, d, seed, dtype=np.float64):
    raw = init_gnn_params(num, d, np.random.default_rng(seed), dtype)
    r = np.random.default_rng(seed + 1)
    for k in raw:  # perturb norms and biases so every term is exercised
        if k.endswith(("bias", "gain")):
            raw[k] = raw[k] + 0.3 * r.standard_normal(raw[k].shape)
    params = {k: T.Tensor(v, requires_grad=True) for k, v in raw.items()}
    return params, [GnnLayer.from_params(params, f"gnn.{k}.") for k in range(num)]


def ref_layer(H, plan, layer):
    return message_pass_ref(H, plan.neighbors, layer.w_self.data, layer.w_neigh.data, layer.bias.data,
                            layer.norm_gain.data, layer.norm_bias.data)


def test_chain_and_aid_neighbours():
    h = from_dict({"levels": 2, "nodes": [{"name": "A", "level": 1}, {"name": "a1", "level": 2, "parents": ["A"]}]})
    assert build_adjacency(h).neighbors == ((1,), (0,))
    aid = load_fixture("aid")
    nb = {aid.nodes[u].name for u in build_adjacency(aid).neighbors[aid.id_of("Urban fabric")]}
    assert nb == {"Artificial surfaces", "buildings", "mobile-home"}


def test_dag_child_lists_both_parents():
    plan = plan_from_edges(4, [(0, 2), (1, 2), (2, 3)])
    assert plan.neighbors[2] == (0, 1, 3)
    assert plan.degree.tolist() == [1, 1, 3, 1]


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**31))
def test_adjacency_symmetric(n, seed):
    plan = plan_from_edges(*random_graph(np.random.default_rng(seed), n))
    for v, nbrs in enumerate(plan.neighbors):
        for u in nbrs:
            assert v in plan.neighbors[u]


def test_isolated_node():
    plan = plan_from_edges(1, [])
    params, (layer,) = layers_for(1, 4, 0)
    layer.w_self.data[:] = 0
    layer.bias.data[:] = 0
    H = T.Tensor(np.random.default_rng(3).standard_normal((1, 1, 4)))
    want = T.gelu(T.layer_norm(H, layer.norm_gain, layer.norm_bias)).data
    assert np.allclose(message_pass(H, plan, layer).data, want, atol=1e-12)


def test_symmetric_pair_identical_outputs():
    plan = plan_from_edges(2, [(0, 1)])
    _, (layer,) = layers_for(1, 3, 1)
    row = np.random.default_rng(0).standard_normal(3)
    out = message_pass(T.Tensor(np.stack([row, row])[None]), plan, layer).data
    assert np.array_equal(out[0, 0], out[0, 1])


def test_matches_loop_oracle_five_nodes():
    plan = plan_from_edges(5, [(0, 2), (0, 3), (1, 4)])
    _, (layer,) = layers_for(1, 4, 2)
    H = np.random.default_rng(5).standard_normal((2, 5, 4))
    assert np.max(np.abs(message_pass(T.Tensor(H), plan, layer).data - ref_layer(H, plan, layer))) < 1e-6


def test_refine_composition_and_dropout_placement():
    plan = plan_from_edges(5, [(0, 2), (0, 3), (1, 4)])
    _, layers = layers_for(2, 4, 3)
    H = T.Tensor(np.random.default_rng(6).standard_normal((2, 5, 4)))
    got = refine(H, plan, layers, 0.5, True, np.random.default_rng(9)).data
    manual = message_pass(H, plan, layers[0])
    manual = T.dropout(manual, 0.5, True, np.random.default_rng(9))
    manual = message_pass(manual, plan, layers[1]).data
    assert np.array_equal(got, manual)
    # one layer: dropout never applied
    one = refine(H, plan, layers[:1], 0.9, True, np.random.default_rng(0)).data
    assert np.array_equal(one, message_pass(H, plan, layers[0]).data)
    with pytest.raises(ValueError):
        refine(H, plan, [])


def test_batch_independence():
    plan = plan_from_edges(4, [(0, 1), (1, 2)])
    _, layers = layers_for(2, 3, 4)
    H = np.random.default_rng(7).standard_normal((3, 4, 3))
    joint = refine(T.Tensor(H), plan, layers).data
    for b in range(3):
        assert np.allclose(joint[b], refine(T.Tensor(H[b:b + 1]), plan, layers).data[0], atol=1e-14)


def test_locality():
    # path 0 - 1 - 2 - 3 - 4: after two layers node 0 cannot see node 3 or 4
    plan = plan_from_edges(5, [(0, 1), (1, 2), (2, 3), (3, 4)])
    _, layers = layers_for(2, 4, 5)
    H = np.random.default_rng(8).standard_normal((1, 5, 4))
    base = refine(T.Tensor(H), plan, layers).data
    far = H.copy()
    far[0, 3] += 5.0
    far[0, 4] -= 3.0
    moved = refine(T.Tensor(far), plan, layers).data
    assert np.array_equal(base[0, 0], moved[0, 0])
    assert not np.allclose(base[0, 1], moved[0, 1])  # node 1 is two hops from node 3
    near = H.copy()
    near[0, 2] += 1.0
    assert not np.allclose(base[0, 0], refine(T.Tensor(near), plan, layers).data[0, 0])


def test_permutation_equivariance():
    rng = np.random.default_rng(11)
    plan = plan_from_edges(*random_graph(rng, 9))
    _, layers = layers_for(2, 4, 6)
    H = rng.standard_normal((2, 9, 4))
    perm = rng.permutation(9)
    out = refine(T.Tensor(H), plan, layers).data
    H_p = np.empty_like(H)
    H_p[:, perm] = H
    out_p = refine(T.Tensor(H_p), plan.permuted(perm), layers).data
    assert np.array_equal(out_p[:, perm], out)


def test_shape_errors():
    plan = plan_from_edges(3, [(0, 1)])
    _, (layer,) = layers_for(1, 4, 0)
    with pytest.raises(ValueError):
        message_pass(T.Tensor(np.zeros((1, 4, 4))), plan, layer)
    with pytest.raises(ValueError):
        message_pass(T.Tensor(np.zeros((1, 3, 5))), plan, layer)


def test_gradients_through_refine():
    plan = plan_from_edges(4, [(0, 1), (0, 2), (2, 3)])
    params, layers = layers_for(2, 3, 7)
    H = T.Tensor(np.random.default_rng(1).standard_normal((2, 4, 3)), requires_grad=True)
    probe = T.Tensor(np.random.default_rng(2).standard_normal((2, 4, 3)))
    f = lambda: T.sum(refine(H, plan, layers) * probe)
    assert T.grad_check(f, list(params.values()) + [H]) < 1e-5
