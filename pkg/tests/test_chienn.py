import itertools
import json

import numpy as np
import pytest

from chiralmp.datagen import gen_tetrahedral, random_molecule
from chiralmp.edgegraph import initial_inputs, to_edge_graph
from chiralmp.model import (
    ChiENNParams,
    LayerStack,
    StackConfig,
    chienn_update,
    collate,
    graph_tensors,
    layer_forward,
    psi_k,
    readout,
    shift_invariant_aggregate,
    vanilla_aggregate,
    window_positions,
    zero_pad_order,
)
from chiralmp.molgraph import MolecularGraph
from chiralmp.ordering import all_orders


def rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), 1e-300)


def mlp(rng, d_in, d_out, hidden=8):
    A, a = rng.normal(size=(hidden, d_in)), rng.normal(size=hidden)
    B = rng.normal(size=(d_out, hidden))
    return lambda z: B @ np.tanh(A @ z + a)


# -- generic aggregators


def test_vanilla_examples(rng):
    x = rng.normal(size=3)
    rho = lambda x, s: 2 * x + s
    assert np.array_equal(vanilla_aggregate(x, [], lambda x, n: n, rho), 2 * x)
    a, b = rng.normal(size=3), rng.normal(size=3)
    add = lambda x, s: s
    np.testing.assert_array_equal(vanilla_aggregate(x, [a, b], lambda x, n: n, add), a + b)
    np.testing.assert_array_equal(vanilla_aggregate(x, [b, a], lambda x, n: n, add), a + b)
    with pytest.raises(ValueError):
        vanilla_aggregate(x, [np.ones(2)], lambda x, n: n, add)


def test_vanilla_is_permutation_invariant(rng):
    f, g = mlp(rng, 6, 4), mlp(rng, 7, 3)
    phi = lambda x, n: f(np.concatenate([x, n]))
    rho = lambda x, s: g(np.concatenate([x, s]))
    x, nbrs = rng.normal(size=3), list(rng.normal(size=(5, 3)))
    ref = vanilla_aggregate(x, nbrs, phi, rho)
    for perm in itertools.permutations(range(5)):
        out = vanilla_aggregate(x, [nbrs[i] for i in perm], phi, rho)
        np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)


def test_shift_invariant_aggregate(rng):
    a, b, c = rng.normal(size=(3, 2))
    g1 = mlp(rng, 2, 2)
    np.testing.assert_array_equal(shift_invariant_aggregate(g1, [a]), g1(a))
    differ = 0
    for _ in range(100):
        g = mlp(rng, 6, 2)
        cat = lambda *xs: g(np.concatenate(xs))
        ref = shift_invariant_aggregate(cat, [a, b, c])
        np.testing.assert_allclose(shift_invariant_aggregate(cat, [b, c, a]), ref, atol=1e-12)
        differ += np.linalg.norm(shift_invariant_aggregate(cat, [a, c, b]) - ref) > 1e-6
    assert differ >= 99


def test_shift_invariant_aggregate_every_shift(rng):
    for d in range(1, 8):
        g = mlp(rng, 2 * d, 3)
        cat = lambda *xs: g(np.concatenate(xs))
        order = list(rng.normal(size=(d, 2)))
        ref = shift_invariant_aggregate(cat, order)
        for p in range(d):
            out = shift_invariant_aggregate(cat, order[p:] + order[:p])
            np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


# -- psi and padding


def hand_params():
    return ChiENNParams(
        W1=np.eye(2), b1=np.zeros(2), W2=np.zeros((2, 2)), b2=np.zeros(2),
        W3=np.array([[1.0, 2.0], [0.0, -1.0]]), b3=np.array([1.0, 0.0]),
        W4=np.array([[1.0, 0, -1, 0], [0, 1, 0, 1]]), b4=np.array([0.0, -1.0]),
        k=2,
    )


def test_psi_hand_computed():
    # W4 z + b4 = (-2, 0); elu -> (e^-2 - 1, 0); W3 . + b3 = (e^-2, 0)
    out = psi_k(hand_params(), [np.array([1.0, 2.0]), np.array([3.0, -1.0])])
    np.testing.assert_allclose(out, [np.exp(-2.0), 0.0], rtol=0, atol=1e-15)


def test_psi_zero_window_gives_zero(rng):
    p = ChiENNParams.init(3, 5, 2, rng)
    p.b3[:] = 0
    p.b4[:] = 0
    np.testing.assert_array_equal(psi_k(p, [np.zeros(3)] * 2), np.zeros(3))
    with pytest.raises(ValueError, match="arity"):
        psi_k(p, [np.zeros(3)])


def test_zero_pad_examples():
    x0 = np.array([1.0, 2.0])
    padded = zero_pad_order([x0], 3)
    assert len(padded) == 3
    np.testing.assert_array_equal(np.array(padded), [[1, 2], [0, 0], [0, 0]])
    three = [x0, 2 * x0, 3 * x0]
    assert all(np.array_equal(a, b) for a, b in zip(zero_pad_order(three, 3), three))
    np.testing.assert_array_equal(np.array(zero_pad_order([], 3, width=4)), np.zeros((3, 4)))


def test_window_positions():
    assert window_positions(0, 3) == []
    assert window_positions(1, 3) == [[0, -1, -1]]
    assert window_positions(3, 2) == [[0, 1], [1, 2], [2, 0]]
    # short orders rotate whole, then pad, so every term sees every neighbor
    assert window_positions(2, 3) == [[0, 1, -1], [1, 0, -1]]


# -- the update rule


def test_update_without_neighbors(rng):
    p = ChiENNParams.init(4, 4, 3, rng)
    x, y = rng.normal(size=(2, 4))
    expect = p.W1 @ x + p.b1 + p.W2 @ y + p.b2
    np.testing.assert_allclose(chienn_update(p, x, y, []), expect, atol=1e-15)


def test_update_expands_pairs(rng):
    p = ChiENNParams.init(4, 6, 2, rng)
    x, y, a, b, c = rng.normal(size=(5, 4))
    expect = p.W1 @ x + p.b1 + p.W2 @ y + p.b2
    expect = expect + psi_k(p, [a, b]) + psi_k(p, [b, c]) + psi_k(p, [c, a])
    np.testing.assert_allclose(chienn_update(p, x, y, [a, b, c]), expect, atol=1e-14)
    d1 = chienn_update(p, x, y, [a])
    np.testing.assert_allclose(d1, p.W1 @ x + p.b1 + p.W2 @ y + p.b2 + psi_k(p, [a, np.zeros(4)]), atol=1e-14)


def test_update_shift_and_swap(rng):
    differ = 0
    for _ in range(100):
        p = ChiENNParams.init(4, 6, int(rng.integers(2, 4)), rng)
        x, y, a, b, c = rng.normal(size=(5, 4))
        ref = chienn_update(p, x, y, [a, b, c])
        assert rel(ref, chienn_update(p, x, y, [c, a, b])) <= 1e-10
        differ += rel(ref, chienn_update(p, x, y, [a, c, b])) > 1e-6
    assert differ >= 99


def test_short_orders_stay_shift_invariant(rng):
    p = ChiENNParams.init(3, 5, 4, rng)
    x, y = rng.normal(size=(2, 3))
    for d in (2, 3):
        order = list(rng.normal(size=(d, 3)))
        ref = chienn_update(p, x, y, order)
        for s in range(d):
            assert rel(ref, chienn_update(p, x, y, order[s:] + order[:s])) <= 1e-12


def test_dimension_mismatch(rng):
    p = ChiENNParams.init(3, 3, 2, rng)
    with pytest.raises(ValueError):
        chienn_update(p, np.zeros(4), np.zeros(3), [])
    with pytest.raises(ValueError):
        chienn_update(p, np.zeros(3), np.zeros(3), [np.zeros(2)])
    with pytest.raises(ValueError):
        ChiENNParams(**{**p.arrays(), "W4": np.zeros((3, 5))}, k=2)


def test_linear_psi_ignores_order(rng):
    p = ChiENNParams.init(3, 4, 3, rng)
    W = rng.normal(size=(3, 9))
    x, y = rng.normal(size=(2, 3))
    order = list(rng.normal(size=(5, 3)))

    def update(seq):
        out = p.W1 @ x + p.W2 @ y
        for pos in window_positions(len(seq), 3):
            out = out + W @ np.concatenate([seq[i] for i in pos])
        return out

    ref = update(order)
    for perm in itertools.permutations(range(5)):
        assert rel(ref, update([order[i] for i in perm])) <= 1e-10


def test_k1_ignores_order(rng):
    p = ChiENNParams.init(4, 5, 1, rng)
    x, y = rng.normal(size=(2, 4))
    order = list(rng.normal(size=(6, 4)))
    ref = chienn_update(p, x, y, order)
    for perm in itertools.permutations(range(6)):
        assert rel(ref, chienn_update(p, x, y, [order[i] for i in perm])) <= 1e-12


# -- layers and readout


def test_single_bond_layer(rng):
    g = MolecularGraph.build(["C", "O"], [[0, 0, 0], [1.2, 0, 0]], [(0, 1, 2)])
    eg = to_edge_graph(g)
    p = ChiENNParams.init(3, 3, 2, rng)
    eg.states = rng.normal(size=(2, 3))
    s = eg.states.copy()
    new = layer_forward(p, eg, all_orders(eg))
    np.testing.assert_allclose(new[0], p.W1 @ s[0] + p.b1 + p.W2 @ s[1] + p.b2, atol=1e-15)


def test_identity_layer_keeps_states(methane, rng):
    eg = to_edge_graph(methane)
    H = 3
    p = ChiENNParams(
        W1=np.eye(H), b1=np.zeros(H), W2=np.zeros((H, H)), b2=np.zeros(H),
        W3=np.zeros((H, 2)), b3=np.zeros(H), W4=rng.normal(size=(2, 3 * H)), b4=np.zeros(2), k=3,
    )
    eg.states = rng.normal(size=(eg.n_nodes, H))
    before = eg.states.copy()
    np.testing.assert_array_equal(layer_forward(p, eg, all_orders(eg)), before)


def test_methane_golden_states(methane, data_dir):
    gold = json.loads((data_dir / "methane_layer_golden.json").read_text())
    eg = to_edge_graph(methane)
    assert [f"{a}->{b}" for a, b in eg.keys] == gold["keys"]
    p = ChiENNParams.init(gold["H"], gold["H_mid"], gold["k"], np.random.default_rng(gold["params_seed"]))
    eg.states = np.random.default_rng(gold["states_seed"]).normal(size=(8, gold["H"]))
    np.testing.assert_allclose(layer_forward(p, eg, all_orders(eg)), gold["states"], rtol=1e-12, atol=1e-12)


def test_layer_needs_every_order(methane, rng):
    eg = to_edge_graph(methane)
    eg.states = np.zeros((8, 2))
    orders = all_orders(eg)
    orders.pop((0, 1))
    with pytest.raises(KeyError):
        layer_forward(ChiENNParams.init(2, 2, 2, rng), eg, orders)


def test_readout_examples(rng):
    v = rng.normal(size=4)
    Wh = rng.normal(size=(5, 4))
    head = {"Wh": Wh, "bh": np.zeros(5), "Wo": np.eye(5)[:2], "bo": np.zeros(2)}
    hid = Wh @ v
    hid = np.where(hid > 0, hid, np.expm1(hid))
    np.testing.assert_allclose(readout(np.tile(v, (6, 1)), head), hid[:2], atol=1e-14)
    np.testing.assert_allclose(readout(v[None], head), hid[:2], atol=1e-14)
    zero = {**head, "Wo": np.zeros((2, 5))}
    np.testing.assert_array_equal(readout(np.tile(v, (3, 1)), zero), np.zeros(2))
    with pytest.raises(ValueError):
        readout(np.zeros((0, 4)), head)


# -- the stack


def tiny_stack(rng, g, k=3, **kw):
    in_dim = initial_inputs(to_edge_graph(g)).shape[1]
    return LayerStack.init(StackConfig(in_dim, 2, H=6, H_mid=5, k=k, layers=2, head_hidden=4, **kw), rng)


def test_batched_matches_reference(rng):
    graphs = [random_molecule(rng, ring_bonds=1) for _ in range(4)]
    for k in (1, 2, 3):
        st = tiny_stack(rng, graphs[0], k)
        batch = collate([graph_tensors(to_edge_graph(g), k) for g in graphs])
        out = st.predict(batch)
        for n, g in enumerate(graphs):
            eg = to_edge_graph(g)
            np.testing.assert_allclose(out[n], st.reference_forward(eg, all_orders(eg)), rtol=1e-12, atol=1e-12)


def test_residual_reference_matches(rng):
    g = random_molecule(rng)
    st = tiny_stack(rng, g, residual=True)
    eg = to_edge_graph(g)
    np.testing.assert_allclose(
        st.predict(graph_tensors(eg, 3))[0], st.reference_forward(eg, all_orders(eg)), rtol=1e-12
    )
    st_ln = tiny_stack(rng, g, layer_norm=True)
    assert np.isfinite(st_ln.predict(graph_tensors(eg, 3))).all()


def test_enantiomers_get_different_embeddings(rng):
    a, b = (s.graph for s in gen_tetrahedral(5, 2))
    for k, expect_equal in ((1, True), (2, False), (3, False)):
        for _ in range(10):
            st = tiny_stack(rng, a, k)
            ea = st.embed(graph_tensors(to_edge_graph(a), k))
            eb = st.embed(graph_tensors(to_edge_graph(b), k))
            if expect_equal:
                np.testing.assert_allclose(ea, eb, rtol=1e-9, atol=1e-12)
            else:
                assert rel(ea, eb) > 1e-6


def test_checkpoint_round_trip(tmp_path, rng):
    g = random_molecule(rng)
    st = tiny_stack(rng, g)
    st.save(tmp_path / "ckpt.json")
    back = LayerStack.load(tmp_path / "ckpt.json")
    batch = graph_tensors(to_edge_graph(g), 3)
    np.testing.assert_array_equal(back.predict(batch), st.predict(batch))
    d = json.loads((tmp_path / "ckpt.json").read_text())
    assert d["k"] == 3 and d["H"] == 6
    assert d["layers"][0]["W1"]["shape"] == [6, 6] and len(d["layers"][0]["W1"]["data"]) == 36
    d["schema_version"] = 99
    with pytest.raises(ValueError, match="schema version"):
        LayerStack.from_dict(d)


def test_init_bounds(rng):
    p = ChiENNParams.init(16, 8, 3, rng)
    assert np.abs(p.W1).max() <= 1 / 4
    assert np.abs(p.W4).max() <= 1 / np.sqrt(48)
    assert np.abs(p.W3).max() <= 1 / np.sqrt(8)
