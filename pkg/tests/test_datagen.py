import warnings

import numpy as np
import pytest

from chiralmp.datagen import (
    DEFAULT_DELTA,
    LABELS,
    DegenerateGeometryError,
    SyntheticSample,
    achiral_target,
    bridges,
    chirality_oracle,
    gen_ranking_pairs,
    gen_tetrahedral,
    label_of,
    order_chirality,
    perturb_conformer,
    random_molecule,
    read_jsonl,
    write_jsonl,
)
from chiralmp.edgegraph import to_edge_graph
from chiralmp.molgraph import MolecularGraph, mirror
from chiralmp.ordering import all_orders, cyclic_equivalent


def test_oracle_golden():
    s3 = 1 / np.sqrt(3)
    subs = [(1, [1, 0, 0]), (2, [0, 1, 0]), (3, [0, 0, 1]), (4, [-s3, -s3, -s3])]
    # det[v1-v4, v2-v4, v3-v4] = 1 + sqrt(3) > 0
    assert chirality_oracle([0, 0, 0], subs) == "S"
    flipped = [(r, [-p[0], p[1], p[2]]) for r, p in subs]
    assert chirality_oracle([0, 0, 0], flipped) == "R"
    assert chirality_oracle([0, 0, 0], subs[::-1]) == "S"


def test_oracle_rejects_coplanar():
    subs = [(1, [1, 0, 0]), (2, [0, 1, 0]), (3, [-1, 0, 0]), (4, [0, -1, 0])]
    with pytest.raises(DegenerateGeometryError):
        chirality_oracle([0, 0, 0], subs)


def test_oracle_antisymmetry(rng):
    for _ in range(1000):
        pts = rng.normal(size=(4, 3))
        subs = list(zip(rng.permutation(4) + 1, pts))
        m = [(r, p * [-1, 1, 1]) for r, p in subs]
        assert chirality_oracle([0, 0, 0], subs) != chirality_oracle([0, 0, 0], m)


def test_pair_has_opposite_labels():
    a, b = gen_tetrahedral(17, 2)
    assert a.meta["pair_id"] == b.meta["pair_id"]
    assert {a.meta["is_mirror"], b.meta["is_mirror"]} == {False, True}
    assert a.label != b.label
    assert label_of(a.graph) == LABELS[a.label]


def test_mirror_flips_label(rng):
    for s in gen_tetrahedral(3, 200):
        assert label_of(mirror(s.graph)) != label_of(s.graph)


def test_four_distinct_branches():
    for s in gen_tetrahedral(5, 20):
        g = s.graph
        nbrs = g.neighbors(0)
        assert len(nbrs) == 4
        assert len({g.elements[i] for i in nbrs}) == 4


def test_odd_count_warns():
    with pytest.warns(UserWarning):
        out = gen_tetrahedral(1, 1)
    assert len(out) == 1


def test_balance_and_determinism():
    a = gen_tetrahedral(8, 100)
    labels = [s.label for s in a]
    assert abs(labels.count(0) - labels.count(1)) <= 1
    b = gen_tetrahedral(8, 100)
    assert [s.to_dict() for s in a] == [s.to_dict() for s in b]


def test_order_orientation_matches_oracle():
    for s in gen_tetrahedral(21, 300):
        assert order_chirality(s.graph) == label_of(s.graph)


def test_mirror_reverses_center_orders():
    a, b = gen_tetrahedral(2, 2)
    oa, ob = all_orders(to_edge_graph(a.graph)), all_orders(to_edge_graph(mirror(a.graph)))
    for k in oa:
        assert cyclic_equivalent(ob[k], oa[k].reversed())


def test_ranking_targets_differ_by_two_delta():
    for a, b, label in gen_ranking_pairs(3, 50):
        assert abs(a.label - b.label) == pytest.approx(2 * DEFAULT_DELTA, abs=1e-12)
        smaller = a if a.label < b.label else b
        assert label == ("a" if smaller is a else "b")
        assert achiral_target(a.graph) == pytest.approx(achiral_target(b.graph), abs=1e-9)


def test_zero_delta_pairs_tie():
    for a, b, _ in gen_ranking_pairs(3, 10, delta=0.0):
        assert a.label == pytest.approx(b.label, abs=1e-9)


def test_perturb_conformer(rng):
    g = random_molecule(rng, 9)
    bond = bridges(g)[0]
    np.testing.assert_array_equal(perturb_conformer(g, bond, 0.0).coords, g.coords)
    np.testing.assert_allclose(perturb_conformer(g, bond, 2 * np.pi).coords, g.coords, atol=1e-9)
    h = perturb_conformer(g, bond, 1.0)
    assert h.undirected_bonds() == g.undirected_bonds()
    a, b = all_orders(to_edge_graph(g)), all_orders(to_edge_graph(h))
    assert all(cyclic_equivalent(a[k], b[k]) for k in a)


def test_ring_bond_is_not_rotatable():
    ring = MolecularGraph.build(
        ["C", "C", "C"], [[0, 0, 0], [1.5, 0, 0], [0.7, 1.2, 0]], [(0, 1, 1), (1, 2, 1), (2, 0, 1)]
    )
    with pytest.raises(ValueError, match="not a rotatable bond"):
        perturb_conformer(ring, (0, 1), 0.5)


def test_jsonl_round_trip(tmp_path):
    samples = gen_tetrahedral(6, 6)
    write_jsonl(samples, tmp_path / "d.jsonl")
    back = read_jsonl(tmp_path / "d.jsonl")
    assert [s.to_dict() for s in back] == [s.to_dict() for s in samples]
    bad = samples[0].to_dict()
    bad["schema_version"] = 7
    with pytest.raises(ValueError):
        SyntheticSample.from_dict(bad)
