import io
import itertools
import math
from datetime import date

import networkx as nx
import pytest
from hypothesis import given, settings, strategies as st

from oracles import brute_force_census, haversine_reference
from visitmotifs.census import (
    AttributedKey,
    MotifCensus,
    MotifClass,
    MotifInstance,
    NotAMotif,
    ProximityUnavailable,
    attributed_key,
    census_many,
    class_of_structure,
    classify_connected_subgraph,
    enumerate_census,
    haversine_miles,
    iter_instances,
    motif_proximity,
    read_census_csv,
    reference_edges,
    structure_of_class,
    write_census_csv,
)
from visitmotifs.network import NodeAttr, PlaceNetwork

DAY = date(2021, 8, 2)
MI_PER_DEG_LAT = 2 * math.pi * 3958.7613 / 360


def _net(edges, colors=None, coords=None):
    colors = colors or {}
    coords = coords or {}
    nodes = {v for e in edges for v in e}
    attrs = {v: NodeAttr(colors.get(v, "Restaurants"), *coords.get(v, (30.0, -90.0))) for v in nodes}
    return PlaceNetwork.from_edges(DAY, edges, attrs)


def _counts(c):
    return {m.value: n for m, n in c.class_counts.items() if n}


@pytest.mark.parametrize("edges,expected", [
    ([("A", "B"), ("B", "C"), ("C", "A")], MotifClass.M3_2),
    ([("A", "B"), ("A", "C"), ("A", "D")], MotifClass.M4_6),
    ([("A", "B"), ("B", "C"), ("C", "D")], MotifClass.M4_5),
])
def test_classify(edges, expected):
    assert classify_connected_subgraph(edges, "ABCD"[: len({v for e in edges for v in e})]) == expected


def test_classify_rejects_disconnected():
    with pytest.raises(NotAMotif):
        classify_connected_subgraph([("A", "B"), ("C", "D")], "ABCD")
    with pytest.raises(NotAMotif):
        classify_connected_subgraph([], "A")


def test_complete_four():
    c = enumerate_census(_net(list(itertools.combinations("ABCD", 2))))
    assert _counts(c) == {"M2-1": 6, "M3-2": 4, "M4-1": 1}


def test_complete_four_diamond_first():
    c = enumerate_census(_net(list(itertools.combinations("ABCD", 2))), convention="diamond-first")
    assert _counts(c) == {"M2-1": 6, "M3-2": 4, "M4-2": 1}


def test_four_path():
    c = enumerate_census(_net([("p1", "p2"), ("p2", "p3"), ("p3", "p4")]))
    assert _counts(c) == {"M2-1": 3, "M3-1": 2, "M4-5": 1}


def test_empty_network():
    c = enumerate_census(PlaceNetwork(DAY, {}, {}))
    assert c.total() == 0
    assert all(math.isnan(p) for p in c.class_proximity.values())


def test_conventions_swap_only_dense_classes():
    for m in MotifClass:
        k4 = structure_of_class(m, "k4-first")
        other = class_of_structure(k4, "diamond-first")
        if m in (MotifClass.M4_1, MotifClass.M4_2):
            assert other != m
        else:
            assert other == m
    assert len(reference_edges(MotifClass.M4_1)) == 6
    assert len(reference_edges(MotifClass.M4_1, "diamond-first")) == 5


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 12), st.floats(0.05, 0.9), st.integers(0, 10_000))
def test_census_matches_oracle(n, p, seed):
    g = nx.gnp_random_graph(n, p, seed=seed)
    net = PlaceNetwork.from_edges(DAY, [(f"{u:02d}", f"{v:02d}") for u, v in g.edges])
    got = {m.value: c for m, c in enumerate_census(net).class_counts.items()}
    h = nx.relabel_nodes(g, {v: f"{v:02d}" for v in g}).subgraph(net.nodes)
    assert got == brute_force_census(h)


def test_uncategorized_instances_count_toward_class_only():
    net = _net([("a", "b"), ("b", "c")], colors={"a": None})
    c = enumerate_census(net)
    assert c.class_counts[MotifClass.M2_1] == 2
    assert sum(c.attributed_counts.values()) == 1


def test_attributed_key_order_independent():
    k1 = attributed_key([("x", "y"), ("y", "z")], {"x": "Restaurants", "y": "Health Care", "z": "Grocery Stores"})
    k2 = attributed_key([("z", "y"), ("y", "x")], {"x": "Restaurants", "y": "Health Care", "z": "Grocery Stores"})
    assert k1 == k2
    assert k1.motif == MotifClass.M3_1
    assert AttributedKey.parse(str(k1)) == k1
    assert attributed_key([("x", "y")], {"x": "Restaurants", "y": None}) is None


def test_census_keys_match_reference_keys():
    colors = {"a": "Restaurants", "b": "Health Care", "c": "Grocery Stores", "d": "Restaurants"}
    edges = [("a", "b"), ("b", "c"), ("c", "d"), ("a", "c")]
    c = enumerate_census(_net(edges, colors))
    for inst in iter_instances(_net(edges, colors)):
        sub = [e for e in edges if e[0] in inst.members and e[1] in inst.members]
        key = attributed_key(sub, {v: colors[v] for v in inst.members})
        assert c.attributed_counts[key] >= 1
    assert sum(c.attributed_counts.values()) == c.total()


def test_haversine_example():
    a, b = (29.9511, -90.0715), (30.4515, -91.1871)
    ref = haversine_reference(*a, *b)
    assert haversine_miles(a, b) == pytest.approx(ref, rel=1e-6)
    assert haversine_miles(a, a) == 0.0


def test_haversine_range_check():
    with pytest.raises(ValueError):
        haversine_miles((91, 0), (0, 0))
    with pytest.raises(ValueError):
        haversine_miles((0, 0), (0, 181))


def _coords_along_meridian(offsets_mi):
    return {k: (30.0 + v / MI_PER_DEG_LAT, -90.0) for k, v in offsets_mi.items()}


def test_proximity_single_edge():
    net = _net([("a", "b")], coords=_coords_along_meridian({"a": 0.0, "b": 1.0}))
    assert motif_proximity(("a", "b"), net) == pytest.approx(1.0, rel=1e-9)


def test_proximity_path_ignores_non_adjacent_pair():
    net = _net([("a", "b"), ("b", "c")], coords=_coords_along_meridian({"a": 0.0, "b": 2.0, "c": 6.0}))
    assert motif_proximity(("a", "b", "c"), net) == pytest.approx(3.0, rel=1e-9)
    c = enumerate_census(net)
    assert c.class_proximity[MotifClass.M3_1] == pytest.approx(3.0, rel=1e-9)
    assert c.class_proximity[MotifClass.M2_1] == pytest.approx(3.0, rel=1e-9)


def test_proximity_triangle_mean_of_three():
    # 1, 2, 3 mile sides: a degenerate triangle laid out on a meridian
    net = _net([("a", "b"), ("b", "c"), ("a", "c")], coords=_coords_along_meridian({"a": 0.0, "b": 1.0, "c": 3.0}))
    assert motif_proximity(MotifInstance(MotifClass.M3_2, ("a", "b", "c")), net) == pytest.approx(2.0, rel=1e-9)


def test_proximity_missing_coordinates():
    net = PlaceNetwork.from_edges(DAY, [("a", "b")], {"a": NodeAttr("Restaurants", 30, -90), "b": NodeAttr(None, None, None)})
    with pytest.raises(ProximityUnavailable):
        motif_proximity(("a", "b"), net)
    c = enumerate_census(net)
    assert c.class_counts[MotifClass.M2_1] == 1
    assert c.skipped_proximity_count == 1


def test_census_csv_round_trip():
    c = enumerate_census(_net([("a", "b"), ("b", "c"), ("c", "a"), ("c", "d")],
                              colors={"a": "Restaurants", "b": "Health Care", "c": "Grocery Stores", "d": "Restaurants"}))
    buf = io.StringIO()
    write_census_csv([c], buf)
    buf.seek(0)
    (back,) = read_census_csv(buf)
    assert back.class_counts == c.class_counts
    assert back.attributed_counts == c.attributed_counts


def test_census_many_order_and_estimator():
    nets = [_net([("a", "b")]), _net(list(itertools.combinations("abc", 2)))]
    assert [x.total() for x in census_many(nets)] == [1, 4]
    est = MotifCensus().fit()
    assert est.transform(nets).shape == (2, 9)
    assert est.get_params() == {"convention": "k4-first", "max_subgraphs": None, "n_jobs": 1}
