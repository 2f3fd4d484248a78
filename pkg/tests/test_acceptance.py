"""Acceptance criteria, one marked group per criterion.

Run ``pytest tests/test_acceptance.py -v``; the terminal summary prints one
PASS/FAIL line per criterion.
"""

from __future__ import annotations

import gc
import itertools
import math
import os
import random
import time
from datetime import date, timedelta

import networkx as nx
import numpy as np
import pytest

from visitmotifs.census import (
    EARTH_RADIUS_MI,
    MotifClass,
    attributed_key,
    census_many,
    enumerate_census,
    haversine_miles,
)
from visitmotifs.cli import main as cli_main
from visitmotifs.ingest import load_category_table
from visitmotifs.metrics import (
    BASELINE_WINDOW,
    DailySeries,
    compute_baseline,
    date_range,
    pct_change,
    recovery_duration,
)
from visitmotifs.network import NodeAttr, PlaceNetwork
from visitmotifs.pipeline import PipelineConfig, run_pipeline
from visitmotifs.synth import ScenarioConfig, generate_scenario

from oracles import brute_force_census, colored_graph, expected_cluster_change, haversine_reference, same_colored_graph

DAY = date(2021, 8, 2)


def _network(g: nx.Graph, colors=None) -> PlaceNetwork:
    colors = colors or {}
    attrs = {f"n{v:03d}": NodeAttr(colors.get(v), 30.0, -90.0) for v in g.nodes}
    return PlaceNetwork.from_edges(DAY, [(f"n{u:03d}", f"n{v:03d}") for u, v in g.edges], attrs)


# 1 ---------------------------------------------------------------------------

@pytest.mark.acceptance("1", "census matches brute-force oracle on 200 random graphs, < 60 s")
def test_census_oracle_equivalence(record_property):
    rng = random.Random(1)
    graphs = []
    for i in range(200):
        n = rng.randint(2, 30)
        p = (0.1, 0.3, 0.6)[i % 3]
        graphs.append(nx.gnp_random_graph(n, p, seed=rng.randrange(1 << 30)))
    mismatches = 0
    census_time = 0.0
    for g in graphs:
        t = time.perf_counter()
        c = enumerate_census(_network(g))
        census_time += time.perf_counter() - t
        expected = brute_force_census(g)
        got = {m.value: c.class_counts[m] for m in MotifClass}
        mismatches += got != expected
    record_property("detail", f"{mismatches} mismatches, census {census_time:.2f} s")
    assert mismatches == 0
    assert census_time < 60


# 2 ---------------------------------------------------------------------------

def _connected_labeled_graphs(k):
    pairs = list(itertools.combinations(range(k), 2))
    for r in range(1, len(pairs) + 1):
        for edges in itertools.combinations(pairs, r):
            g = nx.Graph(edges)
            g.add_nodes_from(range(k))
            if nx.is_connected(g):
                yield edges


def _brute_canon(k, edges, colors):
    best = None
    for p in itertools.permutations(range(k)):
        e = tuple(sorted(tuple(sorted((p[a], p[b]))) for a, b in edges))
        c = [None] * k
        for i in range(k):
            c[p[i]] = colors[i]
        cand = (e, tuple(c))
        if best is None or cand < best:
            best = cand
    return best


@pytest.mark.acceptance("2", "coloured keys are permutation-invariant and separate non-isomorphic graphs")
def test_colored_key_soundness(record_property):
    palette = load_category_table().names[:4]
    failures = 0
    checked = 0
    for k in (2, 3, 4):
        by_key: dict = {}
        for edges in _connected_labeled_graphs(k):
            for colors in itertools.product(palette, repeat=k):
                cmap = dict(enumerate(colors))
                key = attributed_key(edges, cmap)
                checked += 1
                for p in itertools.permutations(range(k)):
                    pe = [(p[a], p[b]) for a, b in edges]
                    pc = {p[i]: colors[i] for i in range(k)}
                    if attributed_key(pe, pc) != key:
                        failures += 1
                        break
                by_key.setdefault(key, set()).add(_brute_canon(k, edges, colors))
        # one key <-> one isomorphism class
        canon_to_key: dict = {}
        for key, canons in by_key.items():
            if len(canons) != 1:
                failures += 1
            for c in canons:
                if canon_to_key.setdefault(c, key) != key:
                    failures += 1
        # the numba path agrees with the reference implementation
        for key, canons in by_key.items():
            (edges, colors), = canons
            net = _network(nx.Graph(list(edges)), dict(enumerate(colors)))
            got = [kk for kk, n in enumerate_census(net).attributed_counts.items() if kk.motif.size == k]
            if got != [key]:
                failures += 1
        # distinct keys never name isomorphic graphs; only graphs sharing edge
        # count and colour multiset can be isomorphic, so compare within those
        groups: dict = {}
        for key, canons in by_key.items():
            (edges, colors), = canons
            groups.setdefault((len(edges), tuple(sorted(colors))), []).append(colored_graph(k, edges, colors))
        for graphs in groups.values():
            for a, b in itertools.combinations(graphs, 2):
                if same_colored_graph(a, b):
                    failures += 1
    record_property("detail", f"{checked} coloured graphs, {failures} failures")
    assert failures == 0


# 3 ---------------------------------------------------------------------------

@pytest.mark.acceptance("3", "baseline and change formula fixtures")
def test_metric_formula_fixtures(record_property):
    days = date_range(date(2021, 8, 1), date(2021, 9, 30))
    const = DailySeries("c", {d: 7.0 for d in days})
    ch = pct_change(const, compute_baseline(const))
    assert all(e.change == 0.0 for e in ch.entries.values())

    rng = np.random.default_rng(3)
    raw = DailySeries("r", {d: float(v) for d, v in zip(days, rng.uniform(1, 100, len(days)))})
    base = pct_change(raw, compute_baseline(raw))
    worst = 0.0
    for k in (0.5, 2, 10):
        scaled = raw.scaled(k)
        other = pct_change(scaled, compute_baseline(scaled))
        for d, e in base.entries.items():
            worst = max(worst, abs(e.change - other.entries[d].change))
    assert worst <= 1e-12

    table = compute_baseline(const, BASELINE_WINDOW)
    assert all(n == 3 for n in table.samples.values())
    assert len(table.samples) == 7
    record_property("detail", f"max scale deviation {worst:.1e}")


# 4 ---------------------------------------------------------------------------

@pytest.mark.parametrize("cutoff,days", [
    (date(2021, 9, 3), 8), (date(2021, 9, 5), 10), (date(2021, 9, 6), 11),
    (date(2021, 9, 7), 12), (date(2021, 9, 12), 17),
])
@pytest.mark.acceptance("4", "recovery rule on fixture series with known cutoffs")
def test_recovery_rule_fixtures(cutoff, days, record_property):
    cal = date_range(date(2021, 8, 1), date(2021, 9, 30))
    values = {}
    for d in cal:
        if d < date(2021, 8, 22):
            values[d] = 100.0
        elif date(2021, 8, 26) <= d < cutoff - timedelta(days=1):
            values[d] = 60.0  # -40%
        else:
            values[d] = 103.0  # +3%
    s = DailySeries("fixture", values)
    report = recovery_duration(pct_change(s, compute_baseline(s)))
    record_property("detail", f"{report.recovery_days} ({report.cutoff_date})")
    assert report.cutoff_date == cutoff
    assert report.recovery_days == days


# 5 ---------------------------------------------------------------------------

@pytest.mark.acceptance("5", "haversine agrees with an independent implementation")
def test_haversine(record_property):
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(1000):
        lat1, lat2 = rng.uniform(-89.9, 89.9, 2)
        lng1, lng2 = rng.uniform(-180, 180, 2)
        ours = haversine_miles((lat1, lng1), (lat2, lng2))
        ref = haversine_reference(lat1, lng1, lat2, lng2)
        if ref > 1e-9:
            worst = max(worst, abs(ours - ref) / ref)
    assert worst <= 1e-6
    assert haversine_miles((29.9511, -90.0715), (29.9511, -90.0715)) == 0.0
    anti = haversine_miles((10.0, 20.0), (-10.0, -160.0))
    assert abs(anti - math.pi * EARTH_RADIUS_MI) / (math.pi * EARTH_RADIUS_MI) <= 1e-6
    record_property("detail", f"max relative error {worst:.1e}")


# 6 ---------------------------------------------------------------------------

SCENARIO = dict(seed=2021, n_devices=5000, n_pois=800, suppression={"Restaurants": 0.4},
                disruption_window=(date(2021, 8, 26), date(2021, 9, 1)), recovery_ramp=5)


@pytest.fixture(scope="module")
def roundtrip(tmp_path_factory):
    root = tmp_path_factory.mktemp("roundtrip")
    t0 = time.perf_counter()
    scenario = generate_scenario(ScenarioConfig(**SCENARIO), root / "scenario")
    cfg = PipelineConfig(stops=str(root / "scenario" / "stops.csv"), pois=str(root / "scenario" / "pois.csv"),
                         out=str(root / "out"))
    bundle = run_pipeline(cfg)
    elapsed = time.perf_counter() - t0
    return scenario, bundle, elapsed


def _cluster_report(bundle, name):
    return next(r for r in bundle.cluster_recoveries if r.metric == f"cluster:{name}:frequency")


@pytest.mark.acceptance("6", "synthetic round trip recovers the injected disruption")
def test_roundtrip_dining_impact_matches_closed_form(roundtrip, record_property):
    scenario, bundle, _ = roundtrip
    keys = bundle.assignment.members("dining-out")
    event = date_range(date(2021, 8, 26), date(2021, 9, 2))
    baseline_days = date_range(*BASELINE_WINDOW)
    cats = [scenario.model.config.categories[c] for c in scenario.model.poi_category]
    expected = expected_cluster_change(scenario.model, keys, event, baseline_days, "Restaurants",
                                       [p.poi_id for p in scenario.pois], cats)
    exp_date = max(event, key=lambda d: (abs(expected[d]), -d.toordinal()))
    observed = _cluster_report(bundle, "dining-out").max_impact
    record_property("detail", f"observed {observed.change:+.3f} ({observed.date}), "
                              f"closed form {expected[exp_date]:+.3f} ({exp_date})")
    assert abs(observed.change - expected[exp_date]) <= 0.10


@pytest.mark.acceptance("6", "synthetic round trip recovers the injected disruption")
def test_roundtrip_recovery_date(roundtrip, record_property):
    scenario, bundle, _ = roundtrip
    truth = date.fromisoformat(scenario.ground_truth["recovery_date"])
    report = _cluster_report(bundle, "dining-out")
    record_property("detail", f"cutoff {report.cutoff_date}, injected {truth}")
    assert report.cutoff_date is not None
    assert abs((report.cutoff_date - truth).days) <= 2


@pytest.mark.acceptance("6", "synthetic round trip recovers the injected disruption")
def test_roundtrip_healthcare_unaffected(roundtrip, record_property):
    _, bundle, _ = roundtrip
    impact = _cluster_report(bundle, "healthcare").max_impact
    record_property("detail", f"healthcare max impact {impact.change:+.3f} ({impact.date})")
    assert abs(impact.change) < 0.10


@pytest.mark.acceptance("6", "synthetic round trip recovers the injected disruption")
def test_roundtrip_runtime(roundtrip, record_property):
    _, _, elapsed = roundtrip
    record_property("detail", f"{elapsed:.1f} s for 5000 devices, 800 POIs, 61 days")
    assert elapsed < 300


# 7 ---------------------------------------------------------------------------

def _random_day(n, m, seed, day=DAY):
    rng = np.random.default_rng(seed)
    edges = set()
    while len(edges) < m:
        u, v = rng.integers(n, size=2)
        if u != v:
            edges.add((min(u, v), max(u, v)))
    cats = load_category_table().names
    attrs = {f"p{i:05d}": NodeAttr(cats[i % len(cats)], 29.8 + (i % 97) / 100, -91.0 + (i % 89) / 100) for i in range(n)}
    return PlaceNetwork.from_edges(day, [(f"p{u:05d}", f"p{v:05d}") for u, v in edges], attrs)


@pytest.mark.acceptance("7", "census performance and day-level parallel speedup")
def test_single_day_census_time(record_property):
    net = _random_day(10_000, 50_000, 7)
    t = time.perf_counter()
    c = enumerate_census(net)
    elapsed = time.perf_counter() - t
    record_property("detail", f"{elapsed:.1f} s, {c.n_enumerated} instances")
    assert elapsed < 120


@pytest.mark.acceptance("7", "census performance and day-level parallel speedup")
def test_parallel_speedup(record_property):
    days = [_random_day(2_000, 8_000, 100 + i, DAY + timedelta(days=i)) for i in range(61)]
    enumerate_census(days[0])  # warm the compiled kernels
    # keep only class counts so the pool does not fork a parent holding every result
    t = time.perf_counter()
    serial = [c.class_counts for c in census_many(days, n_jobs=1)]
    t_serial = time.perf_counter() - t
    gc.collect()
    t = time.perf_counter()
    parallel = [c.class_counts for c in census_many(days, n_jobs=8)]
    t_parallel = time.perf_counter() - t
    speedup = t_serial / t_parallel
    record_property("detail", f"speedup {speedup:.2f}x on 8 workers ({os.cpu_count()} CPUs visible), "
                              f"serial {t_serial:.1f} s, parallel {t_parallel:.1f} s")
    assert serial == parallel
    assert speedup >= 3.0


# 8 ---------------------------------------------------------------------------

@pytest.mark.acceptance("8", "identical runs give byte-identical bundles")
def test_determinism(tmp_path, record_property):
    generate_scenario(ScenarioConfig(seed=8, n_devices=400, n_pois=120, suppression={"Restaurants": 0.4}),
                      tmp_path / "sc")
    outs = []
    for run in ("a", "b"):
        out = tmp_path / run
        code = cli_main(["run", "--stops", str(tmp_path / "sc" / "stops.csv"), "--pois",
                         str(tmp_path / "sc" / "pois.csv"), "--out", str(out), "--seed", "3"])
        assert code == 0
        outs.append({p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()})
    record_property("detail", f"{len(outs[0])} files compared")
    assert outs[0].keys() == outs[1].keys()
    assert all(outs[0][k] == outs[1][k] for k in outs[0])
