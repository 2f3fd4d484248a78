"""Daily undirected, weighted networks of places."""

from __future__ import annotations

import csv
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass
from datetime import date
from typing import IO, Iterable, Mapping

import networkx as nx
import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .ingest import (
    DEFAULT_MIN_DWELL,
    DEFAULT_TZ_OFFSET,
    PoiInfo,
    PoiRecord,
    Transition,
    VisitStop,
    attach_categories,
    extract_transitions,
    filter_visits,
    load_category_table,
    local_date,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True, slots=True)
class NodeAttr:
    category: str | None
    lat: float | None
    lng: float | None

    @property
    def has_coords(self) -> bool:
        return self.lat is not None and self.lng is not None


@dataclass(frozen=True)
class PlaceNetwork:
    """One day's network of places.

    ``edges`` maps a sorted ``(u, v)`` POI pair to its visit count.  Nodes
    absent from the POI index are listed in ``unindexed``.
    """

    date: date
    nodes: Mapping[str, NodeAttr]
    edges: Mapping[tuple[str, str], int]
    unindexed: tuple[str, ...] = ()

    def __post_init__(self):
        for (u, v), w in self.edges.items():
            if u == v:
                raise ValueError(f"self-loop on {u}")
            if u > v:
                raise ValueError(f"edge ({u}, {v}) not stored in sorted order")
            if u not in self.nodes or v not in self.nodes:
                raise ValueError(f"edge ({u}, {v}) has an endpoint outside nodes")
            if int(w) != w or w < 1:
                raise ValueError(f"edge ({u}, {v}) has non-positive weight {w}")

    @property
    def node_count(self) -> int:
        return len(self.nodes)

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    def total_weight(self) -> int:
        return int(sum(self.edges.values()))

    def degree(self) -> dict[str, int]:
        deg = dict.fromkeys(self.nodes, 0)
        for u, v in self.edges:
            deg[u] += 1
            deg[v] += 1
        return deg

    def to_networkx(self) -> nx.Graph:
        """Graph with nodes and edges inserted in sorted order (stable iteration)."""
        g = nx.Graph()
        for n in sorted(self.nodes):
            a = self.nodes[n]
            g.add_node(n, category=a.category, lat=a.lat, lng=a.lng)
        for (u, v) in sorted(self.edges):
            g.add_edge(u, v, weight=self.edges[(u, v)])
        return g

    def to_dict(self) -> dict:
        return {
            "date": self.date.isoformat(),
            "nodes": [
                {"poi_id": n, "category": a.category, "lat": a.lat, "lng": a.lng}
                for n, a in sorted(self.nodes.items())
            ],
            "edges": [{"u": u, "v": v, "w": int(w)} for (u, v), w in sorted(self.edges.items())],
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "PlaceNetwork":
        nodes = {
            d["poi_id"]: NodeAttr(d.get("category"), d.get("lat"), d.get("lng"))
            for d in payload["nodes"]
        }
        edges = {}
        for e in payload["edges"]:
            u, v = sorted((e["u"], e["v"]))
            edges[(u, v)] = int(e["w"])
        return cls(date.fromisoformat(payload["date"]), nodes, edges)

    def write_edge_csv(self, fh: IO[str]) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("u", "v", "w"))
        for (u, v), wt in sorted(self.edges.items()):
            w.writerow((u, v, int(wt)))

    @classmethod
    def from_edges(cls, day: date, edges: Iterable[tuple], attrs: Mapping[str, NodeAttr] | None = None) -> "PlaceNetwork":
        """Convenience constructor from ``(u, v)`` or ``(u, v, w)`` tuples."""
        attrs = attrs or {}
        agg: Counter = Counter()
        nodes: dict[str, NodeAttr] = {}
        for e in edges:
            u, v = str(e[0]), str(e[1])
            if u == v:
                continue
            w = int(e[2]) if len(e) > 2 else 1
            agg[tuple(sorted((u, v)))] += w
            for n in (u, v):
                nodes.setdefault(n, attrs.get(n, NodeAttr(None, None, None)))
        for n, a in attrs.items():
            nodes.setdefault(n, a)
        return cls(day, nodes, dict(agg))


@dataclass(frozen=True, slots=True)
class MobilityStats:
    date: date
    device_count: int
    flow_count: int


def build_daily_network(
    transitions: Iterable[Transition],
    day: date,
    poi_index: Mapping[str, PoiInfo],
) -> PlaceNetwork:
    """Aggregate one day's transitions; u->v and v->u share one edge weight."""
    weights: Counter = Counter()
    for t in transitions:
        if t.date != day:
            raise ValueError(f"transition dated {t.date} passed for {day}")
        u, v = (t.origin_poi, t.dest_poi) if t.origin_poi < t.dest_poi else (t.dest_poi, t.origin_poi)
        weights[(u, v)] += 1

    nodes: dict[str, NodeAttr] = {}
    missing: set[str] = set()
    for pair in weights:
        for p in pair:
            if p in nodes:
                continue
            info = poi_index.get(p)
            if info is None:
                missing.add(p)
                nodes[p] = NodeAttr(None, None, None)
            else:
                nodes[p] = NodeAttr(info.category, info.lat, info.lng)
    if missing:
        logger.warning("%s: %d POIs absent from the POI index", day, len(missing))
    return PlaceNetwork(day, nodes, dict(weights), tuple(sorted(missing)))


def group_by_date(transitions: Iterable[Transition]) -> dict[date, list[Transition]]:
    out: dict[date, list[Transition]] = defaultdict(list)
    for t in transitions:
        out[t.date].append(t)
    return dict(out)


def build_daily_networks(
    transitions: Iterable[Transition],
    poi_index: Mapping[str, PoiInfo],
    dates: Iterable[date],
) -> list[PlaceNetwork]:
    """One network per requested date (empty networks for days with no flows)."""
    grouped = group_by_date(transitions)
    return [build_daily_network(grouped.get(d, ()), d, poi_index) for d in dates]


def daily_mobility_stats(
    stops: Iterable[VisitStop],
    transitions: Iterable[Transition],
    day: date,
    timezone_offset: float = DEFAULT_TZ_OFFSET,
) -> MobilityStats:
    devices = {s.device_id for s in stops if local_date(s.arrival, timezone_offset) == day}
    flows = sum(1 for t in transitions if t.date == day)
    return MobilityStats(day, len(devices), flows)


def mobility_stats_by_date(
    stops: Iterable[VisitStop],
    transitions: Iterable[Transition],
    dates: Iterable[date],
    timezone_offset: float = DEFAULT_TZ_OFFSET,
) -> list[MobilityStats]:
    devices: dict[date, set] = defaultdict(set)
    for s in stops:
        devices[local_date(s.arrival, timezone_offset)].add(s.device_id)
    flows: Counter = Counter(t.date for t in transitions)
    return [MobilityStats(d, len(devices.get(d, ())), flows.get(d, 0)) for d in dates]


class PlaceNetworkBuilder(BaseEstimator, TransformerMixin):
    """Stops -> list of daily :class:`PlaceNetwork`.

    ``fit`` takes the POI catalogue (records) and learns the categorized
    POI index; ``transform`` takes stop records.
    """

    def __init__(
        self,
        dates=None,
        min_dwell=DEFAULT_MIN_DWELL,
        timezone_offset=DEFAULT_TZ_OFFSET,
        max_gap=None,
        category_table=None,
    ):
        self.dates = dates
        self.min_dwell = min_dwell
        self.timezone_offset = timezone_offset
        self.max_gap = max_gap
        self.category_table = category_table

    def fit(self, X: Iterable[PoiRecord], y=None):
        table = self.category_table if self.category_table is not None else load_category_table()
        self.poi_index_ = attach_categories(X, table)
        return self

    def transform(self, X: Iterable[VisitStop]) -> list[PlaceNetwork]:
        if not hasattr(self, "poi_index_"):
            from sklearn.exceptions import NotFittedError

            raise NotFittedError("PlaceNetworkBuilder is not fitted")
        visits = filter_visits(X, self.min_dwell)
        trans = extract_transitions(visits, self.timezone_offset, self.max_gap)
        dates = self.dates
        if dates is None:
            dates = sorted({t.date for t in trans})
        return build_daily_networks(trans, self.poi_index_, dates)


def adjacency_arrays(network: PlaceNetwork, order: list[str] | None = None):
    """CSR adjacency (indptr, indices) with sorted neighbour lists, plus the node order."""
    order = sorted(network.nodes) if order is None else order
    pos = {n: i for i, n in enumerate(order)}
    n = len(order)
    if network.edges:
        e = np.array([(pos[u], pos[v]) for u, v in network.edges], dtype=np.int64)
        src = np.concatenate([e[:, 0], e[:, 1]])
        dst = np.concatenate([e[:, 1], e[:, 0]])
    else:
        src = dst = np.zeros(0, dtype=np.int64)
    idx = np.lexsort((dst, src))
    src, dst = src[idx], dst[idx]
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(indptr, src + 1, 1)
    np.cumsum(indptr, out=indptr)
    return indptr, dst.astype(np.int32), order
