"""Global properties of a daily network of places."""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import astuple, dataclass
from datetime import date
from typing import IO, Iterable, Sequence

import networkx as nx
import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .network import PlaceNetwork

PROPS_FIELDS = ("date", "nodes", "edges", "avg_degree", "density", "avg_clustering", "diameter", "modularity")


@dataclass(frozen=True)
class GlobalProps:
    date: date
    node_count: int
    edge_count: int
    avg_degree: float
    density: float
    avg_clustering: float
    diameter: int
    modularity: float
    empty: bool = False


def largest_component(g: nx.Graph) -> set:
    """Largest connected component; ties go to the one holding the smallest node."""
    return min(nx.connected_components(g), key=lambda c: (-len(c), min(c)))


def compute_global_props(network: PlaceNetwork, seed: int = 0) -> GlobalProps:
    """Size, degree, density, clustering, diameter and modularity of one day.

    Clustering is the unweighted mean local coefficient.  Diameter counts
    hops within the largest connected component.  Modularity is the weighted
    modularity of a seeded Louvain partition.
    """
    n, m = network.node_count, network.edge_count
    if n == 0:
        return GlobalProps(network.date, 0, 0, 0.0, 0.0, 0.0, 0, 0.0, empty=True)
    g = network.to_networkx()
    avg_degree = 2.0 * m / n
    density = nx.density(g)
    clustering = nx.average_clustering(g)
    if m == 0:
        return GlobalProps(network.date, n, 0, avg_degree, density, clustering, 0, 0.0)
    lcc = g.subgraph(largest_component(g))
    diameter = nx.diameter(lcc, usebounds=True) if lcc.number_of_nodes() > 1 else 0
    parts = nx.community.louvain_communities(g, weight="weight", seed=seed)
    parts = sorted((sorted(p) for p in parts), key=lambda p: p[0])
    q = nx.community.modularity(g, parts, weight="weight")
    return GlobalProps(network.date, n, m, avg_degree, density, clustering, int(diameter), float(q))


def props_many(networks: Sequence[PlaceNetwork], seed: int = 0, n_jobs: int = 1) -> list[GlobalProps]:
    if n_jobs <= 1 or len(networks) <= 1:
        return [compute_global_props(n, seed) for n in networks]
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(compute_global_props, networks, [seed] * len(networks)))


def write_props_csv(props: Iterable[GlobalProps], fh: IO[str]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(PROPS_FIELDS)
    for p in props:
        w.writerow((p.date.isoformat(), p.node_count, p.edge_count, repr(p.avg_degree), repr(p.density),
                    repr(p.avg_clustering), p.diameter, repr(p.modularity)))


def read_props_csv(fh: IO[str]) -> list[GlobalProps]:
    out = []
    for row in csv.DictReader(fh):
        out.append(GlobalProps(
            date.fromisoformat(row["date"]), int(row["nodes"]), int(row["edges"]), float(row["avg_degree"]),
            float(row["density"]), float(row["avg_clustering"]), int(row["diameter"]), float(row["modularity"]),
            empty=int(row["nodes"]) == 0,
        ))
    return out


class NetworkProps(BaseEstimator, TransformerMixin):
    """Daily networks -> (n_days, 7) matrix of global properties."""

    feature_names = PROPS_FIELDS[1:]

    def __init__(self, seed=0, n_jobs=1):
        self.seed = seed
        self.n_jobs = n_jobs

    def fit(self, X=None, y=None):
        return self

    def transform(self, X: Sequence[PlaceNetwork]) -> np.ndarray:
        rows = [astuple(p)[1:8] for p in props_many(X, self.seed, self.n_jobs)]
        return np.asarray(rows, dtype=float).reshape(len(rows), 7)

    def get_feature_names_out(self, input_features=None):
        return np.array(self.feature_names, dtype=object)
