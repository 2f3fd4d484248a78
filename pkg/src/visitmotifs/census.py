"""Attributed motif census: connected induced subgraphs on 2-4 nodes.

Enumeration is ESU-style (every connected vertex set of size <= 4 is reached
exactly once, from its smallest vertex) and runs in a numba kernel.  Each
instance is classified through a lookup table over its local adjacency
bitmask; its attributed key is the lexicographically smallest colour
sequence over the vertex permutations that map it onto the class's
reference structure.
"""

from __future__ import annotations

import csv
import enum
import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import date
from typing import IO, Iterable, Iterator, Mapping, Sequence

import numba
import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .network import PlaceNetwork, adjacency_arrays

EARTH_RADIUS_MI = 3958.7613

CONVENTIONS = ("k4-first", "diamond-first")


class NotAMotif(ValueError):
    pass


class ProximityUnavailable(ValueError):
    pass


class CensusBudgetExceeded(RuntimeError):
    pass


class MotifClass(str, enum.Enum):
    M2_1 = "M2-1"
    M3_1 = "M3-1"
    M3_2 = "M3-2"
    M4_1 = "M4-1"
    M4_2 = "M4-2"
    M4_3 = "M4-3"
    M4_4 = "M4-4"
    M4_5 = "M4-5"
    M4_6 = "M4-6"

    def __str__(self) -> str:
        return self.value

    @property
    def size(self) -> int:
        return int(self.value[1])


# Vertex-pair order for adjacency bitmasks; the first 1/3 pairs cover k=2/3.
PAIRS = ((0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3))
_NPAIRS = {2: 1, 3: 3, 4: 6}

# Structures in a fixed internal order; edges are on reference vertex order.
STRUCTURES = (
    ("edge", 2, ((0, 1),)),
    ("path3", 3, ((0, 1), (1, 2))),
    ("triangle", 3, ((0, 1), (0, 2), (1, 2))),
    ("complete4", 4, PAIRS),
    ("diamond", 4, ((0, 1), (1, 2), (2, 3), (0, 3), (0, 2))),
    ("cycle4", 4, ((0, 1), (1, 2), (2, 3), (0, 3))),
    ("paw", 4, ((0, 1), (0, 2), (1, 2), (2, 3))),
    ("path4", 4, ((0, 1), (1, 2), (2, 3))),
    ("star", 4, ((0, 1), (0, 2), (0, 3))),
)
N_STRUCT = len(STRUCTURES)
_CLASS_ORDER = tuple(MotifClass)


def _check_convention(convention: str) -> None:
    if convention not in CONVENTIONS:
        raise ValueError(f"unknown M4 convention {convention!r}; expected one of {CONVENTIONS}")


def class_of_structure(struct: int, convention: str = "k4-first") -> MotifClass:
    _check_convention(convention)
    if convention == "diamond-first" and struct in (3, 4):
        struct = 7 - struct
    return _CLASS_ORDER[struct]


def structure_of_class(motif: MotifClass | str, convention: str = "k4-first") -> int:
    _check_convention(convention)
    s = _CLASS_ORDER.index(MotifClass(motif))
    if convention == "diamond-first" and s in (3, 4):
        s = 7 - s
    return s


def reference_edges(motif: MotifClass | str, convention: str = "k4-first") -> tuple[tuple[int, int], ...]:
    return STRUCTURES[structure_of_class(motif, convention)][2]


def _mask_of(edges: Iterable[tuple[int, int]]) -> int:
    m = 0
    for a, b in edges:
        a, b = min(a, b), max(a, b)
        m |= 1 << PAIRS.index((a, b))
    return m


def _connected(k: int, mask: int) -> bool:
    seen = {0}
    stack = [0]
    while stack:
        x = stack.pop()
        for bit, (a, b) in enumerate(PAIRS[: _NPAIRS[k]]):
            if mask >> bit & 1 and x in (a, b):
                y = b if x == a else a
                if y not in seen:
                    seen.add(y)
                    stack.append(y)
    return len(seen) == k


def _build_tables():
    struct_tab = np.full((5, 64), -1, dtype=np.int8)
    perm_tab = np.zeros((5, 64, 24, 4), dtype=np.int8)
    nperm_tab = np.zeros((5, 64), dtype=np.int8)
    ref_masks = {s: _mask_of(edges) for s, (_, _, edges) in enumerate(STRUCTURES)}
    for k in (2, 3, 4):
        for mask in range(1 << _NPAIRS[k]):
            if not _connected(k, mask):
                continue
            for s, (_, ks, _) in enumerate(STRUCTURES):
                if ks != k:
                    continue
                perms = []
                for p in itertools.permutations(range(k)):
                    # reference position i holds instance vertex p[i]
                    pm = 0
                    for bit, (a, b) in enumerate(PAIRS[: _NPAIRS[k]]):
                        if ref_masks[s] >> bit & 1:
                            pm |= 1 << PAIRS.index(tuple(sorted((p[a], p[b]))))
                    if pm == mask:
                        perms.append(p)
                if perms:
                    struct_tab[k, mask] = s
                    nperm_tab[k, mask] = len(perms)
                    for i, p in enumerate(perms):
                        perm_tab[k, mask, i, :k] = p
                    break
    return struct_tab, perm_tab, nperm_tab


STRUCT_TAB, PERM_TAB, NPERM_TAB = _build_tables()


def classify_connected_subgraph(
    edges: Iterable[tuple], nodes: Iterable | None = None, convention: str = "k4-first"
) -> MotifClass:
    """Class of a small connected simple graph given as an edge list.

    Vertices are taken from *edges* (plus *nodes*, for isolated vertices).
    """
    edges = [tuple(e[:2]) for e in edges]
    verts = sorted({v for e in edges for v in e} | set(nodes or ()), key=repr)
    k = len(verts)
    if k not in (2, 3, 4):
        raise NotAMotif(f"{k} vertices; motifs have 2-4")
    pos = {v: i for i, v in enumerate(verts)}
    if any(a == b for a, b in edges):
        raise NotAMotif("self-loop")
    mask = _mask_of((pos[a], pos[b]) for a, b in edges)
    s = STRUCT_TAB[k, mask]
    if s < 0:
        raise NotAMotif("graph is disconnected")
    return class_of_structure(int(s), convention)


@dataclass(frozen=True, order=True, slots=True)
class AttributedKey:
    motif: MotifClass
    colors: tuple[str, ...]

    def __str__(self) -> str:
        return f"{self.motif.value}|{','.join(self.colors)}"

    @classmethod
    def parse(cls, text: str) -> "AttributedKey":
        head, _, tail = text.partition("|")
        return cls(MotifClass(head), tuple(tail.split(",")) if tail else ())


def attributed_key(
    edges: Iterable[tuple], colors: Mapping, convention: str = "k4-first"
) -> AttributedKey | None:
    """Canonical attributed key of a small coloured graph; None if a vertex lacks a colour."""
    edges = [tuple(e[:2]) for e in edges]
    verts = sorted({v for e in edges for v in e} | set(colors), key=repr)
    motif = classify_connected_subgraph(edges, verts, convention)
    if any(colors.get(v) is None for v in verts):
        return None
    k = len(verts)
    pos = {v: i for i, v in enumerate(verts)}
    mask = _mask_of((pos[a], pos[b]) for a, b in edges)
    best = None
    for i in range(NPERM_TAB[k, mask]):
        p = PERM_TAB[k, mask, i, :k]
        seq = tuple(colors[verts[j]] for j in p)
        if best is None or seq < best:
            best = seq
    return AttributedKey(motif, best)


def haversine_miles(a: Sequence[float], b: Sequence[float]) -> float:
    """Great-circle distance in miles between two (lat, lng) points in degrees."""
    for lat, lng in (a, b):
        if not (-90.0 <= lat <= 90.0 and -180.0 <= lng <= 180.0):
            raise ValueError(f"coordinate out of range: ({lat}, {lng})")
    lat1, lng1, lat2, lng2 = map(math.radians, (a[0], a[1], b[0], b[1]))
    h = math.sin((lat1 - lat2) / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin((lng1 - lng2) / 2) ** 2
    return 2 * EARTH_RADIUS_MI * math.asin(min(1.0, math.sqrt(h)))


@numba.njit(cache=True)
def _hav(lat1, lng1, lat2, lng2):
    h = np.sin((lat1 - lat2) / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lng1 - lng2) / 2) ** 2
    return 2.0 * EARTH_RADIUS_MI * np.arcsin(min(1.0, np.sqrt(h)))


@numba.njit(cache=True)
def _has_edge(indptr, indices, a, b):
    lo = indptr[a]
    hi = indptr[a + 1]
    while lo < hi:
        mid = (lo + hi) >> 1
        x = indices[mid]
        if x < b:
            lo = mid + 1
        elif x > b:
            hi = mid
        else:
            return True
    return False


@numba.njit(cache=True)
def _esu(indptr, indices, fill, out):
    """Walk the ESU tree to depth 4. Returns the number of sets of size 2-4.

    With ``fill`` set, each set is written to a row of ``out`` (-1 padded).
    """
    n = indptr.shape[0] - 1
    maxdeg = 0
    for v in range(n):
        d = indptr[v + 1] - indptr[v]
        if d > maxdeg:
            maxdeg = d
    ext1 = np.empty(maxdeg + 1, np.int32)
    ext2 = np.empty(2 * maxdeg + 1, np.int32)
    ext3 = np.empty(3 * maxdeg + 1, np.int32)
    mark_v = np.full(n, -1, np.int64)
    mark_w = np.full(n, -1, np.int64)
    stamp = 0
    row = 0
    for v in range(n):
        mark_v[v] = v
        n1 = 0
        for p in range(indptr[v], indptr[v + 1]):
            u = indices[p]
            mark_v[u] = v
            if u > v:
                ext1[n1] = u
                n1 += 1
        for i in range(n1):
            w1 = ext1[i]
            if fill:
                out[row, 0] = v
                out[row, 1] = w1
                out[row, 2] = -1
                out[row, 3] = -1
            row += 1
            stamp += 1
            mark_w[w1] = stamp
            n2 = 0
            for j in range(i + 1, n1):
                ext2[n2] = ext1[j]
                n2 += 1
            for p in range(indptr[w1], indptr[w1 + 1]):
                u = indices[p]
                mark_w[u] = stamp
                if u > v and mark_v[u] != v:
                    ext2[n2] = u
                    n2 += 1
            for j in range(n2):
                w2 = ext2[j]
                if fill:
                    out[row, 0] = v
                    out[row, 1] = w1
                    out[row, 2] = w2
                    out[row, 3] = -1
                row += 1
                n3 = 0
                for q in range(j + 1, n2):
                    ext3[n3] = ext2[q]
                    n3 += 1
                for p in range(indptr[w2], indptr[w2 + 1]):
                    u = indices[p]
                    if u > v and mark_v[u] != v and mark_w[u] != stamp:
                        ext3[n3] = u
                        n3 += 1
                if fill:
                    for q in range(n3):
                        out[row + q, 0] = v
                        out[row + q, 1] = w1
                        out[row + q, 2] = w2
                        out[row + q, 3] = ext3[q]
                row += n3
    return row


@numba.njit(cache=True)
def _describe(members, indptr, indices, colors, base, lat, lng, struct_tab, perm_tab, nperm_tab):
    """Per-instance structure id, colour code (-1 if any vertex uncoloured) and proximity."""
    m = members.shape[0]
    structs = np.empty(m, np.int8)
    codes = np.empty(m, np.int64)
    prox = np.empty(m, np.float64)
    pa = np.array([0, 0, 1, 0, 1, 2])
    pb = np.array([1, 2, 2, 3, 3, 3])
    npairs = np.array([0, 0, 1, 3, 6])
    for r in range(m):
        k = 4
        while members[r, k - 1] < 0:
            k -= 1
        mask = 0
        dsum = 0.0
        ne = 0
        missing = False
        for b in range(npairs[k]):
            a_ = members[r, pa[b]]
            b_ = members[r, pb[b]]
            if _has_edge(indptr, indices, a_, b_):
                mask |= 1 << b
                ne += 1
                if np.isnan(lat[a_]) or np.isnan(lat[b_]):
                    missing = True
                else:
                    dsum += _hav(lat[a_], lng[a_], lat[b_], lng[b_])
        for i in range(k):
            if np.isnan(lat[members[r, i]]):
                missing = True
        structs[r] = struct_tab[k, mask]
        prox[r] = np.nan if missing else dsum / ne
        uncoloured = False
        for i in range(k):
            if colors[members[r, i]] < 0:
                uncoloured = True
        if uncoloured:
            codes[r] = -1
            continue
        best = -1
        for t in range(nperm_tab[k, mask]):
            c = 0
            for i in range(k):
                c = c * base + colors[members[r, perm_tab[k, mask, t, i]]]
            if best < 0 or c < best:
                best = c
        codes[r] = best
    return structs, codes, prox


@dataclass
class InstanceTable:
    """Columnar view of every motif instance in one network."""

    nodes: list[str]
    categories: list[str]
    members: np.ndarray  # (m, 4) int32 node positions, -1 padded
    structs: np.ndarray
    codes: np.ndarray
    proximity: np.ndarray

    def __len__(self) -> int:
        return self.members.shape[0]

    def decode_colors(self, struct: int, code: int) -> tuple[str, ...]:
        k = STRUCTURES[struct][1]
        base = max(len(self.categories), 1)
        out = []
        for _ in range(k):
            code, c = divmod(code, base)
            out.append(self.categories[c])
        return tuple(reversed(out))


def count_subgraphs(network: PlaceNetwork) -> int:
    """Number of connected induced subgraphs on 2-4 nodes (the enumeration cost)."""
    indptr, indices, _ = adjacency_arrays(network)
    return int(_esu(indptr, indices, False, np.empty((0, 4), np.int32)))


def instance_table(network: PlaceNetwork, max_subgraphs: int | None = None) -> InstanceTable:
    indptr, indices, order = adjacency_arrays(network)
    dummy = np.empty((0, 4), np.int32)
    total = int(_esu(indptr, indices, False, dummy))
    if max_subgraphs is not None and total > max_subgraphs:
        raise CensusBudgetExceeded(
            f"{network.date}: {total} subgraphs exceed the budget of {max_subgraphs}"
        )
    members = np.empty((total, 4), np.int32)
    _esu(indptr, indices, True, members)

    cats = sorted({a.category for a in network.nodes.values() if a.category is not None})
    cpos = {c: i for i, c in enumerate(cats)}
    colors = np.array(
        [cpos.get(network.nodes[n].category, -1) if network.nodes[n].category else -1 for n in order],
        dtype=np.int64,
    )
    lat = np.array([np.nan if network.nodes[n].lat is None else network.nodes[n].lat for n in order], float)
    lng = np.array([np.nan if network.nodes[n].lng is None else network.nodes[n].lng for n in order], float)
    structs, codes, prox = _describe(
        members, indptr, indices, colors, max(len(cats), 1),
        np.radians(lat), np.radians(lng), STRUCT_TAB, PERM_TAB, NPERM_TAB,
    )
    return InstanceTable(order, cats, members, structs, codes, prox)


@dataclass
class DailyCensus:
    date: date
    class_counts: dict[MotifClass, int]
    class_proximity: dict[MotifClass, float]
    attributed_counts: dict[AttributedKey, int] = field(default_factory=dict)
    attributed_proximity: dict[AttributedKey, float] = field(default_factory=dict)
    skipped_proximity_count: int = 0
    n_enumerated: int = 0

    def total(self) -> int:
        return sum(self.class_counts.values())

    def keys_of(self, motif: MotifClass) -> list[AttributedKey]:
        return sorted(k for k in self.attributed_counts if k.motif == motif)


def _nanmean_by(labels: np.ndarray, values: np.ndarray, size: int) -> tuple[np.ndarray, np.ndarray]:
    ok = ~np.isnan(values)
    n = np.bincount(labels[ok], minlength=size)
    s = np.bincount(labels[ok], weights=values[ok], minlength=size)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(n > 0, s / np.maximum(n, 1), np.nan)
    return mean, n


def census_from_table(day: date, table: InstanceTable, convention: str = "k4-first") -> DailyCensus:
    structs = table.structs.astype(np.int64)
    counts = np.bincount(structs, minlength=N_STRUCT)
    means, _ = _nanmean_by(structs, table.proximity, N_STRUCT)
    class_counts = {}
    class_prox = {}
    for s in range(N_STRUCT):
        cls = class_of_structure(s, convention)
        class_counts[cls] = int(counts[s])
        class_prox[cls] = float(means[s])

    attr_counts: dict[AttributedKey, int] = {}
    attr_prox: dict[AttributedKey, float] = {}
    ok = table.codes >= 0
    if ok.any():
        span = max(len(table.categories), 1) ** 4
        full = structs[ok] * span + table.codes[ok]
        uniq, inv = np.unique(full, return_inverse=True)
        kc = np.bincount(inv, minlength=len(uniq))
        km, _ = _nanmean_by(inv, table.proximity[ok], len(uniq))
        for i, f in enumerate(uniq):
            s, code = divmod(int(f), span)
            key = AttributedKey(class_of_structure(s, convention), table.decode_colors(s, code))
            attr_counts[key] = int(kc[i])
            attr_prox[key] = float(km[i])
    return DailyCensus(
        day,
        class_counts,
        class_prox,
        dict(sorted(attr_counts.items())),
        {k: attr_prox[k] for k in sorted(attr_prox)},
        int(np.isnan(table.proximity).sum()),
        len(table),
    )


def enumerate_census(
    network: PlaceNetwork, convention: str = "k4-first", max_subgraphs: int | None = None
) -> DailyCensus:
    """Count every connected induced 2-4 node subgraph of *network* once.

    Instances touching an uncategorized POI count toward their class only;
    instances touching a POI without coordinates are left out of proximity
    means and tallied in ``skipped_proximity_count``.
    """
    _check_convention(convention)
    return census_from_table(network.date, instance_table(network, max_subgraphs), convention)


def _census_job(args):
    network, convention, max_subgraphs = args
    return enumerate_census(network, convention, max_subgraphs)


def census_many(
    networks: Sequence[PlaceNetwork],
    convention: str = "k4-first",
    max_subgraphs: int | None = None,
    n_jobs: int = 1,
) -> list[DailyCensus]:
    """Census of several days, optionally across a process pool; output order follows input."""
    jobs = [(n, convention, max_subgraphs) for n in networks]
    if n_jobs <= 1 or len(jobs) <= 1:
        return [_census_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(_census_job, jobs, chunksize=1))


@dataclass(frozen=True)
class MotifInstance:
    motif: MotifClass
    members: tuple[str, ...]
    proximity: float | None = None


def iter_instances(network: PlaceNetwork, convention: str = "k4-first") -> Iterator[MotifInstance]:
    table = instance_table(network)
    for r in range(len(table)):
        mem = tuple(table.nodes[i] for i in table.members[r] if i >= 0)
        p = float(table.proximity[r])
        yield MotifInstance(
            class_of_structure(int(table.structs[r]), convention), mem, None if math.isnan(p) else p
        )


def motif_proximity(instance: MotifInstance | Sequence[str], network: PlaceNetwork) -> float:
    """Mean haversine length (miles) over the instance's induced edges."""
    members = instance.members if isinstance(instance, MotifInstance) else tuple(instance)
    total = 0.0
    n_edges = 0
    for a, b in itertools.combinations(members, 2):
        if (min(a, b), max(a, b)) not in network.edges:
            continue
        na, nb = network.nodes[a], network.nodes[b]
        if not (na.has_coords and nb.has_coords):
            raise ProximityUnavailable(f"missing coordinates on edge ({a}, {b})")
        total += haversine_miles((na.lat, na.lng), (nb.lat, nb.lng))
        n_edges += 1
    for m in members:
        if not network.nodes[m].has_coords:
            raise ProximityUnavailable(f"missing coordinates on {m}")
    if n_edges == 0:
        raise NotAMotif("instance has no induced edges")
    return total / n_edges


CENSUS_FIELDS = ("date", "kind", "key", "count", "mean_proximity_mi")


def _fmt_float(x: float) -> str:
    return "" if x is None or math.isnan(x) else repr(float(x))


def write_census_csv(censuses: Iterable[DailyCensus], fh: IO[str]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(CENSUS_FIELDS)
    for c in censuses:
        d = c.date.isoformat()
        for cls in MotifClass:
            w.writerow((d, "class", cls.value, c.class_counts.get(cls, 0), _fmt_float(c.class_proximity.get(cls, math.nan))))
        for key in sorted(c.attributed_counts):
            w.writerow((d, "attributed", str(key), c.attributed_counts[key], _fmt_float(c.attributed_proximity.get(key, math.nan))))


def read_census_csv(fh: IO[str]) -> list[DailyCensus]:
    by_date: dict[date, DailyCensus] = {}
    reader = csv.DictReader(fh)
    if reader.fieldnames is None or tuple(reader.fieldnames) != CENSUS_FIELDS:
        raise ValueError(f"census CSV header must be {','.join(CENSUS_FIELDS)}")
    for row in reader:
        d = date.fromisoformat(row["date"])
        c = by_date.setdefault(d, DailyCensus(d, {m: 0 for m in MotifClass}, {m: math.nan for m in MotifClass}))
        prox = float(row["mean_proximity_mi"]) if row["mean_proximity_mi"] else math.nan
        if row["kind"] == "class":
            m = MotifClass(row["key"])
            c.class_counts[m] = int(row["count"])
            c.class_proximity[m] = prox
        elif row["kind"] == "attributed":
            k = AttributedKey.parse(row["key"])
            c.attributed_counts[k] = int(row["count"])
            c.attributed_proximity[k] = prox
        else:
            raise ValueError(f"unknown census row kind {row['kind']!r}")
    return [by_date[d] for d in sorted(by_date)]


class MotifCensus(BaseEstimator, TransformerMixin):
    """Daily networks -> (n_days, 9) matrix of motif class counts.

    ``fit`` is stateless apart from recording the class labels; use
    :meth:`census` for the full per-day census including attributed keys.
    """

    def __init__(self, convention="k4-first", max_subgraphs=None, n_jobs=1):
        self.convention = convention
        self.max_subgraphs = max_subgraphs
        self.n_jobs = n_jobs

    def fit(self, X=None, y=None):
        _check_convention(self.convention)
        self.classes_ = np.array([m.value for m in MotifClass])
        return self

    def census(self, X: Sequence[PlaceNetwork]) -> list[DailyCensus]:
        return census_many(X, self.convention, self.max_subgraphs, self.n_jobs)

    def transform(self, X: Sequence[PlaceNetwork]) -> np.ndarray:
        rows = [[c.class_counts[m] for m in MotifClass] for c in self.census(X)]
        return np.asarray(rows, dtype=np.int64).reshape(len(rows), len(MotifClass))

    def get_feature_names_out(self, input_features=None):
        return np.array([m.value for m in MotifClass], dtype=object)
