"""Synthetic stop/POI scenarios with an injected disruption and known rates.

Each device belongs to a lifestyle segment with its own category mix and
lives in one of ``n_neighborhoods`` residential neighborhoods; its POI pools
are the nearest POIs of each category to its home, so devices sharing a
neighborhood also share pools.  Device-days are independent: the number of retained visits to category
``c`` is Poisson with mean ``visit_rate * weekday_mult * mix[c] * level[c]``
and each visit picks a POI uniformly from the device's pool of nearest
POIs of that category (a wider pool inside the disruption window).  Visit
times are uniform over the local day, so the retained visit sequence is an
i.i.d. draw from the device's POI distribution.  That makes expected
transition counts between POI pairs available in closed form, see
:class:`RateModel`.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from datetime import date, datetime, timedelta
from pathlib import Path
from typing import Sequence

import numpy as np

from .ingest import PoiRecord, VisitStop, load_category_table, write_pois, write_stops
from .metrics import CALENDAR, date_range

# Device segments: share of devices and each segment's category mix.  Mixes
# are kept to a few categories so that most POI pairs a segment links are
# either visited nearly every day or never, which keeps daily motif counts
# stable enough to read a disruption off them.
DEFAULT_SEGMENTS = {
    "commute": {"share": 0.35, "mix": {
        "Grocery Stores": 0.30, "Gasoline Stations": 0.25, "Financial Investment Service": 0.25,
        "Public Administration": 0.20,
    }},
    "healthcare": {"share": 0.30, "mix": {
        "Health Care": 0.50, "Grocery Stores": 0.25, "Gasoline Stations": 0.25,
    }},
    "dining": {"share": 0.20, "mix": {
        "Restaurants": 0.60, "Drinking Places": 0.20, "Clothing Stores": 0.20,
    }},
    "young": {"share": 0.15, "mix": {
        "Amusement and Recreation": 0.40, "Clothing Stores": 0.30, "Drinking Places": 0.30,
    }},
}

DAY_START_S = 7 * 3600
DAY_END_S = 22 * 3600


class ScenarioError(ValueError):
    pass


@dataclass
class ScenarioConfig:
    """Scenario parameters.

    Devices are split into ``segments`` (name -> share and category mix).
    Passing ``category_mix`` instead gives a single segment with that mix.
    """

    seed: int = 0
    n_devices: int = 1000
    n_pois: int = 200
    category_mix: dict[str, float] | None = None
    segments: dict[str, dict] | None = None
    bbox: tuple[float, float, float, float] = (29.80, 30.60, -91.30, -89.90)  # lat0, lat1, lng0, lng1
    calendar: tuple[date, date] = CALENDAR
    visit_rate: float = 6.0
    weekday_multiplier: float = 1.0
    weekend_multiplier: float = 0.8
    disruption_window: tuple[date, date] | None = (date(2021, 8, 26), date(2021, 9, 1))
    suppression: dict[str, float] = field(default_factory=dict)
    distance_inflation: float = 1.0
    recovery_ramp: int = 5
    pool_size: int = 2
    short_stop_rate: float = 0.3
    timezone_offset: float = -5.0
    n_neighborhoods: int = 300
    neighborhood_radius_mi: float = 0.0

    def segment_table(self) -> dict[str, dict]:
        if self.category_mix is not None:
            return {"all": {"share": 1.0, "mix": dict(self.category_mix)}}
        return self.segments if self.segments is not None else DEFAULT_SEGMENTS

    def overall_mix(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for seg in self.segment_table().values():
            for c, p in seg["mix"].items():
                out[c] = out.get(c, 0.0) + seg["share"] * p
        return out

    def validate(self) -> None:
        if self.n_devices < 1:
            raise ScenarioError("n_devices: must be >= 1")
        if self.n_pois < 1:
            raise ScenarioError("n_pois: must be >= 1")
        if self.category_mix is not None and self.segments is not None:
            raise ScenarioError("category_mix: give either category_mix or segments, not both")
        field_name = "category_mix" if self.category_mix is not None else "segments"
        known = set(load_category_table().names)
        table = self.segment_table()
        if not table:
            raise ScenarioError(f"{field_name}: empty")
        if abs(sum(seg.get("share", -1) for seg in table.values()) - 1.0) > 1e-9:
            raise ScenarioError(f"{field_name}: segment shares must sum to 1")
        for name, seg in table.items():
            mix = seg.get("mix") or {}
            if not mix or any(p < 0 for p in mix.values()):
                raise ScenarioError(f"{field_name}: segment {name!r} has an empty or negative mix")
            if abs(sum(mix.values()) - 1.0) > 1e-9:
                raise ScenarioError(f"{field_name}: mix of {name!r} sums to {sum(mix.values())}, not 1")
            unknown = sorted(set(mix) - known)
            if unknown:
                raise ScenarioError(f"{field_name}: unknown categories {unknown}")
        lat0, lat1, lng0, lng1 = self.bbox
        if not (-90 <= lat0 < lat1 <= 90 and -180 <= lng0 < lng1 <= 180):
            raise ScenarioError("bbox: must be (lat_min, lat_max, lng_min, lng_max) in range")
        if self.calendar[0] > self.calendar[1]:
            raise ScenarioError("calendar: start after end")
        if self.visit_rate <= 0:
            raise ScenarioError("visit_rate: must be > 0")
        if self.weekday_multiplier < 0 or self.weekend_multiplier < 0:
            raise ScenarioError("weekday_multiplier: multipliers must be >= 0")
        if self.disruption_window is not None:
            w0, w1 = self.disruption_window
            if not (self.calendar[0] <= w0 <= w1 <= self.calendar[1]):
                raise ScenarioError("disruption_window: must lie inside calendar")
        for cat, f in self.suppression.items():
            if cat not in known:
                raise ScenarioError(f"suppression: unknown category {cat!r}")
            if not 0.0 <= f <= 1.0:
                raise ScenarioError(f"suppression: factor for {cat!r} must be in [0, 1]")
        if self.distance_inflation < 1.0:
            raise ScenarioError("distance_inflation: must be >= 1")
        if self.recovery_ramp < 0:
            raise ScenarioError("recovery_ramp: must be >= 0")
        if self.pool_size < 1:
            raise ScenarioError("pool_size: must be >= 1")
        if self.short_stop_rate < 0:
            raise ScenarioError("short_stop_rate: must be >= 0")
        if self.n_neighborhoods < 0:
            raise ScenarioError("n_neighborhoods: must be >= 0")
        if self.neighborhood_radius_mi < 0:
            raise ScenarioError("neighborhood_radius_mi: must be >= 0")
        if self.n_pois < sum(1 for p in self.overall_mix().values() if p > 0):
            raise ScenarioError("n_pois: fewer POIs than categories with positive mix")

    @property
    def categories(self) -> list[str]:
        return load_category_table().names

    def to_dict(self) -> dict:
        d = asdict(self)
        d["calendar"] = [x.isoformat() for x in self.calendar]
        d["disruption_window"] = [x.isoformat() for x in self.disruption_window] if self.disruption_window else None
        d["bbox"] = list(self.bbox)
        return d

    @classmethod
    def from_dict(cls, payload: dict) -> "ScenarioConfig":
        payload = dict(payload)
        unknown = sorted(set(payload) - set(cls.__dataclass_fields__))
        if unknown:
            raise ScenarioError(f"unknown scenario fields {unknown}")
        for key in ("calendar", "disruption_window"):
            if payload.get(key) is not None:
                payload[key] = tuple(date.fromisoformat(str(x)) for x in payload[key])
        if "bbox" in payload:
            payload["bbox"] = tuple(payload["bbox"])
        return cls(**payload)


def _haversine_matrix(lat_a, lng_a, lat_b, lng_b) -> np.ndarray:
    la, ga, lb, gb = (np.radians(x) for x in (lat_a, lng_a, lat_b, lng_b))
    h = (np.sin((la[:, None] - lb[None, :]) / 2) ** 2
         + np.cos(la)[:, None] * np.cos(lb)[None, :] * np.sin((ga[:, None] - gb[None, :]) / 2) ** 2)
    return 2 * 3958.7613 * np.arcsin(np.sqrt(np.clip(h, 0, 1)))


def _allocate(n: int, probs: np.ndarray) -> np.ndarray:
    """Largest-remainder split of n items; every positive share gets at least one."""
    probs = np.asarray(probs, dtype=float)
    base = (probs > 0).astype(int)
    rest = n - base.sum()
    raw = probs / probs.sum() * rest
    alloc = np.floor(raw).astype(int)
    order = np.argsort(-(raw - alloc), kind="stable")
    alloc[order[: rest - alloc.sum()]] += 1
    return base + alloc


def _no_adjacency_prob(qu: np.ndarray, qv: np.ndarray, lam: float) -> np.ndarray:
    """P(no consecutive {u, v} pair) in N ~ Poisson(lam) i.i.d. draws with P(u)=qu, P(v)=qv."""
    r = 1.0 - qu - qv
    zero = np.zeros_like(qu)
    # transition matrix with u->v and v->u removed; states (u, v, other)
    m = np.stack([
        np.stack([qu, zero, r], -1),
        np.stack([zero, qv, r], -1),
        np.stack([qu, qv, r], -1),
    ], -2)
    start = np.stack([qu, qv, r], -1)
    w = np.ones_like(start)
    weight = math.exp(-lam)
    total = np.full_like(qu, weight)
    for n in range(1, int(lam + 12 * math.sqrt(lam) + 20)):
        weight *= lam / n
        total += weight * np.einsum("pi,pi->p", start, w)
        w = np.einsum("pij,pj->pi", m, w)
    return total


def _is_connected(k: int, edges) -> bool:
    seen, stack = {0}, [0]
    while stack:
        x = stack.pop()
        for a, b in edges:
            y = b if a == x else a if b == x else None
            if y is not None and y not in seen:
                seen.add(y)
                stack.append(y)
    return len(seen) == k


class RateModel:
    """Closed-form expectations for a scenario.

    ``level(d)`` gives the per-category rate multiplier on date ``d`` and
    ``pair_rates(d)`` the expected number of transitions between every POI
    pair (both directions) on ``d``.
    """

    def __init__(self, config: ScenarioConfig, poi_category: np.ndarray, device_segment: np.ndarray,
                 pools: np.ndarray, pool_len: np.ndarray, pools_wide: np.ndarray, pool_wide_len: np.ndarray):
        self.config = config
        self.poi_category = poi_category
        self.device_segment = device_segment
        self.pools = pools
        self.pool_len = pool_len
        self.pools_wide = pools_wide
        self.pool_wide_len = pool_wide_len
        cats = config.categories
        segs = config.segment_table()
        self.segment_names = list(segs)
        self.segment_mix = np.array([[segs[s]["mix"].get(c, 0.0) for c in cats] for s in segs])
        self.segment_size = np.bincount(device_segment, minlength=len(segs))

    def in_window(self, d: date) -> bool:
        w = self.config.disruption_window
        return w is not None and w[0] <= d <= w[1]

    def level(self, d: date) -> np.ndarray:
        cfg = self.config
        out = np.ones(len(cfg.categories))
        if cfg.disruption_window is None:
            return out
        w0, w1 = cfg.disruption_window
        factors = np.array([cfg.suppression.get(c, 1.0) for c in cfg.categories])
        if w0 <= d <= w1:
            return factors
        i = (d - w1).days
        if 1 <= i <= cfg.recovery_ramp:
            return factors + (1.0 - factors) * i / cfg.recovery_ramp
        return out

    def weekday_mult(self, d: date) -> float:
        return self.config.weekend_multiplier if d.weekday() >= 5 else self.config.weekday_multiplier

    def category_rates(self, d: date) -> np.ndarray:
        """(n_segments, n_categories) expected retained visits per device on ``d``."""
        return self.config.visit_rate * self.weekday_mult(d) * self.segment_mix * self.level(d)

    def expected_category_visits(self, d: date) -> np.ndarray:
        return self.segment_size @ self.category_rates(d)

    def relative_activity(self, d: date) -> float:
        nominal = self.config.visit_rate * self.weekday_mult(d) * (self.segment_size @ self.segment_mix).sum()
        return float(self.expected_category_visits(d).sum() / nominal) if nominal else 1.0

    def visit_distribution(self, d: date) -> tuple[np.ndarray, np.ndarray]:
        """Per-device POI distribution of one retained visit, and per-device mean visit count."""
        rates = self.category_rates(d)[self.device_segment]  # (devices, cats)
        total = rates.sum(axis=1)
        wide = self.in_window(d)
        pools = self.pools_wide if wide else self.pools
        plen = self.pool_wide_len if wide else self.pool_len
        n_dev = pools.shape[0]
        q = np.zeros((n_dev, len(self.poi_category)))
        rows = np.arange(n_dev)
        share = np.divide(rates, total[:, None], out=np.zeros_like(rates), where=total[:, None] > 0)
        for c in range(rates.shape[1]):
            for j in range(pools.shape[2]):
                cols = pools[:, c, j]
                ok = (cols >= 0) & (share[:, c] > 0)
                q[rows[ok], cols[ok]] += share[ok, c] / plen[ok, c]
        return q, total

    def pair_rates(self, d: date) -> np.ndarray:
        """Expected transitions between each POI pair (u->v plus v->u) on ``d``.

        With N ~ Poisson(L) i.i.d. visits, the expected number of consecutive
        positions holding (u, v) is (L - 1 + exp(-L)) q(u) q(v).
        """
        q, L = self.visit_distribution(d)
        g = L - 1.0 + np.exp(-L)
        lam = 2.0 * (q.T * g) @ q
        np.fill_diagonal(lam, 0.0)
        return lam

    def edge_probability(self, d: date) -> np.ndarray:
        """P(edge {u, v} present on ``d``), devices independent.

        For one device the retained visits are N ~ Poisson(L) i.i.d. draws
        from q; the chance that no two consecutive draws are {u, v} follows
        from a three-state chain (last draw u, v, or anything else) mixed
        over N.  Devices with the same distribution are handled together.
        """
        q, L = self.visit_distribution(d)
        n_poi = q.shape[1]
        log_absent = np.zeros((n_poi, n_poi))
        rows, inverse, counts = np.unique(np.column_stack([q, L]), axis=0, return_inverse=True, return_counts=True)
        for row, n_dev in zip(rows, counts):
            qq, lam = row[:-1], row[-1]
            support = np.flatnonzero(qq)
            if support.size < 2 or lam <= 0:
                continue
            iu, iv = np.triu_indices(support.size, 1)
            u, v = support[iu], support[iv]
            p0 = _no_adjacency_prob(qq[u], qq[v], lam)
            log_absent[u, v] += n_dev * np.log(np.maximum(p0, 1e-300))
        log_absent = log_absent + log_absent.T
        return -np.expm1(log_absent)

    def support(self, days: Sequence[date]) -> np.ndarray:
        """(n_pairs, 2) POI index pairs that can be linked on any of *days*, u < v."""
        linked = np.zeros((len(self.poi_category),) * 2, bool)
        for d in days:
            linked |= self.pair_rates(d) > 0
        return np.argwhere(np.triu(linked, 1))

    def expected_instance_counts(self, d: date, members: np.ndarray, label) -> dict:
        """Expected number of induced instances per label on ``d`` under independent edges.

        ``members`` is an (m, 4) array of POI indices (-1 padded) holding every
        vertex set that can be connected; ``label(k, edges, categories)``
        names the coloured graph with local *edges* on vertices 0..k-1, or
        returns None to ignore it.
        """
        p = self.edge_probability(d)
        cats = self.config.categories
        size = (members >= 0).sum(axis=1)
        out: dict = {}
        for k in (2, 3, 4):
            sets = members[size == k][:, :k]
            if not len(sets):
                continue
            pairs = list(itertools.combinations(range(k), 2))
            probs = np.stack([p[sets[:, a], sets[:, b]] for a, b in pairs], axis=1)
            colour_rows, colour_idx = np.unique(self.poi_category[sets], axis=0, return_inverse=True)
            colour_idx = colour_idx.ravel()
            for mask in range(1, 1 << len(pairs)):
                edges = [pr for bit, pr in enumerate(pairs) if mask >> bit & 1]
                if not _is_connected(k, edges):
                    continue
                bits = np.array([mask >> bit & 1 for bit in range(len(pairs))], bool)
                pr = np.prod(np.where(bits, probs, 1.0 - probs), axis=1)
                sums = np.bincount(colour_idx, weights=pr, minlength=len(colour_rows))
                for ci in np.flatnonzero(sums):
                    name = label(k, tuple(edges), tuple(cats[c] for c in colour_rows[ci]))
                    if name is not None:
                        out[name] = out.get(name, 0.0) + float(sums[ci])
        return out

    def ground_truth(self) -> dict:
        cfg = self.config
        out = {
            "dates": {
                d.isoformat(): {
                    "relative_activity": self.relative_activity(d),
                    "category_levels": {c: float(x) for c, x in zip(cfg.categories, self.level(d)) if x != 1.0},
                }
                for d in date_range(*cfg.calendar)
            },
            "max_suppression_date": None,
            "recovery_date": None,
            "segment_sizes": {n: int(k) for n, k in zip(self.segment_names, self.segment_size)},
        }
        if cfg.disruption_window is not None and any(f < 1.0 for f in cfg.suppression.values()):
            w0, w1 = cfg.disruption_window
            out["max_suppression_date"] = w0.isoformat()
            out["recovery_date"] = (w1 + timedelta(days=max(cfg.recovery_ramp, 1))).isoformat()
        return out


@dataclass
class Scenario:
    config: ScenarioConfig
    stops: list[VisitStop]
    pois: list[PoiRecord]
    ground_truth: dict
    model: RateModel


def _local_midnight_epoch(d: date, tz_offset: float) -> int:
    return int((datetime(d.year, d.month, d.day) - datetime(1970, 1, 1)).total_seconds() - tz_offset * 3600)


def generate_scenario(config: ScenarioConfig, out_dir: str | Path | None = None) -> Scenario:
    """Build the scenario; with *out_dir*, also write stops.csv, pois.csv, ground_truth.json."""
    config.validate()
    cats = config.categories
    table = load_category_table()
    overall = config.overall_mix()
    mix = np.array([overall.get(c, 0.0) for c in cats])
    segs = config.segment_table()
    lat0, lat1, lng0, lng1 = config.bbox

    rng = np.random.default_rng([config.seed, 0])
    poi_cat = np.repeat(np.arange(len(cats)), _allocate(config.n_pois, mix))
    poi_lat = rng.uniform(lat0, lat1, config.n_pois)
    poi_lng = rng.uniform(lng0, lng1, config.n_pois)
    pois = []
    for i in range(config.n_pois):
        codes = table.codes_for(cats[poi_cat[i]])
        pois.append(PoiRecord(f"poi{i:05d}", codes[rng.integers(len(codes))],
                              round(float(poi_lat[i]), 6), round(float(poi_lng[i]), 6)))
    plat = np.array([p.lat for p in pois])
    plng = np.array([p.lng for p in pois])

    seg_counts = _allocate(config.n_devices, np.array([seg["share"] for seg in segs.values()]))
    device_segment = rng.permutation(np.repeat(np.arange(len(segs)), seg_counts))
    if config.n_neighborhoods:
        # homes scattered around a few residential centres
        c_lat = rng.uniform(lat0, lat1, config.n_neighborhoods)
        c_lng = rng.uniform(lng0, lng1, config.n_neighborhoods)
        which = rng.integers(config.n_neighborhoods, size=config.n_devices)
        r = config.neighborhood_radius_mi / 69.0 * np.sqrt(rng.random(config.n_devices))
        theta = rng.uniform(0, 2 * np.pi, config.n_devices)
        home_lat = c_lat[which] + r * np.sin(theta)
        home_lng = c_lng[which] + r * np.cos(theta) / np.cos(np.radians(c_lat[which]))
    else:
        home_lat = rng.uniform(lat0, lat1, config.n_devices)
        home_lng = rng.uniform(lng0, lng1, config.n_devices)
    dist = _haversine_matrix(home_lat, home_lng, plat, plng)
    k_norm = config.pool_size
    k_wide = int(math.ceil(config.pool_size * config.distance_inflation))
    pools = np.full((config.n_devices, len(cats), k_norm), -1, np.int64)
    pools_wide = np.full((config.n_devices, len(cats), k_wide), -1, np.int64)
    pool_len = np.zeros((config.n_devices, len(cats)), np.int64)
    pool_wide_len = np.zeros((config.n_devices, len(cats)), np.int64)
    for c in range(len(cats)):
        members = np.flatnonzero(poi_cat == c)
        if members.size == 0:
            continue
        order = members[np.argsort(dist[:, members], axis=1, kind="stable")]
        kn, kw = min(k_norm, members.size), min(k_wide, members.size)
        pools[:, c, :kn] = order[:, :kn]
        pools_wide[:, c, :kw] = order[:, :kw]
        pool_len[:, c] = kn
        pool_wide_len[:, c] = kw

    model = RateModel(config, poi_cat, device_segment, pools, pool_len, pools_wide, pool_wide_len)
    days = date_range(*config.calendar)
    rates = np.array([model.category_rates(d) for d in days])  # (days, segments, cats)
    wide = np.array([model.in_window(d) for d in days])
    midnight = np.array([_local_midnight_epoch(d, config.timezone_offset) for d in days], np.int64)

    poi_ids = [p.poi_id for p in pois]
    stops: list[VisitStop] = []
    for dev in range(config.n_devices):
        drng = np.random.default_rng([config.seed, 1, dev])
        seg = device_segment[dev]
        n = drng.poisson(rates[:, seg, :])
        day_idx, cat_idx = np.nonzero(n)
        reps = n[day_idx, cat_idx]
        day_idx = np.repeat(day_idx, reps)
        cat_idx = np.repeat(cat_idx, reps)
        use_wide = wide[day_idx]
        plen = np.where(use_wide, pool_wide_len[dev, cat_idx], pool_len[dev, cat_idx])
        pick = (drng.random(day_idx.size) * plen).astype(np.int64)
        chosen = np.where(use_wide, pools_wide[dev, cat_idx, np.minimum(pick, k_wide - 1)],
                          pools[dev, cat_idx, np.minimum(pick, k_norm - 1)])
        dwell = 121 + np.floor(drng.exponential(1800.0, day_idx.size)).astype(np.int64)

        seg_mix = model.segment_mix[seg]
        n_short = drng.poisson(config.short_stop_rate, len(days))
        s_day = np.repeat(np.arange(len(days)), n_short)
        s_cat = drng.choice(len(cats), size=s_day.size, p=seg_mix / seg_mix.sum())
        s_pick = (drng.random(s_day.size) * np.maximum(pool_len[dev, s_cat], 1)).astype(np.int64)
        s_poi = pools[dev, s_cat, np.minimum(s_pick, k_norm - 1)]
        s_dwell = drng.integers(30, 121, s_day.size)

        all_day = np.concatenate([day_idx, s_day])
        all_poi = np.concatenate([chosen, s_poi])
        all_dwell = np.concatenate([dwell, s_dwell])
        arrival = midnight[all_day] + drng.integers(DAY_START_S, DAY_END_S, all_day.size)
        keep = all_poi >= 0
        order = np.lexsort((all_poi[keep], arrival[keep]))
        device = f"dev{dev:05d}"
        for a, p, w in zip(arrival[keep][order].tolist(), all_poi[keep][order].tolist(),
                           all_dwell[keep][order].tolist()):
            stops.append(VisitStop(device, poi_ids[p], a, float(w)))

    scenario = Scenario(config, stops, pois, model.ground_truth(), model)
    if out_dir is not None:
        write_scenario(scenario, out_dir)
    return scenario


def write_scenario(scenario: Scenario, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "stops.csv", "w", encoding="utf-8", newline="") as fh:
        write_stops(scenario.stops, fh)
    with open(out / "pois.csv", "w", encoding="utf-8", newline="") as fh:
        write_pois(scenario.pois, fh)
    payload = {"config": scenario.config.to_dict(), **scenario.ground_truth}
    (out / "ground_truth.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", "utf-8")
