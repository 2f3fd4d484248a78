"""Ranking attributed motifs and grouping them into lifestyle clusters."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import IO, Iterable, Sequence

import pandas as pd
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .census import AttributedKey, DailyCensus, MotifClass
from .metrics import DailySeries

UNASSIGNED = "unassigned"


class RuleFileError(ValueError):
    pass


@dataclass
class RankedAttributed:
    top: dict[MotifClass, list[tuple[AttributedKey, int]]]
    coverage_share: dict[MotifClass, float]
    class_totals: dict[MotifClass, int]
    short: set[MotifClass] = field(default_factory=set)
    k: int = 10

    @property
    def empty(self) -> bool:
        return not any(self.top.values())

    def keys(self) -> list[AttributedKey]:
        return [key for m in MotifClass for key, _ in self.top.get(m, ())]


def rank_attributed(censuses: Iterable[DailyCensus], k: int = 10) -> RankedAttributed:
    """Top-*k* attributed keys per motif class by count summed over all days.

    Ties are broken by key order.  Classes with fewer than *k* keys are
    returned whole and listed in ``short``.
    """
    totals: dict[AttributedKey, int] = {}
    class_totals = {m: 0 for m in MotifClass}
    for c in censuses:
        for m, n in c.class_counts.items():
            class_totals[m] += n
        for key, n in c.attributed_counts.items():
            totals[key] = totals.get(key, 0) + n
    top: dict[MotifClass, list[tuple[AttributedKey, int]]] = {}
    share: dict[MotifClass, float] = {}
    short: set[MotifClass] = set()
    for m in MotifClass:
        ranked = sorted(((key, n) for key, n in totals.items() if key.motif == m), key=lambda t: (-t[1], t[0]))
        if len(ranked) < k:
            short.add(m)
        top[m] = ranked[:k]
        kept = sum(n for _, n in top[m])
        share[m] = kept / class_totals[m] if class_totals[m] else 0.0
    return RankedAttributed(top, share, class_totals, short, k)


@dataclass(frozen=True)
class ClusterRule:
    name: str
    priority: int
    require_any: tuple[str, ...] = ()
    require_all: tuple[str, ...] = ()
    forbid: tuple[str, ...] = ()

    def matches(self, key: AttributedKey) -> bool:
        cats = set(key.colors)
        if self.require_any and not cats.intersection(self.require_any):
            return False
        if not cats.issuperset(self.require_all):
            return False
        return not cats.intersection(self.forbid)


def rules_from_dict(payload: dict, known_categories: Iterable[str] | None = None) -> list[ClusterRule]:
    """Validate a rule document; every problem is reported in one :class:`RuleFileError`."""
    if not isinstance(payload, dict) or not isinstance(payload.get("clusters"), list):
        raise RuleFileError("rule file must be an object with a 'clusters' list")
    known = set(known_categories) if known_categories is not None else None
    problems: list[str] = []
    rules: list[ClusterRule] = []
    seen_prio: dict[int, str] = {}
    seen_names: set[str] = set()
    for i, item in enumerate(payload["clusters"]):
        label = f"rule #{i}"
        if not isinstance(item, dict):
            problems.append(f"{label}: not an object")
            continue
        name = item.get("name")
        if not isinstance(name, str) or not name or name == UNASSIGNED:
            problems.append(f"{label}: invalid name {name!r}")
            continue
        label = f"rule #{i} ({name})"
        if name in seen_names:
            problems.append(f"{label}: duplicate name")
        seen_names.add(name)
        prio = item.get("priority")
        if not isinstance(prio, int) or isinstance(prio, bool):
            problems.append(f"{label}: priority must be an integer")
            continue
        if prio in seen_prio:
            problems.append(f"{label}: priority {prio} already used by {seen_prio[prio]!r}")
        seen_prio[prio] = name
        lists = {}
        for fld in ("require_any", "require_all", "forbid"):
            vals = item.get(fld, [])
            if not isinstance(vals, list) or not all(isinstance(v, str) for v in vals):
                problems.append(f"{label}: {fld} must be a list of category names")
                vals = []
            if known is not None:
                unknown = sorted(set(vals) - known)
                if unknown:
                    problems.append(f"{label}: unknown categories in {fld}: {unknown}")
            lists[fld] = tuple(vals)
        if not lists["require_any"] and not lists["require_all"]:
            problems.append(f"{label}: needs require_any or require_all")
        unknown_fields = set(item) - {"name", "priority", "require_any", "require_all", "forbid"}
        if unknown_fields:
            problems.append(f"{label}: unknown fields {sorted(unknown_fields)}")
        rules.append(ClusterRule(name, prio, **lists))
    if problems:
        raise RuleFileError("; ".join(problems))
    return sorted(rules, key=lambda r: r.priority)


def load_rules(path: str | Path | None = None, known_categories: Iterable[str] | None = None) -> list[ClusterRule]:
    """Load cluster rules from JSON; the built-in defaults when *path* is None."""
    if path is None:
        text = resources.files("visitmotifs.data").joinpath("cluster_rules.json").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise RuleFileError(f"rule file is not valid JSON: {exc}") from exc
    return rules_from_dict(payload, known_categories)


def rules_to_dict(rules: Iterable[ClusterRule]) -> dict:
    return {"clusters": [
        {"name": r.name, "priority": r.priority, "require_any": list(r.require_any),
         "require_all": list(r.require_all), "forbid": list(r.forbid)}
        for r in sorted(rules, key=lambda r: r.priority)
    ]}


@dataclass
class ClusterAssignment:
    mapping: dict[AttributedKey, str]
    clusters: list[str]

    def __getitem__(self, key: AttributedKey) -> str:
        return self.mapping[key]

    def members(self, cluster: str) -> list[AttributedKey]:
        return sorted(k for k, c in self.mapping.items() if c == cluster)


def assign_clusters(ranked: RankedAttributed | Iterable[AttributedKey], rules: Sequence[ClusterRule]) -> ClusterAssignment:
    """Each ranked key goes to the first matching rule by ascending priority number."""
    prios = [r.priority for r in rules]
    if len(set(prios)) != len(prios):
        raise RuleFileError("rule priorities must be unique")
    ordered = sorted(rules, key=lambda r: r.priority)
    keys = ranked.keys() if isinstance(ranked, RankedAttributed) else list(ranked)
    mapping = {}
    for key in keys:
        mapping[key] = next((r.name for r in ordered if r.matches(key)), UNASSIGNED)
    return ClusterAssignment(mapping, [r.name for r in ordered])


@dataclass
class ClusterSeries:
    frequency: dict[str, DailySeries]
    proximity: dict[str, DailySeries]
    share: dict[str, float]


def cluster_series(censuses: Sequence[DailyCensus], assignment: ClusterAssignment) -> ClusterSeries:
    """Per-cluster daily frequency and count-weighted mean proximity.

    ``unassigned`` collects ranked keys that matched no rule.  Shares are
    fractions of all ranked-key instances over the calendar.
    """
    names = list(assignment.clusters) + [UNASSIGNED]
    freq = {n: DailySeries(f"cluster:{n}:frequency") for n in names}
    prox = {n: DailySeries(f"cluster:{n}:proximity") for n in names}
    totals = dict.fromkeys(names, 0)
    members = {n: assignment.members(n) for n in names}
    for c in censuses:
        for n in names:
            count = 0
            wsum = 0.0
            wn = 0
            for key in members[n]:
                kc = c.attributed_counts.get(key, 0)
                if not kc:
                    continue
                count += kc
                p = c.attributed_proximity.get(key, math.nan)
                if not math.isnan(p):
                    wsum += kc * p
                    wn += kc
            freq[n].values[c.date] = float(count)
            if wn:
                prox[n].values[c.date] = wsum / wn
            totals[n] += count
    grand = sum(totals.values())
    share = {n: (totals[n] / grand if grand else 0.0) for n in names}
    return ClusterSeries(freq, prox, share)


def write_ranking_csv(ranked: RankedAttributed, fh: IO[str]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(("class", "rank", "key", "total_count", "coverage_share"))
    for m in MotifClass:
        for i, (key, n) in enumerate(ranked.top.get(m, ()), start=1):
            w.writerow((m.value, i, str(key), n, repr(ranked.coverage_share[m])))


def write_assignment_csv(assignment: ClusterAssignment, fh: IO[str]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(("key", "cluster"))
    for key in sorted(assignment.mapping):
        w.writerow((str(key), assignment.mapping[key]))


class LifestyleClusterer(BaseEstimator):
    """Fit on daily censuses: rank keys and assign clusters.

    ``transform`` returns a date-indexed DataFrame of cluster frequencies.
    """

    def __init__(self, k=10, rules=None):
        self.k = k
        self.rules = rules

    def _rules(self) -> list[ClusterRule]:
        if self.rules is None or isinstance(self.rules, (str, Path)):
            return load_rules(self.rules)
        return list(self.rules)

    def fit(self, X: Sequence[DailyCensus], y=None):
        self.ranked_ = rank_attributed(X, self.k)
        self.assignment_ = assign_clusters(self.ranked_, self._rules())
        return self

    def series(self, X: Sequence[DailyCensus]) -> ClusterSeries:
        check_is_fitted(self, "assignment_")
        return cluster_series(X, self.assignment_)

    def transform(self, X: Sequence[DailyCensus]) -> pd.DataFrame:
        cs = self.series(X)
        idx = pd.DatetimeIndex([pd.Timestamp(c.date) for c in X])
        data = {n: [s.values.get(c.date, 0.0) for c in X] for n, s in cs.frequency.items()}
        return pd.DataFrame(data, index=idx, dtype=float)

    def fit_transform(self, X, y=None):
        return self.fit(X).transform(X)
