"""End-to-end orchestration and report export."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import platform
import shutil
from dataclasses import asdict, dataclass, field, fields
from datetime import date
from pathlib import Path

import networkx
import numba
import numpy

from . import __version__
from .census import CONVENTIONS, DailyCensus, MotifClass, census_many, read_census_csv, write_census_csv
from .ingest import (
    DEFAULT_MIN_DWELL,
    DEFAULT_TZ_OFFSET,
    IngestError,
    attach_categories,
    extract_transitions,
    filter_visits,
    load_category_table,
    parse_pois,
    parse_stops,
)
from .lifestyle import (
    ClusterAssignment,
    ClusterSeries,
    RankedAttributed,
    RuleFileError,
    assign_clusters,
    cluster_series,
    load_rules,
    rank_attributed,
    write_assignment_csv,
    write_ranking_csv,
)
from .metrics import (
    BASELINE_WINDOW,
    CALENDAR,
    EVENT_WINDOW,
    POST_START,
    RECOVERY_CONSECUTIVE,
    RECOVERY_THRESHOLD,
    STUDY_WINDOW,
    ChangeSeries,
    DailySeries,
    RecoveryReport,
    compute_baseline,
    date_range,
    pct_change,
    recovery_to_dict,
    summarize,
    write_changes_csv,
    write_recovery_csv,
)
from .netprops import GlobalProps, props_many, read_props_csv, write_props_csv
from .network import MobilityStats, PlaceNetwork, build_daily_networks, mobility_stats_by_date

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_STAGE = 0, 1, 2, 3
INCOMPLETE_MARKER = "INCOMPLETE"


class PipelineError(Exception):
    def __init__(self, stage: str, message: str, exit_code: int = EXIT_STAGE):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.exit_code = exit_code


_DATE_PAIRS = ("calendar", "baseline_window", "study_window", "event_window")


@dataclass
class PipelineConfig:
    stops: str | None = None
    pois: str | None = None
    categories: str | None = None
    rules: str | None = None
    out: str = "out"
    stops_format: str = "csv"
    timezone_offset: float = DEFAULT_TZ_OFFSET
    min_dwell: float = DEFAULT_MIN_DWELL
    max_gap: float | None = None
    calendar: tuple[date, date] = CALENDAR
    baseline_window: tuple[date, date] = BASELINE_WINDOW
    study_window: tuple[date, date] = STUDY_WINDOW
    event_window: tuple[date, date] = EVENT_WINDOW
    post_start: date = POST_START
    allow_multiple_weeks: bool = False
    recovery_threshold: float = RECOVERY_THRESHOLD
    recovery_consecutive: int = RECOVERY_CONSECUTIVE
    m4_convention: str = "k4-first"
    top_k: int = 10
    max_subgraphs: int | None = None
    seed: int = 0
    jobs: int = 1

    @classmethod
    def from_dict(cls, payload: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(payload) - known)
        if unknown:
            raise PipelineError("config", f"unknown config keys {unknown}", EXIT_CONFIG)
        data = dict(payload)
        try:
            for key in _DATE_PAIRS:
                if key in data:
                    a, b = data[key]
                    data[key] = (date.fromisoformat(a), date.fromisoformat(b))
            if "post_start" in data:
                data["post_start"] = date.fromisoformat(data["post_start"])
        except (TypeError, ValueError) as exc:
            raise PipelineError("config", f"bad date value: {exc}", EXIT_CONFIG) from exc
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        try:
            payload = json.loads(Path(path).read_text("utf-8"))
        except OSError as exc:
            raise PipelineError("config", f"cannot read config {path}: {exc}", EXIT_IO) from exc
        except json.JSONDecodeError as exc:
            raise PipelineError("config", f"config {path} is not valid JSON: {exc}", EXIT_CONFIG) from exc
        return cls.from_dict(payload)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in _DATE_PAIRS:
            d[key] = [x.isoformat() for x in d[key]]
        d["post_start"] = self.post_start.isoformat()
        return d

    def validate(self) -> None:
        def bad(msg):
            raise PipelineError("config", msg, EXIT_CONFIG)

        for key in _DATE_PAIRS:
            a, b = getattr(self, key)
            if a > b:
                bad(f"{key} starts after it ends")
        if not self.baseline_window[1] < self.study_window[0]:
            bad("baseline_window must end before study_window starts")
        if not (self.study_window[0] <= self.event_window[0] and self.event_window[1] <= self.study_window[1]):
            bad("event_window must lie inside study_window")
        if not self.study_window[0] <= self.post_start <= self.study_window[1]:
            bad("post_start must lie inside study_window")
        if not (self.calendar[0] <= self.baseline_window[0] and self.study_window[1] <= self.calendar[1]):
            bad("baseline and study windows must lie inside calendar")
        if self.m4_convention not in CONVENTIONS:
            bad(f"m4_convention must be one of {CONVENTIONS}")
        if self.stops_format not in ("csv", "jsonl"):
            bad("stops_format must be csv or jsonl")
        if self.jobs < 1 or self.top_k < 1 or self.recovery_consecutive < 1:
            bad("jobs, top_k and recovery_consecutive must be >= 1")
        if self.recovery_threshold < 0:
            bad("recovery_threshold must be >= 0")
        if self.max_gap is not None and self.max_gap <= 0:
            bad("max_gap must be > 0")

    def digest(self) -> str:
        d = self.to_dict()
        d.pop("out")
        d.pop("jobs")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


@dataclass
class Bundle:
    config: PipelineConfig
    networks: list[PlaceNetwork] = field(default_factory=list)
    mobility: list[MobilityStats] = field(default_factory=list)
    censuses: list[DailyCensus] = field(default_factory=list)
    props: list[GlobalProps] = field(default_factory=list)
    changes: list[ChangeSeries] = field(default_factory=list)
    recoveries: list[RecoveryReport] = field(default_factory=list)
    ranked: RankedAttributed | None = None
    assignment: ClusterAssignment | None = None
    clusters: ClusterSeries | None = None
    cluster_changes: list[ChangeSeries] = field(default_factory=list)
    cluster_recoveries: list[RecoveryReport] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _require_file(stage: str, path: str | None, what: str) -> Path:
    if not path:
        raise PipelineError(stage, f"no {what} path configured", EXIT_CONFIG)
    p = Path(path)
    if not p.is_file():
        raise PipelineError(stage, f"{what} file not found: {p}", EXIT_IO)
    return p


def stage_ingest(cfg: PipelineConfig, bundle: Bundle) -> None:
    stops_path = _require_file("ingest", cfg.stops, "stops")
    pois_path = _require_file("ingest", cfg.pois, "POI")
    try:
        table = load_category_table(cfg.categories)
    except OSError as exc:
        raise PipelineError("ingest", f"cannot read category table {cfg.categories}: {exc}", EXIT_IO) from exc
    except (ValueError, KeyError) as exc:
        raise PipelineError("ingest", f"invalid category table: {exc}", EXIT_CONFIG) from exc
    try:
        stops = parse_stops(stops_path, cfg.stops_format)
        pois = parse_pois(pois_path)
    except IngestError as exc:
        raise PipelineError("ingest", str(exc), EXIT_IO) from exc
    for label, res in (("stops", stops), ("POI", pois)):
        if res.warnings:
            bundle.warnings.append(f"{len(res.warnings)} malformed {label} rows skipped")
    visits = filter_visits(stops.records, cfg.min_dwell)
    transitions = extract_transitions(visits, cfg.timezone_offset, cfg.max_gap)
    index = attach_categories(pois.records, table)
    days = date_range(*cfg.calendar)
    bundle.networks = build_daily_networks(transitions, index, days)
    bundle.mobility = mobility_stats_by_date(visits, transitions, days, cfg.timezone_offset)
    unindexed = sum(len(n.unindexed) for n in bundle.networks)
    if unindexed:
        bundle.warnings.append(f"{unindexed} node-days reference POIs missing from the POI file")


def stage_census(cfg: PipelineConfig, bundle: Bundle) -> None:
    try:
        bundle.censuses = census_many(bundle.networks, cfg.m4_convention, cfg.max_subgraphs, cfg.jobs)
    except RuntimeError as exc:
        raise PipelineError("census", str(exc)) from exc
    if not any(c.total() for c in bundle.censuses):
        bundle.warnings.append("census is empty: no motif instances on any day")


def stage_props(cfg: PipelineConfig, bundle: Bundle) -> None:
    bundle.props = props_many(bundle.networks, cfg.seed, cfg.jobs)


def _series_changes(cfg: PipelineConfig, series: list[DailySeries]) -> tuple[list[ChangeSeries], list[RecoveryReport]]:
    changes, reports = [], []
    for s in series:
        try:
            base = compute_baseline(s, cfg.baseline_window, cfg.allow_multiple_weeks)
        except ValueError as exc:
            raise PipelineError("metrics", str(exc), EXIT_CONFIG) from exc
        ch = pct_change(s, base, cfg.study_window)
        changes.append(ch)
        reports.append(summarize(ch, cfg.event_window, cfg.post_start, cfg.recovery_threshold, cfg.recovery_consecutive))
    return changes, reports


def metric_series(bundle: Bundle) -> list[DailySeries]:
    out: list[DailySeries] = []
    if bundle.mobility:
        out.append(DailySeries("devices", {m.date: float(m.device_count) for m in bundle.mobility}))
        out.append(DailySeries("flows", {m.date: float(m.flow_count) for m in bundle.mobility}))
    if bundle.props:
        for name in ("node_count", "edge_count", "avg_degree", "density", "avg_clustering", "diameter", "modularity"):
            out.append(DailySeries(f"props:{name}", {p.date: float(getattr(p, name)) for p in bundle.props}))
    for m in MotifClass:
        out.append(DailySeries(f"freq:{m.value}", {c.date: float(c.class_counts[m]) for c in bundle.censuses}))
        prox = {c.date: c.class_proximity[m] for c in bundle.censuses if not math.isnan(c.class_proximity[m])}
        out.append(DailySeries(f"prox:{m.value}", prox))
    return out


def stage_metrics(cfg: PipelineConfig, bundle: Bundle) -> None:
    bundle.changes, bundle.recoveries = _series_changes(cfg, metric_series(bundle))


def stage_clusters(cfg: PipelineConfig, bundle: Bundle) -> None:
    try:
        table = load_category_table(cfg.categories)
        rules = load_rules(cfg.rules, table.names)
    except OSError as exc:
        raise PipelineError("clusters", f"cannot read rule file: {exc}", EXIT_IO) from exc
    except RuleFileError as exc:
        raise PipelineError("clusters", f"invalid rule file: {exc}", EXIT_CONFIG) from exc
    bundle.ranked = rank_attributed(bundle.censuses, cfg.top_k)
    if bundle.ranked.short:
        bundle.warnings.append(
            "fewer than %d attributed keys for %s" % (cfg.top_k, ", ".join(sorted(m.value for m in bundle.ranked.short)))
        )
    bundle.assignment = assign_clusters(bundle.ranked, rules)
    bundle.clusters = cluster_series(bundle.censuses, bundle.assignment)
    series = []
    for name in bundle.assignment.clusters:
        series += [bundle.clusters.frequency[name], bundle.clusters.proximity[name]]
    bundle.cluster_changes, bundle.cluster_recoveries = _series_changes(cfg, series)


def _write(path: Path, writer, *args) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer(*args, fh)


def _write_mobility(mob, fh) -> None:
    fh.write("date,device_count,flow_count\n")
    for m in mob:
        fh.write(f"{m.date.isoformat()},{m.device_count},{m.flow_count}\n")


def write_networks(bundle: Bundle, out: Path) -> None:
    ndir = out / "networks"
    ndir.mkdir(parents=True, exist_ok=True)
    for n in bundle.networks:
        (ndir / f"{n.date.isoformat()}.json").write_text(json.dumps(n.to_dict(), sort_keys=True) + "\n", "utf-8")
        _write(ndir / f"{n.date.isoformat()}.csv", n.write_edge_csv)
    _write(out / "mobility.csv", _write_mobility, bundle.mobility)


def read_networks(out: Path) -> list[PlaceNetwork]:
    ndir = out / "networks"
    if not ndir.is_dir():
        raise PipelineError("census", f"no networks directory under {out}; run ingest first", EXIT_IO)
    return [PlaceNetwork.from_dict(json.loads(p.read_text("utf-8"))) for p in sorted(ndir.glob("*.json"))]


def read_mobility(out: Path) -> list[MobilityStats]:
    path = out / "mobility.csv"
    if not path.is_file():
        return []
    rows = path.read_text("utf-8").splitlines()[1:]
    return [MobilityStats(date.fromisoformat(d), int(a), int(b)) for d, a, b in (r.split(",") for r in rows)]


def _recovery_doc(reports: list[RecoveryReport]) -> dict:
    return {r.metric: recovery_to_dict(r) for r in reports}


def recovery_document(bundle: Bundle) -> dict:
    """One JSON document with impact/recovery per motif class and per cluster."""
    by_metric = {r.metric: r for r in bundle.recoveries}
    classes = {}
    for m in MotifClass:
        entry = {}
        for kind, prefix in (("frequency", "freq"), ("proximity", "prox")):
            r = by_metric.get(f"{prefix}:{m.value}")
            if r is not None:
                entry[kind] = recovery_to_dict(r)
        classes[m.value] = entry
    clusters = {}
    if bundle.assignment is not None:
        by_c = {r.metric: r for r in bundle.cluster_recoveries}
        for name in bundle.assignment.clusters:
            freq = by_c[f"cluster:{name}:frequency"]
            prox = by_c[f"cluster:{name}:proximity"]
            clusters[name] = {
                "share": bundle.clusters.share[name],
                "members": len(bundle.assignment.members(name)),
                "max_impact": recovery_to_dict(freq)["max_impact"],
                "recovery_days": recovery_to_dict(freq)["recovery_days"],
                "frequency": recovery_to_dict(freq),
                "proximity": recovery_to_dict(prox),
            }
    return {"classes": classes, "clusters": clusters}


TABLES = {
    "census": ("census.csv",),
    "props": ("props.csv",),
    "metrics": ("changes.csv", "recovery.csv"),
    "clusters": ("ranking.csv", "cluster_assignment.csv", "cluster_series.csv", "cluster_recovery.csv", "recovery.json"),
}


def export_report(bundle: Bundle, out_dir: str | Path, format: str = "csv",
                  tables: tuple[str, ...] = tuple(TABLES)) -> list[Path]:
    """Write the bundle's tables; ``csv`` gives one file per table, ``json`` one report document.

    *tables* picks table groups (see ``TABLES``) for the csv format.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise PipelineError("export", f"output directory {out} is not writable: {exc}", EXIT_IO) from exc
    written: list[Path] = []
    if format == "csv":
        csv_tables = {
            "census.csv": (write_census_csv, bundle.censuses),
            "props.csv": (write_props_csv, bundle.props),
            "changes.csv": (write_changes_csv, bundle.changes),
            "recovery.csv": (write_recovery_csv, bundle.recoveries),
            "cluster_series.csv": (write_changes_csv, bundle.cluster_changes),
            "cluster_recovery.csv": (write_recovery_csv, bundle.cluster_recoveries),
        }
        if bundle.ranked is not None:
            csv_tables["ranking.csv"] = (write_ranking_csv, bundle.ranked)
            csv_tables["cluster_assignment.csv"] = (write_assignment_csv, bundle.assignment)
        wanted = [name for group in tables for name in TABLES[group]]
        for name in wanted:
            if name == "recovery.json":
                path = out / name
                path.write_text(json.dumps(recovery_document(bundle), indent=2, sort_keys=True) + "\n", "utf-8")
            elif name in csv_tables:
                path = out / name
                _write(path, *csv_tables[name])
            else:
                continue
            written.append(path)
    elif format == "json":
        doc = {
            "props": [{**asdict(p), "date": p.date.isoformat()} for p in bundle.props],
            "census": [
                {
                    "date": c.date.isoformat(),
                    "classes": {m.value: {"count": c.class_counts[m], "mean_proximity_mi": _json_num(c.class_proximity[m])}
                                for m in MotifClass},
                    "attributed": {str(k): {"count": n, "mean_proximity_mi": _json_num(c.attributed_proximity.get(k, math.nan))}
                                   for k, n in c.attributed_counts.items()},
                }
                for c in bundle.censuses
            ],
            "recovery": recovery_document(bundle),
        }
        (out / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", "utf-8")
        written.append(out / "report.json")
    else:
        raise ValueError(f"unknown report format {format!r}")
    return written


def _json_num(x: float) -> float | None:
    return None if x is None or math.isnan(x) else x


def write_manifest(cfg: PipelineConfig, out: Path, warnings: list[str]) -> Path:
    inputs = {}
    for label in ("stops", "pois", "categories", "rules"):
        path = getattr(cfg, label)
        inputs[label] = _sha256_file(Path(path)) if path else "builtin" if label in ("categories", "rules") else None
    files = {
        str(p.relative_to(out)): _sha256_file(p)
        for p in sorted(out.rglob("*"))
        if p.is_file() and p.name not in ("manifest.json", INCOMPLETE_MARKER)
    }
    manifest = {
        "config": {k: v for k, v in cfg.to_dict().items() if k not in ("out", "jobs")},
        "config_sha256": cfg.digest(),
        "inputs": inputs,
        "versions": {
            "visitmotifs": __version__,
            "numpy": numpy.__version__,
            "networkx": networkx.__version__,
            "numba": numba.__version__,
            "python": platform.python_version(),
        },
        "warnings": warnings,
        "files": files,
    }
    body = json.dumps(manifest, indent=2, sort_keys=True)
    manifest["manifest_sha256"] = hashlib.sha256(body.encode()).hexdigest()
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", "utf-8")
    return path


def run_pipeline(cfg: PipelineConfig) -> Bundle:
    """ingest -> network -> census -> netprops -> metrics -> lifestyle, then export.

    On failure the output directory keeps an ``INCOMPLETE`` marker naming the
    failing stage and no manifest.
    """
    cfg.validate()
    out = Path(cfg.out)
    bundle = Bundle(cfg)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise PipelineError("export", f"cannot create output directory {out}: {exc}", EXIT_IO) from exc
    for stale in ("manifest.json", INCOMPLETE_MARKER):
        (out / stale).unlink(missing_ok=True)
    if (out / "networks").is_dir():
        shutil.rmtree(out / "networks")
    try:
        stage_ingest(cfg, bundle)
        write_networks(bundle, out)
        stage_census(cfg, bundle)
        stage_props(cfg, bundle)
        stage_metrics(cfg, bundle)
        stage_clusters(cfg, bundle)
        export_report(bundle, out, "csv")
        for w in bundle.warnings:
            logger.warning(w)
        write_manifest(cfg, out, bundle.warnings)
    except PipelineError as exc:
        (out / INCOMPLETE_MARKER).write_text(f"{exc}\n", "utf-8")
        raise
    except Exception as exc:
        (out / INCOMPLETE_MARKER).write_text(f"{type(exc).__name__}: {exc}\n", "utf-8")
        raise PipelineError("pipeline", f"{type(exc).__name__}: {exc}") from exc
    return bundle


def load_bundle(cfg: PipelineConfig, need: tuple[str, ...]) -> Bundle:
    """Rebuild the parts of a bundle that earlier stage commands wrote to ``cfg.out``."""
    out = Path(cfg.out)
    bundle = Bundle(cfg)
    if "networks" in need:
        bundle.networks = read_networks(out)
    if "mobility" in need:
        bundle.mobility = read_mobility(out)
    if "census" in need:
        path = out / "census.csv"
        if not path.is_file():
            raise PipelineError("load", f"{path} not found; run census first", EXIT_IO)
        with open(path, encoding="utf-8", newline="") as fh:
            bundle.censuses = read_census_csv(fh)
    if "props" in need and (out / "props.csv").is_file():
        with open(out / "props.csv", encoding="utf-8", newline="") as fh:
            bundle.props = read_props_csv(fh)
    return bundle
