"""Stop-record and POI ingestion, the dwell-time visit rule, and transitions."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta, timezone
from importlib import resources
from pathlib import Path
from typing import IO, Iterable, Iterator, NamedTuple, Sequence

logger = logging.getLogger(__name__)

STOP_FIELDS = ("device_id", "poi_id", "arrival", "dwell_s")
POI_FIELDS = ("poi_id", "naics4", "lat", "lng")
DEFAULT_MIN_DWELL = 120.0
DEFAULT_TZ_OFFSET = -5.0


class IngestError(Exception):
    """The input could not be read at all (as opposed to a bad row)."""


@dataclass(frozen=True, slots=True)
class VisitStop:
    device_id: str
    poi_id: str
    arrival: int
    dwell: float

    def __post_init__(self):
        if not self.device_id or not self.poi_id:
            raise ValueError("device_id and poi_id must be non-empty")
        if not (self.dwell >= 0):
            raise ValueError(f"dwell must be >= 0, got {self.dwell}")


@dataclass(frozen=True, slots=True)
class PoiRecord:
    poi_id: str
    naics4: str
    lat: float
    lng: float

    def __post_init__(self):
        if not self.poi_id:
            raise ValueError("poi_id must be non-empty")
        if len(self.naics4) != 4 or not self.naics4.isdigit():
            raise ValueError(f"naics4 must be 4 decimal digits, got {self.naics4!r}")
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"lat out of range: {self.lat}")
        if not -180.0 <= self.lng <= 180.0:
            raise ValueError(f"lng out of range: {self.lng}")


@dataclass(frozen=True, slots=True)
class Transition:
    device_id: str
    origin_poi: str
    dest_poi: str
    date: date
    order_index: int


class RowWarning(NamedTuple):
    line: int
    message: str


class ParseResult(NamedTuple):
    records: list
    warnings: list[RowWarning]


@dataclass(frozen=True)
class Category:
    name: str
    essential: bool


@dataclass
class CategoryTable:
    """NAICS four-digit code -> category lookup.

    ``names`` keeps the categories in table order; ``entries`` maps each
    code to its :class:`Category`.
    """

    names: list[str]
    entries: dict[str, Category] = field(default_factory=dict)

    def lookup(self, naics4: str) -> Category | None:
        return self.entries.get(naics4)

    def essential(self, name: str) -> bool:
        for cat in self.entries.values():
            if cat.name == name:
                return cat.essential
        raise KeyError(name)

    def codes_for(self, name: str) -> list[str]:
        return sorted(code for code, cat in self.entries.items() if cat.name == name)

    @classmethod
    def from_dict(cls, payload: dict) -> "CategoryTable":
        try:
            categories = payload["categories"]
        except (KeyError, TypeError):
            raise ValueError("category table must have a 'categories' list") from None
        names: list[str] = []
        entries: dict[str, Category] = {}
        for item in categories:
            name = item["name"]
            if name in names:
                raise ValueError(f"duplicate category {name!r}")
            names.append(name)
            cat = Category(name, bool(item["essential"]))
            for code in item["naics4"]:
                code = str(code)
                if len(code) != 4 or not code.isdigit():
                    raise ValueError(f"bad NAICS code {code!r} in {name!r}")
                if code in entries:
                    raise ValueError(
                        f"NAICS {code} mapped to both {entries[code].name!r} and {name!r}"
                    )
                entries[code] = cat
        return cls(names, entries)

    def to_dict(self) -> dict:
        return {
            "categories": [
                {"name": n, "essential": self.essential(n), "naics4": self.codes_for(n)}
                for n in self.names
            ]
        }


def load_category_table(path: str | Path | None = None) -> CategoryTable:
    """Load a category table JSON file, or the built-in NAICS table when *path* is None."""
    if path is None:
        text = resources.files("visitmotifs.data").joinpath("categories.json").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    return CategoryTable.from_dict(json.loads(text))


@dataclass(frozen=True, slots=True)
class PoiInfo:
    poi_id: str
    category: str | None
    essential: bool | None
    lat: float | None
    lng: float | None

    @property
    def uncategorized(self) -> bool:
        return self.category is None

    @property
    def has_coords(self) -> bool:
        return self.lat is not None and self.lng is not None


PoiIndex = dict  # poi_id -> PoiInfo


def _open_text(source) -> tuple[IO[str], bool]:
    if isinstance(source, (str, Path)):
        try:
            return open(source, "r", encoding="utf-8", newline=""), True
        except OSError as exc:
            raise IngestError(f"cannot read {source}: {exc}") from exc
    if isinstance(source, (bytes, bytearray)):
        try:
            return io.StringIO(bytes(source).decode("utf-8"), newline=""), True
        except UnicodeDecodeError as exc:
            raise IngestError(f"stream is not UTF-8: {exc}") from exc
    if isinstance(source, io.TextIOBase):
        return source, False
    try:
        return io.TextIOWrapper(source, encoding="utf-8", newline=""), False
    except (AttributeError, TypeError) as exc:
        raise IngestError(f"unreadable stream: {exc}") from exc


def parse_timestamp(text: str) -> int:
    """RFC 3339 string or integer epoch seconds -> epoch seconds (UTC)."""
    text = text.strip()
    if text.lstrip("-").isdigit():
        return int(text)
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(math.floor(dt.timestamp()))


def _parse_dwell(text) -> float:
    value = float(text)
    if not math.isfinite(value):
        raise ValueError(f"dwell not finite: {text!r}")
    return value


def _iter_rows(fh: IO[str], fmt: str, required: Sequence[str]) -> Iterator[tuple[int, dict | None, str | None]]:
    if fmt == "csv":
        reader = csv.DictReader(fh)
        header = reader.fieldnames
        if header is None:
            raise IngestError("missing CSV header")
        missing = [f for f in required if f not in header]
        if missing:
            raise IngestError(f"CSV header lacks {missing}")
        for row in reader:
            yield reader.line_num, row, None
    elif fmt == "jsonl":
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                yield lineno, None, f"invalid JSON: {exc.msg}"
                continue
            if not isinstance(row, dict):
                yield lineno, None, "JSON line is not an object"
                continue
            yield lineno, row, None
    else:
        raise ValueError(f"unknown format {fmt!r}")


def _parse_records(source, fmt, required, build) -> ParseResult:
    fh, owned = _open_text(source)
    records = []
    warnings: list[RowWarning] = []
    try:
        for lineno, row, err in _iter_rows(fh, fmt, required):
            if err is None:
                try:
                    records.append(build(row))
                    continue
                except (KeyError, TypeError, ValueError) as exc:
                    err = f"{type(exc).__name__}: {exc}"
            warnings.append(RowWarning(lineno, err))
            logger.warning("line %d skipped: %s", lineno, err)
    except UnicodeDecodeError as exc:
        raise IngestError(f"stream is not UTF-8: {exc}") from exc
    finally:
        if owned:
            fh.close()
    return ParseResult(records, warnings)


def _build_stop(row: dict) -> VisitStop:
    return VisitStop(
        str(row["device_id"]).strip(),
        str(row["poi_id"]).strip(),
        parse_timestamp(str(row["arrival"])),
        _parse_dwell(row["dwell_s"]),
    )


def _build_poi(row: dict) -> PoiRecord:
    return PoiRecord(
        str(row["poi_id"]).strip(),
        str(row["naics4"]).strip(),
        float(row["lat"]),
        float(row["lng"]),
    )


def parse_stops(source, format: str = "csv") -> ParseResult:
    """Parse stop records from a path, bytes, or stream.

    Malformed rows are skipped and reported in ``result.warnings`` with
    their line number; an unreadable stream raises :class:`IngestError`.
    """
    return _parse_records(source, format, STOP_FIELDS, _build_stop)


def parse_pois(source, format: str = "csv") -> ParseResult:
    return _parse_records(source, format, POI_FIELDS, _build_poi)


def _fmt_num(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def write_stops(stops: Iterable[VisitStop], fh: IO[str]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(STOP_FIELDS)
    for s in stops:
        w.writerow((s.device_id, s.poi_id, s.arrival, _fmt_num(s.dwell)))


def write_pois(pois: Iterable[PoiRecord], fh: IO[str]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(POI_FIELDS)
    for p in pois:
        w.writerow((p.poi_id, p.naics4, repr(p.lat), repr(p.lng)))


def filter_visits(stops: Iterable[VisitStop], min_dwell: float = DEFAULT_MIN_DWELL) -> list[VisitStop]:
    """Keep stops whose dwell strictly exceeds *min_dwell* seconds."""
    return [s for s in stops if s.dwell > min_dwell]


def attach_categories(pois: Iterable[PoiRecord], table: CategoryTable) -> PoiIndex:
    index: PoiIndex = {}
    for p in pois:
        cat = table.lookup(p.naics4)
        index[p.poi_id] = PoiInfo(
            p.poi_id,
            cat.name if cat else None,
            cat.essential if cat else None,
            p.lat,
            p.lng,
        )
    return index


def local_date(epoch_s: int, timezone_offset: float = DEFAULT_TZ_OFFSET) -> date:
    return (datetime(1970, 1, 1) + timedelta(seconds=epoch_s + timezone_offset * 3600.0)).date()


def extract_transitions(
    stops: Iterable[VisitStop],
    timezone_offset: float = DEFAULT_TZ_OFFSET,
    max_gap: float | None = None,
) -> list[Transition]:
    """Pair consecutive same-day stops of each device into transitions.

    Stops are ordered per device by arrival (input order breaks ties).
    A pair yields a transition only when both stops fall on the same local
    date and the POIs differ.  With *max_gap* (seconds) set, pairs whose
    arrival-to-arrival gap exceeds it are also dropped.
    Output is ordered by device id, then time.
    """
    by_device: dict[str, list[tuple[int, int, VisitStop]]] = defaultdict(list)
    for i, s in enumerate(stops):
        by_device[s.device_id].append((s.arrival, i, s))

    out: list[Transition] = []
    for device in sorted(by_device):
        seq = sorted(by_device[device], key=lambda t: (t[0], t[1]))
        order: dict[date, int] = defaultdict(int)
        prev = None
        prev_day = None
        for arrival, _, s in seq:
            day = local_date(arrival, timezone_offset)
            if prev is not None and day == prev_day and s.poi_id != prev.poi_id:
                if max_gap is None or arrival - prev.arrival <= max_gap:
                    out.append(Transition(device, prev.poi_id, s.poi_id, day, order[day]))
                    order[day] += 1
            prev, prev_day = s, day
    return out
