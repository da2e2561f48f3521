"""Staged listing records: domain types, ingestion, trimming, weekly cells."""

from __future__ import annotations

import csv
import datetime as dt
import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import ConfigError, DataError, SchemaError


class DatasetTag(str, Enum):
    ADVERTS = "Adverts"
    BROKERED = "BrokeredAdverts"
    DEEDS = "Deeds"


class DwellingType(str, Enum):
    APARTMENT = "Apartment"
    HOUSE = "House"


class UrbanClass(str, Enum):
    URBAN = "Urban"
    LARGELY_URBAN = "LargelyUrban"
    REGIONAL = "Regional"
    RURAL = "Rural"


STATES = (
    "Burgenland",
    "Carinthia",
    "LowerAustria",
    "UpperAustria",
    "Salzburg",
    "Styria",
    "Tyrol",
    "Vorarlberg",
    "Vienna",
)
DWELLING_TYPES = tuple(t.value for t in DwellingType)
URBAN_CLASSES = tuple(u.value for u in UrbanClass)
ROOMS = ("1", "2", "3", "4+")
AGE_CLASSES = ("New", "1-5", "6-10", "11-20", "21-40", "PostWar", "1914-45", "Vintage")
OPEN_SPACE = ("None", "UpTo15", "Over15")
CONDITIONS = ("FirstOccupancy", "AsNew", "Poor", "Unclassified")
ACCESSIBILITY = (1, 2, 3, 4, 5)

DEFAULT_LOWER_TRIM = 100_000.0
DEFAULT_UPPER_TRIM = 5_000_000.0

BOOLEAN_HEDONICS = ("renovated", "basement", "parking", "air_conditioning", "step_free", "wellness")
HEDONIC_FIELDS = (
    "log_area",
    "rooms",
    "age_class",
    "renovated",
    "open_space",
    "basement",
    "parking",
    "air_conditioning",
    "step_free",
    "wellness",
    "condition",
    "log_plot_price",
)
CORE_FIELDS = (
    "id",
    "price",
    "observed_on",
    "dwelling_type",
    "state",
    "district",
    "urban_class",
    "accessibility",
)
# Levels for every categorical attribute a design or segment rule can refer to.
CATEGORICAL_LEVELS: dict[str, tuple] = {
    "dwelling_type": DWELLING_TYPES,
    "urban_class": URBAN_CLASSES,
    "accessibility": ACCESSIBILITY,
    "rooms": ROOMS,
    "age_class": AGE_CLASSES,
    "open_space": OPEN_SPACE,
    "condition": CONDITIONS,
}


def _check_level(name, value, levels):
    if value not in levels:
        raise ValueError(f"{name}={value!r} not in {levels}")


@dataclass(frozen=True, slots=True)
class LocationKey:
    state: str
    district: str
    urban_class: str
    accessibility: int

    def __post_init__(self):
        _check_level("state", self.state, STATES)
        _check_level("urban_class", self.urban_class, URBAN_CLASSES)
        _check_level("accessibility", self.accessibility, ACCESSIBILITY)
        if not self.district:
            raise ValueError("district must be non-empty")


@dataclass(frozen=True, slots=True)
class HedonicProfile:
    log_area: float
    rooms: str
    age_class: str
    renovated: bool
    open_space: str
    basement: bool
    parking: bool
    air_conditioning: bool
    step_free: bool
    wellness: bool
    condition: str
    log_plot_price: float

    def __post_init__(self):
        if not math.isfinite(self.log_area):
            raise ValueError("log_area must be finite")
        if not math.isfinite(self.log_plot_price):
            raise ValueError("log_plot_price must be finite")
        _check_level("rooms", self.rooms, ROOMS)
        _check_level("age_class", self.age_class, AGE_CLASSES)
        _check_level("open_space", self.open_space, OPEN_SPACE)
        _check_level("condition", self.condition, CONDITIONS)


@dataclass(frozen=True, slots=True)
class ListingRecord:
    id: str
    tag: DatasetTag
    price: float
    observed_on: dt.date
    dwelling_type: str
    location: LocationKey
    hedonics: HedonicProfile | None = None

    def __post_init__(self):
        if not self.price > 0:
            raise ValueError("price must be positive")
        _check_level("dwelling_type", self.dwelling_type, DWELLING_TYPES)
        if self.tag is not DatasetTag.DEEDS and self.hedonics is None:
            raise ValueError(f"{self.tag.value} records require a hedonic profile")

    @property
    def state(self) -> str:
        return self.location.state

    @property
    def district(self) -> str:
        return self.location.district

    def attribute(self, name: str):
        """Look up a categorical or numeric attribute by its design name."""
        if name == "dwelling_type":
            return self.dwelling_type
        if name in ("state", "district", "urban_class", "accessibility"):
            return getattr(self.location, name)
        if name in HEDONIC_FIELDS:
            if self.hedonics is None:
                raise AttributeError(f"record {self.id} has no hedonic profile")
            return getattr(self.hedonics, name)
        raise AttributeError(name)


@dataclass(frozen=True, slots=True)
class PanelCell:
    week: str
    week_start: dt.date
    dwelling_type: str
    state: str
    urban_class: str
    count: int
    exposure: float

    @property
    def week_of_year(self) -> int:
        return self.week_start.isocalendar()[1]


@dataclass(frozen=True, slots=True)
class Rejection:
    row: int
    reason: str


@dataclass
class LoadResult:
    records: list[ListingRecord]
    rejections: list[Rejection] = field(default_factory=list)

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)


# --------------------------------------------------------------------------
# ingestion


def default_schema(tag: DatasetTag) -> dict[str, str]:
    fields = CORE_FIELDS if tag is DatasetTag.DEEDS else CORE_FIELDS + HEDONIC_FIELDS
    return {f: f for f in fields}


def sniff_delimiter(header_line: str) -> str:
    return ";" if header_line.count(";") > header_line.count(",") else ","


_TRUE = {"1", "true", "yes", "y", "t"}
_FALSE = {"0", "false", "no", "n", "f"}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in _TRUE:
        return True
    if low in _FALSE:
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_price(text: str) -> float:
    value = float(text)
    if not math.isfinite(value):
        raise ValueError(f"non-finite price {text!r}")
    return value


def _parse_record(row, col, tag, with_hedonics):
    price = _parse_price(row[col["price"]])
    observed_on = dt.date.fromisoformat(row[col["observed_on"]].strip())
    location = LocationKey(
        state=row[col["state"]].strip(),
        district=row[col["district"]].strip(),
        urban_class=row[col["urban_class"]].strip(),
        accessibility=int(row[col["accessibility"]]),
    )
    hedonics = None
    if with_hedonics:
        hedonics = HedonicProfile(
            log_area=float(row[col["log_area"]]),
            rooms=row[col["rooms"]].strip(),
            age_class=row[col["age_class"]].strip(),
            renovated=_parse_bool(row[col["renovated"]]),
            open_space=row[col["open_space"]].strip(),
            basement=_parse_bool(row[col["basement"]]),
            parking=_parse_bool(row[col["parking"]]),
            air_conditioning=_parse_bool(row[col["air_conditioning"]]),
            step_free=_parse_bool(row[col["step_free"]]),
            wellness=_parse_bool(row[col["wellness"]]),
            condition=row[col["condition"]].strip(),
            log_plot_price=float(row[col["log_plot_price"]]),
        )
    return ListingRecord(
        id=row[col["id"]].strip(),
        tag=tag,
        price=price,
        observed_on=observed_on,
        dwelling_type=row[col["dwelling_type"]].strip(),
        location=location,
        hedonics=hedonics,
    )


def load_listings(
    path,
    tag: DatasetTag | str,
    schema: Mapping[str, str] | None = None,
    coverage: tuple[dt.date, dt.date] | None = None,
) -> LoadResult:
    """Read a delimited listing file into records.

    ``schema`` maps record field names to column headers and defaults to the
    identity mapping. A missing required column raises :class:`SchemaError`;
    rows that fail to parse (or fall outside ``coverage``, inclusive) become
    :class:`Rejection` entries carrying the file line number (header = 1).
    Deeds files may omit the hedonic columns entirely.
    """
    tag = DatasetTag(tag)
    schema = dict(schema) if schema is not None else default_schema(DatasetTag.ADVERTS)
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        header_line = fh.readline()
        if not header_line.strip():
            raise SchemaError(f"{path}: empty file or missing header row")
        delimiter = sniff_delimiter(header_line)
        fh.seek(0)
        reader = csv.reader(fh, delimiter=delimiter)
        header = [h.strip() for h in next(reader)]
        index = {name: i for i, name in enumerate(header)}

        missing = [f for f in CORE_FIELDS if schema.get(f, f) not in index]
        if missing:
            names = ", ".join(schema.get(f, f) for f in missing)
            raise SchemaError(f"{path}: missing required column(s): {names}")
        hedonic_present = [f for f in HEDONIC_FIELDS if schema.get(f, f) in index]
        if tag is DatasetTag.DEEDS:
            with_hedonics = len(hedonic_present) == len(HEDONIC_FIELDS)
        else:
            absent = [schema.get(f, f) for f in HEDONIC_FIELDS if f not in hedonic_present]
            if absent:
                raise SchemaError(f"{path}: missing required column(s): {', '.join(absent)}")
            with_hedonics = True
        col = {f: index[schema.get(f, f)] for f in CORE_FIELDS + tuple(hedonic_present)}

        records: list[ListingRecord] = []
        rejections: list[Rejection] = []
        districts: dict[str, str] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < len(header):
                rejections.append(Rejection(lineno, f"expected {len(header)} fields, got {len(row)}"))
                continue
            try:
                rec = _parse_record(row, col, tag, with_hedonics)
            except (ValueError, KeyError) as exc:
                rejections.append(Rejection(lineno, str(exc)))
                continue
            if coverage is not None and not coverage[0] <= rec.observed_on <= coverage[1]:
                rejections.append(Rejection(lineno, f"observed_on {rec.observed_on} outside coverage"))
                continue
            prior = districts.setdefault(rec.district, rec.state)
            if prior != rec.state:
                raise DataError(
                    f"{path}:{lineno}: district {rec.district!r} nested in both {prior!r} and {rec.state!r}"
                )
            records.append(rec)
    return LoadResult(records, rejections)


def check_nesting(records: Iterable[ListingRecord]) -> dict[str, str]:
    """Return the district -> state map, raising if a district has two states."""
    mapping: dict[str, str] = {}
    for rec in records:
        prior = mapping.setdefault(rec.district, rec.state)
        if prior != rec.state:
            raise DataError(f"district {rec.district!r} nested in both {prior!r} and {rec.state!r}")
    return mapping


def write_rejections(rejections: Sequence[Rejection], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["row", "reason"])
        for r in rejections:
            writer.writerow([r.row, r.reason])


def _fmt_bool(value: bool) -> str:
    return "1" if value else "0"


def write_listings(records: Sequence[ListingRecord], path, with_hedonics: bool | None = None) -> None:
    """Write records in the format :func:`load_listings` reads back unchanged."""
    if with_hedonics is None:
        with_hedonics = all(r.hedonics is not None for r in records) and bool(records)
    fields = CORE_FIELDS + (HEDONIC_FIELDS if with_hedonics else ())
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(fields)
        for r in records:
            loc = r.location
            row = [r.id, repr(float(r.price)), r.observed_on.isoformat(), r.dwelling_type,
                   loc.state, loc.district, loc.urban_class, str(loc.accessibility)]
            if with_hedonics:
                h = r.hedonics
                row += [
                    repr(float(h.log_area)), h.rooms, h.age_class, _fmt_bool(h.renovated),
                    h.open_space, _fmt_bool(h.basement), _fmt_bool(h.parking),
                    _fmt_bool(h.air_conditioning), _fmt_bool(h.step_free), _fmt_bool(h.wellness),
                    h.condition, repr(float(h.log_plot_price)),
                ]
            writer.writerow(row)


# --------------------------------------------------------------------------
# trimming


def trim_prices(
    records: Sequence[ListingRecord],
    lower: float = DEFAULT_LOWER_TRIM,
    upper: float = DEFAULT_UPPER_TRIM,
) -> tuple[list[ListingRecord], int]:
    """Keep records with ``lower <= price <= upper``; return them and the removal count."""
    if not lower < upper:
        raise ValueError(f"lower ({lower}) must be below upper ({upper})")
    kept = [r for r in records if lower <= r.price <= upper]
    return kept, len(records) - len(kept)


# --------------------------------------------------------------------------
# weekly panel cells


def iso_week_label(day: dt.date) -> str:
    year, week, _ = day.isocalendar()
    return f"{year}-W{week:02d}"


def week_monday(day: dt.date) -> dt.date:
    return day - dt.timedelta(days=day.weekday())


def _exposure(population, state, year):
    try:
        value = population[state]
    except KeyError:
        raise ConfigError(f"state {state!r} missing from population mapping") from None
    if isinstance(value, Mapping):
        try:
            value = value[year]
        except KeyError:
            raise ConfigError(f"no population for {state!r} in {year}") from None
    value = float(value)
    if not value > 0:
        raise ConfigError(f"population for {state!r} must be positive")
    return value


def weekly_cell_counts(
    records: Sequence[ListingRecord],
    population: Mapping,
    zero_fill: bool = True,
    coverage: tuple[dt.date, dt.date] | None = None,
) -> list[PanelCell]:
    """Tally records into (ISO week x type x state x urban class) cells.

    ``population`` maps state to persons, or state to {ISO year: persons};
    the annual value is used for every week of that year. With ``zero_fill``
    every combination for each week between ``coverage`` (or the observed
    date range) is emitted, zeros included.
    """
    tally: Counter = Counter()
    for r in records:
        if r.state not in population:
            raise ConfigError(f"state {r.state!r} missing from population mapping")
        tally[(week_monday(r.observed_on), r.dwelling_type, r.state, r.location.urban_class)] += 1

    if zero_fill:
        if coverage is not None:
            first, last = week_monday(coverage[0]), week_monday(coverage[1])
        elif tally:
            mondays = [k[0] for k in tally]
            first, last = min(mondays), max(mondays)
        else:
            return []
        keys = []
        monday = first
        while monday <= last:
            keys.extend((monday, t, s, u) for t in DWELLING_TYPES for s in STATES for u in URBAN_CLASSES)
            monday += dt.timedelta(days=7)
        extra = set(tally) - set(keys)
        keys.extend(extra)
    else:
        keys = list(tally)

    t_order = {v: i for i, v in enumerate(DWELLING_TYPES)}
    s_order = {v: i for i, v in enumerate(STATES)}
    u_order = {v: i for i, v in enumerate(URBAN_CLASSES)}
    keys.sort(key=lambda k: (k[0], t_order[k[1]], s_order[k[2]], u_order[k[3]]))
    cells = []
    for monday, dtype, state, uclass in keys:
        cells.append(
            PanelCell(
                week=iso_week_label(monday),
                week_start=monday,
                dwelling_type=dtype,
                state=state,
                urban_class=uclass,
                count=tally.get((monday, dtype, state, uclass), 0),
                exposure=_exposure(population, state, monday.isocalendar()[0]),
            )
        )
    return cells


CELL_COLUMNS = ("week", "type", "state", "urban_class", "count", "exposure")


def write_cells(cells: Sequence[PanelCell], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CELL_COLUMNS)
        for c in cells:
            writer.writerow([c.week, c.dwelling_type, c.state, c.urban_class, c.count, repr(float(c.exposure))])


def read_cells(path) -> list[PanelCell]:
    cells = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        delim = sniff_delimiter(fh.readline())
        fh.seek(0)
        reader = csv.DictReader(fh, delimiter=delim)
        missing = [c for c in CELL_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise SchemaError(f"{path}: missing required column(s): {', '.join(missing)}")
        for row in reader:
            year, week = row["week"].split("-W")
            monday = dt.date.fromisocalendar(int(year), int(week), 1)
            cells.append(PanelCell(row["week"], monday, row["type"], row["state"],
                                   row["urban_class"], int(row["count"]), float(row["exposure"])))
    return cells


def load_population(path) -> dict:
    """Read ``state,population`` or ``state,year,population`` rows."""
    out: dict = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        delim = sniff_delimiter(fh.readline())
        fh.seek(0)
        reader = csv.DictReader(fh, delimiter=delim)
        fields = reader.fieldnames or []
        if "state" not in fields or "population" not in fields:
            raise SchemaError(f"{path}: population file needs state and population columns")
        for row in reader:
            value = float(row["population"])
            if "year" in fields and row["year"].strip():
                out.setdefault(row["state"], {})[int(row["year"])] = value
            else:
                out[row["state"]] = value
    return out
