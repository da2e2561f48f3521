"""Regime calendars, split time labels, and contextual covariate series."""

from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data import STATES, ListingRecord, LocationKey, PanelCell, sniff_delimiter
from .errors import ConfigError, CoverageError, DataError, SchemaError

ONE_DAY = dt.timedelta(days=1)
NO_REGIME = "none"
DEFAULT_MORTALITY_EPOCH = dt.date(2020, 3, 12)


class RegimeFamily(str, Enum):
    LOCKDOWNS = "Lockdowns"
    LENDING_STANDARDS = "LendingStandards"
    POLICY_RATE = "PolicyRate"


# Required sub-regime sequence per family; Lockdowns has no fixed structure.
FAMILY_PHASES = {
    RegimeFamily.LENDING_STANDARDS: ("pre-announcement", "announcement", "enactment"),
    RegimeFamily.POLICY_RATE: ("low", "first-increase", "high"),
}


# --------------------------------------------------------------------------
# quarters


def quarter_of(day: dt.date) -> str:
    return f"{day.year}Q{(day.month - 1) // 3 + 1}"


def parse_quarter(label: str) -> tuple[int, int]:
    year, q = label.split("Q")
    q = int(q)
    if not 1 <= q <= 4:
        raise ValueError(f"bad quarter label {label!r}")
    return int(year), q


def quarter_start(label: str) -> dt.date:
    year, q = parse_quarter(label)
    return dt.date(year, 3 * (q - 1) + 1, 1)


def quarter_end(label: str) -> dt.date:
    """Last day of the quarter (inclusive)."""
    return quarter_start(shift_quarter(label, 1)) - ONE_DAY


def shift_quarter(label: str, n: int) -> str:
    year, q = parse_quarter(label)
    idx = year * 4 + (q - 1) + n
    return f"{idx // 4}Q{idx % 4 + 1}"


def quarter_range(first: str, last: str) -> list[str]:
    out = [first]
    while out[-1] != last:
        out.append(shift_quarter(out[-1], 1))
        if len(out) > 10_000:
            raise ValueError(f"quarter range {first}..{last} is not ordered")
    return out


def shift_months(day: dt.date, months: int) -> dt.date:
    idx = day.year * 12 + (day.month - 1) + months
    year, month = divmod(idx, 12)
    month += 1
    for d in (day.day, 30, 29, 28):
        try:
            return dt.date(year, month, d)
        except ValueError:
            continue
    raise AssertionError("unreachable")


# --------------------------------------------------------------------------
# calendars


@dataclass(frozen=True)
class RegimeInterval:
    """Half-open interval ``[start, end)``; an empty scope means national."""

    name: str
    start: dt.date
    end: dt.date
    scope: frozenset = frozenset()

    def __post_init__(self):
        if not self.start < self.end:
            raise ConfigError(f"interval {self.name!r}: start {self.start} not before end {self.end}")
        unknown = set(self.scope) - set(STATES)
        if unknown:
            raise ConfigError(f"interval {self.name!r}: unknown states {sorted(unknown)}")

    def covers(self, state: str | None) -> bool:
        return not self.scope or state in self.scope

    def active(self, day: dt.date, state: str | None) -> bool:
        return self.start <= day < self.end and self.covers(state)


@dataclass(frozen=True)
class SplitTimeLabel:
    quarter: str
    regime_status: str

    def __str__(self):
        return f"{self.quarter}:{self.regime_status}"

    @classmethod
    def parse(cls, text: str) -> "SplitTimeLabel":
        quarter, _, status = text.partition(":")
        parse_quarter(quarter)
        return cls(quarter, status or NO_REGIME)


@dataclass(frozen=True)
class RegimeCalendar:
    """Intervals of one regime family over an inclusive coverage window."""

    family: RegimeFamily
    intervals: tuple
    coverage: tuple  # (first day, last day), both inclusive

    def __post_init__(self):
        object.__setattr__(self, "family", RegimeFamily(self.family))
        object.__setattr__(self, "intervals", tuple(sorted(self.intervals, key=lambda i: (i.start, i.name))))
        first, last = self.coverage
        if not first <= last:
            raise ConfigError(f"coverage {first}..{last} is empty")
        for iv in self.intervals:
            if iv.start < first or iv.end > last + ONE_DAY:
                raise ConfigError(f"interval {iv.name!r} extends beyond coverage {first}..{last}")
        for i, a in enumerate(self.intervals):
            for b in self.intervals[i + 1 :]:
                shared = not a.scope or not b.scope or (a.scope & b.scope)
                if shared and a.start < b.end and b.start < a.end:
                    raise ConfigError(f"intervals {a.name!r} and {b.name!r} overlap within a shared scope")
        phases = FAMILY_PHASES.get(self.family)
        if phases is not None:
            names = tuple(iv.name for iv in self.intervals)
            if names != phases:
                raise ConfigError(f"{self.family.value} calendar needs phases {phases}, got {names}")

    def in_coverage(self, day: dt.date) -> bool:
        return self.coverage[0] <= day <= self.coverage[1]

    def status(self, day: dt.date, state: str | None = None) -> str:
        for iv in self.intervals:
            if iv.active(day, state):
                return iv.name
        return NO_REGIME

    def statuses(self) -> list[str]:
        """Every status a date can take, in chronological order of first use."""
        names = [iv.name for iv in self.intervals]
        if self.family not in FAMILY_PHASES:
            names = [NO_REGIME] + names
        return names

    def with_coverage(self, first: dt.date, last: dt.date) -> "RegimeCalendar":
        return RegimeCalendar(self.family, _clip(self.intervals, first, last), (first, last))


def _clip(intervals, first, last):
    out = []
    for iv in intervals:
        start, end = max(iv.start, first), min(iv.end, last + ONE_DAY)
        if start < end:
            out.append(RegimeInterval(iv.name, start, end, iv.scope))
    return out


def assign_split_label(observed_on: dt.date, location, calendar: RegimeCalendar) -> SplitTimeLabel:
    """Quarter of ``observed_on`` crossed with the regime active for the location's state."""
    if not calendar.in_coverage(observed_on):
        lo, hi = calendar.coverage
        raise CoverageError(f"{observed_on} outside {calendar.family.value} coverage {lo}..{hi}")
    state = location.state if isinstance(location, LocationKey) else location
    return SplitTimeLabel(quarter_of(observed_on), calendar.status(observed_on, state))


def assign_split_labels(records: Sequence[ListingRecord], calendar: RegimeCalendar) -> list[SplitTimeLabel]:
    return [assign_split_label(r.observed_on, r.location, calendar) for r in records]


def label_boundaries(calendar: RegimeCalendar, state: str | None = None) -> list[dt.date]:
    """Dates where the split label changes (first day of each new label)."""
    out = []
    first, last = calendar.coverage
    prev = assign_split_label(first, state, calendar)
    day = first + ONE_DAY
    while day <= last:
        cur = assign_split_label(day, state, calendar)
        if cur != prev:
            out.append(day)
        prev = cur
        day += ONE_DAY
    return out


def label_spans(
    calendar: RegimeCalendar, states: Iterable[str] = STATES
) -> dict[str, list[tuple[dt.date, dt.date]]]:
    """Contiguous inclusive date segments on which each split label is active in some state."""
    states = list(states)
    days: dict[str, list[dt.date]] = {}
    first, last = calendar.coverage
    day = first
    while day <= last:
        seen = {str(assign_split_label(day, s, calendar)) for s in states}
        for label in seen:
            days.setdefault(label, []).append(day)
        day += ONE_DAY
    return {label: _segments(ds) for label, ds in days.items()}


def _segments(days: list[dt.date]) -> list[tuple[dt.date, dt.date]]:
    segs = []
    start = prev = days[0]
    for d in days[1:]:
        if d - prev != ONE_DAY:
            segs.append((start, prev))
            start = d
        prev = d
    segs.append((start, prev))
    return segs


def _read_rows(path):
    with Path(path).open(newline="", encoding="utf-8") as fh:
        delim = sniff_delimiter(fh.readline())
        fh.seek(0)
        reader = csv.DictReader(fh, delimiter=delim)
        missing = {"family", "name", "start", "end", "scope"} - set(reader.fieldnames or [])
        if missing:
            raise SchemaError(f"{path}: calendar file missing column(s) {sorted(missing)}")
        return list(reader)


def load_calendar(
    family: RegimeFamily | str, path=None, coverage: str = "@coverage"
) -> RegimeCalendar:
    """Load one family from a calendar file (default: the packaged calendars).

    Printed end dates are inclusive and are shifted by one day into
    half-open intervals. Rows named ``@...`` declare coverage windows; pick
    one with ``coverage`` (``"@coverage-legal"`` selects the legal
    pandemic end). Intervals are clipped to the chosen coverage.
    """
    family = RegimeFamily(family)
    if path is None:
        with resources.as_file(resources.files("hedonic_regimes") / "resources" / "calendars.csv") as p:
            rows = _read_rows(p)
    else:
        rows = _read_rows(path)
    rows = [r for r in rows if r["family"].strip() == family.value]
    window = [r for r in rows if r["name"].strip() == coverage]
    if not window:
        raise ConfigError(f"no {coverage!r} row for {family.value}")
    first = dt.date.fromisoformat(window[0]["start"].strip())
    last = dt.date.fromisoformat(window[0]["end"].strip())
    intervals = []
    for r in rows:
        name = r["name"].strip()
        if name.startswith("@"):
            continue
        scope = frozenset(s.strip() for s in (r["scope"] or "").split(";") if s.strip())
        intervals.append(
            RegimeInterval(
                name,
                dt.date.fromisoformat(r["start"].strip()),
                dt.date.fromisoformat(r["end"].strip()) + ONE_DAY,
                scope,
            )
        )
    return RegimeCalendar(family, tuple(_clip(intervals, first, last)), (first, last))


def write_calendar(calendar: RegimeCalendar, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["family", "name", "start", "end", "scope"])
        fam = calendar.family.value
        w.writerow([fam, "@coverage", calendar.coverage[0].isoformat(), calendar.coverage[1].isoformat(), ""])
        for iv in calendar.intervals:
            w.writerow([fam, iv.name, iv.start.isoformat(), (iv.end - ONE_DAY).isoformat(), ";".join(sorted(iv.scope))])


# --------------------------------------------------------------------------
# contextual series


class Frequency(str, Enum):
    DAILY = "Daily"
    MONTHLY = "Monthly"


class RegionLevel(str, Enum):
    NATIONAL = "National"
    STATE = "State"
    DISTRICT = "District"


@dataclass(frozen=True)
class ContextualSeries:
    """Values keyed by (date, region); monthly series use the first of the month.

    National series use the empty string as region.
    """

    name: str
    frequency: Frequency
    region_level: RegionLevel
    values: Mapping
    lag_months: int = 0

    def __post_init__(self):
        object.__setattr__(self, "frequency", Frequency(self.frequency))
        object.__setattr__(self, "region_level", RegionLevel(self.region_level))
        if self.lag_months < 0:
            raise ConfigError("lag_months must be >= 0")
        if self.region_level is RegionLevel.NATIONAL and any(r != "" for _, r in self.values):
            raise ConfigError(f"national series {self.name!r} must use an empty region key")
        if self.frequency is Frequency.MONTHLY and any(d.day != 1 for d, _ in self.values):
            raise ConfigError(f"monthly series {self.name!r} must be keyed by first-of-month dates")

    @classmethod
    def from_rows(cls, name, frequency, region_level, rows, lag_months=0):
        values = {}
        for day, region, value in rows:
            key = (day, region)
            if key in values:
                raise DataError(f"series {name!r}: duplicate key {day} {region!r}")
            values[key] = float(value)
        return cls(name, frequency, region_level, values, lag_months)

    def regions(self) -> list[str]:
        return sorted({r for _, r in self.values})

    def replace(self, **changes) -> "ContextualSeries":
        kw = dict(name=self.name, frequency=self.frequency, region_level=self.region_level,
                  values=self.values, lag_months=self.lag_months)
        kw.update(changes)
        return ContextualSeries(**kw)


def load_series(path) -> ContextualSeries:
    """Read a series file.

    Leading ``#`` lines hold ``key=value`` tokens declaring ``name``,
    ``frequency``, ``region_level`` and optionally ``lag_months``; the body
    is a ``date,region,value`` table.
    """
    meta = {}
    body = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#"):
                for token in line[1:].replace(";", " ").split():
                    key, _, value = token.partition("=")
                    meta[key.strip()] = value.strip()
            elif line.strip():
                body.append(line)
    for key in ("frequency", "region_level"):
        if key not in meta:
            raise SchemaError(f"{path}: series header must declare {key}")
    if not body:
        raise SchemaError(f"{path}: empty series")
    reader = csv.DictReader(body, delimiter=sniff_delimiter(body[0]))
    if {"date", "region", "value"} - set(reader.fieldnames or []):
        raise SchemaError(f"{path}: series needs date,region,value columns")
    rows = []
    for lineno, row in enumerate(reader, start=2):
        try:
            rows.append((dt.date.fromisoformat(row["date"].strip()), (row["region"] or "").strip(), float(row["value"])))
        except ValueError as exc:
            raise DataError(f"{path}: bad series row {lineno}: {exc}") from None
    return ContextualSeries.from_rows(
        meta.get("name", Path(path).stem), meta["frequency"], meta["region_level"], rows,
        int(meta.get("lag_months", 0)),
    )


def write_series(series: ContextualSeries, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        fh.write(f"# name={series.name} frequency={series.frequency.value} "
                 f"region_level={series.region_level.value} lag_months={series.lag_months}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "region", "value"])
        for (day, region), value in sorted(series.values.items()):
            w.writerow([day.isoformat(), region, repr(float(value))])


def moving_average(series: ContextualSeries, window_days: int = 15) -> ContextualSeries:
    """Centered calendar-day moving average per region; edges use the truncated window."""
    if series.frequency is not Frequency.DAILY:
        raise ConfigError("moving_average needs a daily series")
    if window_days < 1 or window_days % 2 == 0:
        raise ValueError(f"window_days must be odd and >= 1, got {window_days}")
    half = window_days // 2
    by_region: dict[str, list] = {}
    for (day, region), value in series.values.items():
        by_region.setdefault(region, []).append((day.toordinal(), value))
    out = {}
    for region, pairs in by_region.items():
        pairs.sort()
        ords = np.array([p[0] for p in pairs])
        vals = np.array([p[1] for p in pairs], dtype=float)
        csum = np.concatenate([[0.0], np.cumsum(vals)])
        lo = np.searchsorted(ords, ords - half, side="left")
        hi = np.searchsorted(ords, ords + half, side="right")
        means = (csum[hi] - csum[lo]) / (hi - lo)
        for o, m in zip(ords, means):
            out[(dt.date.fromordinal(int(o)), region)] = float(m)
    return series.replace(values=out)


def mortality_rate(
    deaths: Mapping,
    population: Mapping[str, float],
    epoch: dt.date = DEFAULT_MORTALITY_EPOCH,
    name: str = "mortality",
) -> ContextualSeries:
    """New deaths per 1,000 inhabitants per (date, district), zero before ``epoch``."""
    values = {}
    for (day, district), count in deaths.items():
        if count < 0:
            raise DataError(f"negative death count {count} for {district} on {day}")
        pop = population.get(district)
        if pop is None or not pop > 0:
            raise ConfigError(f"no positive population for district {district!r}")
        values[(day, district)] = 0.0 if day < epoch else 1000.0 * count / pop
    return ContextualSeries(name, Frequency.DAILY, RegionLevel.DISTRICT, values)


def minmax_normalize(series: ContextualSeries) -> ContextualSeries:
    vals = np.array(list(series.values.values()), dtype=float)
    lo, hi = vals.min(), vals.max()
    if hi == lo:
        raise DataError(f"series {series.name!r} is constant; cannot normalise")
    return series.replace(values={k: (v - lo) / (hi - lo) for k, v in series.values.items()})


@dataclass
class JoinResult:
    values: np.ndarray
    missing: np.ndarray = field(repr=False)

    @property
    def n_missing(self) -> int:
        return int(self.missing.sum())


def _region_of(row, level: RegionLevel) -> str:
    if level is RegionLevel.NATIONAL:
        return ""
    if level is RegionLevel.STATE:
        return row.state
    if isinstance(row, PanelCell):
        raise ConfigError("district-level series cannot join onto state-level panel cells")
    return row.district


def join_contextual(rows: Sequence, series: ContextualSeries) -> JoinResult:
    """Look up each row's series value at (date - lag, region).

    Records use their observation date; panel cells use the mean of the
    available days of their week for daily series and the month of the
    week's Monday for monthly series. Rows without a value are flagged in
    ``missing`` and carry NaN.
    """
    values = np.full(len(rows), np.nan)
    level = series.region_level
    lookup = series.values
    for i, row in enumerate(rows):
        region = _region_of(row, level)
        if isinstance(row, PanelCell):
            days = [row.week_start + dt.timedelta(days=k) for k in range(7)]
        elif isinstance(row, ListingRecord):
            days = [row.observed_on]
        else:
            raise ConfigError(f"cannot join series onto {type(row).__name__}")
        if series.frequency is Frequency.MONTHLY:
            days = days[:1]
        found = []
        for day in days:
            day = shift_months(day, -series.lag_months)
            if series.frequency is Frequency.MONTHLY:
                day = day.replace(day=1)
            v = lookup.get((day, region))
            if v is not None:
                found.append(v)
        if found:
            values[i] = sum(found) / len(found)
    return JoinResult(values, np.isnan(values))
