"""Price and quantity indices, market segmentations, and Pearson tests."""

from __future__ import annotations

import csv
import datetime as dt
import math
import warnings
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .data import ListingRecord, PanelCell
from .design import HlmSpec, build_design
from .errors import DataError, SpecError
from .hlm import HlmFit, fit_hlm
from .regimes import RegimeCalendar, parse_quarter, quarter_end, quarter_of, quarter_range, quarter_start, shift_quarter

UNSEGMENTABLE = "unsegmentable"
UNRANKED = "unranked"


class IndexKind(str, Enum):
    PRICE_TIME_DUMMY = "PriceTimeDummy"
    QUANTITY_YOY = "QuantityYoY"
    SEGMENT_RELATIVE = "SegmentRelative"


class SegmentDimension(str, Enum):
    PRICE_QUANTILE = "PriceQuantile"
    DWELLING_TYPE = "DwellingType"
    URBAN_CLASS = "UrbanClass"
    OPEN_SPACE = "OpenSpace"
    DISTRICT_PRICE_RANK = "DistrictPriceRank"


class Alternative(str, Enum):
    TWO_SIDED = "TwoSided"
    GREATER = "Greater"
    LESS = "Less"


@dataclass
class IndexSeries:
    """Ordered index values; ``spans`` gives each label's inclusive date segments.

    Price indices equal 1 at ``base_label``. Quantity indices are ratios to
    the same quarter a year earlier and carry no base.
    """

    labels: list
    values: np.ndarray
    base_label: object
    kind: IndexKind
    segment: str | None = None
    spans: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)
    reference_segment: str | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if len(self.labels) != len(self.values):
            raise ValueError("labels and values differ in length")
        if self.kind is not IndexKind.QUANTITY_YOY and np.any(self.values <= 0):
            raise ValueError("price index values must be positive")

    def __getitem__(self, label):
        return float(self.values[self.labels.index(label)])

    def as_dict(self) -> dict:
        return dict(zip(self.labels, self.values.tolist()))

    def start(self, label) -> dt.date:
        return self.spans[label][0][0]


# --------------------------------------------------------------------------
# time-dummy indices


def _time_term(fit: HlmFit) -> str:
    for term in ("split", "quarter"):
        if term in fit.factor_levels:
            return term
    raise SpecError("fit has no quarter or split time dummies")


def _log_levels(fit: HlmFit, term: str, segment_term: str | None = None, segment=None) -> dict:
    levels = fit.factor_levels[term]
    coef = dict(zip(fit.columns, fit.beta))
    out = {}
    for lv in levels:
        if lv == fit.references[term]:
            # the segment main effect absorbs the reference period
            out[lv] = 0.0
            continue
        delta = coef.get(f"{term}[{lv}]")
        if delta is None:
            continue
        if segment_term is not None and segment != fit.references[segment_term]:
            inter = coef.get(f"{segment_term}[{segment}]:{term}[{lv}]")
            if inter is None:
                continue
            delta += inter
        out[lv] = delta
    return out


def _resolve_base(base, deltas: dict, spans: dict, default):
    if base is None:
        return default
    if isinstance(base, str):
        if base not in deltas:
            raise SpecError(f"base label {base!r} not in fit; available: {', '.join(deltas)}")
        return base
    start, end = base
    for label in deltas:
        if spans.get(label) == [(start, end)]:
            return label
    raise SpecError(
        f"no split label spans exactly {start}..{end}; available: "
        + ", ".join(f"{k} {v[0][0]}..{v[-1][1]}" for k, v in spans.items() if k in deltas)
    )


def _ordered(labels, spans):
    return sorted(labels, key=lambda k: (spans[k][0][0] if k in spans else _label_start(k), k))


def _label_start(label: str) -> dt.date:
    return quarter_start(label.split(":")[0])


def index_from_dummies(fit: HlmFit, base=None, term: str | None = None) -> IndexSeries:
    """``exp(delta_t - delta_base)`` over the fit's time (or split-label) dummies.

    ``base`` is a label, a ``(start, end)`` window that must coincide with
    exactly one split label's span, or ``None`` for the reference period.
    """
    term = term or _time_term(fit)
    deltas = _log_levels(fit, term)
    spans = {k: v for k, v in fit.label_spans.items() if k in deltas}
    base_label = _resolve_base(base, deltas, spans, fit.references[term])
    labels = _ordered(deltas, spans)
    d0 = deltas[base_label]
    values = np.exp(np.array([deltas[k] - d0 for k in labels]))
    return IndexSeries(labels, values, base_label, IndexKind.PRICE_TIME_DUMMY, spans=spans)


# --------------------------------------------------------------------------
# segmentation


@dataclass(frozen=True)
class SegmentRule:
    dimension: SegmentDimension
    cut_points: tuple = (0.2, 0.8)

    def __post_init__(self):
        object.__setattr__(self, "dimension", SegmentDimension(self.dimension))
        cuts = tuple(float(c) for c in self.cut_points)
        object.__setattr__(self, "cut_points", cuts)
        if self.dimension in (SegmentDimension.PRICE_QUANTILE, SegmentDimension.DISTRICT_PRICE_RANK):
            if not cuts or any(not 0 < c < 1 for c in cuts) or any(b <= a for a, b in zip(cuts, cuts[1:])):
                raise ValueError(f"cut points must increase strictly within (0, 1): {cuts}")

    def segment_names(self) -> list[str]:
        if self.dimension in (SegmentDimension.PRICE_QUANTILE, SegmentDimension.DISTRICT_PRICE_RANK):
            return quantile_segment_names(self.cut_points)
        from .data import DWELLING_TYPES, OPEN_SPACE, URBAN_CLASSES

        return list({
            SegmentDimension.DWELLING_TYPE: DWELLING_TYPES,
            SegmentDimension.URBAN_CLASS: URBAN_CLASSES,
            SegmentDimension.OPEN_SPACE: OPEN_SPACE,
        }[self.dimension])


def quantile_segment_names(cuts) -> list[str]:
    edges = [0.0, *cuts, 1.0]
    return [f"p{100 * lo:g}-{100 * hi:g}" for lo, hi in zip(edges, edges[1:])]


def _bin(values: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    # values equal to a threshold fall into the lower segment
    return np.searchsorted(thresholds, values, side="left")


def price_per_sqm(record: ListingRecord) -> float:
    if record.hedonics is None:
        raise DataError(f"record {record.id} has no floor area")
    return record.price / math.exp(record.hedonics.log_area)


def price_quantile_segments(
    records: Sequence[ListingRecord], period: str, cuts=(0.2, 0.8), min_records: int = 5
) -> dict[str, str]:
    """Map record id -> price-per-m2 segment within one quarter.

    Thresholds are empirical (inverted-CDF) quantiles of the quarter's
    price per m2; values on a threshold go to the lower segment.
    """
    rule = SegmentRule(SegmentDimension.PRICE_QUANTILE, cuts)
    in_q = [r for r in records if quarter_of(r.observed_on) == period]
    if len(in_q) < min_records:
        raise DataError(f"quarter {period} has {len(in_q)} records; at least {min_records} needed")
    ppsqm = np.array([price_per_sqm(r) for r in in_q])
    thresholds = np.quantile(ppsqm, rule.cut_points, method="inverted_cdf")
    names = rule.segment_names()
    return {r.id: names[i] for r, i in zip(in_q, _bin(ppsqm, thresholds))}


def district_price_ranks(records: Sequence[ListingRecord], cuts=(0.2, 0.8)) -> dict[str, str]:
    """Map district -> segment by its rank in mean price per m2 over all records."""
    rule = SegmentRule(SegmentDimension.DISTRICT_PRICE_RANK, cuts)
    sums: dict[str, list] = {}
    for r in records:
        acc = sums.setdefault(r.district, [0.0, 0])
        acc[0] += price_per_sqm(r)
        acc[1] += 1
    ranked = sorted(sums, key=lambda d: (sums[d][0] / sums[d][1], d))
    D = len(ranked)
    frac = (np.arange(D) + 1.0) / D
    names = rule.segment_names()
    idx = _bin(frac, np.array(rule.cut_points))
    return {d: names[i] for d, i in zip(ranked, idx)}


def segment_records(
    records: Sequence[ListingRecord],
    rule: SegmentRule,
    reference_records: Sequence[ListingRecord] | None = None,
) -> list[str]:
    """Segment label for each record (``unsegmentable``/``unranked`` when undefined)."""
    dim = rule.dimension
    if dim is SegmentDimension.DWELLING_TYPE:
        return [r.dwelling_type for r in records]
    if dim is SegmentDimension.URBAN_CLASS:
        return [r.location.urban_class for r in records]
    if dim is SegmentDimension.OPEN_SPACE:
        return [r.hedonics.open_space if r.hedonics is not None else UNSEGMENTABLE for r in records]
    if dim is SegmentDimension.DISTRICT_PRICE_RANK:
        ranks = district_price_ranks(reference_records if reference_records is not None else records, rule.cut_points)
        return [ranks.get(r.district, UNRANKED) for r in records]
    out = {}
    for q in sorted({quarter_of(r.observed_on) for r in records}):
        try:
            out.update(price_quantile_segments(records, q, rule.cut_points))
        except DataError:
            continue
    return [out.get(r.id, UNSEGMENTABLE) for r in records]


def _cell_segments(cells: Sequence[PanelCell], rule: SegmentRule) -> list[str]:
    if rule.dimension is SegmentDimension.DWELLING_TYPE:
        return [c.dwelling_type for c in cells]
    if rule.dimension is SegmentDimension.URBAN_CLASS:
        return [c.urban_class for c in cells]
    raise SpecError(f"panel cells cannot be segmented by {rule.dimension.value}")


_SEGMENT_ATTRIBUTE = {
    SegmentDimension.DWELLING_TYPE: "dwelling_type",
    SegmentDimension.URBAN_CLASS: "urban_class",
    SegmentDimension.OPEN_SPACE: "open_space",
}


def segment_indices(
    records: Sequence[ListingRecord],
    spec: HlmSpec,
    rule: SegmentRule,
    *,
    calendar: RegimeCalendar | None = None,
    contextual: Mapping[str, Sequence] | None = None,
    base=None,
    reference_records: Sequence[ListingRecord] | None = None,
    fit_options: Mapping | None = None,
    separate: bool = False,
) -> dict[str, IndexSeries]:
    """One normalised price index per segment from a joint segment x time fit.

    The largest segment with full period coverage is the reference; other
    segments get ``segment:time`` interaction dummies. With ``separate`` each
    segment is fitted on its own records instead (hedonic slopes then differ
    across segments and standard errors are not comparable). Terms on the
    segmenting attribute itself are dropped from ``spec``. Periods in which
    a segment has no observation are flagged ``missing`` for that segment.
    """
    records = list(records)
    segs = segment_records(records, rule, reference_records)
    keep = [i for i, s in enumerate(segs) if s not in (UNSEGMENTABLE, UNRANKED)]
    if len(keep) < len(records):
        warnings.warn(f"{len(records) - len(keep)} records without a segment excluded", RuntimeWarning, stacklevel=2)
    records = [records[i] for i in keep]
    segs = [segs[i] for i in keep]
    contextual = {k: [v[i] for i in keep] for k, v in (contextual or {}).items()}
    present = [s for s in rule.segment_names() if s in set(segs)]
    present += sorted(set(segs) - set(present))
    for s in rule.segment_names():
        if s not in present:
            warnings.warn(f"segment {s!r} is empty and dropped", RuntimeWarning, stacklevel=2)
    # a term on the segmenting attribute would duplicate the segment factor
    own = _SEGMENT_ATTRIBUTE.get(rule.dimension)
    if own is not None:
        terms = tuple(t for t in spec.fixed_terms if own not in t.split(":"))
        spec = HlmSpec(terms, spec.reference_levels, spec.response)
    time = "split" if "split" in spec.fixed_terms else "quarter"
    if time not in spec.fixed_terms:
        raise SpecError("segment indices need a quarter or split time term")

    if separate:
        out = {}
        for s in present:
            idx = [i for i, g in enumerate(segs) if g == s]
            sub_ctx = {k: [v[i] for i in idx] for k, v in contextual.items()}
            design = build_design([records[i] for i in idx], spec, calendar=calendar, contextual=sub_ctx)
            series = index_from_dummies(fit_hlm(design, **(fit_options or {})), base)
            series.kind = IndexKind.SEGMENT_RELATIVE
            series.segment = s
            out[s] = series
        return out

    if len(present) == 1:
        fit = fit_hlm(build_design(records, spec, calendar=calendar, contextual=contextual), **(fit_options or {}))
        series = index_from_dummies(fit, base)
        series.segment = present[0]
        return {present[0]: series}

    if time == "split":
        from .regimes import assign_split_labels

        if calendar is None:
            raise SpecError("split time term needs a calendar")
        periods = [str(l) for l in assign_split_labels(records, calendar)]
    else:
        periods = [quarter_of(r.observed_on) for r in records]
    all_periods = set(periods)
    cover = Counter(zip(segs, periods))
    sizes = Counter(segs)
    full = [s for s in present if all(cover[(s, p)] > 0 for p in all_periods)]
    if not full:
        raise DataError("no segment covers every period; cannot pick a reference segment")
    ref = max(full, key=lambda s: (sizes[s], -present.index(s)))

    seg_term = "ctx.segment"
    refs = dict(spec.reference_levels)
    refs[seg_term] = ref
    joint = HlmSpec(tuple(spec.fixed_terms) + (seg_term, f"{seg_term}:{time}"), refs, spec.response)
    ctx = dict(contextual)
    ctx["segment"] = segs
    design = build_design(records, joint, calendar=calendar, contextual=ctx)
    fit = fit_hlm(design, **(fit_options or {}))

    out = {}
    for s in present:
        deltas = _log_levels(fit, time, seg_term, s)
        missing = {p: "missing" for p in all_periods if cover[(s, p)] == 0}
        for p in missing:
            deltas.pop(p, None)
        spans = {k: v for k, v in fit.label_spans.items() if k in deltas}
        default = fit.references[time]
        if default not in deltas:
            default = _ordered(deltas, spans)[0]
        base_label = _resolve_base(base, deltas, spans, default)
        labels = _ordered(deltas, spans)
        d0 = deltas[base_label]
        vals = np.exp(np.array([deltas[k] - d0 for k in labels]))
        out[s] = IndexSeries(labels, vals, base_label, IndexKind.SEGMENT_RELATIVE, segment=s,
                             spans=spans, flags=missing, reference_segment=ref)
    return out


# --------------------------------------------------------------------------
# quantity indices


def _quarter_counts(data, group, reference_records) -> Counter:
    counts: Counter = Counter()
    if isinstance(data, Mapping):
        for key, value in data.items():
            seg, q = key if isinstance(key, tuple) else (None, key)
            counts[(seg, q)] += value
        return counts
    data = list(data)
    if not data:
        return counts
    if isinstance(data[0], PanelCell):
        from .nbcount import cell_quarter

        segs = _cell_segments(data, group) if group is not None else [None] * len(data)
        for c, s in zip(data, segs):
            counts[(s, cell_quarter(c))] += c.count
        return counts
    segs = segment_records(data, group, reference_records) if group is not None else [None] * len(data)
    for r, s in zip(data, segs):
        counts[(s, quarter_of(r.observed_on))] += 1
    return counts


def yoy_quantity_index(
    data,
    group: SegmentRule | None = None,
    *,
    quarters: tuple[str, str] | None = None,
    reference_records: Sequence[ListingRecord] | None = None,
    strict: bool = False,
):
    """Quarterly count divided by the count in the same quarter a year earlier.

    ``data`` is a sequence of records or panel cells, or a mapping
    ``quarter -> count`` (``(segment, quarter) -> count`` when grouped).
    Quarters without a prior-year quarter in range are omitted and flagged
    ``no-prior-year``; a zero prior-year count is flagged ``undefined-ratio``
    (or raises with ``strict``). Returns one series, or a mapping segment ->
    series when grouped.
    """
    counts = _quarter_counts(data, group, reference_records)
    if quarters is None:
        qs = sorted({q for _, q in counts}, key=parse_quarter)
        if not qs:
            raise DataError("no observations")
        quarters = (qs[0], qs[-1])
    qrange = quarter_range(*quarters)
    segments = sorted({s for s, _ in counts}, key=lambda s: (s is None, str(s)))
    out = {}
    for seg in segments:
        labels, values, flags = [], [], {}
        for q in qrange:
            prev = shift_quarter(q, -4)
            if prev not in qrange:
                flags[q] = "no-prior-year"
                continue
            c_prev = counts.get((seg, prev), 0)
            if c_prev == 0:
                if strict:
                    raise DataError(f"undefined year-over-year ratio for {q}: zero count in {prev}")
                flags[q] = "undefined-ratio"
                continue
            labels.append(q)
            values.append(counts.get((seg, q), 0) / c_prev)
        spans = {q: [(quarter_start(q), quarter_end(q))] for q in labels}
        out[seg] = IndexSeries(labels, np.array(values), None, IndexKind.QUANTITY_YOY, segment=seg,
                               spans=spans, flags=flags)
    if group is None:
        return out[None]
    return out


# --------------------------------------------------------------------------
# correlation


@dataclass(frozen=True)
class CorrelationResult:
    r: float
    n: int
    p_value: float
    alternative: Alternative


def pearson_test(x, y, alternative: Alternative | str = Alternative.TWO_SIDED) -> CorrelationResult:
    """Pearson r with a t-test on ``n - 2`` degrees of freedom."""
    alternative = Alternative(alternative)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-d sequences of equal length")
    n = len(x)
    if n < 3:
        raise ValueError("need at least 3 pairs")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = dx @ dx, dy @ dy
    if sxx == 0 or syy == 0:
        raise ValueError("correlation undefined for constant input")
    r = float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))
    if 1.0 - abs(r) < 1e-12:
        r = math.copysign(1.0, r)
    df = n - 2
    if abs(r) == 1.0:
        t = math.copysign(math.inf, r)
    else:
        t = r * math.sqrt(df / (1.0 - r * r))
    if alternative is Alternative.TWO_SIDED:
        p = 2.0 * stats.t.sf(abs(t), df)
    elif alternative is Alternative.GREATER:
        p = stats.t.sf(t, df)
    else:
        p = stats.t.cdf(t, df)
    return CorrelationResult(r, n, float(min(max(p, 0.0), 1.0)), alternative)


# --------------------------------------------------------------------------
# output


INDEX_COLUMNS = ("label", "start_date", "end_date", "value", "kind", "segment")
CORRELATION_COLUMNS = ("x_name", "y_name", "n", "r", "p", "alternative")


def write_index(series: Sequence[IndexSeries] | IndexSeries, path) -> None:
    """One row per contiguous date segment of every label (step-function ready)."""
    if isinstance(series, IndexSeries):
        series = [series]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(INDEX_COLUMNS)
        for s in series:
            for label, value in zip(s.labels, s.values):
                for start, end in s.spans.get(label, [(None, None)]):
                    w.writerow([label, start.isoformat() if start else "", end.isoformat() if end else "",
                                repr(float(value)), s.kind.value, s.segment or ""])


def write_correlations(rows: Sequence[tuple[str, str, CorrelationResult]], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CORRELATION_COLUMNS)
        for xn, yn, res in rows:
            w.writerow([xn, yn, res.n, repr(res.r), repr(res.p_value), res.alternative.value])
