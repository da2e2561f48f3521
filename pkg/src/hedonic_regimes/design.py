"""Fixed-effect design matrices for the hierarchical price model.

Terms are strings. An atom is one of

* a hedonic or location attribute (``log_area``, ``rooms``, ``urban_class`` ...),
* ``quarter`` (calendar-quarter time dummies),
* ``split`` (quarter x regime split labels; needs a calendar or labels),
* ``regime`` (regime status main effect; needs a calendar or labels),
* ``ctx.<name>`` (a supplied contextual column, numeric or categorical).

Atoms joined by ``:`` form interactions. Categorical main effects drop their
reference level. In a numeric x categorical interaction the categorical keeps
every level unless the numeric main effect is itself a term, which is
how per-quarter contextual slopes (``ctx.hicp:quarter``) are written.

Column order: ``(Intercept)`` first, then terms in the given order, levels in
their declared order.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg

from .data import BOOLEAN_HEDONICS, CATEGORICAL_LEVELS, DatasetTag, ListingRecord
from .errors import RankDeficiencyError, SpecError
from .regimes import (
    NO_REGIME,
    RegimeCalendar,
    SplitTimeLabel,
    assign_split_labels,
    label_spans,
    quarter_end,
    quarter_of,
    quarter_start,
)

INTERCEPT = "(Intercept)"
NUMERIC_HEDONICS = ("log_area", "log_plot_price")

DEFAULT_REFERENCES: dict[str, object] = {
    "dwelling_type": "House",
    "rooms": "1",
    "age_class": "New",
    "open_space": "None",
    "condition": "Unclassified",
    "urban_class": "Regional",
    "accessibility": 1,
    "regime": NO_REGIME,
}

BASELINE_TERMS = (
    "log_area",
    "dwelling_type",
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
    "urban_class",
    "log_plot_price",
    "accessibility",
    "age_class:renovated",
)


@dataclass(frozen=True)
class HlmSpec:
    """Fixed terms plus reference levels; random intercepts are state and district."""

    fixed_terms: tuple = BASELINE_TERMS + ("quarter",)
    reference_levels: Mapping = field(default_factory=dict)
    response: str = "log_price"

    def reference(self, atom: str):
        if atom in self.reference_levels:
            return self.reference_levels[atom]
        return DEFAULT_REFERENCES.get(atom)


@dataclass
class DesignBundle:
    y: np.ndarray
    X: np.ndarray
    columns: list
    state_index: np.ndarray
    district_index: np.ndarray
    states: list
    districts: list
    factor_levels: dict = field(default_factory=dict)
    references: dict = field(default_factory=dict)
    dropped_empty: list = field(default_factory=list)
    label_spans: dict = field(default_factory=dict)
    record_ids: list = field(default_factory=list)

    @property
    def n_obs(self) -> int:
        return len(self.y)

    def column_index(self, name: str) -> int:
        return self.columns.index(name)


@dataclass
class _Atom:
    name: str
    numeric: np.ndarray | None = None
    codes: np.ndarray | None = None
    levels: list | None = None
    reference: object = None


def _level_str(level) -> str:
    return str(level)


def _categorical(name, values, levels_order, reference):
    present = set(values)
    levels = [lv for lv in levels_order if lv in present]
    if not levels:
        raise SpecError(f"term {name!r} has no observed levels")
    if reference is None:
        reference = levels[0]
    if reference not in present:
        raise SpecError(f"reference level {reference!r} of {name!r} not observed; levels: {levels}")
    index = {lv: i for i, lv in enumerate(levels)}
    codes = np.fromiter((index[v] for v in values), dtype=np.int64, count=len(values))
    return _Atom(name, codes=codes, levels=levels, reference=reference)


def _split_order(labels: Sequence[SplitTimeLabel], spans, dates):
    first_seen: dict[str, dt.date] = {}
    for lab, day in zip(labels, dates):
        key = str(lab)
        if key not in first_seen or day < first_seen[key]:
            first_seen[key] = day
    def start(key):
        if key in spans:
            return spans[key][0][0]
        return first_seen[key]
    return sorted(first_seen, key=lambda k: (SplitTimeLabel.parse(k).quarter, start(k), k))


class _Resolver:
    def __init__(self, records, spec, labels, contextual, spans):
        self.records = records
        self.spec = spec
        self.labels = labels
        self.contextual = contextual or {}
        self.spans = spans
        self.cache: dict[str, _Atom] = {}

    def atom(self, name: str) -> _Atom:
        if name not in self.cache:
            self.cache[name] = self._resolve(name)
        return self.cache[name]

    def _need_labels(self, name):
        if self.labels is None:
            raise SpecError(f"term {name!r} needs split labels (pass a calendar or labels)")

    def _resolve(self, name: str) -> _Atom:
        recs = self.records
        ref = self.spec.reference(name)
        if name in NUMERIC_HEDONICS:
            return _Atom(name, numeric=np.array([r.hedonics.__getattribute__(name) for r in recs], dtype=float))
        if name in BOOLEAN_HEDONICS:
            return _Atom(name, numeric=np.array([float(getattr(r.hedonics, name)) for r in recs]))
        if name in CATEGORICAL_LEVELS:
            values = [r.attribute(name) for r in recs]
            return _categorical(name, values, CATEGORICAL_LEVELS[name], ref)
        if name == "quarter":
            values = [quarter_of(r.observed_on) for r in recs]
            return _categorical(name, values, sorted(set(values)), ref)
        if name == "split":
            self._need_labels(name)
            values = [str(lab) for lab in self.labels]
            order = _split_order(self.labels, self.spans, [r.observed_on for r in recs])
            return _categorical(name, values, order, ref)
        if name == "regime":
            self._need_labels(name)
            values = [lab.regime_status for lab in self.labels]
            order = []
            for v in values:
                if v not in order:
                    order.append(v)
            order.sort(key=lambda v: (v != NO_REGIME, v))
            if ref is not None and ref not in order:
                ref = None
            return _categorical(name, values, order, ref)
        if name.startswith("ctx."):
            key = name[4:]
            if key not in self.contextual:
                raise SpecError(f"contextual column {key!r} not supplied")
            col = np.asarray(self.contextual[key])
            if len(col) != len(recs):
                raise SpecError(f"contextual column {key!r} has {len(col)} rows, expected {len(recs)}")
            if col.dtype.kind in "fiub":
                col = col.astype(float)
                if np.isnan(col).any():
                    raise SpecError(f"contextual column {key!r} has {int(np.isnan(col).sum())} missing values")
                return _Atom(name, numeric=col)
            values = [str(v) for v in col]
            return _categorical(name, values, sorted(set(values)), ref)
        raise SpecError(f"unresolvable term {name!r}")


def _term_columns(term, resolver, spec_terms, n):
    atoms = [resolver.atom(a) for a in term.split(":")]
    numeric = [a for a in atoms if a.numeric is not None]
    cats = [a for a in atoms if a.codes is not None]
    num_main_present = numeric and ":".join(a.name for a in numeric) in spec_terms
    full_levels = bool(numeric) and len(cats) == 1 and not num_main_present

    base = np.ones(n)
    base_name = []
    for a in numeric:
        base = base * a.numeric
        base_name.append(a.name)
    cols = [(base_name, base)]
    for a in cats:
        keep = [i for i, lv in enumerate(a.levels) if full_levels or lv != a.reference]
        new = []
        for names, vec in cols:
            for i in keep:
                new.append((names + [f"{a.name}[{_level_str(a.levels[i])}]"], vec * (a.codes == i)))
        cols = new
    # order name parts as written in the term
    out = []
    order = {a.name: k for k, a in enumerate(atoms)}
    for names, vec in cols:
        names = sorted(names, key=lambda s: order[s.split("[")[0]])
        out.append((":".join(names), vec))
    return out


def build_design(
    records: Sequence[ListingRecord],
    spec: HlmSpec,
    calendar: RegimeCalendar | None = None,
    labels: Sequence[SplitTimeLabel] | None = None,
    contextual: Mapping[str, Sequence] | None = None,
) -> DesignBundle:
    """Response (log price), fixed-effect matrix, and state/district indices."""
    records = list(records)
    if not records:
        raise SpecError("no records")
    for r in records:
        if r.tag is DatasetTag.DEEDS or r.hedonics is None:
            raise SpecError("price designs need hedonic records (Adverts or BrokeredAdverts)")
    spans = {}
    if calendar is not None:
        if labels is None:
            labels = assign_split_labels(records, calendar)
        spans = label_spans(calendar)
    elif labels is not None:
        labels = list(labels)
        if len(labels) != len(records):
            raise SpecError("labels must align with records")
    resolver = _Resolver(records, spec, labels, contextual, spans)
    n = len(records)
    spec_terms = set(spec.fixed_terms)

    names = [INTERCEPT]
    cols = [np.ones(n)]
    for term in spec.fixed_terms:
        for name, vec in _term_columns(term, resolver, spec_terms, n):
            names.append(name)
            cols.append(vec)
    X = np.column_stack(cols)
    empty = [names[j] for j in range(X.shape[1]) if not np.any(X[:, j])]
    if empty:
        keep = [j for j in range(X.shape[1]) if np.any(X[:, j])]
        X = X[:, keep]
        names = [names[j] for j in keep]

    factor_levels = {}
    references = {}
    for atom_name, atom in resolver.cache.items():
        if atom.levels is not None:
            factor_levels[atom_name] = [_level_str(lv) for lv in atom.levels]
            references[atom_name] = _level_str(atom.reference)

    if "split" in resolver.cache and not spans:
        spans = _observed_spans(records, labels)
    if "quarter" in resolver.cache:
        for q in factor_levels["quarter"]:
            spans.setdefault(q, [(quarter_start(q), quarter_end(q))])

    states = sorted({r.state for r in records})
    districts = sorted({r.district for r in records})
    s_idx = {s: i for i, s in enumerate(states)}
    d_idx = {d: i for i, d in enumerate(districts)}
    return DesignBundle(
        y=np.log(np.array([r.price for r in records], dtype=float)),
        X=X,
        columns=names,
        state_index=np.array([s_idx[r.state] for r in records], dtype=np.int64),
        district_index=np.array([d_idx[r.district] for r in records], dtype=np.int64),
        states=states,
        districts=districts,
        factor_levels=factor_levels,
        references=references,
        dropped_empty=empty,
        label_spans=spans,
        record_ids=[r.id for r in records],
    )


def _observed_spans(records, labels):
    by_label: dict[str, list] = {}
    for r, lab in zip(records, labels):
        by_label.setdefault(str(lab), []).append(r.observed_on)
    return {k: [(min(v), max(v))] for k, v in by_label.items()}


def check_rank(X: np.ndarray, columns: Sequence[str], rtol: float = 1e-10) -> None:
    """Raise :class:`RankDeficiencyError` naming the columns beyond the numerical rank."""
    if X.shape[0] <= X.shape[1]:
        raise RankDeficiencyError(f"n_obs={X.shape[0]} must exceed the {X.shape[1]} fixed columns")
    scale = np.linalg.norm(X, axis=0)
    scale[scale == 0] = 1.0
    _, R, piv = scipy.linalg.qr(X / scale, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > rtol * diag[0]))
    if rank < X.shape[1]:
        bad = [columns[j] for j in piv[rank:]]
        raise RankDeficiencyError(f"design is rank deficient; collinear columns: {', '.join(bad)}", bad)
