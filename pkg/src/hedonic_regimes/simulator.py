"""Seeded synthetic housing market: adverts, brokered adverts and deeds.

Random streams. Every draw comes from a ``PCG64`` generator seeded with
``SeedSequence(seed, spawn_key=(stream, state_position))``, so each state's
draws are independent of how many states come before it or of the order in
which states are generated. All uniforms used for thinning and conversion
are drawn whether or not a shock is configured, which makes paired runs
(same seed, different shocks) share their random numbers.
"""

from __future__ import annotations

import csv
import datetime as dt
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from . import __version__
from .data import (
    AGE_CLASSES,
    CONDITIONS,
    DWELLING_TYPES,
    OPEN_SPACE,
    ROOMS,
    STATES,
    URBAN_CLASSES,
    DatasetTag,
    HedonicProfile,
    ListingRecord,
    LocationKey,
    PanelCell,
    iso_week_label,
    write_listings,
)
from .errors import ConfigError, DataError
from .hlm import HlmFit, VarianceComponents
from .indices import SegmentDimension, SegmentRule
from .nbcount import CYCLE_COLUMNS, NbFit, WEEKS_PER_YEAR
from .regimes import ONE_DAY, RegimeInterval, quarter_of, quarter_range

DAYS_PER_QUARTER = 365.25 / 4

# stream identifiers for SeedSequence spawn keys
_S_DISTRICTS, _S_COUNTS, _S_LISTINGS, _S_REMAINDER, _S_PANEL = range(5)


class ShockKind(str, Enum):
    IMMEDIATE_PRICE_SHIFT = "ImmediatePriceShift"
    GRADUAL_PRICE_DRIFT = "GradualPriceDrift"
    DEMAND_THINNING = "DemandThinning"
    SUPPLY_THINNING = "SupplyThinning"


PRICE_SHOCKS = (ShockKind.IMMEDIATE_PRICE_SHIFT, ShockKind.GRADUAL_PRICE_DRIFT)
RECORD_TARGETS = (SegmentDimension.DWELLING_TYPE, SegmentDimension.URBAN_CLASS, SegmentDimension.OPEN_SPACE)


@dataclass(frozen=True)
class StateSpec:
    name: str
    districts: int
    population: float
    log_plot_price: float = 6.2


DEFAULT_STATES = (
    StateSpec("Burgenland", 9, 297_000, 4.9),
    StateSpec("Carinthia", 10, 564_000, 5.3),
    StateSpec("LowerAustria", 24, 1_698_000, 5.4),
    StateSpec("UpperAustria", 18, 1_505_000, 5.6),
    StateSpec("Salzburg", 6, 562_000, 6.5),
    StateSpec("Styria", 13, 1_253_000, 5.3),
    StateSpec("Tyrol", 9, 764_000, 6.4),
    StateSpec("Vorarlberg", 4, 401_000, 6.6),
    StateSpec("Vienna", 23, 1_931_000, 7.3),
)

# adverts-scale hedonic effects; names follow the design column grammar
DEFAULT_FIXED_EFFECTS = {
    "(Intercept)": 7.315,
    "log_area": 0.872,
    "dwelling_type[Apartment]": -0.093,
    "rooms[2]": -0.002,
    "rooms[3]": 0.040,
    "rooms[4+]": 0.065,
    "age_class[1-5]": -0.036,
    "age_class[6-10]": -0.063,
    "age_class[11-20]": -0.141,
    "age_class[21-40]": -0.257,
    "age_class[PostWar]": -0.343,
    "age_class[1914-45]": -0.272,
    "age_class[Vintage]": -0.233,
    "renovated": -0.074,
    "open_space[UpTo15]": 0.062,
    "open_space[Over15]": 0.129,
    "basement": 0.016,
    "parking": -0.009,
    "air_conditioning": 0.083,
    "step_free": 0.009,
    "wellness": 0.138,
    "condition[FirstOccupancy]": 0.057,
    "condition[AsNew]": 0.019,
    "condition[Poor]": -0.164,
    "urban_class[Urban]": -0.001,
    "urban_class[LargelyUrban]": -0.012,
    "urban_class[Rural]": 0.035,
    "log_plot_price": 0.255,
    "accessibility[2]": -0.042,
    "accessibility[3]": -0.074,
    "accessibility[4]": -0.097,
    "accessibility[5]": -0.131,
    "age_class[1-5]:renovated": 0.021,
    "age_class[6-10]:renovated": 0.006,
    "age_class[11-20]:renovated": 0.053,
    "age_class[21-40]:renovated": 0.091,
    "age_class[PostWar]:renovated": 0.107,
    "age_class[1914-45]:renovated": 0.132,
    "age_class[Vintage]:renovated": 0.137,
}

DEFAULT_COUNT_EFFECTS = {
    "dwelling_type[Apartment]": 0.612,
    "state[Burgenland]": 0.787,
    "state[Carinthia]": -0.193,
    "state[UpperAustria]": -0.749,
    "state[Salzburg]": 0.124,
    "state[Styria]": -0.353,
    "state[Tyrol]": -0.317,
    "state[Vorarlberg]": -0.290,
    "state[Vienna]": 1.517,
    "urban_class[LargelyUrban]": -0.086,
    "urban_class[Regional]": 0.139,
    "urban_class[Rural]": -0.2,
}

# categorical weights per dwelling type (House, Apartment), in level order
DEFAULT_HEDONIC_DISTRIBUTIONS = {
    "log_area": {"House": [math.log(130.0), 0.30], "Apartment": [math.log(70.0), 0.35]},
    "log_plot_price_sd": 0.15,
    "rooms": {"House": [0.05, 0.15, 0.30, 0.50], "Apartment": [0.15, 0.35, 0.35, 0.15]},
    "age_class": {
        "House": [0.10, 0.07, 0.07, 0.13, 0.22, 0.21, 0.05, 0.15],
        "Apartment": [0.14, 0.09, 0.07, 0.13, 0.18, 0.19, 0.05, 0.15],
    },
    "open_space": {"House": [0.10, 0.30, 0.60], "Apartment": [0.30, 0.50, 0.20]},
    "condition": {"House": [0.20, 0.20, 0.15, 0.45], "Apartment": [0.30, 0.20, 0.08, 0.42]},
    "renovated": {"House": 0.18, "Apartment": 0.12},
    "basement": {"House": 0.60, "Apartment": 0.30},
    "parking": {"House": 0.60, "Apartment": 0.45},
    "air_conditioning": {"House": 0.06, "Apartment": 0.10},
    "step_free": {"House": 0.15, "Apartment": 0.45},
    "wellness": {"House": 0.04, "Apartment": 0.03},
}
_CATEGORICAL_DRAWS = (("rooms", ROOMS), ("age_class", AGE_CLASSES), ("open_space", OPEN_SPACE), ("condition", CONDITIONS))
_BOOLEAN_DRAWS = ("renovated", "basement", "parking", "air_conditioning", "step_free", "wellness")


@dataclass(frozen=True)
class LagSpec:
    """Gamma-distributed lag in days, rounded to whole days."""

    mean: float
    shape: float = 2.0

    def __post_init__(self):
        if self.mean < 0 or not self.shape > 0:
            raise ConfigError(f"lag needs mean >= 0 and shape > 0, got {self}")

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.mean == 0:
            rng.random(n)  # keep the stream aligned
            return np.zeros(n, dtype=np.int64)
        return np.floor(rng.gamma(self.shape, self.mean / self.shape, n) + 0.5).astype(np.int64)


@dataclass(frozen=True)
class CountParams:
    """Weekly advert rate per person: ``exp(intercept + effects + cycle)``."""

    intercept: float = -9.0
    effects: Mapping = field(default_factory=lambda: dict(DEFAULT_COUNT_EFFECTS))
    dispersion: float = 2.0
    cycle_amplitude: float = 0.111
    cycle_shift: float = -1.98
    period: float = WEEKS_PER_YEAR
    target_listings: float | None = None

    def __post_init__(self):
        if not self.dispersion > 0:
            raise ConfigError("dispersion must be positive")
        if not self.period > 0:
            raise ConfigError("cycle period must be positive")

    @property
    def beta_cos(self) -> float:
        return self.cycle_amplitude * math.cos(self.cycle_shift)

    @property
    def beta_sin(self) -> float:
        return self.cycle_amplitude * math.sin(self.cycle_shift)


@dataclass(frozen=True)
class ShockSpec:
    """A shock active on ``window`` (half-open), optionally limited to one segment."""

    kind: ShockKind
    window: RegimeInterval
    magnitude: float
    target: SegmentRule | None = None
    segment: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", ShockKind(self.kind))
        if self.kind not in PRICE_SHOCKS and not 0 <= self.magnitude < 1:
            raise ConfigError(f"thinning probability must lie in [0, 1), got {self.magnitude}")
        if (self.target is None) != (self.segment is None):
            raise ConfigError("a shock target needs both a rule and a segment")
        if self.target is not None and self.target.dimension not in RECORD_TARGETS:
            raise ConfigError(f"shocks cannot target {self.target.dimension.value} segments")

    def price_effect(self, days: np.ndarray) -> np.ndarray:
        """Log-price shift at the given dates (days since 1970-01-01)."""
        s, e = _ordinal(self.window.start), _ordinal(self.window.end)
        if self.kind is ShockKind.IMMEDIATE_PRICE_SHIFT:
            return self.magnitude * ((days >= s) & (days < e))
        # the level reached at the end of the window persists afterwards
        return self.magnitude * np.clip(days - s, 0, e - s) / DAYS_PER_QUARTER

    def active(self, days: np.ndarray) -> np.ndarray:
        return (days >= _ordinal(self.window.start)) & (days < _ordinal(self.window.end))

    def to_dict(self) -> dict:
        out = {
            "kind": self.kind.value,
            "start": self.window.start.isoformat(),
            "end": (self.window.end - ONE_DAY).isoformat(),
            "magnitude": self.magnitude,
        }
        if self.target is not None:
            out["target"] = {"dimension": self.target.dimension.value, "segment": self.segment}
        return out

    @classmethod
    def from_dict(cls, d: Mapping) -> "ShockSpec":
        start = _date(d["start"])
        end = _date(d["end"]) + ONE_DAY
        target = segment = None
        if d.get("target"):
            target = SegmentRule(d["target"]["dimension"])
            segment = d["target"]["segment"]
        return cls(d["kind"], RegimeInterval(d.get("name", d["kind"]), start, end), float(d["magnitude"]),
                   target, segment)


def _date(value) -> dt.date:
    return value if isinstance(value, dt.date) else dt.date.fromisoformat(str(value))


_EPOCH = dt.date(1970, 1, 1)


def _ordinal(day: dt.date) -> int:
    return (day - _EPOCH).days


@dataclass(frozen=True)
class MarketConfig:
    seed: int = 0
    coverage: tuple = (dt.date(2019, 1, 1), dt.date(2023, 3, 31))
    states: tuple = DEFAULT_STATES
    true_fixed_effects: Mapping = field(default_factory=lambda: dict(DEFAULT_FIXED_EFFECTS))
    true_variance: VarianceComponents = VarianceComponents(0.04, 0.02, 0.10)
    count: CountParams = CountParams()
    quarterly_drift: float = 0.01
    quarter_effects: Mapping | None = None
    brokered_share: float = 0.35
    brokered_discount: float = -0.04
    negotiation_sd: float = 0.03
    agreement_lag: LagSpec = LagSpec(60.0)
    deed_lag: LagSpec = LagSpec(45.0)
    non_advertised_ratio: float = 1.0
    hedonic_distributions: Mapping = field(default_factory=lambda: json.loads(json.dumps(DEFAULT_HEDONIC_DISTRIBUTIONS)))
    shocks: tuple = ()

    def __post_init__(self):
        first, last = (_date(d) for d in self.coverage)
        object.__setattr__(self, "coverage", (first, last))
        if not first < last:
            raise ConfigError("coverage must span at least two days")
        object.__setattr__(self, "shocks", tuple(self.shocks))
        if not 0 <= self.brokered_share <= 1:
            raise ConfigError("brokered_share must be a probability")
        if not self.non_advertised_ratio > 0:
            raise ConfigError("non_advertised_ratio must be positive so deeds exceed brokered adverts")
        if self.negotiation_sd < 0:
            raise ConfigError("negotiation_sd must be non-negative")
        names = [s.name for s in self.states]
        if len(set(names)) != len(names) or set(names) - set(STATES):
            raise ConfigError(f"states must be distinct members of {STATES}")
        for s in self.states:
            if s.districts < len(URBAN_CLASSES):
                raise ConfigError(f"{s.name}: need at least {len(URBAN_CLASSES)} districts (one per urban class)")
            if not s.population > 0:
                raise ConfigError(f"{s.name}: population must be positive")
        for key in self.true_fixed_effects:
            if key.startswith("quarter") or key.startswith("split"):
                raise ConfigError(f"time effects go in quarter_effects, not {key!r}")
        for shock in self.shocks:
            if shock.window.start < first or shock.window.end > last + ONE_DAY:
                raise ConfigError(f"shock {shock.kind.value} window lies outside coverage {first}..{last}")

    # ------------------------------------------------------------------

    def to_dict(self) -> dict:
        v = self.true_variance
        return {
            "seed": self.seed,
            "coverage": [self.coverage[0].isoformat(), self.coverage[1].isoformat()],
            "states": [asdict(s) for s in self.states],
            "true_fixed_effects": dict(self.true_fixed_effects),
            "true_variance": {"state": v.sigma2_state, "district": v.sigma2_district, "residual": v.sigma2_resid},
            "count": {
                "intercept": self.count.intercept,
                "effects": dict(self.count.effects),
                "dispersion": self.count.dispersion,
                "cycle_amplitude": self.count.cycle_amplitude,
                "cycle_shift": self.count.cycle_shift,
                "period": self.count.period,
                "target_listings": self.count.target_listings,
            },
            "quarterly_drift": self.quarterly_drift,
            "quarter_effects": dict(self.quarter_effects) if self.quarter_effects is not None else None,
            "brokered_share": self.brokered_share,
            "brokered_discount": self.brokered_discount,
            "negotiation_sd": self.negotiation_sd,
            "agreement_lag": asdict(self.agreement_lag),
            "deed_lag": asdict(self.deed_lag),
            "non_advertised_ratio": self.non_advertised_ratio,
            "hedonic_distributions": json.loads(json.dumps(self.hedonic_distributions)),
            "shocks": [s.to_dict() for s in self.shocks],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "MarketConfig":
        """Build from a plain mapping (e.g. parsed YAML); absent keys keep defaults."""
        kw: dict = {}
        simple = ("seed", "quarterly_drift", "brokered_share", "brokered_discount", "negotiation_sd",
                  "non_advertised_ratio")
        for key in simple:
            if key in d:
                kw[key] = type(getattr(cls, key, 0.0))(d[key]) if key != "seed" else int(d[key])
        if "coverage" in d:
            kw["coverage"] = tuple(_date(x) for x in d["coverage"])
        if "states" in d:
            kw["states"] = tuple(StateSpec(**s) for s in d["states"])
        if "true_fixed_effects" in d:
            kw["true_fixed_effects"] = {str(k): float(v) for k, v in d["true_fixed_effects"].items()}
        if "true_variance" in d:
            tv = d["true_variance"]
            if isinstance(tv, Mapping):
                kw["true_variance"] = VarianceComponents(float(tv["state"]), float(tv["district"]), float(tv["residual"]))
            else:
                kw["true_variance"] = VarianceComponents(*map(float, tv))
        if "count" in d:
            c = dict(d["count"])
            if "effects" in c:
                c["effects"] = {str(k): float(v) for k, v in c["effects"].items()}
            kw["count"] = CountParams(**c)
        if d.get("quarter_effects") is not None:
            kw["quarter_effects"] = {str(k): float(v) for k, v in d["quarter_effects"].items()}
        for key in ("agreement_lag", "deed_lag"):
            if key in d:
                kw[key] = LagSpec(**d[key]) if isinstance(d[key], Mapping) else LagSpec(float(d[key]))
        if "hedonic_distributions" in d:
            merged = json.loads(json.dumps(DEFAULT_HEDONIC_DISTRIBUTIONS))
            merged.update(d["hedonic_distributions"])
            kw["hedonic_distributions"] = merged
        if "shocks" in d:
            kw["shocks"] = tuple(ShockSpec.from_dict(s) for s in d["shocks"] or ())
        return cls(**kw)

    def run_id(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(f"{__version__}|{text}".encode()).hexdigest()[:16]

    def quarter_effect_map(self) -> dict[str, float]:
        qs = quarter_range(quarter_of(self.coverage[0]), quarter_of(self.coverage[1]))
        if self.quarter_effects is not None:
            return {q: float(self.quarter_effects.get(q, 0.0)) for q in qs}
        return {q: self.quarterly_drift * i for i, q in enumerate(qs)}


def _rng(seed: int, stream: int, position: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(stream, position))))


# --------------------------------------------------------------------------
# market simulation


@dataclass
class SimulationResult:
    adverts: list
    brokered: list
    deeds: list
    ground_truth: dict
    population: dict


def _weeks(coverage) -> list[dt.date]:
    first, last = coverage
    monday = first + dt.timedelta(days=(7 - first.weekday()) % 7)
    out = []
    while monday + dt.timedelta(days=6) <= last:
        out.append(monday)
        monday += dt.timedelta(days=7)
    if not out:
        raise ConfigError("coverage contains no complete ISO week")
    return out


def _count_linear_part(config: MarketConfig, weeks, state: str) -> np.ndarray:
    """Linear predictor (without intercept) per (week, type, urban class)."""
    eff = config.count.effects
    c = config.count
    t = np.array([w.isocalendar()[1] for w in weeks], dtype=float)
    cyc = c.beta_cos * np.cos(2 * np.pi * t / c.period) + c.beta_sin * np.sin(2 * np.pi * t / c.period)
    s_eff = eff.get(f"state[{state}]", 0.0)
    qeff = np.array([eff.get(f"quarter[{quarter_of(w + dt.timedelta(days=3))}]", 0.0) for w in weeks])
    out = np.empty((len(weeks), len(DWELLING_TYPES), len(URBAN_CLASSES)))
    for i, ty in enumerate(DWELLING_TYPES):
        for j, uc in enumerate(URBAN_CLASSES):
            out[:, i, j] = cyc + qeff + s_eff + eff.get(f"dwelling_type[{ty}]", 0.0) + eff.get(f"urban_class[{uc}]", 0.0)
    return out


def _effective_intercept(config: MarketConfig, weeks) -> float:
    c = config.count
    if c.target_listings is None:
        return c.intercept
    total = sum(s.population * np.exp(_count_linear_part(config, weeks, s.name)).sum() for s in config.states)
    return math.log(c.target_listings / total)


def _nb_draw(rng, mu, a):
    lam = rng.gamma(a, 1.0, mu.shape) * (mu / a)
    return rng.poisson(lam)


def _fixed_part(effects: Mapping, attrs: Mapping[str, np.ndarray], n: int) -> np.ndarray:
    out = np.zeros(n)
    for key, value in effects.items():
        if key == "(Intercept)":
            out += value
            continue
        col = np.ones(n)
        for part in key.split(":"):
            name, _, level = part.partition("[")
            if name not in attrs:
                raise ConfigError(f"fixed effect {key!r}: unknown attribute {name!r}")
            if level:
                col = col * (attrs[name] == level[:-1])
            else:
                col = col * attrs[name].astype(float)
        out += value * col
    return out


def _segment_mask(shock: ShockSpec, attrs) -> np.ndarray:
    if shock.target is None:
        return np.ones(len(attrs["dwelling_type"]), dtype=bool)
    name = {SegmentDimension.DWELLING_TYPE: "dwelling_type", SegmentDimension.URBAN_CLASS: "urban_class",
            SegmentDimension.OPEN_SPACE: "open_space"}[shock.target.dimension]
    return attrs[name] == shock.segment


def _price_shocks(shocks, days, attrs) -> np.ndarray:
    out = np.zeros(len(days))
    for s in shocks:
        if s.kind in PRICE_SHOCKS:
            out += s.price_effect(days) * _segment_mask(s, attrs)
    return out


def _keep_prob(shocks, kind, days, attrs) -> np.ndarray:
    keep = np.ones(len(days))
    for s in shocks:
        if s.kind is kind:
            keep *= 1.0 - s.magnitude * (s.active(days) & _segment_mask(s, attrs))
    return keep


def _draw_hedonics(rng, types: np.ndarray, dist: Mapping, n: int) -> dict:
    out: dict = {}
    means = np.array([dist["log_area"][t][0] for t in DWELLING_TYPES])
    sds = np.array([dist["log_area"][t][1] for t in DWELLING_TYPES])
    out["log_area"] = means[types] + sds[types] * rng.standard_normal(n)
    for name, levels in _CATEGORICAL_DRAWS:
        cum = np.array([np.cumsum(dist[name][t]) for t in DWELLING_TYPES])
        cum = cum / cum[:, -1:]
        u = rng.random(n)
        idx = np.minimum((u[:, None] > cum[types]).sum(axis=1), len(levels) - 1)
        out[name] = np.array(levels, dtype=object)[idx]
    for name in _BOOLEAN_DRAWS:
        p = np.array([dist[name][t] for t in DWELLING_TYPES])
        out[name] = rng.random(n) < p[types]
    return out


@dataclass
class _Districts:
    names: list
    urban: np.ndarray
    access: np.ndarray
    plot: np.ndarray
    effect: np.ndarray
    state_effect: float


def _make_districts(config: MarketConfig, pos: int, spec: StateSpec) -> _Districts:
    rng = _rng(config.seed, _S_DISTRICTS, pos)
    n = spec.districts
    v = config.true_variance
    state_effect = float(math.sqrt(v.sigma2_state) * rng.standard_normal())
    effect = math.sqrt(v.sigma2_district) * rng.standard_normal(n)
    access = rng.integers(1, 6, n)
    plot = spec.log_plot_price + 0.3 * rng.standard_normal(n)
    urban = np.arange(n) % len(URBAN_CLASSES)
    names = [f"{spec.name}-{j + 1:02d}" for j in range(n)]
    return _Districts(names, urban, access, plot, effect, state_effect)


def _listing_block(config, rng, pos, spec, dist: _Districts, weeks, counts, qeff, prefix):
    """Draw every attribute of the listings implied by ``counts`` (week x type x urban)."""
    flat = counts.reshape(-1)
    cell = np.repeat(np.arange(flat.size), flat)
    n = cell.size
    w_idx, t_idx, u_idx = np.unravel_index(cell, counts.shape)
    week_days = np.array([_ordinal(w) for w in weeks])
    day = week_days[w_idx] + rng.integers(0, 7, n)
    # district uniformly among the state's districts of the cell's urban class
    pick = rng.random(n)
    d_idx = np.empty(n, dtype=np.int64)
    for j in range(len(URBAN_CLASSES)):
        members = np.flatnonzero(dist.urban == j)
        sel = u_idx == j
        d_idx[sel] = members[np.minimum((pick[sel] * len(members)).astype(np.int64), len(members) - 1)]
    hed = _draw_hedonics(rng, t_idx, config.hedonic_distributions, n)
    hed["log_plot_price"] = dist.plot[d_idx] + config.hedonic_distributions["log_plot_price_sd"] * rng.standard_normal(n)
    noise = math.sqrt(config.true_variance.sigma2_resid) * rng.standard_normal(n)
    u_supply = rng.random(n)
    u_convert = rng.random(n)
    u_demand = rng.random(n)
    agree_lag = config.agreement_lag.draw(rng, n)
    deed_lag = config.deed_lag.draw(rng, n)
    negotiation = config.negotiation_sd * rng.standard_normal(n)

    attrs = dict(hed)
    attrs["dwelling_type"] = np.array(DWELLING_TYPES, dtype=object)[t_idx]
    attrs["urban_class"] = np.array(URBAN_CLASSES, dtype=object)[u_idx]
    attrs["accessibility"] = np.array([str(a) for a in dist.access], dtype=object)[d_idx]
    attrs["state"] = np.full(n, spec.name, dtype=object)
    base = (_fixed_part(config.true_fixed_effects, attrs, n) + dist.state_effect + dist.effect[d_idx] + noise)
    return {
        "n": n, "day": day, "d_idx": d_idx, "attrs": attrs, "base": base,
        "u_supply": u_supply, "u_convert": u_convert, "u_demand": u_demand,
        "agree_lag": agree_lag, "deed_lag": deed_lag, "negotiation": negotiation,
        "ids": [f"{prefix}{pos}-{k:07d}" for k in range(n)],
    }


def _time_effect(qeff: Mapping, days: np.ndarray) -> np.ndarray:
    # days outside the configured quarters (after coverage) reuse the last quarter's level
    last = list(qeff.values())[-1]
    cache: dict = {}
    out = np.empty(len(days))
    for i, d in enumerate(days):
        if d not in cache:
            cache[d] = qeff.get(quarter_of(_EPOCH + dt.timedelta(days=int(d))), last)
        out[i] = cache[d]
    return out


def _records(block, idx, tag, days, logp, dist: _Districts, with_hedonics=True):
    attrs = block["attrs"]
    out = []
    for i, d, lp in zip(idx, days, logp):
        di = block["d_idx"][i]
        loc = LocationKey(attrs["state"][i], dist.names[di], attrs["urban_class"][i], int(dist.access[di]))
        hed = None
        if with_hedonics:
            hed = HedonicProfile(
                float(attrs["log_area"][i]), attrs["rooms"][i], attrs["age_class"][i], bool(attrs["renovated"][i]),
                attrs["open_space"][i], bool(attrs["basement"][i]), bool(attrs["parking"][i]),
                bool(attrs["air_conditioning"][i]), bool(attrs["step_free"][i]), bool(attrs["wellness"][i]),
                attrs["condition"][i], float(attrs["log_plot_price"][i]),
            )
        out.append(ListingRecord(block["ids"][i], tag, round(math.exp(lp), 2), _EPOCH + dt.timedelta(days=int(d)),
                                 attrs["dwelling_type"][i], loc, hed))
    return out


def simulate_market(config: MarketConfig) -> SimulationResult:
    """Draw one synthetic market and its ground truth."""
    weeks = _weeks(config.coverage)
    intercept = _effective_intercept(config, weeks)
    qeff = config.quarter_effect_map()
    end_day = _ordinal(config.coverage[1])
    a = config.count.dispersion
    adverts, brokered, deeds = [], [], []
    state_effects, district_effects = {}, {}
    realized = {"adverts_drawn": 0, "remainder_drawn": 0}

    for pos, spec in enumerate(config.states):
        dist = _make_districts(config, pos, spec)
        state_effects[spec.name] = dist.state_effect
        district_effects.update(zip(dist.names, dist.effect.tolist()))
        mu = spec.population * np.exp(intercept + _count_linear_part(config, weeks, spec.name))
        crng = _rng(config.seed, _S_COUNTS, pos)
        counts = _nb_draw(crng, mu, a)
        rem_counts = _nb_draw(crng, config.non_advertised_ratio * mu, a)

        blk = _listing_block(config, _rng(config.seed, _S_LISTINGS, pos), pos, spec, dist, weeks, counts, qeff, "T")
        rem = _listing_block(config, _rng(config.seed, _S_REMAINDER, pos), pos, spec, dist, weeks, rem_counts, qeff, "N")
        realized["adverts_drawn"] += blk["n"]
        realized["remainder_drawn"] += rem["n"]

        # adverts
        day = blk["day"]
        listed = blk["u_supply"] < _keep_prob(config.shocks, ShockKind.SUPPLY_THINNING, day, blk["attrs"])
        lp_ad = blk["base"] + _time_effect(qeff, day) + _price_shocks(config.shocks, day, blk["attrs"])
        idx = np.flatnonzero(listed)
        adverts += _records(blk, idx, DatasetTag.ADVERTS, day[idx], lp_ad[idx], dist)

        # brokered transactions: agreement after listing, deed after agreement
        agree = day + blk["agree_lag"]
        reg = agree + blk["deed_lag"]
        sold = (listed & (blk["u_convert"] < config.brokered_share)
                & (blk["u_demand"] < _keep_prob(config.shocks, ShockKind.DEMAND_THINNING, agree, blk["attrs"]))
                & (reg <= end_day))
        lp_b = (blk["base"] + _time_effect(qeff, agree) + _price_shocks(config.shocks, agree, blk["attrs"])
                + config.brokered_discount + blk["negotiation"])
        idx = np.flatnonzero(sold)
        brokered += _records(blk, idx, DatasetTag.BROKERED, agree[idx], lp_b[idx], dist)
        deeds += _records(blk, idx, DatasetTag.DEEDS, reg[idx], lp_b[idx], dist, with_hedonics=False)

        # transactions that were never advertised
        r_agree = rem["day"]
        r_reg = r_agree + rem["deed_lag"]
        r_sold = (rem["u_demand"] < _keep_prob(config.shocks, ShockKind.DEMAND_THINNING, r_agree, rem["attrs"])) & (r_reg <= end_day)
        lp_r = rem["base"] + _time_effect(qeff, r_agree) + _price_shocks(config.shocks, r_agree, rem["attrs"])
        idx = np.flatnonzero(r_sold)
        deeds += _records(rem, idx, DatasetTag.DEEDS, r_reg[idx], lp_r[idx], dist, with_hedonics=False)

    key = lambda r: (r.observed_on, r.id)  # noqa: E731
    adverts.sort(key=key)
    brokered.sort(key=key)
    deeds.sort(key=key)

    population = {s.name: float(s.population) for s in config.states}
    c = config.count
    count_coefs = {"(Intercept)": intercept, **{k: float(v) for k, v in c.effects.items()},
                   CYCLE_COLUMNS[0]: c.beta_cos, CYCLE_COLUMNS[1]: c.beta_sin}
    v = config.true_variance
    truth = {
        "run_id": config.run_id(),
        "version": __version__,
        "config": config.to_dict(),
        "price": {
            "fixed_effects": dict(config.true_fixed_effects),
            "quarter_effects": qeff,
            "variance": {"state": v.sigma2_state, "district": v.sigma2_district, "residual": v.sigma2_resid},
            "state_effects": state_effects,
            "district_effects": district_effects,
            "brokered_discount": config.brokered_discount,
        },
        "count": {
            "Adverts": {"coefficients": count_coefs, "dispersion": c.dispersion,
                        "cycle": {"beta_cos": c.beta_cos, "beta_sin": c.beta_sin, "period": c.period}},
        },
        "records": {"adverts": len(adverts), "brokered": len(brokered), "deeds": len(deeds), **realized},
        "weeks": [weeks[0].isoformat(), weeks[-1].isoformat()],
    }
    return SimulationResult(adverts, brokered, deeds, truth, population)


SIMULATION_FILES = {
    "adverts": "adverts.csv",
    "brokered": "brokered.csv",
    "deeds": "deeds.csv",
    "population": "population.csv",
    "ground_truth": "ground_truth.json",
}


def write_simulation(result: SimulationResult, outdir) -> dict[str, Path]:
    """Write listing files in the ingestible format plus population and ground truth."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = {k: outdir / v for k, v in SIMULATION_FILES.items()}
    write_listings(result.adverts, paths["adverts"], with_hedonics=True)
    write_listings(result.brokered, paths["brokered"], with_hedonics=True)
    write_listings(result.deeds, paths["deeds"], with_hedonics=False)
    with paths["population"].open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["state", "population"])
        for s, p in result.population.items():
            w.writerow([s, repr(p)])
    paths["ground_truth"].write_text(json.dumps(result.ground_truth, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return paths


def read_ground_truth(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


# --------------------------------------------------------------------------
# small panels for recovery checks


@dataclass
class HlmPanel:
    y: np.ndarray
    X: np.ndarray
    state_index: np.ndarray
    district_index: np.ndarray
    columns: list
    beta: np.ndarray
    variance: VarianceComponents
    state_effects: np.ndarray
    district_effects: np.ndarray

    @property
    def groups(self) -> np.ndarray:
        return np.column_stack([self.state_index.astype(str), self.district_index.astype(str)])


def simulate_hlm_panel(
    n_states: int = 9,
    n_districts: int = 10,
    n_per_district: int = 50,
    variance=(0.04, 0.02, 0.10),
    beta=(1.0, 0.5, -0.3),
    seed: int = 0,
    center_noise: bool = False,
) -> HlmPanel:
    """Balanced three-level panel: intercept, one normal and one binary covariate.

    ``district_index`` runs over all districts (``n_states * n_districts``).
    ``center_noise`` removes each district's mean from the residual draw, so
    the sample carries no between-group residual variation at all.
    """
    rng = _rng(seed, _S_PANEL, 0)
    v = VarianceComponents(*variance)
    g = n_states * n_districts
    n = g * n_per_district
    s_idx = np.repeat(np.arange(n_states), n_districts * n_per_district)
    d_idx = np.repeat(np.arange(g), n_per_district)
    x1 = rng.standard_normal(n)
    x2 = (rng.random(n) < 0.5).astype(float)
    X = np.column_stack([np.ones(n), x1, x2])
    beta = np.asarray(beta, dtype=float)
    u_s = math.sqrt(v.sigma2_state) * rng.standard_normal(n_states)
    u_d = math.sqrt(v.sigma2_district) * rng.standard_normal(g)
    eps = math.sqrt(v.sigma2_resid) * rng.standard_normal(n)
    if center_noise:
        eps = eps - (np.bincount(d_idx, eps) / np.bincount(d_idx))[d_idx]
    y = X @ beta + u_s[s_idx] + u_d[d_idx] + eps
    return HlmPanel(y, X, s_idx, d_idx, ["(Intercept)", "x1", "x2"], beta, v, u_s, u_d)


def simulate_count_panel(
    n_weeks: int = 208,
    dispersion: float = 2.0,
    seed: int = 0,
    effects: Mapping | None = None,
    cycle_amplitude: float = 0.3,
    cycle_shift: float = math.pi / 3,
    mean_count: float = 10.0,
    start: dt.date = dt.date(2019, 1, 7),
    population: Mapping | None = None,
) -> tuple[list[PanelCell], dict]:
    """Weekly cells (type x state x urban class) with NB counts and known parameters."""
    rng = _rng(seed, _S_PANEL, 1)
    effects = dict(DEFAULT_COUNT_EFFECTS if effects is None else effects)
    population = dict(population or {s.name: s.population for s in DEFAULT_STATES})
    pop_mean = float(np.mean(list(population.values())))
    intercept = math.log(mean_count / pop_mean)
    b_cos, b_sin = cycle_amplitude * math.cos(cycle_shift), cycle_amplitude * math.sin(cycle_shift)
    keys = []
    eta = []
    for k in range(n_weeks):
        monday = start + dt.timedelta(days=7 * k)
        t = monday.isocalendar()[1]
        cyc = b_cos * math.cos(2 * math.pi * t / WEEKS_PER_YEAR) + b_sin * math.sin(2 * math.pi * t / WEEKS_PER_YEAR)
        for ty in DWELLING_TYPES:
            for st in STATES:
                for uc in URBAN_CLASSES:
                    keys.append((monday, ty, st, uc))
                    eta.append(intercept + cyc + effects.get(f"dwelling_type[{ty}]", 0.0)
                               + effects.get(f"state[{st}]", 0.0) + effects.get(f"urban_class[{uc}]", 0.0))
    exposure = np.array([population[k[2]] for k in keys], dtype=float)
    mu = exposure * np.exp(np.array(eta))
    y = _nb_draw(rng, mu, dispersion)
    cells = [PanelCell(iso_week_label(m), m, ty, st, uc, int(c), float(e))
             for (m, ty, st, uc), c, e in zip(keys, y, exposure)]
    truth = {"coefficients": {"(Intercept)": intercept, **effects, CYCLE_COLUMNS[0]: b_cos, CYCLE_COLUMNS[1]: b_sin},
             "dispersion": dispersion, "cycle_amplitude": cycle_amplitude, "cycle_shift": cycle_shift}
    return cells, truth


# --------------------------------------------------------------------------
# oracle


@dataclass(frozen=True)
class OracleRow:
    model: str
    parameter: str
    true: float
    estimate: float
    se: float
    z: float
    flagged: bool


@dataclass
class OracleReport:
    run_id: str
    rows: list
    z_threshold: float

    @property
    def flags(self) -> list[OracleRow]:
        return [r for r in self.rows if r.flagged]

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["model", "parameter", "true", "estimate", "se", "z", "flagged"])
            for r in self.rows:
                w.writerow([r.model, r.parameter, repr(r.true), repr(r.estimate), repr(r.se), repr(r.z), int(r.flagged)])


def _row(model, name, true, est, se, zcrit):
    z = (est - true) / se if se > 0 and math.isfinite(true) else math.nan
    return OracleRow(model, name, float(true), float(est), float(se), float(z), bool(math.isfinite(z) and abs(z) > zcrit))


def _log_row(model, name, true, est, se, zcrit):
    z = (math.log(est) - math.log(true)) / (se / est) if se > 0 else math.nan
    return OracleRow(model, name, float(true), float(est), float(se), float(z), bool(math.isfinite(z) and abs(z) > zcrit))


def _price_truth(truth: dict, fit: HlmFit, tag: str | None) -> dict:
    p = truth["price"]
    fe = dict(p["fixed_effects"])
    q = p["quarter_effects"]
    out = {c: float(fe.get(c, 0.0)) for c in fit.columns}
    shift = p["brokered_discount"] if tag == DatasetTag.BROKERED.value else 0.0
    ref_q = fit.references.get("quarter")
    base = q.get(ref_q, 0.0) if ref_q is not None else 0.0
    out["(Intercept)"] = fe.get("(Intercept)", 0.0) + base + shift
    for c in fit.columns:
        if c.startswith("quarter[") and ":" not in c:
            out[c] = q.get(c[8:-1], math.nan) - base
        elif c.startswith(("split[", "ctx.", "regime[")):
            out[c] = math.nan
    return out


def oracle_check(
    ground_truth, fits: Mapping[str, object], z_threshold: float = 3.0, familywise: float | None = None
) -> OracleReport:
    """Compare fitted parameters with the simulation's ground truth.

    ``fits`` maps a model key to a fit: ``"price"`` or ``"price:<tag>"``
    for price fits, ``"count"`` or ``"count:<tag>"`` for count fits. Every
    fit must carry ``metadata["run_id"]`` equal to the ground truth's.
    Parameters without a known true value get ``true = nan`` and are never
    flagged. Positive variance components are compared as log variances.
    With ``familywise`` (e.g. 0.01) the threshold becomes the two-sided
    Bonferroni quantile over all checked parameters instead of ``z_threshold``.
    """
    truth = ground_truth if isinstance(ground_truth, Mapping) else read_ground_truth(ground_truth)
    run_id = truth["run_id"]
    rows = []
    for key, fit in fits.items():
        fit_run = getattr(fit, "metadata", {}).get("run_id")
        if fit_run != run_id:
            raise DataError(f"fit {key!r} comes from run {fit_run!r}, ground truth is run {run_id!r}")
        kind, _, tag = key.partition(":")
        se = fit.se
        if kind == "price":
            if not isinstance(fit, HlmFit):
                raise ConfigError(f"{key!r} is not a price fit")
            tv = _price_truth(truth, fit, tag or None)
            for c, b, s in zip(fit.columns, fit.beta, se):
                rows.append(_row(key, c, tv[c], b, s, z_threshold))
            var = truth["price"]["variance"]
            est = fit.variance.as_tuple()
            # variance components are compared on the log scale (delta-method SE)
            for name, e, s in zip(("sigma2_state", "sigma2_district", "sigma2_resid"), est, fit.variance_se):
                t = var[{"sigma2_state": "state", "sigma2_district": "district", "sigma2_resid": "residual"}[name]]
                if e > 0 and t > 0 and math.isfinite(s):
                    rows.append(_log_row(key, name, t, e, s, z_threshold))
                else:
                    rows.append(_row(key, name, t, e, s, z_threshold))
        elif kind == "count":
            if not isinstance(fit, NbFit):
                raise ConfigError(f"{key!r} is not a count fit")
            block = truth["count"].get(tag or DatasetTag.ADVERTS.value)
            coefs = block["coefficients"] if block else {}
            for c, b, s in zip(fit.columns, fit.beta, se):
                t = coefs.get(c, 0.0 if block else math.nan)
                rows.append(_row(key, c, t, b, s, z_threshold))
            rows.append(_row(key, "dispersion", block["dispersion"] if block else math.nan,
                             fit.dispersion, fit.dispersion_se, z_threshold))
        else:
            raise ConfigError(f"model key {key!r} must start with 'price' or 'count'")
    if familywise is not None:
        if not 0 < familywise < 1:
            raise ConfigError("familywise level must lie in (0, 1)")
        k = max(1, sum(math.isfinite(r.z) for r in rows))
        z_threshold = float(stats.norm.isf(familywise / (2 * k)))
    rows = [replace(r, flagged=bool(math.isfinite(r.z) and abs(r.z) > z_threshold)) for r in rows]
    return OracleReport(run_id, rows, z_threshold)
