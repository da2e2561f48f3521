"""Hierarchical hedonic price and count models with regime-split indices."""

__version__ = "0.1.0"

from .data import (  # noqa: E402
    DatasetTag,
    HedonicProfile,
    ListingRecord,
    LocationKey,
    PanelCell,
    load_listings,
    trim_prices,
    weekly_cell_counts,
)
from .design import HlmSpec, build_design  # noqa: E402
from .errors import (  # noqa: E402
    ConfigError,
    ConvergenceError,
    CoverageError,
    DataError,
    HedonicRegimesError,
    RankDeficiencyError,
    SchemaError,
    SpecError,
)
from .hlm import HierarchicalHedonicRegressor, HlmFit, VarianceComponents, fit_hlm  # noqa: E402
from .indices import (  # noqa: E402
    IndexSeries,
    SegmentRule,
    index_from_dummies,
    pearson_test,
    price_quantile_segments,
    segment_indices,
    yoy_quantity_index,
)
from .nbcount import (  # noqa: E402
    CyclicalTrend,
    NbFit,
    NegativeBinomialRegressor,
    cycle_extrema,
    fit_cycle_then_freeze,
    fit_nb_glm,
    incidence_rate_ratio,
    nb_log_pmf,
)
from .regimes import RegimeCalendar, RegimeInterval, SplitTimeLabel, assign_split_label, load_calendar  # noqa: E402
from .simulator import MarketConfig, ShockSpec, oracle_check, simulate_market  # noqa: E402

__all__ = [
    "ConfigError", "ConvergenceError", "CoverageError", "CyclicalTrend", "DataError", "DatasetTag",
    "HedonicProfile", "HedonicRegimesError", "HierarchicalHedonicRegressor", "HlmFit", "HlmSpec",
    "IndexSeries", "ListingRecord", "LocationKey", "MarketConfig", "NbFit", "NegativeBinomialRegressor",
    "PanelCell", "RankDeficiencyError", "RegimeCalendar", "RegimeInterval", "SchemaError", "SegmentRule",
    "ShockSpec", "SpecError", "SplitTimeLabel", "VarianceComponents", "assign_split_label", "build_design",
    "cycle_extrema", "fit_cycle_then_freeze", "fit_hlm", "fit_nb_glm", "incidence_rate_ratio",
    "index_from_dummies", "load_calendar", "load_listings", "nb_log_pmf", "oracle_check", "pearson_test",
    "price_quantile_segments", "segment_indices", "simulate_market", "trim_prices", "weekly_cell_counts",
    "yoy_quantity_index",
]
