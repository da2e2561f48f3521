import datetime as dt

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_record
from oracles import brute_moving_average

from hedonic_regimes.data import STATES, PanelCell
from hedonic_regimes.errors import ConfigError, CoverageError, DataError
from hedonic_regimes.regimes import (
    NO_REGIME,
    ContextualSeries,
    RegimeCalendar,
    RegimeFamily,
    RegimeInterval,
    SplitTimeLabel,
    assign_split_label,
    join_contextual,
    label_boundaries,
    label_spans,
    load_calendar,
    load_series,
    minmax_normalize,
    moving_average,
    mortality_rate,
    quarter_of,
    quarter_range,
    shift_months,
    write_calendar,
    write_series,
)

D = dt.date


@pytest.fixture(scope="module")
def lockdowns():
    return load_calendar(RegimeFamily.LOCKDOWNS)


class TestSplitLabels:
    def test_first_lockdown(self, lockdowns):
        for state in STATES:
            assert assign_split_label(D(2020, 3, 20), make_record(state=state).location, lockdowns) == \
                SplitTimeLabel("2020Q1", "lockdown-1")

    def test_no_regime(self, lockdowns):
        assert assign_split_label(D(2020, 7, 15), "Tyrol", lockdowns) == SplitTimeLabel("2020Q3", "none")

    def test_regional_scope(self, lockdowns):
        assert assign_split_label(D(2021, 4, 10), "Styria", lockdowns) == SplitTimeLabel("2021Q2", "none")
        assert assign_split_label(D(2021, 4, 10), "Vienna", lockdowns) == SplitTimeLabel("2021Q2", "regional-lockdown-2")

    def test_inclusive_printed_end(self, lockdowns):
        assert lockdowns.status(D(2020, 4, 13)) == "lockdown-1"
        assert lockdowns.status(D(2020, 4, 14)) == NO_REGIME
        assert lockdowns.status(D(2020, 3, 15)) == NO_REGIME

    def test_out_of_coverage(self, lockdowns):
        with pytest.raises(CoverageError):
            assign_split_label(D(2022, 7, 1), "Vienna", lockdowns)
        legal = load_calendar("Lockdowns", coverage="@coverage-legal")
        assert assign_split_label(D(2022, 7, 1), "Vienna", legal).regime_status == NO_REGIME

    def test_label_text(self):
        lab = SplitTimeLabel("2021Q1", "announcement")
        assert str(lab) == "2021Q1:announcement" and SplitTimeLabel.parse(str(lab)) == lab

    def test_three_phase_calendars(self):
        ls = load_calendar("LendingStandards")
        assert [iv.name for iv in ls.intervals] == ["pre-announcement", "announcement", "enactment"]
        assert ls.status(D(2021, 12, 13)) == "announcement"
        assert ls.status(D(2022, 8, 1)) == "enactment"
        pr = load_calendar("PolicyRate")
        assert [pr.status(d) for d in (D(2022, 7, 26), D(2022, 7, 27), D(2022, 12, 21))] == \
            ["low", "first-increase", "high"]

    def test_calendar_round_trip(self, tmp_path, lockdowns):
        write_calendar(lockdowns, tmp_path / "cal.csv")
        assert load_calendar("Lockdowns", tmp_path / "cal.csv") == lockdowns


class TestCalendarValidation:
    cov = (D(2020, 1, 1), D(2020, 12, 31))

    def test_empty_interval(self):
        with pytest.raises(ConfigError):
            RegimeInterval("x", D(2020, 2, 1), D(2020, 2, 1))

    def test_overlap_in_shared_scope(self):
        a = RegimeInterval("a", D(2020, 2, 1), D(2020, 3, 1))
        b = RegimeInterval("b", D(2020, 2, 15), D(2020, 4, 1), frozenset({"Vienna"}))
        with pytest.raises(ConfigError, match="overlap"):
            RegimeCalendar("Lockdowns", (a, b), self.cov)

    def test_disjoint_scopes_may_overlap(self):
        a = RegimeInterval("a", D(2020, 2, 1), D(2020, 3, 1), frozenset({"Tyrol"}))
        b = RegimeInterval("b", D(2020, 2, 15), D(2020, 4, 1), frozenset({"Vienna"}))
        cal = RegimeCalendar("Lockdowns", (a, b), self.cov)
        assert cal.status(D(2020, 2, 20), "Tyrol") == "a" and cal.status(D(2020, 2, 20), "Vienna") == "b"

    def test_interval_outside_coverage(self):
        with pytest.raises(ConfigError):
            RegimeCalendar("Lockdowns", (RegimeInterval("a", D(2020, 12, 1), D(2021, 2, 1)),), self.cov)

    def test_phase_structure_enforced(self):
        iv = RegimeInterval("announcement", D(2020, 2, 1), D(2020, 3, 1))
        with pytest.raises(ConfigError, match="phases"):
            RegimeCalendar("LendingStandards", (iv,), self.cov)


def _quarter_starts(first, last):
    out = []
    for q in quarter_range(quarter_of(first), quarter_of(last)):
        y, n = int(q[:4]), int(q[-1])
        out.append(D(y, 3 * n - 2, 1))
    return [d for d in out if first < d <= last]


@pytest.mark.parametrize("state", ["Vienna", "Styria", "Burgenland"])
def test_boundaries_are_quarter_or_interval_edges(lockdowns, state):
    first, last = lockdowns.coverage
    edges = set(_quarter_starts(first, last))
    for iv in lockdowns.intervals:
        if iv.covers(state):
            edges |= {d for d in (iv.start, iv.end) if first < d <= last}
    assert label_boundaries(lockdowns, state) == sorted(edges)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 1276), st.sampled_from(STATES))
def test_labels_partition_time(offset, state):
    cal = load_calendar("Lockdowns")
    day = cal.coverage[0] + dt.timedelta(days=offset)
    lab = assign_split_label(day, state, cal)
    matches = [iv for iv in cal.intervals if iv.active(day, state)]
    assert len(matches) <= 1
    assert lab.regime_status == (matches[0].name if matches else NO_REGIME)
    assert lab.quarter == quarter_of(day)


def test_label_spans_cover_each_day_once_per_state(lockdowns):
    spans = label_spans(lockdowns, ["Vienna"])
    days = [d for segs in spans.values() for a, b in segs for d in
            (a + dt.timedelta(days=k) for k in range((b - a).days + 1))]
    first, last = lockdowns.coverage
    assert len(days) == len(set(days)) == (last - first).days + 1
    assert spans["2020Q1:lockdown-1"] == [(D(2020, 3, 16), D(2020, 3, 31))]
    assert spans["2020Q2:lockdown-1"] == [(D(2020, 4, 1), D(2020, 4, 13))]
    # a status that leaves and re-enters a quarter keeps one span per piece
    assert spans["2020Q4:none"] == [(D(2020, 10, 1), D(2020, 11, 16)), (D(2020, 12, 7), D(2020, 12, 25))]


def _daily(values, start=D(2020, 1, 1), region=""):
    return ContextualSeries("s", "Daily", "National",
                            {(start + dt.timedelta(days=i), region): v for i, v in enumerate(values)})


def _values(series):
    return [v for _, v in sorted(series.values.items())]


class TestMovingAverage:
    def test_constant(self):
        assert _values(moving_average(_daily([3.5] * 40))) == pytest.approx([3.5] * 40, abs=1e-15)

    def test_step_ramp(self):
        out = _values(moving_average(_daily([0.0] * 30 + [1.0] * 30), 15))
        # day 30 is the first 1; centred windows straddling it ramp by 1/15
        assert out[30 - 7 - 1] == 0.0
        assert out[23:37] == pytest.approx([k / 15 for k in range(1, 15)], abs=1e-12)
        assert out[37] == 1.0
        assert out == pytest.approx(brute_moving_average([0.0] * 30 + [1.0] * 30, 15), abs=1e-12)

    def test_single_day(self):
        assert _values(moving_average(_daily([7.0]))) == [7.0]

    @pytest.mark.parametrize("w", [0, 4, -1])
    def test_bad_window(self, w):
        with pytest.raises(ValueError):
            moving_average(_daily([1.0, 2.0]), w)

    def test_monthly_rejected(self):
        s = ContextualSeries("m", "Monthly", "National", {(D(2020, 1, 1), ""): 1.0})
        with pytest.raises(ConfigError):
            moving_average(s)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(-100, 100), min_size=1, max_size=60), st.sampled_from([1, 3, 7, 15]))
    def test_matches_brute_force(self, values, w):
        got = _values(moving_average(_daily(values), w))
        assert got == pytest.approx(brute_moving_average(values, w), abs=1e-9)

    def test_regions_separate(self):
        vals = {(D(2020, 1, 1) + dt.timedelta(days=i), r): float(i if r == "a" else -i)
                for i in range(10) for r in ("a", "b")}
        out = moving_average(ContextualSeries("s", "Daily", "District", vals), 3).values
        assert out[(D(2020, 1, 5), "a")] == 4.0 and out[(D(2020, 1, 5), "b")] == -4.0


class TestMortality:
    def test_rate(self):
        s = mortality_rate({(D(2021, 1, 5), "Graz"): 5}, {"Graz": 100_000})
        assert s.values[(D(2021, 1, 5), "Graz")] == pytest.approx(0.05)

    def test_before_epoch_zero(self):
        s = mortality_rate({(D(2020, 3, 1), "Graz"): 9, (D(2020, 3, 12), "Graz"): 1}, {"Graz": 1000})
        assert s.values[(D(2020, 3, 1), "Graz")] == 0.0
        assert s.values[(D(2020, 3, 12), "Graz")] == 1.0

    def test_zero_deaths(self):
        assert mortality_rate({(D(2021, 1, 5), "Graz"): 0}, {"Graz": 10}).values[(D(2021, 1, 5), "Graz")] == 0.0

    def test_negative_is_error(self):
        with pytest.raises(DataError):
            mortality_rate({(D(2021, 1, 5), "Graz"): -1}, {"Graz": 10})

    def test_missing_population(self):
        with pytest.raises(ConfigError):
            mortality_rate({(D(2021, 1, 5), "Graz"): 1}, {})


class TestJoin:
    def test_exact_date(self):
        rec = make_record(day=D(2021, 2, 3))
        s = ContextualSeries("m", "Daily", "National", {(D(2021, 2, 3), ""): 0.4})
        res = join_contextual([rec], s)
        assert res.values.tolist() == [0.4] and res.n_missing == 0

    def test_three_month_lag(self):
        s = ContextualSeries("rate", "Monthly", "National",
                             {(D(2022, m, 1), ""): float(m) for m in range(1, 13)}, lag_months=3)
        assert join_contextual([make_record(day=D(2022, 10, 15))], s).values.tolist() == [7.0]

    def test_before_start_flagged(self):
        s = ContextualSeries("m", "Daily", "National", {(D(2021, 2, 3), ""): 0.4})
        res = join_contextual([make_record(day=D(2020, 1, 1))], s)
        assert res.missing.tolist() == [True] and np.isnan(res.values[0])

    def test_district_series_on_cells_rejected(self):
        cell = PanelCell("2021-W05", D(2021, 2, 1), "House", "Vienna", "Urban", 1, 1.0)
        s = ContextualSeries("m", "Daily", "District", {(D(2021, 2, 1), "Vienna-01"): 1.0})
        with pytest.raises(ConfigError):
            join_contextual([cell], s)

    def test_state_series_on_cells_week_mean(self):
        cell = PanelCell("2021-W05", D(2021, 2, 1), "House", "Vienna", "Urban", 1, 1.0)
        vals = {(D(2021, 2, 1) + dt.timedelta(days=k), "Vienna"): float(k) for k in range(7)}
        assert join_contextual([cell], ContextualSeries("m", "Daily", "State", vals)).values[0] == 3.0

    def test_duplicate_key(self):
        with pytest.raises(DataError):
            ContextualSeries.from_rows("s", "Daily", "National", [(D(2020, 1, 1), "", 1), (D(2020, 1, 1), "", 2)])


def test_series_round_trip(tmp_path):
    s = ContextualSeries("hicp", "Monthly", "National", {(D(2022, 1, 1), ""): 5.1, (D(2022, 2, 1), ""): 5.9},
                         lag_months=3)
    write_series(s, tmp_path / "s.csv")
    assert load_series(tmp_path / "s.csv") == s


def test_minmax():
    out = minmax_normalize(_daily([2.0, 4.0, 3.0]))
    assert _values(out) == [0.0, 1.0, 0.5]
    with pytest.raises(DataError):
        minmax_normalize(_daily([1.0, 1.0]))


def test_shift_months_clamps_day():
    assert shift_months(D(2022, 5, 31), -3) == D(2022, 2, 28)
