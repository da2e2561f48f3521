import datetime as dt
import filecmp

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_record
from oracles import tally_cells

from hedonic_regimes.data import (
    CORE_FIELDS,
    HEDONIC_FIELDS,
    STATES,
    DatasetTag,
    LocationKey,
    check_nesting,
    load_listings,
    read_cells,
    trim_prices,
    weekly_cell_counts,
    write_cells,
    write_listings,
    write_rejections,
)
from hedonic_regimes.errors import ConfigError, DataError, SchemaError

POP = {s: 1_000_000.0 for s in STATES}


def _write(path, header, rows, delim=","):
    path.write_text("\n".join([delim.join(header)] + [delim.join(r) for r in rows]) + "\n", encoding="utf-8")
    return path


def _row(i, price="250000", day="2020-07-15", district="Vienna-01", state="Vienna"):
    core = [f"id{i}", price, day, "Apartment", state, district, "Urban", "2"]
    hed = ["4.2", "2", "New", "0", "UpTo15", "1", "0", "0", "1", "0", "AsNew", "6.5"]
    return core + hed


HEADER = list(CORE_FIELDS + HEDONIC_FIELDS)


class TestLoad:
    def test_three_well_formed_rows(self, tmp_path):
        p = _write(tmp_path / "a.csv", HEADER, [_row(i) for i in range(3)])
        res = load_listings(p, DatasetTag.ADVERTS)
        assert len(res.records) == 3
        assert res.rejections == []
        r = res.records[0]
        assert r.price == 250000.0 and r.observed_on == dt.date(2020, 7, 15)
        assert r.hedonics.open_space == "UpTo15" and r.hedonics.basement is True

    def test_bad_price_rejected_with_row_number(self, tmp_path):
        rows = [_row(0), _row(1, price="abc"), _row(2)]
        res = load_listings(_write(tmp_path / "a.csv", HEADER, rows), "Adverts")
        assert len(res.records) == 2
        assert len(res.rejections) == 1
        assert res.rejections[0].row == 3  # header is line 1
        assert "abc" in res.rejections[0].reason

    def test_bad_date_rejected(self, tmp_path):
        res = load_listings(_write(tmp_path / "a.csv", HEADER, [_row(0, day="2020-13-01")]), "Adverts")
        assert res.records == [] and res.rejections[0].row == 2

    def test_semicolon_delimiter_detected(self, tmp_path):
        p = _write(tmp_path / "a.csv", HEADER, [_row(0), _row(1)], delim=";")
        assert len(load_listings(p, "Adverts").records) == 2

    def test_missing_column_names_it(self, tmp_path):
        header = [h for h in HEADER if h != "district"]
        rows = [[c for h, c in zip(HEADER, _row(0)) if h != "district"]]
        with pytest.raises(SchemaError, match="district"):
            load_listings(_write(tmp_path / "a.csv", header, rows), "Adverts")

    def test_adverts_need_hedonic_columns(self, tmp_path):
        p = _write(tmp_path / "a.csv", list(CORE_FIELDS), [_row(0)[: len(CORE_FIELDS)]])
        with pytest.raises(SchemaError, match="log_area"):
            load_listings(p, "Adverts")

    def test_deeds_without_hedonics(self, tmp_path):
        p = _write(tmp_path / "d.csv", list(CORE_FIELDS), [_row(i)[: len(CORE_FIELDS)] for i in range(2)])
        res = load_listings(p, DatasetTag.DEEDS)
        assert len(res.records) == 2
        assert all(r.hedonics is None and r.tag is DatasetTag.DEEDS for r in res.records)

    def test_schema_mapping(self, tmp_path):
        header = ["ID"] + HEADER[1:]
        res = load_listings(_write(tmp_path / "a.csv", header, [_row(0)]), "Adverts", schema={"id": "ID"})
        assert res.records[0].id == "id0"

    def test_district_in_two_states_is_fatal(self, tmp_path):
        rows = [_row(0), _row(1, state="Tyrol")]
        with pytest.raises(DataError, match="Vienna-01"):
            load_listings(_write(tmp_path / "a.csv", HEADER, rows), "Adverts")

    def test_coverage_rejects(self, tmp_path):
        rows = [_row(0), _row(1, day="2018-01-01")]
        res = load_listings(_write(tmp_path / "a.csv", HEADER, rows), "Adverts",
                            coverage=(dt.date(2019, 1, 1), dt.date(2022, 6, 30)))
        assert len(res.records) == 1 and "coverage" in res.rejections[0].reason

    def test_unknown_level_rejected(self, tmp_path):
        row = _row(0)
        row[HEADER.index("urban_class")] = "Suburban"
        res = load_listings(_write(tmp_path / "a.csv", HEADER, [row]), "Adverts")
        assert res.records == [] and "Suburban" in res.rejections[0].reason

    def test_rejection_sidecar(self, tmp_path):
        res = load_listings(_write(tmp_path / "a.csv", HEADER, [_row(0, price="x")]), "Adverts")
        write_rejections(res.rejections, tmp_path / "rej.csv")
        assert (tmp_path / "rej.csv").read_text().splitlines()[1].startswith("2,")

    def test_round_trip(self, tmp_path, small_market):
        _, res = small_market
        write_listings(res.adverts, tmp_path / "a.csv")
        write_listings(res.deeds, tmp_path / "d.csv")
        assert load_listings(tmp_path / "a.csv", "Adverts").records == res.adverts
        assert load_listings(tmp_path / "d.csv", "Deeds").records == res.deeds


def test_nesting_is_a_function(small_market):
    _, res = small_market
    mapping = check_nesting(res.adverts + res.deeds)
    assert all(d.startswith(s) for d, s in mapping.items())


def test_record_invariants():
    with pytest.raises(ValueError):
        make_record(price=0)
    with pytest.raises(ValueError):
        LocationKey("Bavaria", "x", "Urban", 1)
    with pytest.raises(ValueError):
        make_record(rooms="7")


class TestTrim:
    def bounds(self, price):
        kept, removed = trim_prices([make_record(price=price)])
        return len(kept) == 1

    def test_default_bounds_inclusive(self):
        assert not self.bounds(99_999)
        assert self.bounds(100_000)
        assert self.bounds(5_000_000)
        assert not self.bounds(5_000_001)

    def test_reports_removals(self):
        recs = [make_record(i, price=p) for i, p in enumerate([50_000, 200_000, 9e6])]
        kept, removed = trim_prices(recs)
        assert removed == 2 and [r.id for r in kept] == ["r1"]

    def test_bad_bounds(self):
        with pytest.raises(ValueError):
            trim_prices([], 10, 10)

    @given(st.lists(st.floats(1.0, 1e7), max_size=40))
    def test_idempotent(self, prices):
        recs = [make_record(i, price=p) for i, p in enumerate(prices)]
        once, _ = trim_prices(recs)
        twice, removed = trim_prices(once)
        assert twice == once and removed == 0


class TestCells:
    def test_five_records_one_cell(self):
        recs = [make_record(i, day=dt.date(2021, 3, 1) + dt.timedelta(days=i % 5)) for i in range(5)]
        cells = weekly_cell_counts(recs, POP, zero_fill=False)
        assert len(cells) == 1
        c = cells[0]
        assert (c.count, c.week, c.dwelling_type, c.state, c.urban_class) == (5, "2021-W09", "House", "Vienna", "Urban")
        assert c.exposure == 1_000_000.0

    def test_empty_week_zero_filled(self):
        cells = weekly_cell_counts([], POP, zero_fill=True, coverage=(dt.date(2021, 3, 1), dt.date(2021, 3, 7)))
        assert len(cells) == 72
        assert all(c.count == 0 for c in cells)
        assert len({(c.dwelling_type, c.state, c.urban_class) for c in cells}) == 72

    def test_no_zero_fill_observed_only(self):
        recs = [make_record(0), make_record(1, state="Tyrol", district="Tyrol-01")]
        cells = weekly_cell_counts(recs, POP, zero_fill=False)
        assert len(cells) == 2 and all(c.count == 1 for c in cells)

    def test_missing_population(self):
        with pytest.raises(ConfigError, match="Tyrol"):
            weekly_cell_counts([make_record(0, state="Tyrol", district="Tyrol-01")], {"Vienna": 1.0})

    def test_annual_population(self):
        pop = {s: {2020: 10.0, 2021: 20.0} for s in STATES}
        recs = [make_record(0, day=dt.date(2020, 12, 30)), make_record(1, day=dt.date(2021, 1, 6))]
        ex = {c.week: c.exposure for c in weekly_cell_counts(recs, pop, zero_fill=False)}
        assert ex == {"2020-W53": 10.0, "2021-W01": 20.0}

    def test_matches_tally_oracle(self, small_market):
        _, res = small_market
        for records in (res.adverts, res.brokered, res.deeds):
            cells = weekly_cell_counts(records, res.population)
            assert sum(c.count for c in cells) == len(records)
            weeks = {c.week for c in cells}
            assert len(cells) == 72 * len(weeks)
            observed = {(c.week_start, c.dwelling_type, c.state, c.urban_class): c.count for c in cells if c.count}
            assert observed == tally_cells(records)

    def test_pipeline_deterministic(self, tmp_path, small_market):
        _, res = small_market
        write_listings(res.deeds, tmp_path / "d.csv")
        for name in ("c1.csv", "c2.csv"):
            recs = load_listings(tmp_path / "d.csv", "Deeds").records
            kept, _ = trim_prices(recs)
            write_cells(weekly_cell_counts(kept, res.population), tmp_path / name)
        assert filecmp.cmp(tmp_path / "c1.csv", tmp_path / "c2.csv", shallow=False)
        assert read_cells(tmp_path / "c1.csv") == weekly_cell_counts(trim_prices(res.deeds)[0], res.population)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 60), st.sampled_from(STATES), st.booleans()), max_size=50))
    def test_conservation(self, draws):
        recs = [make_record(i, day=dt.date(2021, 1, 1) + dt.timedelta(days=d), state=s, district=f"{s}-01",
                            dwelling_type="House" if h else "Apartment") for i, (d, s, h) in enumerate(draws)]
        cells = weekly_cell_counts(recs, POP)
        assert sum(c.count for c in cells) == len(recs)
        by_week = {}
        for c in cells:
            by_week[c.week] = by_week.get(c.week, 0) + 1
        assert all(v == 72 for v in by_week.values())
