import datetime as dt
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from hedonic_regimes.data import DatasetTag, HedonicProfile, ListingRecord, LocationKey  # noqa: E402
from hedonic_regimes.simulator import CountParams, MarketConfig, simulate_market  # noqa: E402

# filled by test_acceptance.py, printed at the end of the session
ACCEPTANCE_LINES: list = []


def make_hedonics(**kw):
    base = dict(
        log_area=4.5, rooms="3", age_class="New", renovated=False, open_space="None", basement=False,
        parking=False, air_conditioning=False, step_free=False, wellness=False, condition="Unclassified",
        log_plot_price=6.0,
    )
    base.update(kw)
    return HedonicProfile(**base)


def make_record(i=0, price=300_000.0, day=dt.date(2020, 7, 15), tag=DatasetTag.ADVERTS, dwelling_type="House",
                state="Vienna", district=None, urban_class="Urban", accessibility=1, **hedonics):
    loc = LocationKey(state, district or f"{state}-01", urban_class, accessibility)
    hed = None if tag is DatasetTag.DEEDS else make_hedonics(**hedonics)
    return ListingRecord(f"r{i}", tag, float(price), day, dwelling_type, loc, hed)


@pytest.fixture(scope="session")
def small_market():
    cfg = MarketConfig(seed=11, coverage=(dt.date(2019, 1, 1), dt.date(2020, 12, 31)),
                       count=CountParams(target_listings=6000))
    return cfg, simulate_market(cfg)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
        terminalreporter.write_line(line)
