import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats
from sklearn.base import clone

from oracles import fd_gradient, scipy_nb_logpmf

from hedonic_regimes.errors import SpecError
from hedonic_regimes.nbcount import (
    CYCLE_COLUMNS,
    CyclicalTrend,
    NbParams,
    NegativeBinomialRegressor,
    count_design,
    cycle_extrema,
    drop_cycle_columns,
    fit_cycle_then_freeze,
    fit_nb_glm,
    grid_extrema,
    incidence_rate_ratio,
    nb_log_pmf,
    nb_loglik,
    week_to_month,
)
from hedonic_regimes.simulator import simulate_count_panel


class TestPmf:
    def test_k0_closed_form(self):
        assert nb_log_pmf(0, 2.0, 1.0) == pytest.approx(math.log(1 / 3), abs=1e-12)
        assert nb_log_pmf(0, 2.0, 1.0) == pytest.approx(-1.098612, abs=1e-6)

    def test_sums_to_one(self):
        k = np.arange(2001)
        assert np.exp(nb_log_pmf(k, 10.0, 0.7)).sum() == pytest.approx(1.0, abs=1e-9)

    def test_poisson_limit_value(self):
        assert nb_log_pmf(3, 2.0, 1e8) == pytest.approx(math.log(math.exp(-2) * 8 / 6), abs=1e-6)
        assert math.exp(math.log(math.exp(-2) * 8 / 6)) == pytest.approx(0.180447, abs=1e-6)

    @pytest.mark.parametrize("mu", [0.5, 2.0, 10.0])
    @pytest.mark.parametrize("a", [0.5, 1.0, 5.0])
    def test_normalisation_grid(self, mu, a):
        assert np.exp(nb_log_pmf(np.arange(5001), mu, a)).sum() == pytest.approx(1.0, abs=1e-9)

    def test_poisson_limit_grid(self):
        k = np.arange(200)
        for mu in np.linspace(0.1, 20.0, 40):
            dev = np.abs(np.exp(nb_log_pmf(k, mu, 1e8)) - stats.poisson.pmf(k, mu)).max()
            assert dev < 1e-6

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 500), st.floats(1e-3, 1e3), st.floats(1e-2, 1e4))
    def test_matches_scipy(self, k, mu, a):
        assert nb_log_pmf(k, mu, a) == pytest.approx(scipy_nb_logpmf(k, mu, a), rel=1e-9, abs=1e-9)

    def test_finite_at_extremes(self):
        assert math.isfinite(nb_log_pmf(10_000, 1e-6, 1e-6))
        assert math.isfinite(nb_log_pmf(0, 1e6, 1e8))

    @pytest.mark.parametrize("args", [(1, 0.0, 1.0), (1, 1.0, 0.0), (-1, 1.0, 1.0), (1.5, 1.0, 1.0)])
    def test_domain_errors(self, args):
        with pytest.raises(ValueError):
            nb_log_pmf(*args)

    def test_params(self):
        p = NbParams(4.0, 2.0)
        assert p.variance == 12.0 > p.mu
        with pytest.raises(ValueError):
            NbParams(-1.0, 1.0)


class TestCycle:
    def test_may_november_anchor(self):
        trend = CyclicalTrend(-0.085, 0.055, 52)
        t_max, t_min = cycle_extrema(trend)
        assert round(t_max) == 21 and round(t_min) == 47
        assert grid_extrema(trend) == (round(t_max), round(t_min))
        assert week_to_month(t_max) == 5 and week_to_month(t_min) == 11

    def test_pure_cosine(self):
        assert cycle_extrema(CyclicalTrend(1.0, 0.0, 52)) == (0.0, 26.0)

    def test_pure_sine(self):
        assert cycle_extrema(CyclicalTrend(0.0, 1.0, 52))[0] == pytest.approx(13.0)

    def test_zero_amplitude(self):
        with pytest.raises(ValueError):
            cycle_extrema(CyclicalTrend(0.0, 0.0))

    @settings(max_examples=100, deadline=None)
    @given(st.floats(-2, 2), st.floats(-2, 2), st.floats(4, 60))
    def test_identity_and_grid(self, b1, b2, T):
        trend = CyclicalTrend(b1, b2, T)
        t = np.linspace(0, 2 * T, 97)
        assert trend(t) == pytest.approx(trend.phase_form(t), abs=1e-12)
        if trend.amplitude > 1e-3:
            t_max, t_min = cycle_extrema(trend)
            assert 0 <= t_max < T and 0 <= t_min < T
            assert trend(t_max) == pytest.approx(trend.amplitude, rel=1e-9)
            assert trend(t_min) == pytest.approx(-trend.amplitude, rel=1e-9)


class TestIrr:
    def test_values(self):
        assert incidence_rate_ratio(-0.309) == pytest.approx(0.734, abs=1e-3)
        assert incidence_rate_ratio(0.0) == 1.0
        assert incidence_rate_ratio(math.log(2)) == pytest.approx(2.0)

    def test_non_finite(self):
        with pytest.raises(ValueError):
            incidence_rate_ratio(math.inf)


@pytest.fixture(scope="module")
def panel():
    cells, truth = simulate_count_panel(n_weeks=70, dispersion=2.0, seed=4)
    return cells, truth


@pytest.fixture(scope="module")
def panel_fit(panel):
    cells, _ = panel
    return fit_nb_glm(cells, count_design(cells, time=None))


def test_constant_counts_hit_upper_bound():
    fit = fit_nb_glm(np.full(50, 7.0), np.ones((50, 1)), columns=["(Intercept)"])
    assert fit.beta[0] == pytest.approx(math.log(7.0), abs=1e-8)
    assert fit.at_upper_bound


def test_recovery(panel, panel_fit):
    cells, truth = panel
    assert len(cells) == 5040
    fit = panel_fit
    z = [(fit.coef(c) - truth["coefficients"].get(c, 0.0)) / s for c, s in zip(fit.columns, fit.se)]
    assert max(abs(v) for v in z) < 3.0
    assert fit.dispersion == pytest.approx(2.0, rel=0.2)
    assert not fit.at_upper_bound


def test_score_vanishes(panel, panel_fit):
    cells, _ = panel
    X, _ = count_design(cells, time=None)
    y = np.array([c.count for c in cells], dtype=float)
    off = np.log([c.exposure for c in cells])
    theta = np.r_[panel_fit.beta, math.log(panel_fit.dispersion)]
    g = fd_gradient(lambda t: nb_loglik(y, X, off, t[:-1], t[-1]), theta)
    assert np.linalg.norm(g) < 1e-5
    assert panel_fit.score_norm < 1e-5


def test_loglik_and_bic(panel, panel_fit):
    cells, _ = panel
    y = np.array([c.count for c in cells])
    X, _ = count_design(cells, time=None)
    mu = np.exp(X @ panel_fit.beta) * np.array([c.exposure for c in cells])
    ll = scipy_nb_logpmf(y, mu, panel_fit.dispersion).sum()
    assert panel_fit.loglik == pytest.approx(ll, rel=1e-10)
    k = len(panel_fit.columns) + 1
    assert panel_fit.n_params == k
    assert panel_fit.bic == pytest.approx(-2 * ll + k * math.log(len(y)))


def test_exposure_invariance(panel, panel_fit):
    cells, _ = panel
    design = count_design(cells, time=None)
    ex = np.array([c.exposure for c in cells])
    scaled = fit_nb_glm(cells, design, exposure=ex * 1000.0)
    assert scaled.beta[0] == pytest.approx(panel_fit.beta[0] - math.log(1000.0), abs=1e-8)
    assert scaled.beta[1:] == pytest.approx(panel_fit.beta[1:], abs=1e-8)
    assert scaled.dispersion == pytest.approx(panel_fit.dispersion, rel=1e-8)


def test_design_columns(panel):
    cells, _ = panel
    X, names = count_design(cells)
    assert names[0] == "(Intercept)" and names[-2:] == list(CYCLE_COLUMNS)
    assert "state[LowerAustria]" not in names and "dwelling_type[Apartment]" in names
    assert any(n.startswith("quarter[") for n in names)
    with pytest.raises(SpecError):
        count_design(cells, extra={"x": [1.0]})


class TestFreeze:
    def test_recovers_amplitude(self, panel):
        cells, truth = panel
        trend = fit_cycle_then_freeze(cells, count_design(cells, time=None))
        assert trend.amplitude == pytest.approx(truth["cycle_amplitude"], rel=0.1)

    def test_frozen_fit_has_no_cycle_columns(self, panel):
        cells, _ = panel
        trend = fit_cycle_then_freeze(cells, count_design(cells, time=None))
        X, names = drop_cycle_columns(*count_design(cells, time=None))
        fit = fit_nb_glm(cells, (X, names), frozen_cycle=trend)
        assert not set(CYCLE_COLUMNS) & set(fit.columns)
        assert fit.cycle == trend
        assert any("frozen cycle" in t for t in fit.offset_terms)

    def test_refit_equivalence(self, panel):
        cells, _ = panel
        trend, base = fit_cycle_then_freeze(cells, count_design(cells, time=None), return_fit=True)
        X, names = drop_cycle_columns(*count_design(cells, time=None))
        refit = fit_nb_glm(cells, (X, names), frozen_cycle=trend)
        for c in names:
            assert refit.coef(c) == pytest.approx(base.coef(c), abs=1e-6)
        assert refit.dispersion == pytest.approx(base.dispersion, rel=1e-6)

    def test_errors(self, panel):
        cells, _ = panel
        with pytest.raises(SpecError):
            fit_cycle_then_freeze(cells, count_design(cells, time=None, cycle=False))
        with pytest.raises(SpecError):
            fit_nb_glm(cells, count_design(cells, time=None), frozen_cycle=CyclicalTrend(0.1, 0.1))


class TestRegressor:
    def test_api(self, panel, panel_fit):
        cells, _ = panel
        X, names = count_design(cells, time=None)
        y = np.array([c.count for c in cells])
        ex = np.array([c.exposure for c in cells])
        est = NegativeBinomialRegressor()
        assert clone(est).get_params() == est.get_params()
        est.fit(X[:, 1:], y, exposure=ex)
        assert est.intercept_ == pytest.approx(panel_fit.beta[0], abs=1e-8)
        assert est.dispersion_ == pytest.approx(panel_fit.dispersion, rel=1e-8)
        mu = est.predict(X[:, 1:], exposure=ex)
        # intercept score equation of the NB2 likelihood
        a = est.dispersion_
        assert np.sum(a * (y - mu) / (mu + a)) == pytest.approx(0.0, abs=1e-6)

    def test_validation(self):
        with pytest.raises(ValueError):
            NegativeBinomialRegressor().fit([[1.0], [2.0], [3.0]], [1, -1, 2])
        with pytest.raises(ValueError):
            NegativeBinomialRegressor().fit([[1.0], [2.0], [3.0]], [1, 1, 2], exposure=[1, 0, 1])
