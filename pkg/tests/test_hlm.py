import math
import warnings

import numpy as np
import pytest
from sklearn.base import clone

from oracles import balanced_anova_ml, dense_gls_loglik, fd_gradient

from hedonic_regimes.design import HlmSpec, build_design
from hedonic_regimes.errors import ConvergenceError, RankDeficiencyError
from hedonic_regimes.hlm import (
    HierarchicalHedonicRegressor,
    ProfiledLikelihood,
    VarianceComponents,
    bic,
    bic_value,
    fit_arrays,
    fit_hlm,
)
from hedonic_regimes.simulator import simulate_hlm_panel


def _fit(panel, **kw):
    return fit_arrays(panel.y, panel.X, panel.state_index, panel.district_index, panel.columns, **kw)


@pytest.fixture(scope="module")
def panel():
    return simulate_hlm_panel(6, 5, 20, seed=3)


@pytest.fixture(scope="module")
def fitted(panel):
    return _fit(panel)


def test_zero_components_match_ols():
    p = simulate_hlm_panel(10, 10, 20, variance=(0.0, 0.0, 0.1), seed=1, center_noise=True)
    fit = _fit(p)
    ols = np.linalg.solve(p.X.T @ p.X, p.X.T @ p.y)
    assert fit.beta == pytest.approx(ols, rel=1e-6)
    assert fit.convergence.at_boundary == {"state": True, "district": True}
    assert fit.variance.sigma2_resid == pytest.approx(np.mean((p.y - p.X @ ols) ** 2), rel=1e-8)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_balanced_one_level_matches_anova(seed):
    p = simulate_hlm_panel(1, 30, 20, variance=(0.0, 0.05, 0.1), seed=seed)
    X = p.X[:, :1]
    with pytest.warns(RuntimeWarning, match="state"):
        fit = fit_arrays(p.y, X, p.state_index, p.district_index)
    s2d, s2e = balanced_anova_ml(p.y, p.district_index)
    assert fit.variance.sigma2_district == pytest.approx(s2d, abs=1e-4, rel=1e-4)
    assert fit.variance.sigma2_resid == pytest.approx(s2e, abs=1e-4, rel=1e-4)
    assert fit.variance.sigma2_state == 0.0
    assert "state" in fit.convergence.fixed and fit.convergence.warnings


def test_loglik_matches_dense_covariance():
    p = simulate_hlm_panel(3, 3, 6, seed=5)
    fit = _fit(p)
    ll, beta = dense_gls_loglik(p.y, p.X, p.state_index, p.district_index, *fit.variance.as_tuple())
    assert fit.loglik == pytest.approx(ll, rel=1e-10)
    assert fit.beta == pytest.approx(beta, rel=1e-8, abs=1e-10)


def test_statsmodels_agrees():
    sm = pytest.importorskip("statsmodels.formula.api")
    import pandas as pd

    p = simulate_hlm_panel(6, 5, 20, seed=7)
    df = pd.DataFrame({"y": p.y, "x1": p.X[:, 1], "x2": p.X[:, 2], "s": p.state_index, "d": p.district_index})
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ref = sm.mixedlm("y ~ x1 + x2", df, groups="s", re_formula="1", vc_formula={"d": "0 + C(d)"}).fit(
            reml=False, method="lbfgs")
    fit = _fit(p)
    assert fit.loglik == pytest.approx(ref.llf, abs=1e-4)
    assert fit.beta == pytest.approx(ref.fe_params.values, abs=1e-4)
    assert fit.variance.sigma2_resid == pytest.approx(ref.scale, rel=1e-3)
    assert fit.variance.sigma2_state == pytest.approx(float(ref.cov_re.iloc[0, 0]), rel=1e-2)
    assert fit.variance.sigma2_district == pytest.approx(float(ref.vcomp[0]), rel=1e-2)


def test_gradient_vanishes(panel, fitted):
    prof = ProfiledLikelihood(panel.y, panel.X, panel.state_index, panel.district_index)
    g = fd_gradient(prof.loglik, fitted.log_ratios)
    assert np.linalg.norm(g) < 1e-5
    assert fitted.convergence.grad_norm < 1e-5


def test_likelihood_ascent(fitted):
    assert fitted.loglik >= fitted.convergence.loglik_start


def test_shift_invariance(panel, fitted):
    shifted = fit_arrays(panel.y + 2.5, panel.X, panel.state_index, panel.district_index)
    assert shifted.beta[0] == pytest.approx(fitted.beta[0] + 2.5, abs=1e-8)
    assert shifted.beta[1:] == pytest.approx(fitted.beta[1:], abs=1e-8)
    assert shifted.variance.as_tuple() == pytest.approx(fitted.variance.as_tuple(), abs=1e-8)
    assert shifted.se == pytest.approx(fitted.se, abs=1e-8)


def test_permutation_invariance(panel, fitted):
    perm = np.random.default_rng(0).permutation(len(panel.y))
    fit = fit_arrays(panel.y[perm], panel.X[perm], panel.state_index[perm], panel.district_index[perm])
    assert fit.beta == pytest.approx(fitted.beta, abs=1e-10)
    assert fit.variance.as_tuple() == pytest.approx(fitted.variance.as_tuple(), abs=1e-10)
    assert fit.loglik == pytest.approx(fitted.loglik, abs=1e-8)


class TestBic:
    def test_formula(self):
        assert bic_value(0.0, 2, 100) == pytest.approx(9.2103, abs=1e-4)

    def test_fit_convention(self, fitted):
        assert fitted.n_params == 3 + 3
        assert bic(fitted) == fitted.bic == pytest.approx(-2 * fitted.loglik + 6 * math.log(fitted.n_obs))

    def test_noise_column(self, panel, fitted):
        noise = np.random.default_rng(1).standard_normal(len(panel.y))
        big = fit_arrays(panel.y, np.column_stack([panel.X, noise]), panel.state_index, panel.district_index)
        gain = big.loglik - fitted.loglik
        assert gain >= -1e-9
        assert (big.bic > fitted.bic) == (gain < 0.5 * math.log(fitted.n_obs))

    def test_deterministic(self, panel, fitted):
        assert _fit(panel).bic == fitted.bic


def test_convergence_error_carries_trace(panel):
    with pytest.raises(ConvergenceError) as err:
        _fit(panel, max_iter=1)
    assert err.value.trace


def test_rank_deficient_design(panel):
    X = np.column_stack([panel.X, panel.X[:, 1]])
    with pytest.raises(RankDeficiencyError):
        fit_arrays(panel.y, X, panel.state_index, panel.district_index, ["a", "b", "c", "d"])


def test_one_district_per_state_warns():
    p = simulate_hlm_panel(8, 1, 30, seed=2)
    with pytest.warns(RuntimeWarning):
        fit = _fit(p)
    assert fit.variance.sigma2_district == 0.0 and fit.convergence.fixed


def test_variance_components_validate():
    with pytest.raises(ValueError):
        VarianceComponents(-0.1, 0.0, 1.0)
    assert VarianceComponents(0.1, 0.2, 0.3).total == pytest.approx(0.6)


def test_fit_hlm_on_records(small_market):
    _, res = small_market
    fit = fit_hlm(build_design(res.adverts, HlmSpec()))
    assert fit.columns[0] == "(Intercept)"
    assert fit.coef("log_area") == pytest.approx(0.872, abs=0.05)
    assert set(fit.random_effects["state"]) <= {r.state for r in res.adverts}
    assert fit.factor_levels["quarter"][0] == fit.references["quarter"] == "2019Q1"
    assert fit.convergence.grad_norm < 1e-5


class TestEstimator:
    def test_api(self, panel):
        est = HierarchicalHedonicRegressor()
        assert clone(est).get_params() == est.get_params()
        est.fit(panel.X[:, 1:], panel.y, panel.groups)
        ref = _fit(panel)
        assert est.intercept_ == pytest.approx(ref.beta[0])
        assert est.coef_ == pytest.approx(ref.beta[1:])
        assert est.variance_components_.as_tuple() == pytest.approx(ref.variance.as_tuple(), rel=1e-8)
        pred = est.predict(panel.X[:, 1:])
        assert pred == pytest.approx(panel.X @ ref.beta)
        with_blup = est.predict(panel.X[:, 1:], panel.groups)
        assert np.mean((panel.y - with_blup) ** 2) < np.mean((panel.y - pred) ** 2)
        assert -1 < est.score(panel.X[:, 1:], panel.y) <= 1

    def test_bad_groups(self, panel):
        with pytest.raises(ValueError):
            HierarchicalHedonicRegressor().fit(panel.X[:, 1:], panel.y, panel.groups[:, :1])
        bad = panel.groups.copy()
        bad[0, 0] = "99"
        with pytest.raises(ValueError, match="more than one state"):
            HierarchicalHedonicRegressor().fit(panel.X[:, 1:], panel.y, bad)

    def test_unfitted_predict(self, panel):
        from sklearn.exceptions import NotFittedError

        with pytest.raises(NotFittedError):
            HierarchicalHedonicRegressor().predict(panel.X[:, 1:])

    def test_input_validation(self):
        with pytest.raises(ValueError):
            HierarchicalHedonicRegressor().fit([[np.nan]] * 5, [1.0] * 5, [["a", "b"]] * 5)
