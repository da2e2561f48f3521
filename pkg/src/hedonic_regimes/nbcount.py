"""Quasi-hedonic negative-binomial count model with exposure and a cyclical term."""

from __future__ import annotations

import datetime as dt
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg
from scipy.special import betaln, digamma, polygamma
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import DWELLING_TYPES, STATES, URBAN_CLASSES, PanelCell
from .design import INTERCEPT, check_rank
from .errors import ConvergenceError, SpecError
from .hlm import bic_value
from .regimes import quarter_of

DISPERSION_MAX = 1e8
DISPERSION_MIN = 1e-8
WEEKS_PER_YEAR = 52.0
CYCLE_COLUMNS = ("cycle_cos", "cycle_sin")

COUNT_REFERENCES = {"dwelling_type": "House", "state": "LowerAustria", "urban_class": "Urban"}


# --------------------------------------------------------------------------
# distribution


def nb_log_pmf(k, mu, dispersion):
    """Log NB probability of ``k`` with mean ``mu`` and shape ``dispersion``.

    Uses ``Gamma(a+k)/(Gamma(a) k!) = 1/((a+k) B(a, k+1))`` so the
    combinatorial term stays accurate for very large ``a``.
    """
    k = np.asarray(k, dtype=float)
    mu = np.asarray(mu, dtype=float)
    a = np.asarray(dispersion, dtype=float)
    if np.any(mu <= 0) or np.any(a <= 0):
        raise ValueError("mu and dispersion must be positive")
    if np.any(k < 0) or np.any(k != np.floor(k)):
        raise ValueError("k must be a non-negative integer")
    log_coef = -np.log(a + k) - betaln(a, k + 1.0)
    out = log_coef + k * (np.log(mu) - np.log(mu + a)) - a * np.log1p(mu / a)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class NbParams:
    mu: float
    dispersion: float

    def __post_init__(self):
        if not (self.mu > 0 and self.dispersion > 0):
            raise ValueError("mu and dispersion must be positive")

    @property
    def variance(self) -> float:
        return self.mu + self.mu**2 / self.dispersion

    def log_pmf(self, k):
        return nb_log_pmf(k, self.mu, self.dispersion)


# --------------------------------------------------------------------------
# cyclical term


@dataclass(frozen=True)
class CyclicalTrend:
    """``beta_cos cos(2 pi t / T) + beta_sin sin(2 pi t / T)``, ``t`` in weeks."""

    beta_cos: float
    beta_sin: float
    period: float = WEEKS_PER_YEAR

    def __post_init__(self):
        if not self.period > 0:
            raise ValueError("period must be positive")

    @property
    def amplitude(self) -> float:
        return math.hypot(self.beta_cos, self.beta_sin)

    @property
    def shift(self) -> float:
        return math.atan2(self.beta_sin, self.beta_cos)

    def __call__(self, t):
        w = 2.0 * np.pi * np.asarray(t, dtype=float) / self.period
        return self.beta_cos * np.cos(w) + self.beta_sin * np.sin(w)

    def phase_form(self, t):
        w = 2.0 * np.pi * np.asarray(t, dtype=float) / self.period
        return self.amplitude * np.cos(w - self.shift)


def cycle_extrema(trend: CyclicalTrend) -> tuple[float, float]:
    """Weeks of the maximum and minimum of the cycle, both in ``[0, T)``."""
    if trend.beta_cos == 0 and trend.beta_sin == 0:
        raise ValueError("zero-amplitude cycle has no extremum")
    T = trend.period
    t_max = (T / (2.0 * math.pi) * trend.shift) % T
    t_min = (t_max + T / 2.0) % T
    # the modulo can round up to T itself
    return (t_max if t_max < T else 0.0), (t_min if t_min < T else 0.0)


def grid_extrema(trend: CyclicalTrend) -> tuple[int, int]:
    """Integer weeks in ``[0, T)`` where the cycle is largest and smallest."""
    t = np.arange(int(math.ceil(trend.period)))
    f = trend(t)
    return int(t[np.argmax(f)]), int(t[np.argmin(f)])


def week_to_month(week: float, year: int = 2021) -> int:
    """Calendar month of the Thursday of ISO week ``round(week)`` (weeks < 1 wrap to the year end)."""
    w = int(round(week))
    weeks_in_year = dt.date(year, 12, 28).isocalendar()[1]
    if w < 1:
        w += weeks_in_year
    w = min(w, weeks_in_year)
    return dt.date.fromisocalendar(year, w, 4).month


def incidence_rate_ratio(coef: float) -> float:
    if not math.isfinite(coef):
        raise ValueError("coefficient must be finite")
    return math.exp(coef)


# --------------------------------------------------------------------------
# design


def cell_quarter(cell: PanelCell) -> str:
    return quarter_of(cell.week_start + dt.timedelta(days=3))


def count_design(
    cells: Sequence[PanelCell],
    *,
    time: str | None = "quarter",
    cycle: bool = True,
    extra: Mapping[str, Sequence] | None = None,
    references: Mapping[str, str] | None = None,
    period: float = WEEKS_PER_YEAR,
) -> tuple[np.ndarray, list[str]]:
    """Intercept, type, state, urban class, time dummies, cycle and extra columns.

    ``time`` is ``"quarter"``, ``"year"`` or ``None``. Numeric ``extra``
    columns enter as-is; string columns become treatment-coded factors with
    the first sorted level (or ``references[name]``) as reference.
    """
    refs = dict(COUNT_REFERENCES)
    refs.update(references or {})
    n = len(cells)
    cols = [np.ones(n)]
    names = [INTERCEPT]

    def factor(name, values, levels):
        ref = refs.get(name, levels[0])
        present = set(values)
        if ref not in present:
            raise SpecError(f"reference level {ref!r} of {name!r} not observed")
        for lv in levels:
            if lv != ref and lv in present:
                cols.append(np.array([v == lv for v in values], dtype=float))
                names.append(f"{name}[{lv}]")

    factor("dwelling_type", [c.dwelling_type for c in cells], list(DWELLING_TYPES))
    factor("state", [c.state for c in cells], list(STATES))
    factor("urban_class", [c.urban_class for c in cells], list(URBAN_CLASSES))
    if time == "quarter":
        values = [cell_quarter(c) for c in cells]
        factor("quarter", values, sorted(set(values)))
    elif time == "year":
        values = [str((c.week_start + dt.timedelta(days=3)).year) for c in cells]
        factor("year", values, sorted(set(values)))
    elif time is not None:
        raise SpecError(f"unknown time unit {time!r}")
    if cycle:
        t = np.array([c.week_of_year for c in cells], dtype=float)
        w = 2.0 * np.pi * t / period
        cols += [np.cos(w), np.sin(w)]
        names += list(CYCLE_COLUMNS)
    for key, values in (extra or {}).items():
        arr = np.asarray(values)
        if len(arr) != n:
            raise SpecError(f"extra column {key!r} has {len(arr)} rows, expected {n}")
        if arr.dtype.kind in "fiub":
            cols.append(arr.astype(float))
            names.append(key)
        else:
            vals = [str(v) for v in arr]
            factor(key, vals, sorted(set(vals)))
    return np.column_stack(cols), names


def cycle_offset(cells: Sequence[PanelCell], trend: CyclicalTrend) -> np.ndarray:
    return trend(np.array([c.week_of_year for c in cells], dtype=float))


# --------------------------------------------------------------------------
# fitting


def nb_loglik(y, X, offset, beta, log_dispersion) -> float:
    mu = np.exp(X @ beta + offset)
    return float(np.sum(nb_log_pmf(y, mu, math.exp(log_dispersion))))


def _score_hessian(y, X, mu, a):
    r = mu + a
    s_eta = a * (y - mu) / r
    g_beta = X.T @ s_eta
    g_a = np.sum(digamma(y + a) - digamma(a) - np.log1p(mu / a) + (mu - y) / r)
    h_a = np.sum(polygamma(1, y + a) - polygamma(1, a) + 1.0 / a - 1.0 / r - (mu - y) / r**2)
    g_s = a * g_a
    h_ss = a * a * h_a + a * g_a
    h_bb = -(X.T * (a * mu * (a + y) / r**2)) @ X
    h_bs = X.T @ (a * mu * (y - mu) / r**2)
    return g_beta, g_s, h_bb, h_bs, h_ss


@dataclass
class NbFit:
    columns: list
    beta: np.ndarray
    cov_beta: np.ndarray
    dispersion: float
    dispersion_se: float
    loglik: float
    bic: float
    n_obs: int
    n_params: int
    at_upper_bound: bool
    iterations: int
    score_norm: float
    offset_terms: list = field(default_factory=list)
    frozen_cycle: CyclicalTrend | None = None
    trace: list = field(default_factory=list, repr=False)
    metadata: dict = field(default_factory=dict)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov_beta))

    @property
    def coefficients(self) -> dict:
        return {c: (float(b), float(s)) for c, b, s in zip(self.columns, self.beta, self.se)}

    def coef(self, name: str) -> float:
        return float(self.beta[self.columns.index(name)])

    @property
    def cycle(self) -> CyclicalTrend | None:
        if all(c in self.columns for c in CYCLE_COLUMNS):
            return CyclicalTrend(self.coef(CYCLE_COLUMNS[0]), self.coef(CYCLE_COLUMNS[1]))
        return self.frozen_cycle


def fit_nb_arrays(
    y,
    X,
    offset=None,
    columns: Sequence[str] | None = None,
    *,
    max_iter: int = 100,
    tol: float = 1e-10,
) -> NbFit:
    """ML fit of ``log mu = X b + offset`` with NB shape ``a``.

    Alternates one IRLS update of ``b`` (expected-information weights) with
    one safeguarded Newton update of ``log a`` until the log-likelihood
    changes by less than ``tol``, then refines jointly with full Newton
    steps. ``a`` runs into ``DISPERSION_MAX`` for equidispersed data, in
    which case the fit is the Poisson limit and ``at_upper_bound`` is set.
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    if np.any(y < 0) or np.any(y != np.floor(y)):
        raise ValueError("counts must be non-negative integers")
    offset = np.zeros(n) if offset is None else np.asarray(offset, dtype=float)
    columns = list(columns) if columns is not None else [f"x{j}" for j in range(p)]
    check_rank(X, columns)
    s_lo, s_hi = math.log(DISPERSION_MIN), math.log(DISPERSION_MAX)

    def ll_of(beta, s):
        mu = np.exp(np.clip(X @ beta + offset, -700, 700))
        return float(np.sum(nb_log_pmf(y, mu, math.exp(s))))

    # Poisson-style starting values
    mu0 = (y + y.mean()) / 2.0 + 1e-3
    z = np.log(mu0) - offset
    beta = np.linalg.lstsq(X * np.sqrt(mu0)[:, None], z * np.sqrt(mu0), rcond=None)[0]
    mu = np.exp(X @ beta + offset)
    denom = np.sum((y - mu) ** 2 - mu)
    a0 = np.sum(mu**2) / denom if denom > 0 else DISPERSION_MAX
    s = float(np.clip(math.log(a0), s_lo, s_hi))
    ll = ll_of(beta, s)
    trace = [{"iter": 0, "loglik": ll, "dispersion": math.exp(s)}]

    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        ll_prev = ll
        a = math.exp(s)
        # IRLS step for beta
        eta = X @ beta + offset
        mu = np.exp(eta)
        w = mu * a / (mu + a)
        z = eta - offset + (y - mu) / mu
        sw = np.sqrt(w)
        beta_new = np.linalg.lstsq(X * sw[:, None], z * sw, rcond=None)[0]
        ll_new = ll_of(beta_new, s)
        step = beta_new - beta
        halvings = 0
        while ll_new < ll - 1e-12 and halvings < 30:
            step *= 0.5
            beta_new = beta + step
            ll_new = ll_of(beta_new, s)
            halvings += 1
        if ll_new >= ll - 1e-12:
            beta, ll = beta_new, ll_new
        # Newton step for log a
        mu = np.exp(X @ beta + offset)
        _, g_s, _, _, h_ss = _score_hessian(y, X, mu, a)
        if h_ss < 0:
            ds = float(np.clip(-g_s / h_ss, -5.0, 5.0))
        else:
            ds = 1.0 if g_s > 0 else -1.0
        for _ in range(40):
            s_new = float(np.clip(s + ds, s_lo, s_hi))
            ll_new = ll_of(beta, s_new)
            if ll_new >= ll - 1e-12:
                s, ll = s_new, ll_new
                break
            ds *= 0.5
        trace.append({"iter": it, "loglik": ll, "dispersion": math.exp(s)})
        if abs(ll - ll_prev) < tol:
            converged = True
            break
    if not converged:
        raise ConvergenceError(f"count model did not converge in {max_iter} iterations", trace)

    beta, s, ll, polish = _joint_newton(y, X, offset, beta, s, ll, ll_of, s_lo, s_hi)
    a = math.exp(s)
    at_bound = s >= s_hi - 1e-6
    mu = np.exp(X @ beta + offset)
    g_b, g_s, h_bb, h_bs, h_ss = _score_hessian(y, X, mu, a)
    score = np.r_[g_b, 0.0 if at_bound else g_s]
    w = mu * a / (mu + a)
    cov = np.linalg.inv((X.T * w) @ X)
    disp_se = math.nan
    if not at_bound:
        H = np.block([[h_bb, h_bs[:, None]], [h_bs[None, :], np.array([[h_ss]])]])
        try:
            var_s = np.linalg.inv(-H)[-1, -1]
            disp_se = a * math.sqrt(var_s) if var_s > 0 else math.nan
        except np.linalg.LinAlgError:
            pass
    k = p + 1
    return NbFit(
        columns=columns,
        beta=beta,
        cov_beta=cov,
        dispersion=a,
        dispersion_se=disp_se,
        loglik=ll,
        bic=bic_value(ll, k, n),
        n_obs=n,
        n_params=k,
        at_upper_bound=bool(at_bound),
        iterations=it + polish,
        score_norm=float(np.linalg.norm(score)),
        trace=trace,
    )


def _joint_newton(y, X, offset, beta, s, ll, ll_of, s_lo, s_hi, max_steps=50):
    p = X.shape[1]
    for step_no in range(1, max_steps + 1):
        a = math.exp(s)
        mu = np.exp(X @ beta + offset)
        g_b, g_s, h_bb, h_bs, h_ss = _score_hessian(y, X, mu, a)
        at_bound = s >= s_hi - 1e-6 and g_s >= 0
        if at_bound:
            g = g_b
            H = h_bb
        else:
            g = np.r_[g_b, g_s]
            H = np.block([[h_bb, h_bs[:, None]], [h_bs[None, :], np.array([[h_ss]])]])
        if np.max(np.abs(g)) < 1e-9:
            return beta, s, ll, step_no - 1
        try:
            d = -scipy.linalg.solve(H, g, assume_a="sym")
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
            return beta, s, ll, step_no - 1
        if g @ d <= 0:
            return beta, s, ll, step_no - 1
        scale = 1.0
        improved = False
        slack = 1e-10 * max(1.0, abs(ll))
        for _ in range(30):
            b_new = beta + scale * d[:p]
            s_new = s if at_bound else float(np.clip(s + scale * d[p], s_lo, s_hi))
            ll_new = ll_of(b_new, s_new)
            if ll_new >= ll - 1e-12:
                improved = True
                break
            # near the optimum the gain is below the rounding of the sum;
            # accept a step that is flat within rounding and shrinks the score
            if ll_new >= ll - slack and _score_norm(y, X, offset, b_new, s_new, at_bound) < np.linalg.norm(g):
                improved = True
                break
            scale *= 0.5
        if not improved:
            return beta, s, ll, step_no - 1
        small = np.max(np.abs(scale * d)) < 1e-12
        beta, s, ll = b_new, s_new, ll_new
        if small:
            return beta, s, ll, step_no
    return beta, s, ll, max_steps


def _score_norm(y, X, offset, beta, s, at_bound) -> float:
    mu = np.exp(X @ beta + offset)
    g_b, g_s, *_ = _score_hessian(y, X, mu, math.exp(s))
    return float(np.linalg.norm(g_b if at_bound else np.r_[g_b, g_s]))


def _counts_of(cells):
    if len(cells) and isinstance(cells[0], PanelCell):
        return np.array([c.count for c in cells], dtype=float), np.array([c.exposure for c in cells], dtype=float)
    return np.asarray(cells, dtype=float), None


def fit_nb_glm(
    cells,
    design,
    offset=None,
    exposure=None,
    *,
    columns: Sequence[str] | None = None,
    frozen_cycle: CyclicalTrend | None = None,
    max_iter: int = 100,
    tol: float = 1e-10,
) -> NbFit:
    """Fit the count model to panel cells (or raw counts).

    ``design`` is a matrix or the ``(X, columns)`` pair from
    :func:`count_design`. The linear predictor is
    ``X b + offset + log(exposure)``; exposure defaults to the cells'
    population. A ``frozen_cycle`` is evaluated at each cell's ISO week and
    added to the offset; the design must then not carry cycle columns.
    """
    if isinstance(design, tuple):
        X, columns = design
    else:
        X = design
    y, cell_exposure = _counts_of(cells)
    if exposure is None:
        exposure = cell_exposure if cell_exposure is not None else np.ones(len(y))
    exposure = np.asarray(exposure, dtype=float)
    if np.any(exposure <= 0):
        raise ValueError("exposure must be positive")
    off = np.log(exposure)
    terms = ["log(exposure)"]
    if offset is not None:
        off = off + np.asarray(offset, dtype=float)
        terms.append("offset")
    if frozen_cycle is not None:
        if columns is not None and any(c in columns for c in CYCLE_COLUMNS):
            raise SpecError("design re-estimates cycle columns while a frozen cycle is supplied")
        if not isinstance(cells[0], PanelCell):
            raise SpecError("a frozen cycle needs panel cells to locate weeks")
        off = off + cycle_offset(cells, frozen_cycle)
        terms.append(f"frozen cycle ({frozen_cycle.beta_cos!r}, {frozen_cycle.beta_sin!r})")
    fit = fit_nb_arrays(y, X, off, columns, max_iter=max_iter, tol=tol)
    fit.offset_terms = terms
    fit.frozen_cycle = frozen_cycle
    return fit


def fit_cycle_then_freeze(
    base_cells: Sequence[PanelCell],
    base_design,
    *,
    columns: Sequence[str] | None = None,
    max_iter: int = 100,
    return_fit: bool = False,
):
    """Estimate the cycle in a regime-free base model and return it frozen."""
    if isinstance(base_design, tuple):
        X, columns = base_design
    else:
        X = base_design
    if columns is None or not all(c in columns for c in CYCLE_COLUMNS):
        raise SpecError(f"base design lacks cycle columns {CYCLE_COLUMNS}")
    fit = fit_nb_glm(base_cells, (X, list(columns)), max_iter=max_iter)
    trend = CyclicalTrend(fit.coef(CYCLE_COLUMNS[0]), fit.coef(CYCLE_COLUMNS[1]))
    return (trend, fit) if return_fit else trend


def drop_cycle_columns(X: np.ndarray, columns: Sequence[str]) -> tuple[np.ndarray, list[str]]:
    keep = [j for j, c in enumerate(columns) if c not in CYCLE_COLUMNS]
    return X[:, keep], [columns[j] for j in keep]


class NegativeBinomialRegressor(RegressorMixin, BaseEstimator):
    """NB2 regression with log link, exposure, and offsets; predicts mean counts.

    Attributes set by ``fit``: ``coef_``, ``intercept_``, ``bse_``,
    ``dispersion_``, ``loglik_``, ``bic_``, ``n_iter_``, ``fit_``.
    """

    def __init__(self, fit_intercept=True, max_iter=100, tol=1e-10):
        self.fit_intercept = fit_intercept
        self.max_iter = max_iter
        self.tol = tol

    def _offset(self, n, exposure, offset):
        off = np.zeros(n)
        if exposure is not None:
            exposure = np.asarray(exposure, dtype=float)
            if np.any(exposure <= 0):
                raise ValueError("exposure must be positive")
            off += np.log(exposure)
        if offset is not None:
            off += np.asarray(offset, dtype=float)
        return off

    def fit(self, X, y, exposure=None, offset=None):
        X, y = check_X_y(X, y, y_numeric=True)
        design = np.column_stack([np.ones(len(y)), X]) if self.fit_intercept else X
        cols = ([INTERCEPT] if self.fit_intercept else []) + [f"x{j}" for j in range(X.shape[1])]
        fit = fit_nb_arrays(y, design, self._offset(len(y), exposure, offset), cols,
                            max_iter=self.max_iter, tol=self.tol)
        self.fit_ = fit
        if self.fit_intercept:
            self.intercept_, self.coef_ = float(fit.beta[0]), fit.beta[1:]
            self.bse_ = fit.se[1:]
        else:
            self.intercept_, self.coef_, self.bse_ = 0.0, fit.beta, fit.se
        self.dispersion_ = fit.dispersion
        self.loglik_ = fit.loglik
        self.bic_ = fit.bic
        self.n_iter_ = fit.iterations
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X, exposure=None, offset=None):
        check_is_fitted(self, "coef_")
        X = check_array(X)
        return np.exp(X @ self.coef_ + self.intercept_ + self._offset(X.shape[0], exposure, offset))
