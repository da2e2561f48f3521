"""Three-level hierarchical hedonic price model fitted by maximum likelihood.

``log p = X b + u_state + u_district + e`` with independent normal
intercepts. The likelihood is profiled over ``b`` and the residual variance
and maximised over the two log variance ratios (state/residual,
district/residual). All heavy algebra happens in the space of the
``n_states + n_districts`` random-effect columns via the Woodbury identity,
so one evaluation costs O(q^3 + p q^2) after a single O(n p^2) pass.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg
import scipy.optimize
import scipy.sparse
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .design import INTERCEPT, DesignBundle, check_rank
from .errors import ConvergenceError

RATIO_FLOOR = 1e-12
RATIO_CEIL = 1e6
START_RATIO = 0.1
LOG2PI = math.log(2.0 * math.pi)


def bic_value(loglik: float, k: int, n_obs: int) -> float:
    return -2.0 * loglik + k * math.log(n_obs)


@dataclass(frozen=True)
class VarianceComponents:
    sigma2_state: float
    sigma2_district: float
    sigma2_resid: float

    def __post_init__(self):
        if min(self.sigma2_state, self.sigma2_district) < 0 or not self.sigma2_resid > 0:
            raise ValueError("variance components must be non-negative (residual positive)")

    @property
    def total(self) -> float:
        return self.sigma2_state + self.sigma2_district + self.sigma2_resid

    def as_tuple(self):
        return (self.sigma2_state, self.sigma2_district, self.sigma2_resid)


@dataclass
class Convergence:
    iterations: int
    grad_norm: float
    loglik_start: float
    trace: list = field(default_factory=list, repr=False)
    at_boundary: dict = field(default_factory=dict)
    fixed: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)


@dataclass
class HlmFit:
    columns: list
    beta: np.ndarray
    cov_beta: np.ndarray
    variance: VarianceComponents
    variance_se: tuple
    loglik: float
    bic: float
    n_obs: int
    n_params: int
    log_ratios: np.ndarray
    convergence: Convergence
    factor_levels: dict = field(default_factory=dict)
    references: dict = field(default_factory=dict)
    label_spans: dict = field(default_factory=dict)
    random_effects: dict = field(default_factory=dict, repr=False)
    metadata: dict = field(default_factory=dict)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov_beta))

    @property
    def coefficients(self) -> dict:
        se = self.se
        return {c: (float(b), float(s)) for c, b, s in zip(self.columns, self.beta, se)}

    def coef(self, name: str) -> float:
        return float(self.beta[self.columns.index(name)])


def bic(fit) -> float:
    """BIC of a fitted model: ``-2 loglik + k log n``."""
    return bic_value(fit.loglik, fit.n_params, fit.n_obs)


class ProfiledLikelihood:
    """Profiled Gaussian log-likelihood of the nested random-intercept model.

    Works on the OLS residual so that cross products stay well conditioned;
    the GLS coefficient is the OLS coefficient plus a correction.
    """

    def __init__(self, y, X, state_index, district_index, n_states=None, n_districts=None):
        y = np.asarray(y, dtype=float)
        X = np.asarray(X, dtype=float)
        self.n, self.p = X.shape
        s = np.asarray(state_index, dtype=np.int64)
        d = np.asarray(district_index, dtype=np.int64)
        self.n_states = int(n_states if n_states is not None else s.max() + 1)
        self.n_districts = int(n_districts if n_districts is not None else d.max() + 1)
        q_s, q_d = self.n_states, self.n_districts
        self.q = q_s + q_d
        self.block = np.r_[np.zeros(q_s, dtype=int), np.ones(q_d, dtype=int)]

        self.beta_ols, *_ = np.linalg.lstsq(X, y, rcond=None)
        e = y - X @ self.beta_ols
        self.resid_ols = e

        rows = np.r_[np.arange(self.n), np.arange(self.n)]
        Z = scipy.sparse.csr_matrix(
            (np.ones(2 * self.n), (rows, np.r_[s, q_s + d])), shape=(self.n, self.q)
        )
        Zt = Z.T.tocsr()

        def zt(v):
            return np.asarray(Zt @ v)

        self.ZtZ = np.asarray((Zt @ Z).toarray())
        self.ZtX = zt(X)
        self.Zte = zt(e)
        self.XtX = X.T @ X
        self.Xte = X.T @ e
        self.ete = float(e @ e)
        self._zt = zt
        self._s, self._d = s, d

    # -- core algebra ------------------------------------------------------

    def _lam(self, ratios):
        ratios = np.asarray(ratios, dtype=float)
        return np.sqrt(ratios[self.block])

    def _solve(self, ratios):
        lam = self._lam(ratios)
        M = np.eye(self.q) + lam[:, None] * self.ZtZ * lam[None, :]
        cho = scipy.linalg.cho_factor(M, lower=True)
        logdet = 2.0 * np.sum(np.log(np.diag(cho[0])))
        A = lam[:, None] * self.ZtX
        b = lam * self.Zte
        MA = scipy.linalg.cho_solve(cho, A)
        Mb = scipy.linalg.cho_solve(cho, b)
        XVX = self.XtX - A.T @ MA
        XVe = self.Xte - A.T @ Mb
        eVe = self.ete - b @ Mb
        XVX = 0.5 * (XVX + XVX.T)
        chX = scipy.linalg.cho_factor(XVX, lower=True)
        delta = scipy.linalg.cho_solve(chX, XVe)
        rVr = eVe - delta @ XVe
        return dict(lam=lam, cho=cho, logdet=logdet, XVX=XVX, chX=chX, delta=delta, rVr=rVr)

    def loglik(self, log_ratios) -> float:
        ratios = np.exp(np.asarray(log_ratios, dtype=float))
        st = self._solve(ratios)
        sigma2 = st["rVr"] / self.n
        return -0.5 * self.n * (LOG2PI + math.log(sigma2) + 1.0) - 0.5 * st["logdet"]

    def loglik_and_grad(self, log_ratios):
        """Profiled log-likelihood and its gradient w.r.t. the log ratios."""
        ratios = np.exp(np.asarray(log_ratios, dtype=float))
        st = self._solve(ratios)
        n = self.n
        sigma2 = st["rVr"] / n
        ll = -0.5 * n * (LOG2PI + math.log(sigma2) + 1.0) - 0.5 * st["logdet"]
        lam, cho = st["lam"], st["cho"]
        # Z' V0^{-1} r and Z' V0^{-1} Z
        ztr = self.Zte - self.ZtX @ st["delta"]
        w = ztr - self.ZtZ @ (lam * scipy.linalg.cho_solve(cho, lam * ztr))
        LZ = lam[:, None] * self.ZtZ
        ZVZ = self.ZtZ - LZ.T @ scipy.linalg.cho_solve(cho, LZ)
        grad = np.empty(2)
        for k in range(2):
            sel = self.block == k
            d2 = np.trace(ZVZ[np.ix_(sel, sel)]) - (w[sel] @ w[sel]) / sigma2
            grad[k] = -0.5 * ratios[k] * d2
        return ll, grad

    def estimates(self, log_ratios):
        """GLS coefficients, their covariance, residual variance, and BLUPs."""
        ratios = np.exp(np.asarray(log_ratios, dtype=float))
        st = self._solve(ratios)
        sigma2 = st["rVr"] / self.n
        beta = self.beta_ols + st["delta"]
        cov = sigma2 * scipy.linalg.cho_solve(st["chX"], np.eye(self.p))
        lam, cho = st["lam"], st["cho"]
        ztr = self.Zte - self.ZtX @ st["delta"]
        w = ztr - self.ZtZ @ (lam * scipy.linalg.cho_solve(cho, lam * ztr))
        blup = ratios[self.block] * w
        return beta, cov, sigma2, blup

    def full_loglik(self, beta, variances) -> float:
        """Unprofiled log-likelihood at given coefficients and (state, district, resid) variances."""
        s2s, s2d, s2e = variances
        ratios = np.array([s2s / s2e, s2d / s2e])
        lam = self._lam(ratios)
        M = np.eye(self.q) + lam[:, None] * self.ZtZ * lam[None, :]
        cho = scipy.linalg.cho_factor(M, lower=True)
        logdet = 2.0 * np.sum(np.log(np.diag(cho[0])))
        dlt = np.asarray(beta) - self.beta_ols
        # r = e - X dlt
        rr = self.ete - 2.0 * dlt @ self.Xte + dlt @ self.XtX @ dlt
        ztr = self.Zte - self.ZtX @ dlt
        b = lam * ztr
        rVr = rr - b @ scipy.linalg.cho_solve(cho, b)
        return -0.5 * (self.n * (LOG2PI + math.log(s2e)) + logdet + rVr / s2e)


def _fd_hessian(fun_grad, x, h=1e-5):
    k = len(x)
    H = np.empty((k, k))
    for j in range(k):
        e = np.zeros(k)
        e[j] = h
        H[:, j] = (fun_grad(x + e)[1] - fun_grad(x - e)[1]) / (2 * h)
    return 0.5 * (H + H.T)


def _variance_se(prof, beta, comps, at_floor):
    """Standard errors of the variance components from the observed information."""
    theta = np.array(comps, dtype=float)
    free = [j for j in range(3) if not at_floor[j]]
    if not free:
        return (math.nan,) * 3
    H = np.empty((len(free), len(free)))
    steps = {j: 1e-4 * max(theta[j], 1e-8) for j in free}

    def f(t):
        return prof.full_loglik(beta, t)

    for a, j in enumerate(free):
        for b, k in enumerate(free):
            if b < a:
                continue
            hj, hk = steps[j], steps[k]
            def at(dj, dk):
                t = theta.copy()
                t[j] += dj
                t[k] += dk
                return f(t)
            if j == k:
                H[a, a] = (at(hj, 0) - 2 * f(theta) + at(-hj, 0)) / hj**2
            else:
                H[a, b] = H[b, a] = (at(hj, hk) - at(hj, -hk) - at(-hj, hk) + at(-hj, -hk)) / (4 * hj * hk)
    out = [math.nan] * 3
    try:
        cov = np.linalg.inv(-H)
    except np.linalg.LinAlgError:
        return tuple(out)
    for a, j in enumerate(free):
        out[j] = math.sqrt(cov[a, a]) if cov[a, a] > 0 else math.nan
    return tuple(out)


def _degenerate_components(state_index, district_index, n_states, n_districts):
    fixed = {}
    if n_states < 2:
        fixed["state"] = "single state: state component fixed at boundary"
    pairs = set(zip(state_index.tolist(), district_index.tolist()))
    if n_districts == n_states and len(pairs) == n_states:
        fixed["district"] = "one district per state: district component fixed at boundary"
    elif n_districts >= len(state_index):
        fixed["district"] = "one observation per district: district component fixed at boundary"
    return fixed


def fit_arrays(
    y,
    X,
    state_index,
    district_index,
    columns: Sequence[str] | None = None,
    *,
    max_iter: int = 200,
    start_ratio: float = START_RATIO,
    ratio_floor: float = RATIO_FLOOR,
    step_tol: float = 1e-8,
    loglik_tol: float = 1e-10,
) -> HlmFit:
    """Maximum-likelihood fit on raw arrays; see :func:`fit_hlm`."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    columns = list(columns) if columns is not None else [f"x{j}" for j in range(X.shape[1])]
    check_rank(X, columns)
    s_idx = np.asarray(state_index, dtype=np.int64)
    d_idx = np.asarray(district_index, dtype=np.int64)
    n_states = int(s_idx.max()) + 1
    n_districts = int(d_idx.max()) + 1
    prof = ProfiledLikelihood(y, X, s_idx, d_idx, n_states, n_districts)

    lo = math.log(ratio_floor)
    hi = math.log(RATIO_CEIL)
    fixed = _degenerate_components(s_idx, d_idx, n_states, n_districts)
    free = [k for k, key in enumerate(("state", "district")) if key not in fixed]
    floor_point = np.full(2, lo)
    ll_start = prof.loglik(floor_point)

    trace = []
    theta = floor_point.copy()
    iters = 0
    if free:
        theta[free] = math.log(start_ratio)

        def negative(sub):
            t = theta.copy()
            t[free] = sub
            ll, g = prof.loglik_and_grad(t)
            trace.append({"log_ratios": t.tolist(), "loglik": ll})
            return -ll, -g[free]

        res = scipy.optimize.minimize(
            negative,
            theta[free],
            jac=True,
            method="L-BFGS-B",
            bounds=[(lo, hi)] * len(free),
            options={"maxiter": max_iter, "ftol": 1e-15, "gtol": 1e-10},
        )
        iters = int(res.nit)
        if res.status == 1:  # iteration cap
            raise ConvergenceError(f"price model did not converge in {max_iter} iterations", trace)
        theta[free] = res.x
        theta, polish_iters = _newton_polish(prof, theta, free, lo, hi, step_tol, loglik_tol, max_iter, trace)
        iters += polish_iters

    ll, grad = prof.loglik_and_grad(theta)
    if ll < ll_start - 1e-9:
        # never report below the zero-component start
        theta = floor_point
        ll, grad = prof.loglik_and_grad(theta)
    beta, cov, sigma2, blup = prof.estimates(theta)
    ratios = np.exp(theta)
    at_floor = (theta[0] <= lo + 1e-9, theta[1] <= lo + 1e-9, False)
    # components pinned at the floor are reported as exactly zero
    comps = VarianceComponents(0.0 if at_floor[0] else float(ratios[0] * sigma2),
                               0.0 if at_floor[1] else float(ratios[1] * sigma2), float(sigma2))
    var_se = _variance_se(prof, beta, comps.as_tuple(), at_floor)
    boundary = {"state": bool(at_floor[0]), "district": bool(at_floor[1])}
    warn = list(fixed.values())
    for w in warn:
        warnings.warn(w, RuntimeWarning, stacklevel=2)
    k = X.shape[1] + 1 + len(free)
    conv = Convergence(
        iterations=iters,
        grad_norm=float(np.linalg.norm(grad)),
        loglik_start=float(ll_start),
        trace=trace,
        at_boundary=boundary,
        fixed=fixed,
        warnings=warn,
    )
    return HlmFit(
        columns=columns,
        beta=beta,
        cov_beta=cov,
        variance=comps,
        variance_se=var_se,
        loglik=float(ll),
        bic=bic_value(ll, k, len(y)),
        n_obs=len(y),
        n_params=k,
        log_ratios=theta.copy(),
        convergence=conv,
        random_effects={"state": blup[:n_states], "district": blup[n_states:]},
    )


def _newton_polish(prof, theta, free, lo, hi, step_tol, loglik_tol, max_iter, trace):
    """Newton steps on interior coordinates until step and loglik change are tiny."""
    ll, grad = prof.loglik_and_grad(theta)
    for it in range(1, max_iter + 1):
        active = [k for k in free if not (theta[k] <= lo + 1e-9 and grad[k] <= 0)]
        if not active:
            return theta, it - 1
        H = _fd_hessian(lambda t: prof.loglik_and_grad(t), theta)[np.ix_(active, active)]
        g = grad[active]
        try:
            step = -np.linalg.solve(H, g)
            if g @ step <= 0:  # not an ascent direction
                step = g / max(1.0, np.abs(np.diag(H)).max())
        except np.linalg.LinAlgError:
            step = g
        t_new = theta.copy()
        for scale in (1.0, 0.5, 0.25, 0.125, 0.0625):
            t_new = theta.copy()
            t_new[active] = np.clip(theta[active] + scale * step, lo, hi)
            ll_new, g_new = prof.loglik_and_grad(t_new)
            if ll_new >= ll - 1e-12:
                break
        else:
            return theta, it
        dstep = float(np.max(np.abs(t_new - theta)))
        dll = abs(ll_new - ll)
        theta, ll, grad = t_new, ll_new, g_new
        trace.append({"log_ratios": theta.tolist(), "loglik": ll, "newton": True})
        if dstep < step_tol and dll < loglik_tol:
            return theta, it
    raise ConvergenceError("price model Newton refinement did not converge", trace)


def fit_hlm(bundle: DesignBundle, **options) -> HlmFit:
    """Fit fixed effects and the three nested variance components by ML.

    Degenerate groupings (one state, one district per state) fix the
    unidentified component at the boundary and record a warning in the fit.
    """
    fit = fit_arrays(
        bundle.y,
        bundle.X,
        bundle.state_index,
        bundle.district_index,
        bundle.columns,
        **options,
    )
    fit.factor_levels = dict(bundle.factor_levels)
    fit.references = dict(bundle.references)
    fit.label_spans = dict(bundle.label_spans)
    fit.random_effects = {
        "state": dict(zip(bundle.states, fit.random_effects["state"])),
        "district": dict(zip(bundle.districts, fit.random_effects["district"][: len(bundle.districts)])),
    }
    return fit


def profiled_loglik(bundle: DesignBundle, log_ratios) -> float:
    return ProfiledLikelihood(bundle.y, bundle.X, bundle.state_index, bundle.district_index).loglik(log_ratios)


class HierarchicalHedonicRegressor(RegressorMixin, BaseEstimator):
    """Linear model with nested state/district random intercepts, fitted by ML.

    ``groups`` passed to :meth:`fit` is an ``(n, 2)`` array of
    ``[state, district]`` labels; districts must nest in states.

    Attributes set by ``fit``: ``coef_``, ``intercept_``, ``bse_``,
    ``variance_components_``, ``loglik_``, ``bic_``, ``n_iter_``,
    ``fit_`` (the full :class:`HlmFit`).
    """

    def __init__(self, fit_intercept=True, max_iter=200, start_ratio=START_RATIO, ratio_floor=RATIO_FLOOR):
        self.fit_intercept = fit_intercept
        self.max_iter = max_iter
        self.start_ratio = start_ratio
        self.ratio_floor = ratio_floor

    def fit(self, X, y, groups):
        X, y = check_X_y(X, y, y_numeric=True)
        groups = np.asarray(groups, dtype=object)
        if groups.shape != (X.shape[0], 2):
            raise ValueError("groups must have shape (n_samples, 2): [state, district]")
        states, s_idx = np.unique(groups[:, 0].astype(str), return_inverse=True)
        districts, d_idx = np.unique(groups[:, 1].astype(str), return_inverse=True)
        parent = {}
        for s, d in zip(s_idx, d_idx):
            if parent.setdefault(d, s) != s:
                raise ValueError(f"district {districts[d]!r} appears in more than one state")
        design = np.column_stack([np.ones(len(y)), X]) if self.fit_intercept else X
        cols = ([INTERCEPT] if self.fit_intercept else []) + [f"x{j}" for j in range(X.shape[1])]
        fit = fit_arrays(
            y, design, s_idx, d_idx, cols,
            max_iter=self.max_iter, start_ratio=self.start_ratio, ratio_floor=self.ratio_floor,
        )
        self.fit_ = fit
        beta, se = fit.beta, fit.se
        if self.fit_intercept:
            self.intercept_, self.coef_ = float(beta[0]), beta[1:]
            self.intercept_se_, self.bse_ = float(se[0]), se[1:]
        else:
            self.intercept_, self.coef_, self.intercept_se_, self.bse_ = 0.0, beta, math.nan, se
        self.variance_components_ = fit.variance
        self.loglik_ = fit.loglik
        self.bic_ = fit.bic
        self.n_iter_ = fit.convergence.iterations
        self.states_ = states
        self.districts_ = districts
        self.state_effects_ = dict(zip(states, fit.random_effects["state"]))
        self.district_effects_ = dict(zip(districts, fit.random_effects["district"]))
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X, groups=None):
        """Fixed-effect prediction; with ``groups`` add the BLUPs of known groups."""
        check_is_fitted(self, "coef_")
        X = check_array(X)
        out = X @ self.coef_ + self.intercept_
        if groups is not None:
            groups = np.asarray(groups, dtype=object)
            out = out + np.array([self.state_effects_.get(str(s), 0.0) for s in groups[:, 0]])
            out = out + np.array([self.district_effects_.get(str(d), 0.0) for d in groups[:, 1]])
        return out
