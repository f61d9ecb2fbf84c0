"""Linear mixed model with random intercept and slope, fitted by ML.

The model for subject ``i`` at time ``t`` is::

    y_i(t) = x_i(t)' beta + z(t)' b_i + eps,   b_i ~ N(0, Q),  eps ~ N(0, sigma2)

with ``z(t) = (1, t)`` (or ``(1,)`` for a random intercept only) and
``x_i(t)`` holding polynomial time terms plus covariates carried forward from
the subject's start-stop rows.
"""

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import optimize
from sklearn.base import BaseEstimator
from sklearn.exceptions import ConvergenceWarning

from ._numerics import chol_from_params, chol_param_grad, fsum_rows, n_chol, params_from_chol
from .data import DataError, encode
from .validation import check_dataset, check_fitted, check_terms

RANDOM_DIMS = {"none": 0, "intercept": 1, "slope": 2}
TIME_NAMES = ("(Intercept)", "time", "time^2", "time^3")


@dataclass(frozen=True)
class LmmSpec:
    """Longitudinal submodel: outcome, covariates, time polynomial, random part."""

    outcome: str
    covariates: tuple = ()
    time_degree: int = 2
    random: str = "slope"

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        if self.random not in RANDOM_DIMS:
            raise ValueError(f"random must be one of {sorted(RANDOM_DIMS)}")
        if not 0 <= self.time_degree <= 3:
            raise ValueError("time_degree must be between 0 and 3")
        if self.random == "slope" and self.time_degree < 1:
            raise ValueError("a random slope needs a fixed time term")

    @property
    def q(self):
        return RANDOM_DIMS[self.random]

    @classmethod
    def from_dict(cls, d):
        return cls(d["outcome"], tuple(d.get("covariates", ())), int(d.get("time_degree", 2)), d.get("random", "slope"))

    def to_dict(self):
        return {"outcome": self.outcome, "covariates": list(self.covariates),
                "time_degree": self.time_degree, "random": self.random}


# -- design helpers shared with the joint model ------------------------------

def time_powers(t, degree, kind="value"):
    """Polynomial time block; ``kind`` is value, slope or integral (from 0)."""
    t = np.asarray(t, dtype=float)
    k = np.arange(degree + 1)
    if kind == "value":
        return t[..., None] ** k
    if kind == "slope":
        out = np.zeros(t.shape + (degree + 1,))
        for j in range(1, degree + 1):
            out[..., j] = j * t ** (j - 1)
        return out
    if kind == "integral":
        return t[..., None] ** (k + 1) / (k + 1)
    raise ValueError(kind)


def random_design(t, q, kind="value"):
    if q == 0:
        return np.zeros(np.shape(t) + (0,))
    return time_powers(t, q - 1, kind)


def fixed_names(spec, schema):
    return list(TIME_NAMES[: spec.time_degree + 1]) + schema.expand(spec.covariates)


def long_design(rows_frame, schema, spec, t=None):
    """Fixed-effect rows at times ``t`` (defaults to each row's ``tstart``)."""
    if t is None:
        t = rows_frame["tstart"].to_numpy(dtype=float)
    cov = encode(rows_frame, schema, spec.covariates)
    return np.hstack([time_powers(t, spec.time_degree), cov])


def collinear_columns(X, names, tol=1e-10):
    """Names of columns that are linear combinations of earlier ones."""
    if X.shape[1] == 0:
        return []
    scale = np.linalg.norm(X, axis=0)
    scale[scale == 0] = 1.0
    R = np.linalg.qr(X / scale, mode="r")
    diag = np.abs(np.diag(R))
    return [n for n, d in zip(names, diag) if d < tol * max(1.0, diag.max())]


class _LmmData:
    """Outcome, designs and size-grouped index blocks for batched algebra."""

    def __init__(self, ds, spec):
        frame = ds.frame
        y = frame[spec.outcome].to_numpy(dtype=float)
        keep = ~np.isnan(y)
        sid_all = ds.subject_codes()
        self.n_subjects = ds.n_subjects
        self.y = y[keep]
        self.X = long_design(frame, ds.schema, spec)[keep]
        self.Z = random_design(frame["tstart"].to_numpy(dtype=float), spec.q)[keep]
        self.sid = sid_all[keep]
        self.q = spec.q
        counts = np.bincount(self.sid, minlength=self.n_subjects)
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        self.counts = counts
        self.groups = []
        for m in np.unique(counts[counts > 0]):
            subj = np.flatnonzero(counts == m)
            idx = starts[subj][:, None] + np.arange(m)[None, :]
            self.groups.append((subj, idx))


def _variance_blocks(data, sigma2, Q):
    for subj, idx in data.groups:
        Zg = data.Z[idx]
        m = idx.shape[1]
        V = Zg @ Q @ np.swapaxes(Zg, 1, 2) + sigma2 * np.eye(m)
        yield subj, idx, Zg, V


def marginal_loglik(data, beta, sigma2, Q, with_grad=False):
    """Marginal Gaussian log-likelihood (random effects integrated out)."""
    per_subject = np.zeros(data.n_subjects)
    g_beta = np.zeros_like(beta)
    g_sigma2 = 0.0
    G_Q = np.zeros_like(Q)
    for subj, idx, Zg, V in _variance_blocks(data, sigma2, Q):
        m = idx.shape[1]
        r = data.y[idx] - data.X[idx] @ beta
        Vinv = np.linalg.inv(V)
        u = np.einsum("gij,gj->gi", Vinv, r)
        _, logdet = np.linalg.slogdet(V)
        per_subject[subj] = -0.5 * (m * math.log(2 * math.pi) + logdet + np.einsum("gi,gi->g", r, u))
        if with_grad:
            g_beta += np.einsum("gip,gi->p", data.X[idx], u)
            g_sigma2 += 0.5 * (np.einsum("gi,gi->", u, u) - np.einsum("gii->", Vinv))
            if data.q:
                v = np.einsum("giq,gi->gq", Zg, u)
                W = np.einsum("giq,gij,gjr->gqr", Zg, Vinv, Zg)
                G_Q += 0.5 * (np.einsum("gq,gr->qr", v, v) - W.sum(axis=0))
    ll = fsum_rows(per_subject)
    if not with_grad:
        return ll
    return ll, g_beta, g_sigma2, G_Q


def gls_beta(data, sigma2, Q):
    """GLS estimate of beta and the information matrix ``X' V^-1 X``."""
    p = data.X.shape[1]
    XtVX = np.zeros((p, p))
    XtVy = np.zeros(p)
    for subj, idx, Zg, V in _variance_blocks(data, sigma2, Q):
        Xg = data.X[idx]
        VinvX = np.linalg.solve(V, Xg)
        XtVX += np.einsum("gip,giq->pq", Xg, VinvX)
        XtVy += np.einsum("gip,gi->p", VinvX, data.y[idx])
    return np.linalg.solve(XtVX, XtVy), XtVX


def empirical_bayes(Z, resid, sigma2, Q):
    """Posterior mean/covariance of b for one subject given residuals."""
    q = Q.shape[0]
    if q == 0:
        return np.zeros(0), np.zeros((0, 0))
    if Z.shape[0] == 0:
        return np.zeros(q), Q.copy()
    V = Z @ Q @ Z.T + sigma2 * np.eye(Z.shape[0])
    QZt = Q @ Z.T
    b = QZt @ np.linalg.solve(V, resid)
    cov = Q - QZt @ np.linalg.solve(V, QZt.T)
    return b, 0.5 * (cov + cov.T)


def unpack_variance(theta, q):
    sigma2 = math.exp(2.0 * theta[0])
    L = chol_from_params(theta[1:], q)
    return sigma2, L @ L.T, L


class LinearMixedModel(BaseEstimator):
    """Linear mixed model with (intercept, slope) random effects, ML fit.

    Parameters
    ----------
    outcome : str
        Longitudinal outcome column (kind ``outcome``).
    covariates : sequence of str
        Fixed-effect covariates, time-constant or time-varying.
    time_degree : int
        Degree of the fixed time polynomial (0..3).
    random : {'slope', 'intercept', 'none'}
        Random-effects structure.
    max_iter : int
        Quasi-Newton iteration cap.
    tol, gtol : float
        Relative objective change and gradient infinity-norm at convergence.

    Attributes
    ----------
    coef_ : ndarray
        Fixed effects, ordered as ``feature_names_``.
    sigma2_ : float
    Q_ : ndarray of shape (q, q)
    loglik_ : float
    random_effects_ : ndarray of shape (n_subjects, q)
        Empirical Bayes predictions, in ``ids_`` order.
    """

    def __init__(self, outcome="y", covariates=(), time_degree=2, random="slope",
                 max_iter=500, tol=1e-9, gtol=1e-6):
        self.outcome = outcome
        self.covariates = covariates
        self.time_degree = time_degree
        self.random = random
        self.max_iter = max_iter
        self.tol = tol
        self.gtol = gtol

    @property
    def spec(self):
        return LmmSpec(self.outcome, tuple(self.covariates), self.time_degree, self.random)

    def fit(self, ds):
        check_dataset(ds)
        spec = self.spec
        check_terms(ds.schema, [spec.outcome], kinds=("outcome", "numeric"))
        check_terms(ds.schema, spec.covariates)
        data = _LmmData(ds, spec)
        names = fixed_names(spec, ds.schema)
        if data.y.size == 0:
            raise DataError("no longitudinal measurements")
        bad = collinear_columns(data.X, names)
        if bad or data.X.shape[0] < data.X.shape[1]:
            raise DataError(f"rank-deficient fixed-effect design; collinear columns: {bad}")
        self.feature_names_ = names
        self.ids_ = ds.ids
        self.schema_ = ds.schema
        self._data = data
        q = spec.q
        if q == 0:
            self._fit_ols(data)
        else:
            self._fit_ml(data, q)
        self._store_random_effects(data)
        return self

    def _fit_ols(self, data):
        beta, *_ = np.linalg.lstsq(data.X, data.y, rcond=None)
        resid = data.y - data.X @ beta
        rss = float(resid @ resid)
        n = data.y.size
        self.coef_ = beta
        self.sigma2_ = rss / n
        self.Q_ = np.zeros((0, 0))
        self.n_iter_ = 0
        self.converged_ = True
        self.trace_ = []
        if self.sigma2_ > 0:
            self.loglik_ = -0.5 * n * (math.log(2 * math.pi * self.sigma2_) + 1.0)
            cov = self.sigma2_ * np.linalg.inv(data.X.T @ data.X)
            self.se_ = np.sqrt(np.diag(cov))
        else:
            self.loglik_ = math.inf
            self.se_ = np.zeros_like(beta)
        self.theta_var_ = np.array([0.5 * math.log(self.sigma2_) if self.sigma2_ > 0 else -math.inf])

    def _fit_ml(self, data, q):
        beta0, *_ = np.linalg.lstsq(data.X, data.y, rcond=None)
        resid = data.y - data.X @ beta0
        v = max(float(resid @ resid) / resid.size, 1e-8)
        L0 = np.diag(np.full(q, math.sqrt(0.5 * v)))
        theta0 = np.concatenate([[0.5 * math.log(0.5 * v)], params_from_chol(L0)])
        trace = []

        def objective(theta):
            sigma2, Q, L = unpack_variance(theta, q)
            beta, _ = gls_beta(data, sigma2, Q)
            ll, g_beta, g_s2, G_Q = marginal_loglik(data, beta, sigma2, Q, with_grad=True)
            grad = np.concatenate([[2.0 * sigma2 * g_s2], chol_param_grad(G_Q, L)])
            return -ll, -grad

        def callback(xk):
            trace.append(objective(xk)[0])

        res = optimize.minimize(objective, theta0, jac=True, method="BFGS", callback=callback,
                                options={"gtol": self.gtol, "maxiter": self.max_iter})
        theta = res.x
        # polish: BFGS stops on the gradient alone; also demand a stalled objective
        f_old = res.fun
        for _ in range(5):
            res2 = optimize.minimize(objective, theta, jac=True, method="BFGS", callback=callback,
                                     options={"gtol": self.gtol * 1e-2, "maxiter": 50})
            theta = res2.x
            if abs(res2.fun - f_old) <= self.tol * max(1.0, abs(f_old)):
                break
            f_old = res2.fun
        f, g = objective(theta)
        sigma2, Q, _ = unpack_variance(theta, q)
        beta, info = gls_beta(data, sigma2, Q)
        self.coef_ = beta
        self.sigma2_ = sigma2
        self.Q_ = Q
        self.theta_var_ = theta
        self.loglik_ = -f
        self.se_ = np.sqrt(np.diag(np.linalg.inv(info)))
        self.trace_ = trace
        self.n_iter_ = len(trace)
        self.gradient_norm_ = float(np.max(np.abs(g)))
        self.converged_ = bool(self.gradient_norm_ < max(self.gtol, 1e-4) or res.success)
        if not self.converged_:
            warnings.warn(f"LMM did not converge (|grad|={self.gradient_norm_:.2e})", ConvergenceWarning)

    def _store_random_effects(self, data):
        q = data.q
        n = data.n_subjects
        b = np.zeros((n, q))
        cov = np.tile(self.Q_, (n, 1, 1)) if q else np.zeros((n, 0, 0))
        resid = data.y - data.X @ self.coef_
        for i in range(n):
            sel = data.sid == i
            b[i], cov[i] = empirical_bayes(data.Z[sel], resid[sel], self.sigma2_, self.Q_)
        self.random_effects_ = b
        self.random_effects_cov_ = cov

    # -- likelihood access for diagnostics --------------------------------
    def params_vector(self):
        """``(beta, log sigma, packed Cholesky of Q)`` at the fitted point."""
        check_fitted(self)
        q = self.spec.q
        return np.concatenate([self.coef_, self.theta_var_[: 1 + n_chol(q)]])

    def loglik(self, theta):
        ll, _ = self._loglik_grad(theta)
        return ll

    def score(self, theta):
        _, g = self._loglik_grad(theta)
        return g

    def _loglik_grad(self, theta):
        check_fitted(self)
        data = self._data
        p = data.X.shape[1]
        q = data.q
        beta = np.asarray(theta[:p], dtype=float)
        sigma2, Q, L = unpack_variance(theta[p:], q)
        ll, g_beta, g_s2, G_Q = marginal_loglik(data, beta, sigma2, Q, with_grad=True)
        grad = np.concatenate([g_beta, [2.0 * sigma2 * g_s2], chol_param_grad(G_Q, L) if q else []])
        return ll, grad

    # -- prediction -----------------------------------------------------------
    def random_effects_for(self, history):
        """Empirical Bayes random effects computed from ``history``."""
        check_fitted(self)
        spec = self.spec
        rows = history.rows
        y = rows[spec.outcome].to_numpy(dtype=float)
        keep = ~np.isnan(y)
        X = long_design(rows, self.schema_, spec)[keep]
        Z = random_design(rows["tstart"].to_numpy(dtype=float), spec.q)[keep]
        return empirical_bayes(Z, y[keep] - X @ self.coef_, self.sigma2_, self.Q_)

    def predict(self, history, t):
        """Subject-specific trajectory at times ``t``."""
        return trajectory_value(self, history, t)

    def to_dict(self):
        check_fitted(self)
        q = self.spec.q
        return {
            "model": "lmm",
            "spec": self.spec.to_dict(),
            "parameters": [
                {"name": n, "estimate": float(b), "se": float(s)}
                for n, b, s in zip(self.feature_names_, self.coef_, self.se_)
            ],
            "sigma2": float(self.sigma2_),
            "Q": self.Q_.tolist() if q else [],
            "loglik": float(self.loglik_),
            "n_iter": int(self.n_iter_),
            "converged": bool(self.converged_),
        }


def _rows_at(history, t):
    rows = history.rows
    starts = rows["tstart"].to_numpy(dtype=float)
    idx = np.searchsorted(starts, np.asarray(t, dtype=float), side="right") - 1
    return rows.iloc[np.clip(idx, 0, len(rows) - 1)]


def trajectory_value(fit, history, t, b=None):
    """``x(t)' beta + z(t)' b_i`` with covariates carried forward."""
    check_fitted(fit)
    scalar = np.ndim(t) == 0
    t = np.atleast_1d(np.asarray(t, dtype=float))
    spec = fit.spec
    if b is None:
        b, _ = fit.random_effects_for(history)
    X = long_design(_rows_at(history, t), fit.schema_, spec, t)
    out = X @ fit.coef_ + random_design(t, spec.q) @ b
    return float(out[0]) if scalar else out


def trajectory_slope(fit, history, t, b=None):
    """Time derivative of the trajectory; step-function covariates add nothing."""
    check_fitted(fit)
    scalar = np.ndim(t) == 0
    t = np.atleast_1d(np.asarray(t, dtype=float))
    spec = fit.spec
    if b is None:
        b, _ = fit.random_effects_for(history)
    n_cov = len(fit.coef_) - spec.time_degree - 1
    X = np.hstack([time_powers(t, spec.time_degree, "slope"), np.zeros((t.size, n_cov))])
    out = X @ fit.coef_ + random_design(t, spec.q, "slope") @ b
    return float(out[0]) if scalar else out


def fit_lmm(ds, spec):
    """Fit the linear mixed model described by ``spec`` to ``ds``."""
    model = LinearMixedModel(spec.outcome, spec.covariates, spec.time_degree, spec.random)
    return model.fit(ds)
