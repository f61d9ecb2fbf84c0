"""Cox proportional hazards on counting-process data.

Risk sets follow the ``(tstart, tstop]`` convention, so delayed entry is
honoured automatically.  Ties use the Breslow approximation.
"""

import math
import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import ConvergenceWarning

from .data import DataError, encode
from .validation import check_dataset, check_fitted, check_terms


@dataclass(frozen=True)
class CoxSpec:
    covariates: tuple = ()
    outcome_tvc: str = None
    ties: str = "breslow"

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        if self.ties != "breslow":
            raise ValueError("only Breslow tie handling is supported")

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d.get("covariates", ())), d.get("outcome_tvc"), d.get("ties", "breslow"))

    def to_dict(self):
        return {"covariates": list(self.covariates), "outcome_tvc": self.outcome_tvc, "ties": self.ties}


class StepFunction:
    """Right-continuous step function that is 0 before its first jump."""

    def __init__(self, x, y, increments=None):
        self.x = np.asarray(x, dtype=float)
        self.y = np.asarray(y, dtype=float)
        self._increments = None if increments is None else np.asarray(increments, dtype=float)

    def __call__(self, t):
        idx = np.searchsorted(self.x, np.asarray(t, dtype=float), side="right") - 1
        vals = np.where(idx >= 0, self.y[np.clip(idx, 0, None)] if self.y.size else 0.0, 0.0)
        return vals if np.ndim(t) else float(vals)

    @property
    def jumps(self):
        if self._increments is not None:
            return self._increments
        return np.diff(np.concatenate([[0.0], self.y]))


def lvcf_column(ds, column):
    """Carry a sparsely observed column forward within each subject."""
    values = ds.frame[column].to_numpy(dtype=float).copy()
    bounds = ds.subject_bounds()
    for a, b in bounds:
        last = math.nan
        for r in range(a, b):
            if math.isnan(values[r]):
                values[r] = last
            else:
                last = values[r]
    if np.isnan(values).any():
        r = int(np.flatnonzero(np.isnan(values))[0])
        raise DataError(f"{column!r} is not observed at the first row of subject {ds.frame['id'].iloc[r]!r}")
    return values


class RiskSets:
    """Distinct event times with their risk-set memberships.

    ``entry_row[e]`` is the data row of the ``e``-th (risk set, row) pair and
    ``entry_block[e]`` its event-time index; pairs are ordered by block.
    """

    def __init__(self, tstart, tstop, event):
        tstart = np.asarray(tstart, dtype=float)
        tstop = np.asarray(tstop, dtype=float)
        event = np.asarray(event, dtype=int)
        self.times = np.unique(tstop[event == 1])
        rows, blocks = [], []
        self.event_rows = []
        for k, t in enumerate(self.times):
            at_risk = np.flatnonzero((tstart < t) & (t <= tstop))
            rows.append(at_risk)
            blocks.append(np.full(at_risk.size, k))
            self.event_rows.append(np.flatnonzero((event == 1) & (tstop == t)))
        self.entry_row = np.concatenate(rows) if rows else np.empty(0, dtype=int)
        self.entry_block = np.concatenate(blocks) if blocks else np.empty(0, dtype=int)
        self.sizes = np.array([r.size for r in rows], dtype=int)
        self.deaths = np.array([r.size for r in self.event_rows], dtype=float)
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)[:-1]]).astype(int)

    def event_sums(self, X_rows):
        out = np.zeros((len(self.event_rows), X_rows.shape[1]))
        for k, r in enumerate(self.event_rows):
            out[k] = X_rows[r].sum(axis=0)
        return out


def partial_loglik(rs, X_entries, xsum, gamma, order=2):
    """Breslow partial log-likelihood with score and information."""
    eta = X_entries @ gamma
    top = np.maximum.reduceat(eta, rs.offsets) if eta.size else np.empty(0)
    w = np.exp(eta - top[rs.entry_block])
    s0 = np.add.reduceat(w, rs.offsets)
    ll = math.fsum((xsum @ gamma - rs.deaths * (np.log(s0) + top)).tolist())
    if order == 0:
        return ll
    s1 = np.add.reduceat(w[:, None] * X_entries, rs.offsets, axis=0)
    mean = s1 / s0[:, None]
    score = (xsum - rs.deaths[:, None] * mean).sum(axis=0)
    if order == 1:
        return ll, score
    s2 = np.add.reduceat(w[:, None, None] * X_entries[:, :, None] * X_entries[:, None, :], rs.offsets, axis=0)
    info = (rs.deaths[:, None, None] * (s2 / s0[:, None, None] - mean[:, :, None] * mean[:, None, :])).sum(axis=0)
    return ll, score, info


def newton_cox(rs, X_entries, xsum, max_iter=50, tol=1e-9):
    """Newton-Raphson with step halving; returns ``(gamma, ll, score, info, n_iter, converged)``."""
    p = X_entries.shape[1]
    gamma = np.zeros(p)
    ll, score, info = partial_loglik(rs, X_entries, xsum, gamma)
    converged = p == 0
    it = 0
    for it in range(1, max_iter + 1):
        if p == 0:
            break
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(info, score, rcond=None)[0]
        t = 1.0
        for _ in range(30):
            cand = gamma + t * step
            ll_new = partial_loglik(rs, X_entries, xsum, cand, order=0)
            if np.isfinite(ll_new) and ll_new >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        gamma = cand
        ll_old = ll
        ll, score, info = partial_loglik(rs, X_entries, xsum, gamma)
        small_step = np.max(np.abs(t * step)) < 1e-10 * (1 + np.max(np.abs(gamma)))
        if np.max(np.abs(score)) < 1e-10 or (abs(ll - ll_old) <= tol * abs(ll) and small_step):
            converged = True
            break
    return gamma, ll, score, info, it, converged


class CoxPH(BaseEstimator):
    """Cox model with Breslow ties on start-stop data.

    Parameters
    ----------
    covariates : sequence of str
        Time-constant or time-varying (LVCF) covariates.
    outcome_tvc : str, optional
        Longitudinal outcome entered as a last-value-carried-forward
        covariate; this gives the classical time-varying covariate model.
    max_iter : int
    tol : float
        Relative partial log-likelihood change at convergence.
    """

    def __init__(self, covariates=(), outcome_tvc=None, max_iter=50, tol=1e-9):
        self.covariates = covariates
        self.outcome_tvc = outcome_tvc
        self.max_iter = max_iter
        self.tol = tol

    @property
    def spec(self):
        return CoxSpec(tuple(self.covariates), self.outcome_tvc)

    def _design(self, ds):
        X = ds.design(self.covariates)
        names = ds.schema.expand(self.covariates)
        if self.outcome_tvc is not None:
            X = np.hstack([X, lvcf_column(ds, self.outcome_tvc)[:, None]])
            names = names + [self.outcome_tvc]
        return X, names

    def fit(self, ds, entry_covariates=None, names=None):
        """Fit to ``ds``.

        ``entry_covariates``, when given, is a callable ``(risk_sets, X_rows)
        -> X_entries`` that replaces the covariates of every (event time,
        at-risk row) pair; it is how smooth time-varying covariates enter.
        """
        check_dataset(ds, min_events=1)
        check_terms(ds.schema, self.covariates)
        f = ds.frame
        X_rows, default_names = self._design(ds)
        rs = RiskSets(f["tstart"].to_numpy(), f["tstop"].to_numpy(), f["event"].to_numpy())
        if entry_covariates is None:
            X_entries = X_rows[rs.entry_row]
            xsum = rs.event_sums(X_rows)
        else:
            X_entries, xsum = entry_covariates(rs, X_rows)
        gamma, ll, score, info, it, converged = newton_cox(rs, X_entries, xsum, self.max_iter, self.tol)
        self.feature_names_ = names or default_names
        self.coef_ = gamma
        self.loglik_ = ll
        self.score_ = score
        self.information_ = info
        self.n_iter_ = it
        self.converged_ = converged
        self.risk_sets_ = rs
        self._X_entries = X_entries
        self._xsum = xsum
        self.monotone_ = [n for n, g in zip(self.feature_names_, gamma) if abs(g) > 20]
        if self.monotone_:
            warnings.warn(f"monotone likelihood: coefficients diverge for {self.monotone_}", ConvergenceWarning)
        try:
            cov = np.linalg.inv(info) if gamma.size else np.zeros((0, 0))
            self.se_ = np.sqrt(np.diag(cov))
        except np.linalg.LinAlgError:
            self.se_ = np.full(gamma.size, np.nan)
        self.baseline_ = self._breslow(rs, X_entries, gamma)
        self.schema_ = ds.schema
        return self

    @staticmethod
    def _breslow(rs, X_entries, gamma):
        w = np.exp(X_entries @ gamma)
        s0 = np.add.reduceat(w, rs.offsets) if w.size else np.empty(0)
        inc = rs.deaths / s0
        return StepFunction(rs.times, np.cumsum(inc), inc)

    def partial_loglik(self, gamma, order=0):
        check_fitted(self)
        return partial_loglik(self.risk_sets_, self._X_entries, self._xsum, np.asarray(gamma, dtype=float), order)

    def linear_predictor(self, history, t):
        """``x(t)' gamma`` with the covariates carried forward from ``history``."""
        rows = history.rows
        starts = rows["tstart"].to_numpy(dtype=float)
        idx = np.clip(np.searchsorted(starts, np.atleast_1d(t), side="right") - 1, 0, len(rows) - 1)
        X = encode(rows.iloc[idx], self.schema_, self.covariates)
        if self.outcome_tvc is not None:
            y = rows[self.outcome_tvc].to_numpy(dtype=float)
            obs = ~np.isnan(y)
            ostarts = starts[obs]
            j = np.clip(np.searchsorted(ostarts, np.atleast_1d(t), side="right") - 1, 0, None)
            X = np.hstack([X, y[obs][j][:, None]])
        return X @ self.coef_

    def predict_conditional_survival(self, history, times, s=None):
        """``P(T > u | T > s)`` under the Breslow baseline, for ``u`` in ``times``."""
        check_fitted(self)
        s = history.exit if s is None else s
        times = np.atleast_1d(np.asarray(times, dtype=float))
        jt = self.baseline_.x
        dH = self.baseline_.jumps
        sel = jt > s
        jt, dH = jt[sel], dH[sel]
        risk = np.exp(self.linear_predictor(history, jt)) * dH if jt.size else np.empty(0)
        cum = np.concatenate([[0.0], np.cumsum(risk)])
        idx = np.searchsorted(jt, times, side="right")
        return np.exp(-cum[idx])

    def to_dict(self):
        check_fitted(self)
        return {
            "model": "cox",
            "spec": self.spec.to_dict(),
            "parameters": [
                {"name": n, "estimate": float(g), "se": float(s)}
                for n, g, s in zip(self.feature_names_, self.coef_, self.se_)
            ],
            "loglik": float(self.loglik_),
            "n_iter": int(self.n_iter_),
            "converged": bool(self.converged_),
            "monotone": list(self.monotone_),
        }


def fit_cox(ds, spec):
    return CoxPH(spec.covariates, spec.outcome_tvc).fit(ds)


def fit_tvc_model(ds, spec):
    """Cox model with the observed longitudinal outcome as an LVCF covariate."""
    if spec.outcome_tvc is None:
        raise ValueError("spec.outcome_tvc must name the longitudinal outcome")
    return fit_cox(ds, spec)


def breslow_baseline(fit, ds=None):
    """Breslow cumulative baseline hazard as a step function.

    With ``ds`` given the risk sets are rebuilt from it using the fitted
    coefficients; otherwise those stored at fit time are used.
    """
    check_fitted(fit)
    if ds is None:
        return fit.baseline_
    X_rows, _ = fit._design(ds)
    f = ds.frame
    rs = RiskSets(f["tstart"].to_numpy(), f["tstop"].to_numpy(), f["event"].to_numpy())
    return CoxPH._breslow(rs, X_rows[rs.entry_row], fit.coef_)
