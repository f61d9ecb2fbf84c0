"""Two-stage estimation: a mixed model first, its fitted trajectories then
enter a Cox model as a smooth time-varying covariate.

The second stage treats the fitted trajectories as known, so its standard
errors ignore first-stage uncertainty and tend to be too small.
"""

import numpy as np
from sklearn.base import BaseEstimator

from .lmm import LinearMixedModel, long_design, random_design, trajectory_value
from .survcox import CoxPH
from .validation import check_dataset, check_fitted

TRAJECTORY = "trajectory"


class TwoStageModel(BaseEstimator):
    """Mixed model for the outcome, then Cox with the fitted trajectory as covariate.

    Parameters
    ----------
    outcome : str
    long_covariates : sequence of str
        Covariates of the mixed model.
    surv_covariates : sequence of str
        Covariates of the Cox model besides the trajectory.
    time_degree : int
    random : {'slope', 'intercept', 'none'}
    """

    def __init__(self, outcome="y", long_covariates=(), surv_covariates=(), time_degree=2, random="slope"):
        self.outcome = outcome
        self.long_covariates = long_covariates
        self.surv_covariates = surv_covariates
        self.time_degree = time_degree
        self.random = random

    def fit(self, ds):
        check_dataset(ds, min_events=1)
        stage1 = LinearMixedModel(self.outcome, self.long_covariates, self.time_degree, self.random).fit(ds)
        spec = stage1.spec
        frame = ds.frame
        codes = ds.subject_codes()
        b = stage1.random_effects_

        def m_hat(rows, t):
            X = long_design(frame.iloc[rows], ds.schema, spec, t)
            return X @ stage1.coef_ + np.einsum("jq,jq->j", random_design(t, spec.q), b[codes[rows]])

        def entry_covariates(rs, X_rows):
            t_entry = rs.times[rs.entry_block]
            X_entries = np.hstack([X_rows[rs.entry_row], m_hat(rs.entry_row, t_entry)[:, None]])
            xsum = np.zeros((rs.times.size, X_rows.shape[1] + 1))
            for k, rows in enumerate(rs.event_rows):
                t = np.full(rows.size, rs.times[k])
                xsum[k] = np.hstack([X_rows[rows], m_hat(rows, t)[:, None]]).sum(axis=0)
            return X_entries, xsum

        names = ds.schema.expand(self.surv_covariates) + [TRAJECTORY]
        stage2 = CoxPH(self.surv_covariates).fit(ds, entry_covariates=entry_covariates, names=names)
        self.stage1_ = stage1
        self.stage2_ = stage2
        self.coef_ = stage2.coef_
        self.se_ = stage2.se_
        self.feature_names_ = names
        self.se_understated_ = True
        self.schema_ = ds.schema
        return self

    @property
    def alpha_(self):
        check_fitted(self)
        return float(self.coef_[-1])

    @property
    def alpha_se_(self):
        check_fitted(self)
        return float(self.se_[-1])

    def predict_conditional_survival(self, history, times, s=None):
        """``P(T > u | T > s)`` with the trajectory extrapolated from ``history``."""
        check_fitted(self)
        s = history.exit if s is None else s
        times = np.atleast_1d(np.asarray(times, dtype=float))
        st2 = self.stage2_
        jt = st2.baseline_.x
        dH = st2.baseline_.jumps
        sel = jt > s
        jt, dH = jt[sel], dH[sel]
        if jt.size:
            b, _ = self.stage1_.random_effects_for(history)
            m = trajectory_value(self.stage1_, history, jt, b)
            lin = _cox_covariates(st2, history, jt) @ st2.coef_[:-1] + st2.coef_[-1] * m
            risk = np.exp(lin) * dH
        else:
            risk = np.empty(0)
        cum = np.concatenate([[0.0], np.cumsum(risk)])
        return np.exp(-cum[np.searchsorted(jt, times, side="right")])

    def to_dict(self):
        check_fitted(self)
        return {
            "model": "twostage",
            "stage1": self.stage1_.to_dict(),
            "stage2": self.stage2_.to_dict(),
            "se_understated": bool(self.se_understated_),
        }


def _cox_covariates(fit, history, t):
    from .data import encode

    rows = history.rows
    starts = rows["tstart"].to_numpy(dtype=float)
    idx = np.clip(np.searchsorted(starts, t, side="right") - 1, 0, len(rows) - 1)
    return encode(rows.iloc[idx], fit.schema_, fit.covariates)


def fit_twostage(ds, lmm_spec, cox_spec):
    """Two-stage fit from an :class:`LmmSpec` and a :class:`CoxSpec`."""
    return TwoStageModel(lmm_spec.outcome, lmm_spec.covariates, cox_spec.covariates,
                         lmm_spec.time_degree, lmm_spec.random).fit(ds)
