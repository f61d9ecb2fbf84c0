"""Effect decomposition, dynamic survival prediction and predictive accuracy.

Dynamic predictions are conditional on survival up to the last measurement
``s``: ``P(T > u | T > s, history)``.  The joint model integrates over the
posterior of the random effects by importance sampling from its Laplace
approximation; every draw's curve is exactly 1 at ``u = s`` and
non-increasing in ``u``.
"""

import math
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.special import logsumexp

from .data import DataError
from .validation import check_fitted, check_horizon

LOG2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class Decomposition:
    """Direct, mediated and total effect of a covariate on the log-hazard."""

    covariate: str
    alpha: float
    beta: float
    gamma: float

    @property
    def direct(self):
        return self.gamma

    @property
    def indirect(self):
        return self.alpha * self.beta

    @property
    def total(self):
        return self.alpha * self.beta + self.gamma

    def to_dict(self):
        return {"covariate": self.covariate, "alpha": self.alpha, "beta": self.beta, "gamma": self.gamma,
                "direct": self.direct, "indirect": self.indirect, "total": self.total}


def decompose(fit, covariate):
    """Split the effect of ``covariate`` into its direct and trajectory-mediated parts.

    The covariate must enter both submodels and the association must be the
    current value, for which the mediated effect is ``alpha * beta``.
    """
    check_fitted(fit, "alpha_")
    if fit.assoc_.kind != "value":
        raise ValueError(f"decomposition needs the current-value association, not {fit.assoc_.kind!r}: "
                         "with other functionals the mediated effect is not a single product")
    if covariate not in fit.feature_names_:
        raise KeyError(f"{covariate!r} is not in the longitudinal submodel")
    if covariate not in fit.surv_names_:
        raise KeyError(f"{covariate!r} is not in the survival submodel")
    beta = float(fit.coef_[fit.feature_names_.index(covariate)])
    gamma = float(fit.gamma_[fit.surv_names_.index(covariate)])
    return Decomposition(covariate, float(fit.alpha_[0]), beta, gamma)


@dataclass
class DynamicPrediction:
    """Conditional survival curve of one subject with a pointwise 95% band."""

    s: float
    u: np.ndarray
    mean: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    n_draws: int
    mc_se: np.ndarray = None
    ess: float = None
    subject: object = None

    def to_frame(self):
        return pd.DataFrame({"u": self.u, "mean": self.mean, "lo": self.lo, "hi": self.hi,
                             "s": np.full(self.u.size, self.s)})


def last_measurement(history):
    y = history.values
    obs = ~np.isnan(y)
    if not obs.any():
        raise DataError(f"subject {history.id!r} has no measurement of {history.outcome!r}")
    return float(history.times[obs][-1])


def weighted_quantile(values, weights, q):
    """Quantiles of a weighted sample along axis -1 (linear interpolation of the weighted CDF)."""
    order = np.argsort(values, axis=-1, kind="stable")
    v = np.take_along_axis(values, order, axis=-1)
    w = np.broadcast_to(weights, values.shape)
    w = np.take_along_axis(w, order, axis=-1)
    cw = np.cumsum(w, axis=-1) - 0.5 * w
    cw = cw / w.sum(axis=-1, keepdims=True)
    out = np.empty(values.shape[:-1] + (len(q),))
    for idx in np.ndindex(values.shape[:-1]):
        out[idx] = np.interp(q, cw[idx], v[idx])
    return out


def _draw_normals(seed, n, q):
    """Standard normal vectors, one counter-based stream per draw."""
    z = np.empty((n, q))
    for d in range(n):
        z[d] = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, d]))).standard_normal(q)
    return z


def predict_survival(fit, history, horizon, n_draws=500, seed=0, s=None):
    """Dynamic prediction ``P(T > u | T > s, history)`` from a fitted joint model.

    Parameters
    ----------
    fit : JointModel
    history : SubjectHistory
        Measurements and covariate path up to at least ``s``.
    horizon : array_like
        Prediction times ``u >= s``.
    n_draws : int
        Importance-sampling draws from the Laplace approximation of the
        posterior of ``b`` given the history and survival to ``s``.
    seed : int
    s : float, optional
        Conditioning time; defaults to the last measurement time.

    Returns
    -------
    DynamicPrediction
    """
    check_fitted(fit, "theta_")
    s = last_measurement(history) if s is None else float(s)
    if s > history.exit:
        raise DataError(f"conditioning time {s} is after the end of the history ({history.exit})")
    u = check_horizon(horizon, s)
    order = np.argsort(u, kind="stable")
    offsets = u[order] - s
    eng, out = fit.posterior_nodes([history], [s])
    bhat, H = out["bhat"][0], out["H"][0]
    q = bhat.size
    U = np.linalg.cholesky(H)
    z = _draw_normals(seed, n_draws, q)
    draws = bhat + np.linalg.solve(U.T, z.T).T
    log_prop = -0.5 * np.sum(z * z, axis=1) - 0.5 * q * LOG2PI + np.sum(np.log(np.diag(U)))
    log_target = eng.log_joint_density_draws(fit.theta_, draws[None])[0]
    lw = log_target - log_prop
    w = np.exp(lw - logsumexp(lw))
    dH = fit.hazard_increments([history], [s], offsets, draws[None])[0]
    F = -np.expm1(-dH)
    mean = 1.0 - F @ w
    mc_se = np.sqrt(((F - (F @ w)[:, None]) ** 2) @ (w * w))
    band = weighted_quantile(np.exp(-dH), w, [0.025, 0.975])
    lo = np.minimum(band[:, 0], mean)
    hi = np.maximum(band[:, 1], mean)
    inv = np.empty_like(order)
    inv[order] = np.arange(order.size)
    return DynamicPrediction(s, u, mean[inv], lo[inv], hi[inv], n_draws, mc_se[inv],
                             float(1.0 / np.sum(w * w)), history.id)


def update_prediction(fit, history, t, value, horizon, n_draws=500, seed=0, **covariates):
    """Prediction after recording a new measurement ``value`` at time ``t``.

    Same as :func:`predict_survival` on the extended history with the
    conditioning time moved to ``t``.  Returns ``(prediction, new_history)``.
    """
    new = history.append(t, value, **covariates)
    return predict_survival(fit, new, horizon, n_draws, seed, s=t), new


# -- predictive accuracy --------------------------------------------------------
def _model_survival(model, histories, s, offsets):
    if hasattr(model, "conditional_survival_batch"):
        return model.conditional_survival_batch(histories, s, offsets)
    return np.vstack([model.predict_conditional_survival(h, sk + offsets, s=sk) for h, sk in zip(histories, s)])


def mse_harness(fits, ds, horizons):
    """Mean squared error of predicted event probabilities by time since last measurement.

    For each subject of ``ds`` the history is cut at its last measurement
    ``s`` and every model predicts ``P(T <= s + h | T > s)``.  The target is
    the realised status at ``s + h`` (1 if the event has happened); subjects
    censored before ``s + h`` are left out at that horizon.

    Parameters
    ----------
    fits : mapping of name -> fitted model
        Each model provides ``predict_conditional_survival`` (and optionally
        ``conditional_survival_batch``).
    ds : Dataset
        Held-out data.
    horizons : array_like
        Offsets ``h > 0`` from the last measurement.

    Returns
    -------
    DataFrame with columns ``model, horizon, mse, n``.
    """
    horizons = np.asarray(horizons, dtype=float)
    histories, s, exit_, event = [], [], [], []
    for h in ds.histories():
        try:
            sk = last_measurement(h)
        except DataError:
            continue
        histories.append(h)
        s.append(sk)
        exit_.append(h.exit)
        event.append(h.event)
    s = np.asarray(s)
    exit_ = np.asarray(exit_)
    event = np.asarray(event, dtype=bool)
    target = s[:, None] + horizons[None, :]
    status = event[:, None] & (exit_[:, None] <= target)
    known = status | (exit_[:, None] >= target)
    rows = []
    for name, model in fits.items():
        surv = _model_survival(model, histories, s, horizons)
        err = (1.0 - surv - status) ** 2
        for j, h in enumerate(horizons):
            sel = known[:, j]
            mse = math.fsum(err[sel, j].tolist()) / sel.sum() if sel.any() else math.nan
            rows.append({"model": name, "horizon": float(h), "mse": mse, "n": int(sel.sum())})
    return pd.DataFrame(rows, columns=["model", "horizon", "mse", "n"])


def mse_table(predicted, status):
    """MSE of predicted event probabilities against 0/1 status (helper for checks)."""
    predicted = np.asarray(predicted, dtype=float)
    status = np.asarray(status, dtype=float)
    return float(np.mean((predicted - status) ** 2))
