"""Joint model for a longitudinal marker and a time-to-event outcome.

The longitudinal submodel is the linear mixed model of :mod:`jointhaz.lmm`;
the hazard is

    h_i(t) = exp(spline(t)' omega + x_i(t)' gamma + alpha * f(m_i, t))

where ``m_i`` is the subject-specific trajectory and ``f`` one of the
association functionals (current value, slope, both, area under the
trajectory, or lagged value).  All parameters are estimated together by
maximum likelihood: EM with adaptive Gauss-Hermite quadrature over the random
effects, followed by quasi-Newton polishing on the observed likelihood.
"""

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import optimize
from sklearn.base import BaseEstimator
from sklearn.exceptions import ConvergenceWarning

from ._jointlik import ASSOC_KINDS, JointLayout, JointLikelihood, ParamIndex, QuadratureFailure, n_assoc
from ._numerics import bspline_knots, hessian_from_gradient, n_chol, params_from_chol
from .data import DataError
from .lmm import LinearMixedModel, LmmSpec, fixed_names
from .survcox import CoxPH
from .validation import check_dataset, check_fitted, check_horizon, check_terms

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AssociationSpec:
    """Which functional of the trajectory enters the log-hazard."""

    kind: str = "value"
    lag: float = 0.0

    def __post_init__(self):
        if self.kind not in ASSOC_KINDS:
            raise ValueError(f"association kind must be one of {ASSOC_KINDS}")
        if self.lag < 0:
            raise ValueError("lag must be non-negative")
        if self.kind == "lagged" and self.lag == 0:
            object.__setattr__(self, "kind", "value")

    @classmethod
    def parse(cls, text, time_scale=1.0):
        """Parse ``value|slope|both|cumulative|lagged:<c>``; ``c`` in raw time units."""
        text = text.strip()
        if text == "both":
            return cls("value_and_slope")
        if text.startswith("lagged"):
            _, _, c = text.partition(":")
            return cls("lagged", float(c or 0.0) / time_scale)
        return cls(text)

    @property
    def names(self):
        if self.kind == "value_and_slope":
            return ["alpha_value", "alpha_slope"]
        return [f"alpha_{self.kind}"]


@dataclass(frozen=True)
class BaselineSpec:
    """B-spline log-baseline hazard; interior knots at event-time quantiles."""

    degree: int = 3
    n_knots: int = 5
    knots: tuple = None
    upper: float = None

    @property
    def dim(self):
        n = self.n_knots if self.knots is None else len(self.knots)
        return self.degree + n + 1

    def knot_vector(self, event_times, upper):
        upper = self.upper if self.upper is not None else upper
        if self.knots is not None:
            interior = np.asarray(self.knots, dtype=float)
            if np.any(np.diff(interior) <= 0):
                raise ValueError("interior knots must be strictly increasing")
            return np.concatenate([np.zeros(self.degree + 1), interior, np.full(self.degree + 1, upper)])
        return bspline_knots(event_times, upper, self.degree, self.n_knots)


@dataclass(frozen=True)
class JointSpec:
    lmm: LmmSpec
    survival_covariates: tuple = ()
    association: AssociationSpec = field(default_factory=AssociationSpec)
    baseline: BaselineSpec = field(default_factory=BaselineSpec)
    n_gh: int = 9

    @classmethod
    def from_dict(cls, d, time_scale=1.0):
        assoc = d.get("association", "value")
        if isinstance(assoc, str):
            assoc = AssociationSpec.parse(assoc, time_scale)
        else:
            assoc = AssociationSpec(assoc.get("kind", "value"), float(assoc.get("lag", 0.0)) / time_scale)
        base = d.get("baseline", {})
        return cls(
            lmm=LmmSpec.from_dict(d["longitudinal"]),
            survival_covariates=tuple(d.get("survival", {}).get("covariates", ())),
            association=assoc,
            baseline=BaselineSpec(int(base.get("degree", 3)), int(base.get("n_knots", 5)),
                                  tuple(base["knots"]) if base.get("knots") else None, base.get("upper")),
            n_gh=int(d.get("n_gh", 9)),
        )

    def to_dict(self):
        return {
            "longitudinal": self.lmm.to_dict(),
            "survival": {"covariates": list(self.survival_covariates)},
            "association": {"kind": self.association.kind, "lag": self.association.lag},
            "baseline": {"degree": self.baseline.degree, "n_knots": self.baseline.n_knots,
                         "knots": list(self.baseline.knots) if self.baseline.knots else None,
                         "upper": self.baseline.upper},
            "n_gh": self.n_gh,
        }


def poisson_baseline(layout, gamma, max_iter=100):
    """Spline coefficients of the log-baseline with ``gamma`` held fixed.

    Piecewise-exponential (Poisson) likelihood on the quadrature grid with the
    linear predictor as offset; Newton iterations from a constant hazard.
    """
    nd = layout.nodes
    offset = nd.Xs @ gamma
    ev_offset = layout.ev_Xs @ gamma
    exposure = float(np.sum(nd.w * np.exp(offset)))
    K = nd.B.shape[1]
    omega = np.full(K, math.log(max(layout.ev_T.size, 0.5) / exposure))
    ll_old = -math.inf
    for _ in range(max_iter):
        mu = nd.w * np.exp(nd.B @ omega + offset)
        ll = float(np.sum(layout.ev_B @ omega + ev_offset) - mu.sum())
        grad = layout.ev_B.sum(axis=0) - mu @ nd.B
        H = (nd.B * mu[:, None]).T @ nd.B + 1e-8 * np.eye(K)
        step = np.linalg.solve(H, grad)
        t = 1.0
        while t > 1e-8:
            cand = omega + t * step
            mu_c = nd.w * np.exp(nd.B @ cand + offset)
            ll_c = float(np.sum(layout.ev_B @ cand + ev_offset) - mu_c.sum())
            if ll_c >= ll:
                break
            t *= 0.5
        omega = cand
        if abs(ll_c - ll_old) < 1e-10 * max(1.0, abs(ll_c)):
            break
        ll_old = ll_c
    return omega


class JointModel(BaseEstimator):
    """Joint longitudinal / time-to-event model fitted by maximum likelihood.

    Parameters
    ----------
    outcome : str
        Longitudinal outcome column.
    long_covariates : sequence of str
        Covariates of the longitudinal submodel.
    surv_covariates : sequence of str
        Covariates of the hazard submodel (time-constant or LVCF).
    time_degree : int
        Degree of the fixed time polynomial of the trajectory.
    random : {'slope', 'intercept'}
    association : str
        ``value``, ``slope``, ``value_and_slope``, ``cumulative`` or ``lagged``.
    lag : float
        Lag of the ``lagged`` association, in the dataset's time units.
    spline_degree, n_knots : int
        B-spline log-baseline hazard settings.
    n_gh : int
        Adaptive Gauss-Hermite nodes per random-effect dimension.
    max_em, max_direct : int
        Iteration caps of the EM phase and the quasi-Newton phase.
    em_tol : float
        Relative log-likelihood change that, three times in a row, ends EM.
    fixed_alpha : float or sequence, optional
        Hold the association parameter(s) fixed at this value.
    compute_se : bool
        Whether to compute the observed information at the optimum.
    """

    def __init__(self, outcome="y", long_covariates=(), surv_covariates=(), time_degree=2,
                 random="slope", association="value", lag=0.0, spline_degree=3, n_knots=5,
                 knots=None, n_gh=9, max_em=200, max_direct=100, em_tol=1e-8,
                 fixed_alpha=None, compute_se=True):
        self.outcome = outcome
        self.long_covariates = long_covariates
        self.surv_covariates = surv_covariates
        self.time_degree = time_degree
        self.random = random
        self.association = association
        self.lag = lag
        self.spline_degree = spline_degree
        self.n_knots = n_knots
        self.knots = knots
        self.n_gh = n_gh
        self.max_em = max_em
        self.max_direct = max_direct
        self.em_tol = em_tol
        self.fixed_alpha = fixed_alpha
        self.compute_se = compute_se

    @classmethod
    def from_spec(cls, spec, **kwargs):
        return cls(
            outcome=spec.lmm.outcome, long_covariates=spec.lmm.covariates,
            surv_covariates=spec.survival_covariates, time_degree=spec.lmm.time_degree,
            random=spec.lmm.random, association=spec.association.kind, lag=spec.association.lag,
            spline_degree=spec.baseline.degree, n_knots=spec.baseline.n_knots,
            knots=spec.baseline.knots, n_gh=spec.n_gh, **kwargs)

    @property
    def spec(self):
        return JointSpec(
            LmmSpec(self.outcome, tuple(self.long_covariates), self.time_degree, self.random),
            tuple(self.surv_covariates),
            AssociationSpec(self.association, self.lag),
            BaselineSpec(self.spline_degree, self.n_knots, tuple(self.knots) if self.knots is not None else None),
            self.n_gh,
        )

    # -- fitting ------------------------------------------------------------
    def fit(self, ds):
        check_dataset(ds)
        spec = self.spec
        if spec.lmm.q == 0:
            raise ValueError("the joint model needs at least a random intercept")
        check_terms(ds.schema, spec.survival_covariates)
        self.schema_ = ds.schema
        self.ids_ = ds.ids
        self.assoc_ = spec.association
        lmm = LinearMixedModel(spec.lmm.outcome, spec.lmm.covariates, spec.lmm.time_degree,
                               spec.lmm.random).fit(ds)
        self.lmm_init_ = lmm
        self.feature_names_ = fixed_names(spec.lmm, ds.schema)
        self.surv_names_ = ds.schema.expand(spec.survival_covariates)
        self.alpha_names_ = spec.association.names
        na = n_assoc(spec.association.kind)
        if ds.n_events == 0:
            return self._fit_without_events(lmm, na)
        self.identified_ = True
        cox = CoxPH(spec.survival_covariates).fit(ds)
        self.cox_init_ = cox
        f = ds.frame
        event_times = f.loc[f["event"] == 1, "tstop"].to_numpy()
        self.knots_ = spec.baseline.knot_vector(event_times, float(f["tstop"].max()))
        layout = JointLayout(f, ds.schema, spec.lmm, spec.survival_covariates,
                             spec.association.kind, spec.association.lag, self.knots_, spec.baseline.degree)
        engine = JointLikelihood(layout, self.n_gh)
        self._engine = engine
        idx = engine.idx
        omega0 = poisson_baseline(layout, cox.coef_)
        theta = np.zeros(idx.size)
        s = idx.slices
        theta[s["beta"]] = lmm.coef_
        theta[s["log_sigma"]] = 0.5 * math.log(max(lmm.sigma2_, 1e-10))
        theta[s["chol"]] = params_from_chol(np.linalg.cholesky(lmm.Q_ + 1e-10 * np.eye(spec.lmm.q)))
        theta[s["gamma"]] = cox.coef_
        theta[s["alpha"]] = 0.0 if self.fixed_alpha is None else np.broadcast_to(self.fixed_alpha, (na,))
        theta[s["omega"]] = omega0
        free = np.ones(idx.size, dtype=bool)
        if self.fixed_alpha is not None:
            free[s["alpha"]] = False
        self._free = free
        theta, out = self._em(engine, theta)
        theta, out = self._direct(engine, theta, out)
        self._store(engine, theta, out)
        return self

    def _fit_without_events(self, lmm, na):
        warnings.warn("no events: survival parameters are not identified", UserWarning)
        self.identified_ = False
        self.coef_ = lmm.coef_
        self.sigma2_ = lmm.sigma2_
        self.Q_ = lmm.Q_
        self.gamma_ = np.full(len(self.surv_names_), np.nan)
        self.alpha_ = np.full(na, np.nan)
        self.omega_ = None
        self.loglik_ = lmm.loglik_
        self.em_trace_ = []
        self.direct_trace_ = []
        self.converged_ = lmm.converged_
        self.se_ = {"beta": lmm.se_}
        self.random_effects_ = lmm.random_effects_
        self.n_params_ = len(lmm.coef_) + 1 + n_chol(lmm.Q_.shape[0])
        self.aic_ = aic_value(self.loglik_, self.n_params_)
        return self

    def _em(self, engine, theta):
        idx = engine.idx
        alpha_sl = idx.slices["alpha"]
        out = engine.evaluate(theta, "estep")
        trace = [out["loglik"]]
        small = 0
        self.em_converged_ = False
        for it in range(self.max_em):
            proposal = engine.mstep(theta, out)
            if self.fixed_alpha is not None:
                proposal[alpha_sl] = theta[alpha_sl]
            step = proposal - theta
            t = 1.0
            accepted = None
            while t >= 1.0 / 1024:
                cand = theta + t * step
                try:
                    new = engine.evaluate(cand, "estep")
                except QuadratureFailure:
                    new = None
                if new is not None and new["loglik"] >= out["loglik"]:
                    accepted = (cand, new)
                    break
                t *= 0.5
            if accepted is None:
                # no ascent along the EM direction: stationary at quadrature precision
                self.em_converged_ = True
                break
            old = out["loglik"]
            theta, out = accepted
            trace.append(out["loglik"])
            rel = abs(out["loglik"] - old) / max(1.0, abs(old))
            small = small + 1 if rel < self.em_tol else 0
            if small >= 3:
                self.em_converged_ = True
                break
        self.em_trace_ = trace
        self.n_em_iter_ = len(trace) - 1
        log.debug("EM finished after %d iterations, loglik %.6f", self.n_em_iter_, trace[-1])
        return theta, out

    def _direct(self, engine, theta, out):
        free = self._free
        base = theta.copy()
        trace = []

        def full(x):
            th = base.copy()
            th[free] = x
            return th

        last = {}

        def objective(x):
            try:
                res = engine.evaluate(full(x), "grad")
            except QuadratureFailure:
                return math.inf, np.zeros(x.size)
            last["x"], last["f"] = x.copy(), res["loglik"]
            return -res["loglik"], -res["grad"][free]

        def callback(xk):
            if "x" in last and np.array_equal(xk, last["x"]):
                trace.append(last["f"])
            else:
                trace.append(-objective(xk)[0])

        self.direct_converged_ = True
        if self.max_direct > 0:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                res = optimize.minimize(objective, theta[free], jac=True, method="BFGS", callback=callback,
                                        options={"maxiter": self.max_direct, "gtol": 1e-5})
            if np.isfinite(res.fun) and -res.fun >= out["loglik"]:
                theta = full(res.x)
                out = engine.evaluate(theta, "grad")
            self.direct_converged_ = bool(res.success or np.max(np.abs(res.jac)) < 1e-3)
        self.direct_trace_ = trace
        return theta, out

    def _store(self, engine, theta, out):
        idx = engine.idx
        P = idx.unpack(theta)
        s = idx.slices
        self.theta_ = theta
        self.coef_ = P["beta"]
        self.sigma2_ = P["sigma2"]
        self.Q_ = P["Q"]
        self.gamma_ = P["gamma"]
        self.alpha_ = P["alpha"]
        self.omega_ = P["omega"]
        self.loglik_ = out["loglik"]
        self.gradient_ = out["grad"]
        self.random_effects_ = out["bhat"]
        self.n_params_ = int(self._free.sum())
        self.aic_ = aic_value(self.loglik_, self.n_params_)
        self.converged_ = bool(self.em_converged_ and self.direct_converged_)
        self.param_names_ = (self.feature_names_ + ["log_sigma"] + _chol_names(self.spec.lmm.q)
                             + self.surv_names_ + self.alpha_names_
                             + [f"omega{k}" for k in range(len(self.omega_))])
        self.se_ = None
        self.cov_ = None
        self.hessian_pd_ = None
        if self.compute_se:
            free = self._free

            def grad(x):
                th = theta.copy()
                th[free] = x
                return engine.evaluate(th, "grad")["grad"][free]

            try:
                H = hessian_from_gradient(grad, theta[free])
            except QuadratureFailure:
                H = np.full((int(free.sum()),) * 2, np.nan)
            cov_free = None
            try:
                if not np.all(np.isfinite(H)):
                    raise np.linalg.LinAlgError("non-finite observed information")
                np.linalg.cholesky(-H)
                cov_free = np.linalg.inv(-H)
                self.hessian_pd_ = True
            except np.linalg.LinAlgError:
                self.hessian_pd_ = False
                warnings.warn("observed information is not positive definite; SEs unreliable", ConvergenceWarning)
                cov_free = np.linalg.pinv(-H) if np.all(np.isfinite(H)) else np.full_like(H, np.nan)
            cov = np.full((idx.size, idx.size), np.nan)
            fi = np.flatnonzero(free)
            cov[np.ix_(fi, fi)] = cov_free
            self.cov_ = cov
            sd = np.sqrt(np.abs(np.diag(cov)))
            self.se_ = {k: sd[sl] for k, sl in s.items()}
        if not self.converged_:
            warnings.warn("joint model did not fully converge", ConvergenceWarning)

    # -- accessors ----------------------------------------------------------
    def params(self):
        check_fitted(self)
        return {"beta": self.coef_, "sigma2": self.sigma2_, "Q": self.Q_, "gamma": self.gamma_,
                "alpha": self.alpha_, "omega": self.omega_}

    def loglik(self, theta=None):
        check_fitted(self, "theta_")
        return self._engine.evaluate(self.theta_ if theta is None else theta)["loglik"]

    def score(self, theta=None):
        check_fitted(self, "theta_")
        return self._engine.evaluate(self.theta_ if theta is None else theta, "grad")["grad"]

    def layout_for(self, frame, sid=None, breaks=None):
        spec = self.spec
        return JointLayout(frame, self.schema_, spec.lmm, spec.survival_covariates,
                           spec.association.kind, spec.association.lag, self.knots_, spec.baseline.degree,
                           sid, breaks)

    def posterior_nodes(self, histories, s):
        """Adaptive quadrature nodes and weights of ``b`` given each history up to ``s_i``.

        Returns ``(engine, out)`` where ``out["nodes"]`` is (n, K, q) and
        ``out["weights"]`` (n, K) sums to one per subject.
        """
        check_fitted(self, "theta_")
        frame, sid = stack_histories(histories, s)
        eng = JointLikelihood(self.layout_for(frame, sid), self.n_gh)
        return eng, eng.evaluate(self.theta_, "grad")

    def hazard_increments(self, histories, s, offsets, draws):
        """Cumulative hazard from ``s_i`` to ``s_i + offsets_j`` at per-subject draws.

        ``offsets`` must be sorted and non-negative; ``draws`` has shape
        (n, D, q).  Returns (n, J, D), non-decreasing along J by construction
        (a running sum of non-negative pieces).
        """
        check_fitted(self, "theta_")
        s = np.asarray(s, dtype=float)
        offsets = np.asarray(offsets, dtype=float)
        J = offsets.size
        frame, sid = stack_histories(histories, s, extend_to=s + offsets[-1])
        breaks = {i: np.concatenate([[s[i]], s[i] + offsets]) for i in range(len(s))}
        eng = JointLikelihood(self.layout_for(frame, sid, breaks), self.n_gh)
        wh = eng.node_hazards(self.theta_, draws)
        nodes = eng.lay.nodes
        rel = nodes.s - s[nodes.group]
        after = rel > 0
        j = np.clip(np.searchsorted(offsets, rel[after], side="left"), 0, J - 1)
        inc = np.zeros((len(s), J, wh.shape[1]))
        np.add.at(inc, (nodes.group[after], j), wh[after])
        return np.cumsum(inc, axis=1)

    def conditional_survival_batch(self, histories, s, offsets):
        """``P(T_i > s_i + h | T_i > s_i, history_i)`` for every subject and offset ``h``.

        Integrates over the posterior of ``b`` with the adaptive Gauss-Hermite
        rule; returns (n, J).
        """
        offsets = np.asarray(offsets, dtype=float)
        order = np.argsort(offsets, kind="stable")
        if offsets.size and offsets[order[0]] < 0:
            raise ValueError("horizon offsets must be non-negative")
        _, out = self.posterior_nodes(histories, s)
        dH = self.hazard_increments(histories, s, offsets[order], out["nodes"])
        F = -np.expm1(-dH)
        surv = 1.0 - np.einsum("nk,njk->nj", out["weights"], F)
        res = np.empty_like(surv)
        res[:, order] = surv
        return res

    def predict_conditional_survival(self, history, times, s=None):
        """``P(T > u | T > s, history)`` for ``u`` in ``times`` (quadrature over ``b``)."""
        s = history.exit if s is None else s
        times = check_horizon(times, s)
        return self.conditional_survival_batch([history], [s], times - s)[0]

    def engine_for(self, history, n_gh=None):
        return JointLikelihood(self.layout_for(history.rows), n_gh or self.n_gh)

    def subject_loglik(self, history, theta=None, n_gh=None):
        """Log-likelihood contribution of one subject."""
        check_fitted(self, "theta_")
        eng = self.engine_for(history, n_gh)
        return eng.evaluate(self.theta_ if theta is None else theta)["loglik"]

    def random_effects_for(self, history):
        """Posterior mode of b and its Laplace covariance, given the full history."""
        check_fitted(self, "theta_")
        out = self.engine_for(history).evaluate(self.theta_)
        H = out["H"][0]
        return out["bhat"][0], np.linalg.inv(H)

    def standard_errors(self):
        """SEs keyed by submodel (``longitudinal``, ``survival``, ``association``) and name."""
        check_fitted(self, "theta_")
        se = self.se_ or {}
        nan = np.full(max(len(self.feature_names_), len(self.surv_names_), len(self.alpha_names_)), np.nan)
        return {
            "longitudinal": dict(zip(self.feature_names_, se.get("beta", nan))),
            "survival": dict(zip(self.surv_names_, se.get("gamma", nan))),
            "association": dict(zip(self.alpha_names_, se.get("alpha", nan))),
        }

    def to_dict(self):
        check_fitted(self)
        se = self.se_ or {}

        def block(names, values, key):
            errs = se.get(key, np.full(len(values), np.nan))
            return [{"name": n, "estimate": float(v), "se": float(e)} for n, v, e in zip(names, values, errs)]

        d = {
            "model": "joint",
            "spec": self.spec.to_dict(),
            "identified": bool(self.identified_),
            "longitudinal": block(self.feature_names_, self.coef_, "beta"),
            "sigma2": float(self.sigma2_),
            "Q": np.asarray(self.Q_).tolist(),
            "survival": block(self.surv_names_, self.gamma_, "gamma"),
            "association": block(self.alpha_names_, self.alpha_, "alpha"),
            "loglik": float(self.loglik_),
            "aic": float(self.aic_),
            "n_params": int(self.n_params_),
            "converged": bool(self.converged_),
            "em_iterations": len(self.em_trace_) - 1 if self.em_trace_ else 0,
        }
        if self.identified_:
            d["baseline"] = {"knots": self.knots_.tolist(), "omega": block(
                [f"omega{k}" for k in range(len(self.omega_))], self.omega_, "omega")}
            d["hessian_pd"] = self.hessian_pd_
            d["theta"] = self.theta_.tolist()
        return d

    @classmethod
    def from_dict(cls, d, schema):
        """Rebuild a fitted model from :meth:`to_dict` output (prediction only)."""
        if not d.get("identified", False) or "theta" not in d:
            raise ValueError("fit record has no identified survival part to restore")
        spec = JointSpec.from_dict(d["spec"])
        model = cls.from_spec(spec, compute_se=False)
        model.schema_ = schema
        model.assoc_ = spec.association
        model.knots_ = np.asarray(d["baseline"]["knots"], dtype=float)
        model.feature_names_ = fixed_names(spec.lmm, schema)
        model.surv_names_ = schema.expand(spec.survival_covariates)
        model.alpha_names_ = spec.association.names
        model.identified_ = True
        K = len(model.knots_) - spec.baseline.degree - 1
        idx = ParamIndex(len(model.feature_names_), spec.lmm.q, len(model.surv_names_),
                         n_assoc(spec.association.kind), K)
        model.theta_ = np.asarray(d["theta"], dtype=float)
        if model.theta_.size != idx.size:
            raise ValueError("parameter vector does not match the model layout")
        P = idx.unpack(model.theta_)
        model.coef_, model.sigma2_, model.Q_ = P["beta"], P["sigma2"], P["Q"]
        model.gamma_, model.alpha_, model.omega_ = P["gamma"], P["alpha"], P["omega"]
        model.loglik_ = float(d["loglik"])
        model.n_params_ = int(d["n_params"])
        model.aic_ = float(d["aic"])
        model.converged_ = bool(d["converged"])
        model.em_trace_, model.direct_trace_ = [], []
        model.se_ = None
        return model


def _chol_names(q):
    return [f"chol{i}{j}" for i in range(q) for j in range(i + 1)]


def aic_value(loglik, k):
    return -2.0 * loglik + 2.0 * k


def aic(fit):
    """``-2 loglik + 2k`` with k counting beta, gamma, alpha, spline, sigma2 and Q."""
    check_fitted(fit)
    return aic_value(fit.loglik_, fit.n_params_)


def fit_joint(ds, spec, **kwargs):
    return JointModel.from_spec(spec, **kwargs).fit(ds)


def subject_loglik(params, history, spec, knots, n_gh=None):
    """Observed-data log-likelihood of one subject at explicit parameters.

    ``params`` is a mapping with ``beta, sigma2, Q, gamma, alpha, omega`` and
    ``knots`` the full B-spline knot vector of the log-baseline.
    """
    layout = JointLayout(history.rows, history.schema, spec.lmm, spec.survival_covariates,
                         spec.association.kind, spec.association.lag, np.asarray(knots, dtype=float),
                         spec.baseline.degree)
    eng = JointLikelihood(layout, n_gh or spec.n_gh)
    theta = pack_params(eng.idx, params)
    try:
        return eng.evaluate(theta)["loglik"]
    except QuadratureFailure as exc:
        raise QuadratureFailure([history.id]) from exc


def pack_params(idx, params):
    s = idx.slices
    theta = np.zeros(idx.size)
    theta[s["beta"]] = params["beta"]
    theta[s["log_sigma"]] = 0.5 * math.log(params["sigma2"])
    theta[s["chol"]] = params_from_chol(np.linalg.cholesky(np.asarray(params["Q"], dtype=float)))
    theta[s["gamma"]] = params.get("gamma", [])
    theta[s["alpha"]] = params["alpha"]
    theta[s["omega"]] = params["omega"]
    return theta


def assoc_term(fit, history, t, b=None):
    """Contribution ``alpha' f(m_i, t)`` of the trajectory to the log-hazard."""
    check_fitted(fit, "theta_")
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if b is None:
        b, _ = fit.random_effects_for(history)
    lay = fit.layout_for(history.rows)
    ri = lay.rowinfo
    rows = ri.row_at(np.zeros(t.size, dtype=int), t)
    A, C = ri.features(fit.assoc_.kind, t, rows, fit.assoc_.lag)
    F = A @ fit.coef_ + C @ np.asarray(b)
    return F @ fit.alpha_


def check_identified(fit):
    if not getattr(fit, "identified_", True):
        raise DataError("survival parameters are not identified (no events)")


def stack_histories(histories, s, extend_to=None):
    """One frame holding every history truncated at ``s_i``, with subject codes.

    With ``extend_to`` the last row of history ``i`` is stretched to
    ``extend_to[i]``, its covariates carried forward.
    """
    frames, codes = [], []
    for k, (h, sk) in enumerate(zip(histories, s)):
        rows = h.truncate(float(sk)).rows.copy()
        if extend_to is not None:
            rows.iloc[-1, rows.columns.get_loc("tstop")] = float(extend_to[k])
        frames.append(rows)
        codes.append(np.full(len(rows), k))
    return pd.concat(frames, ignore_index=True), np.concatenate(codes)
