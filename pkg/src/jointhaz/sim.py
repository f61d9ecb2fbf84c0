"""Simulation of joint longitudinal / time-to-event data with known truth.

Each subject gets time-constant covariates, random effects ``b ~ N(0, Q)``
and a latent event time drawn by inverting the cumulative hazard.  Every
random quantity comes from its own counter-based stream keyed by
``(seed, subject, purpose)``, so changing one parameter (say ``alpha``)
leaves all other draws untouched.
"""

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd

from ._numerics import gauss_legendre
from .data import Dataset, Schema

# stream purposes
_COV, _RE, _EVENT, _CENSOR, _NOISE = range(5)


def subject_rng(seed, subject, purpose):
    """Independent generator for one (seed, subject, purpose) triple."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, subject, purpose])))


@dataclass
class SimTruth:
    """Generating parameters of a simulated study.

    ``beta`` follows the fixed-effect order of the fitted model: intercept,
    time powers up to ``time_degree``, then ``covariates``.  ``gamma`` has one
    entry per covariate.  ``baseline`` is one of

    * ``{"kind": "constant", "rate": lam}``
    * ``{"kind": "weibull", "shape": k, "scale": lam}`` with ``h0 = lam k t^(k-1)``
    * ``{"kind": "spline", "knots": [...], "degree": d, "coef": [...]}`` on the log scale

    and ``censoring`` one of ``none``, ``uniform`` (on ``[0, upper]``),
    ``exponential`` (``rate``) or ``target`` (exponential with the rate
    calibrated so that the censored share equals ``target``).
    """

    n_subjects: int = 300
    seed: int = 1
    time_degree: int = 2
    beta: list = field(default_factory=lambda: [0.5, 1.0, -0.5, 0.5])
    Q: list = field(default_factory=lambda: [[1.0, 0.2], [0.2, 0.5]])
    sigma2: float = 1.0
    covariates: list = field(default_factory=lambda: [{"name": "x", "dist": "normal"}])
    gamma: list = field(default_factory=lambda: [0.3])
    alpha: list = field(default_factory=lambda: [-0.5])
    association: str = "value"
    lag: float = 0.0
    baseline: dict = field(default_factory=lambda: {"kind": "constant", "rate": 0.3})
    grid: list = field(default_factory=lambda: [round(0.1 * j, 10) for j in range(10)])
    censoring: dict = field(default_factory=lambda: {"kind": "exponential", "rate": 0.1})

    def __post_init__(self):
        self.beta = [float(v) for v in self.beta]
        self.Q = [[float(v) for v in row] for row in self.Q]
        self.gamma = [float(v) for v in self.gamma]
        self.alpha = [float(v) for v in np.atleast_1d(self.alpha)]
        self.grid = sorted(float(v) for v in self.grid)
        if self.sigma2 < 0:
            raise ValueError("sigma2 must be non-negative")
        Q = np.asarray(self.Q)
        if Q.shape != (2, 2) or not np.allclose(Q, Q.T) or np.linalg.eigvalsh(Q).min() < 0:
            raise ValueError("Q must be a symmetric positive semi-definite 2x2 matrix")
        if len(self.beta) != self.time_degree + 1 + len(self.covariates):
            raise ValueError("beta must hold intercept, time powers and one entry per covariate")
        if len(self.gamma) != len(self.covariates):
            raise ValueError("gamma must hold one entry per covariate")
        need = 2 if self.association == "value_and_slope" else 1
        if len(self.alpha) != need:
            raise ValueError(f"{self.association!r} association needs {need} alpha value(s)")
        if not self.grid or self.grid[0] < 0 or self.grid[-1] >= 1:
            raise ValueError("measurement grid must lie in [0, 1)")
        if self.lag < 0:
            raise ValueError("lag must be non-negative")

    @property
    def covariate_names(self):
        return [c["name"] for c in self.covariates]

    def with_(self, **changes):
        d = asdict(self)
        d.update(changes)
        return SimTruth(**d)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def schema(self):
        kinds = {"id": "id", "tstart": "time", "tstop": "time", "event": "event", "y": "outcome"}
        kinds.update({name: "numeric" for name in self.covariate_names})
        return Schema(kinds)


@dataclass(frozen=True)
class SubjectDraw:
    """Everything random about one simulated subject."""

    id: int
    x: np.ndarray
    b: np.ndarray
    latent_time: float
    censor_time: float

    @property
    def exit(self):
        return min(self.latent_time, self.censor_time, 1.0)

    @property
    def event(self):
        return int(self.latent_time <= min(self.censor_time, 1.0))


# -- trajectory and hazard of one or many subjects -----------------------------
def _powers(t, degree, kind="value"):
    t = np.asarray(t, dtype=float)
    k = np.arange(degree + 1)
    if kind == "value":
        return t[..., None] ** k
    if kind == "slope":
        return np.where(k > 0, k * t[..., None] ** np.maximum(k - 1, 0), 0.0)
    return t[..., None] ** (k + 1) / (k + 1)


def trajectory(truth, x, b, t, kind="value"):
    """Trajectory functional of subjects with covariates ``x`` (n, p) and effects ``b`` (n, 2) at ``t`` (n, m)."""
    d = truth.time_degree
    beta = np.asarray(truth.beta)
    bt, bx = beta[: d + 1], beta[d + 1 :]
    t = np.asarray(t, dtype=float)
    xb = np.asarray(x) @ bx
    b = np.asarray(b)
    if kind == "value":
        return _powers(t, d) @ bt + xb[:, None] + b[:, :1] + b[:, 1:2] * t
    if kind == "slope":
        return _powers(t, d, "slope") @ bt + b[:, 1:2] + 0.0 * t
    return _powers(t, d, "integral") @ bt + (xb[:, None] + b[:, :1]) * t + b[:, 1:2] * t * t / 2


def log_baseline(truth, t):
    base = truth.baseline
    t = np.asarray(t, dtype=float)
    kind = base["kind"]
    if kind == "constant":
        return np.full(t.shape, math.log(base["rate"]))
    if kind == "weibull":
        k, lam = base["shape"], base["scale"]
        with np.errstate(divide="ignore"):
            return math.log(lam * k) + (k - 1) * np.log(t)
    if kind == "spline":
        from scipy.interpolate import BSpline

        knots = np.asarray(base["knots"], dtype=float)
        spl = BSpline(knots, np.asarray(base["coef"], dtype=float), int(base.get("degree", 3)), extrapolate=False)
        return np.nan_to_num(spl(np.clip(t, knots[0], knots[-1])))
    raise ValueError(f"unknown baseline kind {kind!r}")


def log_hazard(truth, x, b, t):
    """Log-hazard of subjects ``(x, b)`` at times ``t`` of shape (n, m)."""
    t = np.asarray(t, dtype=float)
    alpha = truth.alpha
    kind = truth.association
    if kind == "value":
        assoc = alpha[0] * trajectory(truth, x, b, t)
    elif kind == "slope":
        assoc = alpha[0] * trajectory(truth, x, b, t, "slope")
    elif kind == "value_and_slope":
        assoc = alpha[0] * trajectory(truth, x, b, t) + alpha[1] * trajectory(truth, x, b, t, "slope")
    elif kind == "cumulative":
        assoc = alpha[0] * trajectory(truth, x, b, t, "integral")
    elif kind == "lagged":
        assoc = alpha[0] * trajectory(truth, x, b, np.maximum(t - truth.lag, 0.0))
    else:
        raise ValueError(f"unknown association kind {kind!r}")
    lin = np.asarray(x) @ np.asarray(truth.gamma)
    return log_baseline(truth, t) + lin[:, None] + assoc


def _cell_edges(truth, n_cells=200):
    edges = np.linspace(0.0, 1.0, n_cells + 1)
    extra = [truth.lag] if truth.association == "lagged" and 0 < truth.lag < 1 else []
    if truth.baseline["kind"] == "spline":
        extra += [k for k in truth.baseline["knots"] if 0 < k < 1]
    return np.unique(np.concatenate([edges, extra]))


def _gl_integral(truth, x, b, lo, hi):
    """Gauss-Legendre integral of the hazard over ``[lo_i, hi_i]`` for each subject."""
    z, w = gauss_legendre(15)
    half = 0.5 * (hi - lo)
    s = (lo + hi)[:, None] * 0.5 + half[:, None] * z
    return (np.exp(log_hazard(truth, x, b, s)) * w).sum(axis=1) * half


def invert_cumhaz(truth, x, b, target, tol=1e-10):
    """Solve ``cumhaz(T) = target`` per subject; ``inf`` when not reached by ``t = 1``."""
    edges = _cell_edges(truth)
    n = len(target)
    z, w = gauss_legendre(15)
    mid = 0.5 * (edges[:-1] + edges[1:])
    half = 0.5 * np.diff(edges)
    s = (mid[:, None] + half[:, None] * z).ravel()
    h = np.exp(log_hazard(truth, x, b, np.broadcast_to(s, (n, s.size)))).reshape(n, mid.size, z.size)
    cell = (h * w).sum(axis=2) * half
    cum = np.concatenate([np.zeros((n, 1)), np.cumsum(cell, axis=1)], axis=1)
    k = np.array([np.searchsorted(cum[i], target[i], side="left") for i in range(n)]) - 1
    out = np.full(n, math.inf)
    hit = k < edges.size - 1
    if not hit.any():
        return out
    idx = np.flatnonzero(hit)
    kk = np.clip(k[idx], 0, None)
    lo = edges[kk].copy()
    hi = edges[kk + 1].copy()
    base = cum[idx, kk]
    need = target[idx] - base
    xs, bs = np.asarray(x)[idx], np.asarray(b)[idx]
    a0 = lo.copy()
    while np.max(hi - lo) > tol:
        m = 0.5 * (lo + hi)
        below = _gl_integral(truth, xs, bs, a0, m) < need
        lo = np.where(below, m, lo)
        hi = np.where(below, hi, m)
    out[idx] = 0.5 * (lo + hi)
    return out


def draw_subjects(truth):
    """Covariates, random effects and latent event times of every subject."""
    n = truth.n_subjects
    p = len(truth.covariates)
    x = np.zeros((n, p))
    b = np.zeros((n, 2))
    e = np.zeros(n)
    Q = np.asarray(truth.Q)
    w, V = np.linalg.eigh(Q)
    root = V * np.sqrt(np.clip(w, 0, None))
    for i in range(n):
        rc = subject_rng(truth.seed, i, _COV)
        for j, cov in enumerate(truth.covariates):
            if cov.get("dist", "normal") == "binary":
                x[i, j] = float(rc.random() < cov.get("p", 0.5))
            else:
                x[i, j] = cov.get("mean", 0.0) + cov.get("sd", 1.0) * rc.standard_normal()
        b[i] = root @ subject_rng(truth.seed, i, _RE).standard_normal(2)
        e[i] = subject_rng(truth.seed, i, _EVENT).standard_exponential()
    latent = invert_cumhaz(truth, x, b, e)
    return x, b, latent


def _censor_units(truth):
    return np.array([subject_rng(truth.seed, i, _CENSOR).random() for i in range(truth.n_subjects)])


def censoring_times(truth, latent):
    cfg = truth.censoring
    kind = cfg.get("kind", "none")
    u = _censor_units(truth)
    if kind == "none":
        return np.full(u.size, math.inf)
    if kind == "uniform":
        return u * cfg.get("upper", 1.0)
    expo = -np.log1p(-u)
    if kind == "exponential":
        rate = cfg["rate"]
        return expo / rate if rate > 0 else np.full(u.size, math.inf)
    if kind == "target":
        rate = calibrate_censoring(latent, expo, cfg["target"])
        return expo / rate if rate > 0 else np.full(u.size, math.inf)
    raise ValueError(f"unknown censoring kind {kind!r}")


def calibrate_censoring(latent, expo, target):
    """Exponential censoring rate giving a censored share of ``target`` on these latent times."""
    def share(rate):
        c = expo / rate if rate > 0 else np.full(expo.size, math.inf)
        return 1.0 - np.mean(latent <= np.minimum(c, 1.0))

    if share(0.0) >= target:
        return 0.0
    lo, hi = 0.0, 1.0
    while share(hi) < target:
        hi *= 2.0
        if hi > 1e8:
            return hi
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if share(mid) < target:
            lo = mid
        else:
            hi = mid
    return hi


def simulate(truth, return_draws=False):
    """Simulate a start-stop dataset under ``truth``.

    Measurements are taken at the grid times strictly before each subject's
    exit (event, censoring or the end of follow-up at 1).  Row ``j`` spans
    from measurement ``j`` to the next measurement or to the exit.
    """
    x, b, latent = draw_subjects(truth)
    cens = censoring_times(truth, latent)
    grid = np.asarray(truth.grid)
    sigma = math.sqrt(truth.sigma2)
    records = []
    draws = []
    for i in range(truth.n_subjects):
        draw = SubjectDraw(i + 1, x[i], b[i], float(latent[i]), float(cens[i]))
        draws.append(draw)
        exit_ = draw.exit
        times = grid[grid < exit_]
        if times.size == 0:
            continue
        m = trajectory(truth, x[i : i + 1], b[i : i + 1], times[None, :])[0]
        noise = subject_rng(truth.seed, i, _NOISE).standard_normal(times.size)
        y = m + sigma * noise
        stops = np.append(times[1:], exit_)
        for j, t in enumerate(times):
            row = {"id": i + 1, "tstart": float(t), "tstop": float(stops[j]),
                   "event": int(draw.event and j == times.size - 1), "y": float(y[j])}
            row.update({name: float(x[i, k]) for k, name in enumerate(truth.covariate_names)})
            records.append(row)
    columns = ["id", "tstart", "tstop", "event", "y"] + truth.covariate_names
    ds = Dataset(pd.DataFrame.from_records(records, columns=columns), truth.schema())
    return (ds, draws) if return_draws else ds


def oracle_cumhaz(truth, draw, t, tol=1e-9):
    """Cumulative hazard of one subject on ``[0, t]`` by adaptive trapezoid refinement.

    Written independently of the Gauss-Legendre machinery used for fitting.
    An interval is accepted once halving it changes its trapezoid estimate by
    less than its share of ``tol``; the refined estimate is kept.
    """
    if t <= 0:
        return 0.0
    x = np.asarray(draw.x, dtype=float)[None, :]
    b = np.asarray(draw.b, dtype=float)[None, :]

    def h(s):
        return np.exp(log_hazard(truth, x, b, np.asarray(s, dtype=float)[None, :])[0])

    breaks = [0.0, t]
    if truth.association == "lagged" and 0 < truth.lag < t:
        breaks.insert(1, truth.lag)
    lo = np.array(breaks[:-1])
    hi = np.array(breaks[1:])
    total = 0.0
    acc = []
    while lo.size:
        mid = 0.5 * (lo + hi)
        flo, fmid, fhi = h(lo), h(mid), h(hi)
        coarse = 0.5 * (hi - lo) * (flo + fhi)
        fine = 0.25 * (hi - lo) * (flo + 2 * fmid + fhi)
        ok = np.abs(fine - coarse) <= tol * (hi - lo) / t
        acc.append(fine[ok])
        lo, hi = np.concatenate([lo[~ok], mid[~ok]]), np.concatenate([mid[~ok], hi[~ok]])
    total = math.fsum(np.concatenate(acc).tolist())
    return total


def desk_scenario(seed=1, **changes):
    """The default desk-scale study: N=300, ten annual-style visits, about 20% events."""
    return SimTruth(seed=seed).with_(**changes) if changes else SimTruth(seed=seed)
