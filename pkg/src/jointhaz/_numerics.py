"""Quadrature rules, spline bases and small linear-algebra helpers."""

import math
from functools import lru_cache

import numpy as np
from scipy.interpolate import BSpline

GL_NODES = 15


@lru_cache(maxsize=None)
def gauss_legendre(n=GL_NODES):
    """Nodes and weights of the ``n``-point Gauss-Legendre rule on [-1, 1]."""
    x, w = np.polynomial.legendre.leggauss(n)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


@lru_cache(maxsize=None)
def gauss_hermite_grid(n, dim):
    """Tensor-product Gauss-Hermite rule for weight ``exp(-|z|^2)``.

    Returns ``(z, logw)`` where ``z`` has shape ``(n**dim, dim)`` and
    ``logw = log(w) + |z|^2`` is the log of the weight to use against an
    integrand that is *not* divided by the Gaussian kernel.
    """
    x, w = np.polynomial.hermite.hermgauss(n)
    if dim == 0:
        z = np.zeros((1, 0))
        logw = np.zeros(1)
    else:
        grids = np.meshgrid(*([x] * dim), indexing="ij")
        z = np.stack([g.ravel() for g in grids], axis=1)
        wgrids = np.meshgrid(*([w] * dim), indexing="ij")
        logw = sum(np.log(g.ravel()) for g in wgrids) + np.sum(z**2, axis=1)
    z.setflags(write=False)
    logw.setflags(write=False)
    return z, logw


def segment_nodes(a, b, n=GL_NODES):
    """Map Gauss-Legendre nodes onto each interval ``[a_k, b_k]``.

    Returns flat arrays ``(s, w, seg)`` with ``n`` nodes per interval; ``seg``
    is the index of the interval each node belongs to.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    x, w = gauss_legendre(n)
    half = 0.5 * (b - a)
    mid = 0.5 * (b + a)
    s = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    ws = (half[:, None] * w[None, :]).ravel()
    seg = np.repeat(np.arange(a.size), n)
    return s, ws, seg


def bspline_knots(event_times, upper, degree=3, n_interior=5):
    """Full knot vector with interior knots at event-time quantiles.

    Boundary knots sit at 0 and ``upper`` with multiplicity ``degree + 1``.
    Tied quantiles are spread so the interior knots stay strictly increasing.
    """
    event_times = np.asarray(event_times, dtype=float)
    if n_interior > 0:
        probs = np.arange(1, n_interior + 1) / (n_interior + 1)
        if event_times.size:
            interior = np.quantile(event_times, probs)
        else:
            interior = probs * upper
        interior = np.clip(interior, 0.0, upper)
        # keep interior knots strictly inside (0, upper) and increasing
        eps = 1e-6 * upper
        lo, hi = eps, upper - eps
        interior = np.clip(interior, lo, hi)
        for k in range(1, interior.size):
            if interior[k] <= interior[k - 1] + eps:
                interior[k] = interior[k - 1] + eps
        if interior[-1] >= hi:
            interior = np.linspace(lo, hi, n_interior + 2)[1:-1]
    else:
        interior = np.empty(0)
    return np.concatenate([np.zeros(degree + 1), interior, np.full(degree + 1, upper)])


def bspline_basis(t, knots, degree=3):
    """Dense B-spline design matrix; points outside the boundary are clamped."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    lo, hi = knots[degree], knots[-degree - 1]
    t = np.clip(t, lo, hi)
    return BSpline.design_matrix(t, knots, degree).toarray()


def n_chol(q):
    return q * (q + 1) // 2


def chol_from_params(theta, q):
    """Lower-triangular factor with log-diagonal, packed row by row."""
    L = np.zeros((q, q))
    k = 0
    for i in range(q):
        for j in range(i + 1):
            L[i, j] = math.exp(theta[k]) if i == j else theta[k]
            k += 1
    return L


def params_from_chol(L):
    q = L.shape[0]
    out = []
    for i in range(q):
        for j in range(i + 1):
            out.append(math.log(L[i, j]) if i == j else L[i, j])
    return np.array(out)


def chol_param_grad(G, L):
    """Chain rule from ``d f / d Q`` (symmetric ``G``) to the packed factor."""
    q = L.shape[0]
    dL = 2.0 * G @ L
    out = []
    for i in range(q):
        for j in range(i + 1):
            out.append(dL[i, j] * L[i, j] if i == j else dL[i, j])
    return np.array(out)


def safe_cholesky(Q, jitter=0.0):
    """Cholesky of a covariance matrix, nudging to PD when needed."""
    Q = 0.5 * (Q + Q.T)
    q = Q.shape[0]
    if q == 0:
        return np.zeros((0, 0))
    bump = jitter
    for _ in range(20):
        try:
            return np.linalg.cholesky(Q + bump * np.eye(q))
        except np.linalg.LinAlgError:
            bump = max(1e-10, 10 * bump) * max(1.0, np.abs(np.diag(Q)).max())
    raise np.linalg.LinAlgError("covariance matrix is not positive definite")


def fsum_rows(values):
    """Order-independent, compensated total of per-subject contributions."""
    return math.fsum(np.asarray(values, dtype=float).ravel().tolist())


def hessian_from_gradient(grad, theta, rel_step=1e-5):
    """Central-difference Hessian of a function given its gradient."""
    theta = np.asarray(theta, dtype=float)
    P = theta.size
    H = np.empty((P, P))
    for j in range(P):
        h = rel_step * (1.0 + abs(theta[j]))
        tp = theta.copy()
        tm = theta.copy()
        tp[j] += h
        tm[j] -= h
        H[:, j] = (grad(tp) - grad(tm)) / (2.0 * h)
    return 0.5 * (H + H.T)


def lagged_breaks(row_starts, lag):
    """Kink points of a lagged trajectory functional inside a subject's span."""
    if lag <= 0:
        return np.empty(0)
    return np.concatenate([[lag], np.asarray(row_starts, dtype=float) + lag])
