"""Vectorised observed-data likelihood of the joint model.

Everything here works on flat arrays: longitudinal observations, hazard
quadrature nodes (15-point Gauss-Legendre per piece between covariate jumps,
spline knots and lag kinks) and adaptive Gauss-Hermite nodes per subject.
"""

import math

import numpy as np
from scipy.special import logsumexp

from ._numerics import (
    bspline_basis,
    chol_from_params,
    chol_param_grad,
    gauss_hermite_grid,
    lagged_breaks,
    n_chol,
    params_from_chol,
    segment_nodes,
)
from .data import encode
from .lmm import random_design, time_powers

ASSOC_KINDS = ("value", "slope", "value_and_slope", "cumulative", "lagged")
LOG2PI = math.log(2.0 * math.pi)


def n_assoc(kind):
    return 2 if kind == "value_and_slope" else 1


class RowInfo:
    """Per-row arrays needed to evaluate trajectory functionals."""

    def __init__(self, frame, schema, lmm_spec, surv_covariates, sid):
        self.tstart = frame["tstart"].to_numpy(dtype=float)
        self.tstop = frame["tstop"].to_numpy(dtype=float)
        self.event = frame["event"].to_numpy(dtype=int)
        self.sid = sid
        self.cov_long = encode(frame, schema, lmm_spec.covariates)
        self.cov_surv = encode(frame, schema, surv_covariates)
        self.degree = lmm_spec.time_degree
        self.q = lmm_spec.q
        n = int(sid.max()) + 1 if sid.size else 0
        self.first = np.full(n, -1)
        self.last = np.full(n, -1)
        for r in range(sid.size - 1, -1, -1):
            self.first[sid[r]] = r
        for r in range(sid.size):
            self.last[sid[r]] = r
        # integral of the covariate path from 0 to each row's start; the first
        # row's covariates are carried back to time 0
        # a row starts a new covariate run unless it continues the previous
        # row of the same subject with identical covariates
        same = np.zeros(sid.size, dtype=bool)
        if sid.size > 1:
            same[1:] = ((sid[1:] == sid[:-1]) & (self.tstart[1:] == self.tstop[:-1])
                        & np.all(self.cov_long[1:] == self.cov_long[:-1], axis=1)
                        & np.all(self.cov_surv[1:] == self.cov_surv[:-1], axis=1))
        self.is_head = ~same
        self.cum_cov = np.zeros_like(self.cov_long)
        for i in range(n):
            a, b = self.first[i], self.last[i]
            acc = np.zeros(self.cov_long.shape[1])
            for r in range(a + 1, b + 1):
                piece_start = 0.0 if r - 1 == a else self.tstart[r - 1]
                acc = acc + self.cov_long[r - 1] * (self.tstart[r] - piece_start)
                self.cum_cov[r] = acc

    def row_at(self, sid, t):
        """Row of subject ``sid`` in force at time ``t`` (first row if before entry)."""
        out = np.empty(t.size, dtype=int)
        for i in np.unique(sid):
            sel = sid == i
            a, b = self.first[i], self.last[i]
            idx = np.searchsorted(self.tstart[a : b + 1], t[sel], side="right") - 1
            out[sel] = a + np.clip(idx, 0, b - a)
        return out

    def features(self, kind, s, row, lag=0.0):
        """Design of the trajectory functional(s) linking into the hazard.

        Returns ``(A, C)`` with shapes ``(M, n_assoc, p)`` and
        ``(M, n_assoc, q)`` such that the functional equals
        ``A @ beta + C @ b``.
        """
        s = np.asarray(s, dtype=float)
        p_cov = self.cov_long.shape[1]

        def value(t, r):
            return np.hstack([time_powers(t, self.degree), self.cov_long[r]]), random_design(t, self.q)

        def slope(t, r):
            return (np.hstack([time_powers(t, self.degree, "slope"), np.zeros((t.size, p_cov))]),
                    random_design(t, self.q, "slope"))

        if kind == "value":
            blocks = [value(s, row)]
        elif kind == "slope":
            blocks = [slope(s, row)]
        elif kind == "value_and_slope":
            blocks = [value(s, row), slope(s, row)]
        elif kind == "cumulative":
            cov_int = self.cum_cov[row] + self.cov_long[row] * (s - np.where(row == self.first[self.sid[row]], 0.0, self.tstart[row]))[:, None]
            blocks = [(np.hstack([time_powers(s, self.degree, "integral"), cov_int]),
                       random_design(s, self.q, "integral"))]
        elif kind == "lagged":
            sl = np.maximum(s - lag, 0.0)
            rl = self.row_at(self.sid[row], sl) if lag > 0 else row
            blocks = [value(sl, rl)]
        else:
            raise ValueError(f"unknown association kind {kind!r}")
        A = np.stack([b[0] for b in blocks], axis=1)
        C = np.stack([b[1] for b in blocks], axis=1)
        return A, C


def split_intervals(a, b, rows, rowinfo, knots_interior, kind, lag, keep=(), breaks=None):
    """Split ``[a_k, b_k]`` at spline knots, lag kinks and extra break points.

    Empty intervals are dropped unless their row is listed in ``keep``; those
    yield zero-weight nodes so that every subject owns at least one node.
    ``breaks`` optionally maps a subject index to additional cut points.
    """
    out_a, out_b, out_r = [], [], []
    for lo, hi, r in zip(a, b, rows):
        if hi <= lo:
            if r in keep:
                out_a.append(np.array([lo]))
                out_b.append(np.array([lo]))
                out_r.append(np.array([r]))
            continue
        cuts = knots_interior
        if kind == "lagged" and lag > 0:
            i = rowinfo.sid[r]
            sl = slice(rowinfo.first[i], rowinfo.last[i] + 1)
            starts = rowinfo.tstart[sl][rowinfo.is_head[sl]]
            cuts = np.concatenate([cuts, lagged_breaks(starts, lag)])
        if breaks is not None and rowinfo.sid[r] in breaks:
            cuts = np.concatenate([cuts, breaks[rowinfo.sid[r]]])
        inner = np.unique(cuts[(cuts > lo) & (cuts < hi)])
        edges = np.concatenate([[lo], inner, [hi]])
        out_a.append(edges[:-1])
        out_b.append(edges[1:])
        out_r.append(np.full(edges.size - 1, r))
    if not out_a:
        return np.empty(0), np.empty(0), np.empty(0, dtype=int)
    return np.concatenate(out_a), np.concatenate(out_b), np.concatenate(out_r)


class NodeSet:
    """Hazard quadrature nodes with everything needed for the log-hazard."""

    def __init__(self, s, w, row, group, rowinfo, knots, degree, kind, lag):
        self.s = s
        self.w = w
        self.row = row
        self.group = group
        self.B = bspline_basis(s, knots, degree) if s.size else np.zeros((0, len(knots) - degree - 1))
        self.Xs = rowinfo.cov_surv[row]
        self.A, self.C = rowinfo.features(kind, s, row, lag)

    @classmethod
    def for_intervals(cls, a, b, rows, group_of_row, rowinfo, knots, degree, kind, lag, keep=(), breaks=None):
        interior = knots[degree + 1 : -degree - 1]
        sa, sb, sr = split_intervals(a, b, rows, rowinfo, interior, kind, lag, keep, breaks)
        s, w, seg = segment_nodes(sa, sb)
        row = sr[seg]
        return cls(s, w, row, group_of_row(row, seg), rowinfo, knots, degree, kind, lag)


class JointLayout:
    """Arrays for the joint likelihood of a set of subjects."""

    def __init__(self, frame, schema, lmm_spec, surv_covariates, kind, lag, knots, degree, sid=None, breaks=None):
        if sid is None:
            ids = frame["id"].to_numpy()
            change = np.concatenate([[True], ids[1:] != ids[:-1]])
            sid = np.cumsum(change) - 1
        self.sid_rows = sid
        self.n = int(sid.max()) + 1
        self.kind = kind
        self.lag = float(lag)
        self.knots = knots
        self.degree = degree
        self.q = lmm_spec.q
        self.na = n_assoc(kind)
        ri = RowInfo(frame, schema, lmm_spec, surv_covariates, sid)
        self.rowinfo = ri
        # longitudinal part
        y = frame[lmm_spec.outcome].to_numpy(dtype=float)
        keep = ~np.isnan(y)
        self.y = y[keep]
        self.X = np.hstack([time_powers(ri.tstart, ri.degree), ri.cov_long])[keep]
        self.Z = random_design(ri.tstart, self.q)[keep]
        self.sid_y = sid[keep]
        self.n_obs = np.bincount(self.sid_y, minlength=self.n).astype(float)
        self.ZtZ = np.zeros((self.n, self.q, self.q))
        np.add.at(self.ZtZ, self.sid_y, np.einsum("jq,jr->jqr", self.Z, self.Z))
        # hazard nodes over each subject's follow-up, one interval per run of
        # constant covariates
        heads = np.flatnonzero(ri.is_head)
        run_stop = np.maximum.reduceat(ri.tstop, heads) if heads.size else np.empty(0)
        span = np.bincount(sid, weights=ri.tstop - ri.tstart, minlength=self.n)
        keep = set(heads[span[sid[heads]] <= 0].tolist())
        self.nodes = NodeSet.for_intervals(
            ri.tstart[heads], run_stop, heads, lambda row, seg: sid[row],
            ri, knots, degree, kind, lag, keep, breaks)
        order = np.argsort(self.nodes.group, kind="stable")
        if not np.all(order == np.arange(order.size)):
            raise AssertionError("hazard nodes must be grouped by subject")
        counts = np.bincount(self.nodes.group, minlength=self.n)
        if (counts == 0).any():
            raise ValueError("every subject needs follow-up of positive length")
        self.node_offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
        # event contributions
        last = ri.last
        self.delta = ri.event[last].astype(float)
        ev_rows = last[self.delta == 1]
        self.ev_sid = sid[ev_rows]
        self.ev_T = ri.tstop[ev_rows]
        self.ev_B = bspline_basis(self.ev_T, knots, degree) if ev_rows.size else np.zeros((0, len(knots) - degree - 1))
        self.ev_Xs = ri.cov_surv[ev_rows]
        self.ev_A, self.ev_C = ri.features(kind, self.ev_T, ev_rows, lag)
        self.p = self.X.shape[1]
        self.r = ri.cov_surv.shape[1]
        self.K = self.nodes.B.shape[1]


class ParamIndex:
    """Slices of the working parameter vector."""

    def __init__(self, p, q, r, na, K):
        sizes = [("beta", p), ("log_sigma", 1), ("chol", n_chol(q)), ("gamma", r), ("alpha", na), ("omega", K)]
        self.slices = {}
        start = 0
        for name, size in sizes:
            self.slices[name] = slice(start, start + size)
            start += size
        self.size = start
        self.q = q

    def unpack(self, theta):
        s = self.slices
        L = chol_from_params(theta[s["chol"]], self.q)
        return dict(
            beta=theta[s["beta"]],
            sigma2=math.exp(2.0 * theta[s["log_sigma"]][0]),
            L=L,
            Q=L @ L.T,
            gamma=theta[s["gamma"]],
            alpha=theta[s["alpha"]],
            omega=theta[s["omega"]],
        )

    @property
    def block(self):
        """Indices of (beta, gamma, alpha, omega), updated by Newton in the M-step."""
        s = self.slices
        return np.concatenate([np.arange(self.size)[s[k]] for k in ("beta", "gamma", "alpha", "omega")])


class QuadratureFailure(FloatingPointError):
    def __init__(self, subjects):
        self.subjects = list(subjects)
        super().__init__(f"non-finite likelihood contribution for subject(s) {self.subjects[:5]}")


class JointLikelihood:
    """Observed-data log-likelihood, Fisher-identity score and E-step moments."""

    def __init__(self, layout, n_gh=9):
        self.lay = layout
        self.n_gh = n_gh
        self.idx = ParamIndex(layout.p, layout.q, layout.r, layout.na, layout.K)
        self.z, self.logw = gauss_hermite_grid(n_gh, layout.q)

    # -- pieces that depend on theta but not on b -----------------------------
    def _linear_parts(self, P):
        lay = self.lay
        nd = lay.nodes
        alpha, beta = P["alpha"], P["beta"]
        eta0 = nd.B @ P["omega"] + nd.Xs @ P["gamma"] + np.einsum("map,p,a->m", nd.A, beta, alpha)
        c = np.einsum("maq,a->mq", nd.C, alpha)
        etaT = lay.ev_B @ P["omega"] + lay.ev_Xs @ P["gamma"] + np.einsum("map,p,a->m", lay.ev_A, beta, alpha)
        cT = np.einsum("maq,a->mq", lay.ev_C, alpha)
        r0 = lay.y - lay.X @ beta
        n = lay.n
        rr = np.bincount(lay.sid_y, weights=r0 * r0, minlength=n)
        Zr = np.zeros((n, lay.q))
        for j in range(lay.q):
            Zr[:, j] = np.bincount(lay.sid_y, weights=lay.Z[:, j] * r0, minlength=n)
        dT = np.zeros(n)
        cTn = np.zeros((n, lay.q))
        dT[lay.ev_sid] = etaT
        cTn[lay.ev_sid] = cT
        return eta0, c, dT, cTn, r0, rr, Zr

    def _reduce(self, values):
        return np.add.reduceat(values, self.lay.node_offsets, axis=0)

    def _log_g(self, b, P, parts, Qinv, logdetQ):
        """Unnormalised log posterior of b for every subject at ``b`` (n, q)."""
        lay = self.lay
        eta0, c, dT, cTn, _, rr, Zr = parts
        s2 = P["sigma2"]
        quad_long = rr - 2 * np.einsum("nq,nq->n", b, Zr) + np.einsum("nq,nqr,nr->n", b, lay.ZtZ, b)
        long = -0.5 * lay.n_obs * (LOG2PI + math.log(s2)) - 0.5 * quad_long / s2
        prior = -0.5 * np.einsum("nq,qr,nr->n", b, Qinv, b) - 0.5 * (lay.q * LOG2PI + logdetQ)
        eta = eta0 + np.einsum("mq,mq->m", c, b[lay.nodes.group])
        cum = self._reduce(lay.nodes.w * np.exp(eta))
        event = lay.delta * (dT + np.einsum("nq,nq->n", cTn, b))
        return long + prior + event - cum

    def modes(self, P, parts, b0=None, max_iter=60, tol=1e-10):
        """Posterior modes of b and the negative Hessian there (Newton)."""
        lay = self.lay
        nd = lay.nodes
        eta0, c, dT, cTn, _, rr, Zr = parts
        s2 = P["sigma2"]
        Qinv = np.linalg.inv(P["Q"])
        logdetQ = 2.0 * np.sum(np.log(np.diag(P["L"])))
        cc = np.einsum("mq,mr->mqr", c, c)
        if b0 is None:
            b = np.linalg.solve(lay.ZtZ / s2 + Qinv, (Zr / s2)[..., None])[..., 0]
        else:
            b = b0.copy()
        obj = self._log_g(b, P, parts, Qinv, logdetQ)
        active = np.ones(lay.n, dtype=bool)
        for _ in range(max_iter):
            e = nd.w * np.exp(eta0 + np.einsum("mq,mq->m", c, b[nd.group]))
            S1 = self._reduce(e[:, None] * c)
            S2 = self._reduce(e[:, None, None] * cc)
            grad = (Zr - np.einsum("nqr,nr->nq", lay.ZtZ, b)) / s2 + lay.delta[:, None] * cTn - S1 - b @ Qinv
            H = lay.ZtZ / s2 + S2 + Qinv
            step = np.linalg.solve(H, grad[..., None])[..., 0]
            step[~active] = 0.0
            t = np.ones(lay.n)
            for _ in range(40):
                cand = b + t[:, None] * step
                new = self._log_g(cand, P, parts, Qinv, logdetQ)
                bad = ~(new >= obj - 1e-12 * np.abs(obj)) & active
                if not bad.any():
                    break
                t[bad] *= 0.5
            else:
                new = np.where(bad, obj, new)
                cand[bad] = b[bad]
            moved = np.max(np.abs(cand - b), axis=1)
            b, obj = cand, new
            active = moved > tol * (1.0 + np.max(np.abs(b), axis=1))
            if not active.any():
                break
        e = nd.w * np.exp(eta0 + np.einsum("mq,mq->m", c, b[nd.group]))
        H = lay.ZtZ / s2 + self._reduce(e[:, None, None] * cc) + Qinv
        return b, H

    def evaluate(self, theta, want="loglik", b0=None):
        """Log-likelihood and, on request, score or E-step quantities.

        ``want`` is ``'loglik'``, ``'grad'`` or ``'estep'``.  Returns a dict.
        """
        lay = self.lay
        nd = lay.nodes
        P = self.idx.unpack(np.asarray(theta, dtype=float))
        parts = self._linear_parts(P)
        eta0, c, dT, cTn, r0, rr, Zr = parts
        with np.errstate(over="ignore", invalid="ignore"):
            bhat, H = self.modes(P, parts, b0)
            U = np.linalg.cholesky(H)
            Lb = np.swapaxes(np.linalg.inv(U), 1, 2)
            logdetL = -np.sum(np.log(np.diagonal(U, axis1=1, axis2=2)), axis=1)
            z = self.z
            q = lay.q
            root2 = math.sqrt(2.0)
            # b_ik = bhat_i + sqrt2 * Lb_i z_k
            bk = bhat[:, None, :] + root2 * np.einsum("nqr,kr->nkq", Lb, z)
            s2 = P["sigma2"]
            Qinv = np.linalg.inv(P["Q"])
            logdetQ = 2.0 * np.sum(np.log(np.diag(P["L"])))
            quad_long = (rr[:, None] - 2 * np.einsum("nkq,nq->nk", bk, Zr)
                         + np.einsum("nkq,nqr,nkr->nk", bk, lay.ZtZ, bk))
            logg = (-0.5 * lay.n_obs[:, None] * (LOG2PI + math.log(s2)) - 0.5 * quad_long / s2
                    - 0.5 * np.einsum("nkq,qr,nkr->nk", bk, Qinv, bk) - 0.5 * (q * LOG2PI + logdetQ)
                    + lay.delta[:, None] * (dT[:, None] + np.einsum("nq,nkq->nk", cTn, bk)))
            a = eta0 + np.einsum("mq,mq->m", c, bhat[nd.group])
            d = root2 * np.einsum("mq,mqr->mr", c, Lb[nd.group])
            expeta = nd.w[:, None] * np.exp(a[:, None] + d @ z.T)
            logg = logg - self._reduce(expeta)
            terms = self.logw[None, :] + logg
            per_subject = logsumexp(terms, axis=1) + 0.5 * q * math.log(2.0) + logdetL
        if not np.all(np.isfinite(per_subject)):
            raise QuadratureFailure(np.flatnonzero(~np.isfinite(per_subject)))
        out = {"loglik": math.fsum(per_subject.tolist()), "per_subject": per_subject, "bhat": bhat, "H": H}
        if want == "loglik":
            return out
        pi = np.exp(terms - logsumexp(terms, axis=1, keepdims=True))
        Eb = np.einsum("nk,nkq->nq", pi, bk)
        Ebb = np.einsum("nk,nkq,nkr->nqr", pi, bk, bk)
        E = expeta * pi[nd.group]
        e = E.sum(axis=1)
        Ez = E @ z
        LEz = root2 * np.einsum("mqr,mr->mq", Lb[nd.group], Ez)
        v = e[:, None] * bhat[nd.group] + LEz
        out.update(P=P, Eb=Eb, Ebb=Ebb, e=e, v=v, r0=r0, rr=rr, Zr=Zr, nodes=bk, weights=pi)
        out["grad"] = self._score(P, out)
        if want == "estep":
            zz = np.einsum("kq,kr->kqr", z, z).reshape(z.shape[0], -1)
            Ezz = (E @ zz).reshape(-1, q, q)
            Lg = Lb[nd.group]
            bg = bhat[nd.group]
            V = (e[:, None, None] * np.einsum("mq,mr->mqr", bg, bg)
                 + np.einsum("mq,mr->mqr", bg, LEz) + np.einsum("mq,mr->mqr", LEz, bg)
                 + 2.0 * np.einsum("mqs,mst,mrt->mqr", Lg, Ezz, Lg))
            out["V"] = V
        return out

    def _score(self, P, out):
        lay = self.lay
        nd = lay.nodes
        idx = self.idx
        s2 = P["sigma2"]
        alpha, beta = P["alpha"], P["beta"]
        Eb, Ebb, e, v = out["Eb"], out["Ebb"], out["e"], out["v"]
        r0, rr, Zr = out["r0"], out["rr"], out["Zr"]
        g = np.zeros(idx.size)
        s = idx.slices
        ev = lay.ev_sid
        # longitudinal
        resid = r0 - np.einsum("jq,jq->j", lay.Z, Eb[lay.sid_y])
        g_beta = lay.X.T @ resid / s2
        ERSS = rr - 2 * np.einsum("nq,nq->n", Eb, Zr) + np.einsum("nqr,nqr->n", lay.ZtZ, Ebb)
        g[s["log_sigma"]] = np.sum(-lay.n_obs + ERSS / s2)
        Qinv = np.linalg.inv(P["Q"])
        G = 0.5 * (Qinv @ Ebb.sum(axis=0) @ Qinv - lay.n * Qinv)
        g[s["chol"]] = chol_param_grad(G, P["L"])
        # survival
        Aalpha = np.einsum("map,a->mp", nd.A, alpha)
        ev_Aalpha = np.einsum("map,a->mp", lay.ev_A, alpha)
        g_beta = g_beta + ev_Aalpha.sum(axis=0) - e @ Aalpha
        g[s["beta"]] = g_beta
        g[s["gamma"]] = lay.ev_Xs.sum(axis=0) - e @ nd.Xs
        g[s["omega"]] = lay.ev_B.sum(axis=0) - e @ nd.B
        F_ev = np.einsum("map,p->ma", lay.ev_A, beta) + np.einsum("maq,mq->ma", lay.ev_C, Eb[ev])
        F_nodes = e[:, None] * np.einsum("map,p->ma", nd.A, beta) + np.einsum("maq,mq->ma", nd.C, v)
        g[s["alpha"]] = F_ev.sum(axis=0) - F_nodes.sum(axis=0)
        return g

    def mstep(self, theta, out):
        """One EM update: Newton step for (beta, gamma, alpha, omega), closed forms for sigma2 and Q."""
        lay = self.lay
        nd = lay.nodes
        idx = self.idx
        P = out["P"]
        s = idx.slices
        s2 = P["sigma2"]
        alpha, beta = P["alpha"], P["beta"]
        e, v, V = out["e"], out["v"], out["V"]
        # per-node k-independent part of d eta / d psi, psi = (beta, gamma, alpha, omega)
        Gm = np.hstack([np.einsum("map,a->mp", nd.A, alpha), nd.Xs,
                        np.einsum("map,p->ma", nd.A, beta), nd.B])
        p, r, na = lay.p, lay.r, lay.na
        a0 = p + r
        Cv = np.einsum("maq,mq->ma", nd.C, v)
        H = -(Gm * e[:, None]).T @ Gm
        cross = Gm.T @ Cv
        H[:, a0 : a0 + na] -= cross
        H[a0 : a0 + na, :] -= cross.T
        H[a0 : a0 + na, a0 : a0 + na] -= np.einsum("maq,mqr,mbr->ab", nd.C, V, nd.C)
        H[:p, :p] -= lay.X.T @ lay.X / s2
        full_grad = out["grad"]
        grad = full_grad[idx.block]
        try:
            step = -np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(-H, grad, rcond=None)[0]
        new = theta.copy()
        new[idx.block] = theta[idx.block] + step
        # closed forms at the new beta
        beta_new = new[s["beta"]]
        r0 = lay.y - lay.X @ beta_new
        rr = np.bincount(lay.sid_y, weights=r0 * r0, minlength=lay.n)
        Zr = np.zeros((lay.n, lay.q))
        for j in range(lay.q):
            Zr[:, j] = np.bincount(lay.sid_y, weights=lay.Z[:, j] * r0, minlength=lay.n)
        Eb, Ebb = out["Eb"], out["Ebb"]
        ERSS = rr - 2 * np.einsum("nq,nq->n", Eb, Zr) + np.einsum("nqr,nqr->n", lay.ZtZ, Ebb)
        sigma2 = max(ERSS.sum() / lay.y.size, 1e-12)
        new[s["log_sigma"]] = 0.5 * math.log(sigma2)
        Qn = Ebb.mean(axis=0)
        Qn = 0.5 * (Qn + Qn.T)
        try:
            new[s["chol"]] = params_from_chol(np.linalg.cholesky(Qn))
        except np.linalg.LinAlgError:
            pass
        return new

    def cumulative_hazard(self, theta, b):
        """Per-subject cumulative hazard over follow-up at given random effects."""
        lay = self.lay
        nd = lay.nodes
        P = self.idx.unpack(np.asarray(theta, dtype=float))
        eta0, c, *_ = self._linear_parts(P)
        eta = eta0 + np.einsum("mq,mq->m", c, np.asarray(b)[nd.group])
        return self._reduce(nd.w * np.exp(eta))

    def log_joint_density(self, theta, b):
        """``log p(y_i, T_i, delta_i, b_i)`` for every subject at ``b`` (n, q)."""
        P = self.idx.unpack(np.asarray(theta, dtype=float))
        parts = self._linear_parts(P)
        Qinv = np.linalg.inv(P["Q"])
        logdetQ = 2.0 * np.sum(np.log(np.diag(P["L"])))
        return self._log_g(np.asarray(b, dtype=float), P, parts, Qinv, logdetQ)

    def node_hazards(self, theta, draws):
        """Weighted hazard ``w * h`` at every node for per-subject draws (n, D, q); shape (M, D)."""
        nd = self.lay.nodes
        P = self.idx.unpack(np.asarray(theta, dtype=float))
        eta0, c, *_ = self._linear_parts(P)
        draws = np.asarray(draws, dtype=float)
        with np.errstate(over="ignore"):
            eta = eta0[:, None] + np.einsum("mq,mdq->md", c, draws[nd.group])
            return nd.w[:, None] * np.exp(eta)

    def log_joint_density_draws(self, theta, draws):
        """``log p(y_i, T_i, delta_i, b)`` at per-subject draws (n, D, q); shape (n, D)."""
        lay = self.lay
        P = self.idx.unpack(np.asarray(theta, dtype=float))
        parts = self._linear_parts(P)
        _, _, dT, cTn, _, rr, Zr = parts
        s2 = P["sigma2"]
        bk = np.asarray(draws, dtype=float)
        Qinv = np.linalg.inv(P["Q"])
        logdetQ = 2.0 * np.sum(np.log(np.diag(P["L"])))
        quad_long = (rr[:, None] - 2 * np.einsum("nkq,nq->nk", bk, Zr)
                     + np.einsum("nkq,nqr,nkr->nk", bk, lay.ZtZ, bk))
        logg = (-0.5 * lay.n_obs[:, None] * (LOG2PI + math.log(s2)) - 0.5 * quad_long / s2
                - 0.5 * np.einsum("nkq,qr,nkr->nk", bk, Qinv, bk) - 0.5 * (lay.q * LOG2PI + logdetQ)
                + lay.delta[:, None] * (dT[:, None] + np.einsum("nq,nkq->nk", cTn, bk)))
        return logg - self._reduce(self.node_hazards(theta, bk))
