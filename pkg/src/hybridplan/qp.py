"""Dense operator-splitting QP solver for small embedded problems.

Solves

    minimize    0.5 x'Px + q'x
    subject to  l <= Ax <= u

with the ADMM iteration used by OSQP (reduced KKT form, over-relaxation,
per-constraint step sizes, adaptive rho), Ruiz equilibration and an
active-set polishing step that brings the result to machine precision.

The matrices P and A are fixed when a :class:`DenseQP` is built so that the
factorization can be shared across many right-hand sides: ``solve`` accepts
a single ``q`` of shape ``(n,)`` or a batch of shape ``(k, n)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lu_factor, lu_solve, qr
from scipy.optimize import nnls

INF = 1e20


class QPError(RuntimeError):
    """Raised when the solver produces non-finite iterates."""


@dataclass(frozen=True)
class QPSettings:
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    eps_abs: float = 1e-5
    eps_rel: float = 1e-5
    max_iter: int = 4000
    check_every: int = 10
    adaptive_rho: bool = True
    adaptive_rho_tolerance: float = 5.0
    scaling_iters: int = 10
    polish: bool = True
    polish_delta: float = 1e-9
    polish_refine: int = 3
    # try polishing as soon as both ADMM residuals drop below this
    polish_early: float = 1e-3


@dataclass
class QPSolution:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    objective: np.ndarray | float
    iterations: int
    primal_residual: np.ndarray | float
    dual_residual: np.ndarray | float
    converged: bool
    polished: np.ndarray | bool = field(default=False)


def _inf_norm_rows(a):
    return np.max(np.abs(a), axis=-1) if a.shape[-1] else np.zeros(a.shape[:-1])


class DenseQP:
    """A QP with fixed ``P`` and ``A``; ``q``, ``l`` and ``u`` vary per solve."""

    def __init__(self, P, A, settings: QPSettings | None = None):
        self.settings = settings or QPSettings()
        P = np.asarray(P, dtype=float)
        A = np.asarray(A, dtype=float)
        if A.ndim != 2 or P.shape != (A.shape[1], A.shape[1]):
            raise ValueError(f"inconsistent shapes P{P.shape} A{A.shape}")
        self.n = P.shape[0]
        self.m = A.shape[0]
        self.P = 0.5 * (P + P.T)
        self.A = A
        self._equilibrate()
        self._rho_scalar = self.settings.rho
        self._warm = None

    # -- scaling -------------------------------------------------------
    def _equilibrate(self):
        n, m = self.n, self.m
        D = np.ones(n)
        E = np.ones(m)
        Ps = self.P.copy()
        As = self.A.copy()
        for _ in range(self.settings.scaling_iters):
            col = np.maximum(np.max(np.abs(Ps), axis=0), np.max(np.abs(As), axis=0) if m else 0.0)
            col = np.where(col < 1e-4, 1.0, col)
            dD = 1.0 / np.sqrt(col)
            if m:
                row = np.max(np.abs(As), axis=1)
                row = np.where(row < 1e-4, 1.0, row)
                dE = 1.0 / np.sqrt(row)
            else:
                dE = np.ones(0)
            Ps = dD[:, None] * Ps * dD[None, :]
            As = dE[:, None] * As * dD[None, :]
            D *= dD
            E *= dE
        pnorm = np.mean(np.max(np.abs(Ps), axis=0))
        c = 1.0 / pnorm if pnorm > 1e-4 else 1.0
        self._D, self._E, self._c = D, E, c
        self._Ps = c * Ps
        self._As = As

    def _factor(self, rho_vec):
        K = self._Ps + self.settings.sigma * np.eye(self.n) + self._As.T @ (rho_vec[:, None] * self._As)
        self._Kinv = np.linalg.inv(K)

    def _rho_vector(self, ls, us):
        rho = np.full(ls.shape[-1], self._rho_scalar)
        if ls.ndim == 2:
            loose = np.all((ls < -INF / 10) & (us > INF / 10), axis=0)
            eq = np.all(np.abs(us - ls) < 1e-12, axis=0)
        else:
            loose = (ls < -INF / 10) & (us > INF / 10)
            eq = np.abs(us - ls) < 1e-12
        rho[loose] = 1e-6
        rho[eq] = 1e3 * self._rho_scalar
        return rho

    # -- main entry ----------------------------------------------------
    def solve(self, q, l, u, warm_start=None) -> QPSolution:
        """Solve for one or a batch of linear costs.

        ``warm_start`` may be a previous :class:`QPSolution` (or ``(x, y)``)
        of matching shape; otherwise the last solution of this instance is
        reused when shapes agree.
        """
        st = self.settings
        q = np.asarray(q, dtype=float)
        single = q.ndim == 1
        Q = np.atleast_2d(q)
        k = Q.shape[0]
        L = np.broadcast_to(np.clip(np.asarray(l, dtype=float), -INF, INF), (k, self.m)).copy()
        U = np.broadcast_to(np.clip(np.asarray(u, dtype=float), -INF, INF), (k, self.m)).copy()
        if np.any(L > U + 1e-12):
            raise ValueError("lower bound exceeds upper bound")

        D, E, c = self._D, self._E, self._c
        Ps, As = self._Ps, self._As
        qs = c * Q * D
        ls = np.where(L > -INF / 10, L * E, -INF)
        us = np.where(U < INF / 10, U * E, INF)

        x = np.zeros((k, self.n))
        y = np.zeros((k, self.m))
        if warm_start is None and self._warm is not None and self._warm[0].shape == x.shape:
            warm_start = self._warm
        if warm_start is not None:
            wx, wy = (warm_start.x, warm_start.y) if isinstance(warm_start, QPSolution) else warm_start
            wx = np.atleast_2d(wx)
            wy = np.atleast_2d(wy)
            if wx.shape == x.shape and wy.shape == y.shape:
                x = wx / D
                y = wy * c / E
        z = np.clip(x @ As.T, ls, us)

        rho = self._rho_vector(ls, us)
        self._factor(rho)
        sigma, alpha = st.sigma, st.alpha
        converged = False
        it = 0
        rp = rd = np.full(k, np.inf)
        AsT = np.ascontiguousarray(As.T)
        one_m_alpha = 1.0 - alpha
        while it < st.max_iter:
            it += 1
            rhs = sigma * x - qs + (rho * z - y) @ As
            xt = rhs @ self._Kinv
            zt = xt @ AsT
            x = alpha * xt + one_m_alpha * x
            zr = alpha * zt + one_m_alpha * z
            z_new = np.minimum(np.maximum(zr + y / rho, ls), us)
            y = y + rho * (zr - z_new)
            z = z_new
            if it % st.check_every == 0 or it == st.max_iter:
                if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
                    raise QPError("non-finite ADMM iterate")
                Ax = x @ As.T
                Px = x @ Ps
                Aty = y @ As
                # residuals in the unscaled space
                rp = _inf_norm_rows((Ax - z) / E)
                rd = _inf_norm_rows((Px + qs + Aty) / D) / c
                ep = st.eps_abs + st.eps_rel * np.maximum(_inf_norm_rows(Ax / E), _inf_norm_rows(z / E))
                ed = st.eps_abs + st.eps_rel * np.maximum.reduce(
                    [_inf_norm_rows(Px / D), _inf_norm_rows(Aty / D), _inf_norm_rows(qs / D)]) / c
                if np.all(rp <= ep) and np.all(rd <= ed):
                    converged = True
                    break
                if st.polish and self.m and np.all(rp < st.polish_early) and np.all(rd < st.polish_early):
                    early = self._polish_all(Q, L, U, x * D, y * E / c, z / E, rp, rd, strict=True)
                    if early is not None:
                        return self._finish(single, Q, *early, it, True)
                if st.adaptive_rho and self.m:
                    num = np.max(rp / np.maximum(np.maximum(_inf_norm_rows(Ax / E), _inf_norm_rows(z / E)), 1e-10))
                    den = np.max(rd * c / np.maximum(np.maximum.reduce(
                        [_inf_norm_rows(Px / D), _inf_norm_rows(Aty / D), _inf_norm_rows(qs / D)]), 1e-10))
                    ratio = np.sqrt(num / max(den, 1e-10))
                    new_rho = float(np.clip(self._rho_scalar * ratio, 1e-6, 1e6))
                    if new_rho > self._rho_scalar * st.adaptive_rho_tolerance or \
                            new_rho < self._rho_scalar / st.adaptive_rho_tolerance:
                        self._rho_scalar = new_rho
                        rho = self._rho_vector(ls, us)
                        self._factor(rho)

        X, Y, Z = x * D, y * E / c, z / E
        polished = np.zeros(k, dtype=bool)
        if st.polish and self.m:
            X, Y, Z, rp, rd, polished = self._polish_all(Q, L, U, X, Y, Z, rp, rd, strict=False)
            converged = converged or bool(np.all(rp < 1e-7) and np.all(rd < 1e-7))
        return self._finish(single, Q, X, Y, Z, rp, rd, polished, it, converged)

    def _polish_all(self, Q, L, U, X, Y, Z, rp, rd, strict):
        """Polish every problem of the batch.

        With ``strict`` the call succeeds only when all problems polish to
        near machine precision (returns None otherwise); without it each
        polished point replaces the ADMM point only when it is no worse.
        """
        X, Y, Z = X.copy(), Y.copy(), Z.copy()
        rp, rd = np.array(rp, dtype=float), np.array(rd, dtype=float)
        polished = np.zeros(len(Q), dtype=bool)
        for i in range(len(Q)):
            res = self._polish(Q[i], L[i], U[i], X[i], Y[i], Z[i])
            if res is None:
                if strict:
                    return None
                continue
            px, py, prp, prd = res
            scale = 1.0 + np.max(np.abs(Q[i]))
            if strict:
                if prp > 1e-9 * scale or prd > 1e-9 * scale:
                    return None
            elif not (prp <= max(rp[i], 1e-9) * 1.0001 + 1e-12 and prd <= max(rd[i], 1e-9) * 1.0001 + 1e-12):
                continue
            X[i], Y[i] = px, py
            Z[i] = np.clip(self.A @ px, L[i], U[i])
            rp[i], rd[i] = prp, prd
            polished[i] = True
        return X, Y, Z, rp, rd, polished

    def _finish(self, single, Q, X, Y, Z, rp, rd, polished, it, converged):
        obj = 0.5 * np.einsum("ki,ij,kj->k", X, self.P, X) + np.einsum("ki,ki->k", Q, X)
        self._warm = (X.copy(), Y.copy())
        if single:
            return QPSolution(X[0], Y[0], Z[0], float(obj[0]), it, float(rp[0]), float(rd[0]),
                              bool(converged or polished[0]), bool(polished[0]))
        return QPSolution(X, Y, Z, obj, it, rp, rd, bool(converged or polished.all()), polished)

    def _polish(self, q, l, u, x, y, z):
        st = self.settings
        A, P = self.A, self.P
        lower = (z - l < -y) & (l > -INF / 10)
        upper = (u - z < y) & (u < INF / 10)
        both = lower & upper
        upper &= ~both
        lower |= both
        act = lower | upper
        lower0, upper0 = lower.copy(), upper.copy()
        idx = np.flatnonzero(act)
        if len(idx):
            # keep a linearly independent subset of the active rows
            _, Rq, piv = qr(A[idx].T, mode="economic", pivoting=True)
            diag = np.abs(np.diag(Rq))
            rank = int(np.sum(diag > 1e-10 * max(diag[0], 1.0))) if diag.size else 0
            keep = np.zeros(self.m, dtype=bool)
            keep[idx[np.sort(piv[:rank])]] = True
            lower &= keep
            upper &= keep
            act = keep
        Aa = A[act]
        b = np.where(lower, l, u)[act]
        na = Aa.shape[0]
        n = self.n
        K = np.zeros((n + na, n + na))
        K[:n, :n] = P
        K[:n, n:] = Aa.T
        K[n:, :n] = Aa
        Kreg = K.copy()
        Kreg[:n, :n] += st.polish_delta * np.eye(n)
        Kreg[n:, n:] -= st.polish_delta * np.eye(na)
        rhs = np.concatenate([-q, b])
        try:
            lu = lu_factor(Kreg, check_finite=False)
        except (np.linalg.LinAlgError, ValueError):
            return None
        sol = lu_solve(lu, rhs, check_finite=False)
        for _ in range(st.polish_refine):
            sol = sol + lu_solve(lu, rhs - K @ sol, check_finite=False)
        if not np.all(np.isfinite(sol)):
            return None
        px = sol[:n]
        py = np.zeros(self.m)
        py[act] = sol[n:]
        eq = np.abs(u - l) < 1e-12
        # multipliers must carry the sign of their active side
        if np.any(py[lower & ~eq] > 1e-8) or np.any(py[upper] < -1e-8):
            # degenerate active set: redistribute the multipliers over all
            # active rows with the right signs
            py = self._signed_multipliers(px, q, lower0, upper0, eq)
            if py is None:
                return None
        Ax = A @ px
        prp = float(np.max(np.maximum(l - Ax, 0.0) + np.maximum(Ax - u, 0.0))) if self.m else 0.0
        prd = float(np.max(np.abs(P @ px + q + A.T @ py)))
        return px, py, prp, prd

    def _signed_multipliers(self, x, q, lower, upper, eq):
        """Nonnegative-least-squares multipliers on the given active rows."""
        rows = np.flatnonzero(lower | upper)
        if not len(rows):
            return None
        sign = np.where(upper[rows], 1.0, -1.0)
        cols = [self.A[rows].T * sign]
        free = rows[eq[rows]]
        if len(free):
            cols.append(-self.A[free].T * np.where(upper[free], 1.0, -1.0))
        w, _ = nnls(np.hstack(cols), -(self.P @ x + q))
        y = np.zeros(self.m)
        y[rows] = sign * w[:len(rows)]
        if len(free):
            y[free] -= np.where(upper[free], 1.0, -1.0) * w[len(rows):]
        return y


def solve_qp(P, q, A, l, u, settings: QPSettings | None = None, warm_start=None) -> QPSolution:
    """One-shot convenience wrapper around :class:`DenseQP`."""
    return DenseQP(P, A, settings).solve(q, l, u, warm_start=warm_start)


@dataclass(frozen=True)
class IPMSettings:
    tol: float = 1e-9
    # returned as converged when the best iterate reaches this level
    acceptable_tol: float = 1e-7
    max_iter: int = 60
    step_fraction: float = 0.99


def solve_qp_ipm(P, q, A, l, u, settings: IPMSettings | None = None) -> QPSolution:
    """Mehrotra predictor-corrector interior point method for the same QP form.

    Meant for small dense problems whose scaling slows the ADMM iteration
    down (large linear penalties or many binding rate limits).  Rows with
    ``l == u`` are kept as equalities; one-sided rows use only their finite
    side.  Multipliers follow the ADMM convention (positive when the upper
    side is active).  ``q`` may be a batch ``(k, n)`` sharing ``P``, ``A``
    and the bounds; each problem stops moving once it has converged.
    """
    st = settings or IPMSettings()
    P = np.asarray(P, dtype=float)
    q = np.asarray(q, dtype=float)
    single = q.ndim == 1
    Q = np.atleast_2d(q)
    k, n = Q.shape
    A = np.asarray(A, dtype=float).reshape(-1, n)
    l = np.clip(np.asarray(l, dtype=float), -INF, INF)
    u = np.clip(np.asarray(u, dtype=float), -INF, INF)
    if np.any(l > u + 1e-12):
        raise ValueError("lower bound exceeds upper bound")
    m = A.shape[0]
    eq = np.abs(u - l) < 1e-12
    up = (u < INF / 10) & ~eq
    lo = (l > -INF / 10) & ~eq
    G = np.vstack([A[up], -A[lo]])
    h = np.concatenate([u[up], -l[lo]])
    E, d = A[eq], l[eq]
    mi, me = len(h), len(d)

    # least-squares start: solve with the slacks penalized, then shift the
    # slacks and multipliers into the positive orthant
    H0 = P + G.T @ G
    r0 = -Q + G.T @ h
    try:
        if me:
            K0 = np.block([[H0, E.T], [E, np.zeros((me, me))]])
            rhs0 = np.hstack([r0, np.broadcast_to(d, (k, me))])
            sol0 = np.linalg.lstsq(K0, rhs0.T, rcond=None)[0].T
            x, y = sol0[:, :n], sol0[:, n:]
        else:
            x, y = np.linalg.lstsq(H0, r0.T, rcond=None)[0].T, np.zeros((k, 0))
    except np.linalg.LinAlgError as exc:
        raise QPError(f"interior point start failed: {exc}") from exc

    def shift_positive(v):
        low = -np.min(v, axis=1, initial=0.0)
        return v + np.where(low >= 0, 1.0 + low, 0.0)[:, None]
    s_hat = h - x @ G.T
    s = shift_positive(s_hat)
    z = shift_positive(-s_hat)
    qn = 1.0 + np.max(np.abs(Q), axis=1, initial=0.0)
    hn = 1.0 + np.max(np.abs(h), initial=0.0) + np.max(np.abs(d), initial=0.0)

    def kkt_factor(w):
        # the predictor and the corrector share this matrix
        H = P + (G.T[None, :, :] * w[:, None, :]) @ G
        if me:
            K = np.zeros((k, n + me, n + me))
            K[:, :n, :n] = H
            K[:, :n, n:] = E.T
            K[:, n:, :n] = E
        else:
            K = H
        return K

    def newton(K, rd, rp, re, rc, w):
        rhs = -rd - (w * rp - rc / s) @ G
        b = np.hstack([rhs, -re]) if me else rhs
        sol = np.linalg.solve(K, b[..., None])[..., 0]
        dx, dy = sol[:, :n], sol[:, n:]
        dz = w * (dx @ G.T + rp) - rc / s
        ds = (-rc - s * dz) / z
        return dx, dy, dz, ds

    def max_step(ds, dz):
        # largest step in (0, 1] keeping s and z positive
        v, dv = np.hstack([s, z]), np.hstack([ds, dz])
        ratio = np.where(dv < 0, v / np.maximum(-dv, 1e-300), np.inf)
        return np.minimum(1.0, np.min(ratio, axis=1, initial=np.inf))

    done = np.zeros(k, dtype=bool)
    it = 0
    best_score = np.full(k, np.inf)
    best_x, best_y, best_z = x.copy(), y.copy(), z.copy()
    best_rp, best_rd = np.full(k, np.inf), np.full(k, np.inf)
    try:
        for it in range(1, st.max_iter + 1):
            rd = x @ P + Q + z @ G + y @ E
            rp = x @ G.T + s - h
            re = x @ E.T - d
            gap = np.sum(s * z, axis=1)
            mu = gap / mi if mi else np.zeros(k)
            rd_norm = np.max(np.abs(rd), axis=1, initial=0.0)
            rp_norm = np.max(np.abs(np.hstack([rp, re])), axis=1, initial=0.0)
            obj = np.abs(np.sum((0.5 * (x @ P) + Q) * x, axis=1))
            score = np.maximum.reduce([rd_norm / qn, rp_norm / hn, gap / (1.0 + obj)])
            better = score < best_score
            if better.any():
                best_score = np.where(better, score, best_score)
                best_x[better], best_y[better], best_z[better] = x[better], y[better], z[better]
                best_rp, best_rd = np.where(better, rp_norm, best_rp), np.where(better, rd_norm, best_rd)
            done |= score <= st.tol
            if done.all():
                break
            w = z / s
            lus = kkt_factor(w)
            # predictor
            dx, dy, dz, ds = newton(lus, rd, rp, re, s * z, w)
            a = max_step(ds, dz)
            if mi:
                with np.errstate(divide="ignore", invalid="ignore"):
                    ratio = np.einsum("ki,ki->k", s + a[:, None] * ds, z + a[:, None] * dz) / mi / mu
                sigma = np.where(mu > 0, np.nan_to_num(ratio) ** 3, 0.0)
            else:
                sigma = np.zeros(k)
            # corrector
            rc = s * z + ds * dz - (sigma * mu)[:, None]
            dx, dy, dz, ds = newton(lus, rd, rp, re, rc, w)
            a = np.where(done, 0.0, np.minimum(st.step_fraction * max_step(ds, dz), 1.0))[:, None]
            x, y, z, s = x + a * dx, y + a * dy, z + a * dz, s + a * ds
    except np.linalg.LinAlgError as exc:
        raise QPError(f"interior point step failed: {exc}") from exc
    converged = done | (best_score <= st.acceptable_tol)
    x, y, z = best_x, best_y, best_z
    if not np.all(np.isfinite(x)):
        raise QPError("non-finite interior point iterate")
    yy = np.zeros((k, m))
    k_up = int(up.sum())
    yy[:, up] += z[:, :k_up]
    yy[:, lo] -= z[:, k_up:]
    yy[:, eq] = y
    Ax = x @ A.T
    obj = 0.5 * np.einsum("ki,ij,kj->k", x, P, x) + np.einsum("ki,ki->k", Q, x)
    Z = np.clip(Ax, l, u)
    if single:
        return QPSolution(x[0], yy[0], Z[0], float(obj[0]), it, float(best_rp[0]), float(best_rd[0]),
                          bool(converged[0]), False)
    return QPSolution(x, yy, Z, obj, it, best_rp, best_rd, bool(converged.all()), np.zeros(k, dtype=bool))
