"""Convex QP with a diagonal Hessian, equality rows and a sign-split box certificate.

Problem::

    minimize    alpha @ h + 0.5 * h @ (hess * h)
    subject to  G @ h = 0
                h = h_plus - h_minus,  h_plus >= 0,  h_minus >= 0
                pos_a @ h_plus - pos_b @ h_minus + prior >= 0

With ``pos_a <= 0 <= pos_b`` the last three lines describe the set
``sum_i phi_i(h_i) <= prior`` where ``phi_i(t) = -pos_a_i * t`` for ``t >= 0``
and ``pos_b_i * |t|`` for ``t < 0``: a weighted, possibly asymmetric, l1
ball.  The solver runs ADMM on the splitting ``h = w`` (equality rows in
the ``h`` step, exact projection onto the ball in the ``w`` step, the
minimal sign split read off ``w``) and finishes with an active-set polish
that solves the reduced KKT system exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._accel import njit, select

PINV_RTOL = 1e-10


def _pinv_scaled(s):
    """Pseudo-inverse of a symmetric PSD matrix after symmetric diagonal scaling."""
    d = np.sqrt(np.clip(np.diag(s), 0.0, None))
    d[d == 0.0] = 1.0
    scaled = s / np.outer(d, d)
    vals, vecs = np.linalg.eigh(0.5 * (scaled + scaled.T))
    keep = vals > PINV_RTOL * max(vals[-1], 0.0)
    inv = (vecs[:, keep] / vals[keep]) @ vecs[:, keep].T
    return inv / np.outer(d, d)


class DenseRows:
    """Equality rows held as an explicit ``r x m`` matrix."""

    def __init__(self, a):
        self.a = np.atleast_2d(np.asarray(a, dtype=float))

    @property
    def shape(self):
        return self.a.shape

    def matvec(self, h):
        return self.a @ h

    def rmatvec(self, v):
        return self.a.T @ v

    def weighted_gram(self, w):
        return (self.a * w) @ self.a.T

    def to_dense(self):
        return self.a

    def gram_solver(self, w):
        s = self.weighted_gram(w)
        diag = np.diag(s)
        keep = diag > 1e-14 * max(diag.max(initial=0.0), 1e-300)
        inv = _pinv_scaled(s[np.ix_(keep, keep)])

        def solve(rhs):
            out = np.zeros(len(diag))
            out[keep] = inv @ rhs[keep]
            return out

        return solve


class KroneckerRows:
    """Rows ``(I_mx kron r_y^T)`` stacked over ``(r_x^T kron I_my)``.

    Acting on ``h = vec(H)`` (``H`` is ``m_y x m_x``, column-major) these are
    ``r_y^T H = 0`` and ``H r_x = 0``.  All products use the structure, so
    the ``(m_x + m_y) x m_x m_y`` matrix is never formed.
    """

    def __init__(self, r_x, r_y):
        self.r_x = np.asarray(r_x, dtype=float)
        self.r_y = np.asarray(r_y, dtype=float)
        self.m_x, self.m_y = len(self.r_x), len(self.r_y)

    @property
    def shape(self):
        return (self.m_x + self.m_y, self.m_x * self.m_y)

    def matvec(self, h):
        ht = h.reshape(self.m_x, self.m_y)
        return np.concatenate([ht @ self.r_y, ht.T @ self.r_x])

    def rmatvec(self, v):
        vx, vy = v[: self.m_x], v[self.m_x :]
        return (np.outer(vx, self.r_y) + np.outer(self.r_x, vy)).ravel()

    def _blocks(self, w):
        wt = w.reshape(self.m_x, self.m_y)
        xx = wt @ (self.r_y * self.r_y)
        yy = wt.T @ (self.r_x * self.r_x)
        xy = self.r_x[:, None] * wt * self.r_y[None, :]
        return xx, yy, xy

    def weighted_gram(self, w):
        xx, yy, xy = self._blocks(w)
        return np.block([[np.diag(xx), xy], [xy.T, np.diag(yy)]])

    def to_dense(self):
        return np.vstack(
            [np.kron(np.eye(self.m_x), self.r_y[None, :]), np.kron(self.r_x[None, :], np.eye(self.m_y))]
        )

    def gram_solver(self, w):
        # Block elimination of the diagonal half, pseudo-inverse on the smaller
        # half.  Rows whose weighted norm vanishes are exactly zero rows of the
        # Gram matrix and are dropped.
        xx, yy, xy = self._blocks(w)
        top = max(xx.max(initial=0.0), yy.max(initial=0.0), 1e-300)
        kx, ky = xx > 1e-14 * top, yy > 1e-14 * top
        a, c, b = xx[kx], yy[ky], xy[np.ix_(kx, ky)]
        mx = self.m_x
        reduce_x = a.size <= c.size
        if reduce_x:
            inv = _pinv_scaled(np.diag(a) - (b / c) @ b.T) if a.size else np.zeros((0, 0))
        else:
            inv = _pinv_scaled(np.diag(c) - (b.T / a) @ b) if c.size else np.zeros((0, 0))

        def solve(rhs):
            rx, ry = rhs[:mx][kx], rhs[mx:][ky]
            if reduce_x:
                nx = inv @ (rx - b @ (ry / c))
                ny = (ry - b.T @ nx) / c
            else:
                ny = inv @ (ry - b.T @ (rx / a))
                nx = (rx - b @ ny) / a
            out = np.zeros(mx + self.m_y)
            out[:mx][kx] = nx
            out[mx:][ky] = ny
            return out

        return solve


def as_rows(rows):
    if rows is None or isinstance(rows, (DenseRows, KroneckerRows)):
        return rows
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    return DenseRows(rows) if rows.shape[0] else None


@dataclass
class QuadraticProgram:
    linear: np.ndarray
    hess_diag: np.ndarray
    eq_rows: object = None
    pos_a: np.ndarray | None = None
    pos_b: np.ndarray | None = None
    prior: float = 1.0

    def __post_init__(self):
        self.linear = np.asarray(self.linear, dtype=float)
        self.hess_diag = np.asarray(self.hess_diag, dtype=float)
        self.eq_rows = as_rows(self.eq_rows)
        m = self.linear.shape[0]
        if self.hess_diag.shape != (m,):
            raise ValueError("hess_diag must match the length of linear")
        if not np.all(self.hess_diag > 0):
            raise ValueError("hess_diag must be strictly positive")
        if self.eq_rows is not None and self.eq_rows.shape[1] != m:
            raise ValueError("eq_rows column count must match the number of variables")
        if (self.pos_a is None) != (self.pos_b is None):
            raise ValueError("pos_a and pos_b must be given together")
        if self.pos_a is not None:
            self.pos_a = np.broadcast_to(np.asarray(self.pos_a, dtype=float), (m,)).copy()
            self.pos_b = np.broadcast_to(np.asarray(self.pos_b, dtype=float), (m,)).copy()
            if np.any(self.pos_a > 0) or np.any(self.pos_b < 0):
                raise ValueError("bounds must satisfy pos_a <= 0 <= pos_b")

    @property
    def n_vars(self):
        return self.linear.shape[0]

    def objective(self, h):
        return float(self.linear @ h + 0.5 * h @ (self.hess_diag * h))

    def certificate(self, h):
        """``pos_a @ h+ - pos_b @ h- + prior`` for the minimal split of ``h``."""
        hp, hm = np.maximum(h, 0.0), np.maximum(-h, 0.0)
        return float(self.pos_a @ hp - self.pos_b @ hm + self.prior)


@dataclass
class QpSolution:
    h: np.ndarray
    h_plus: np.ndarray
    h_minus: np.ndarray
    objective: float
    status: str  # "optimal" | "max_iter" | "infeasible"
    iterations: int
    primal_residual: float
    dual_residual: float
    polished: bool = False
    nu: np.ndarray | None = None
    mu: float = 0.0
    merit_history: list = field(default_factory=list)


# --- projection onto the weighted l1 ball ------------------------------------


@njit
def _project_ball_numba(v, cp, cm, radius):
    n = v.shape[0]
    total = 0.0
    for i in range(n):
        total += cp[i] * v[i] if v[i] > 0 else -cm[i] * v[i]
    if total <= radius:
        return v.copy(), 0.0
    tau = 0.0
    for _ in range(200):
        g = 0.0
        slope = 0.0
        for i in range(n):
            vi = v[i]
            if vi > 0:
                t = vi - tau * cp[i]
                if t > 0:
                    g += cp[i] * t
                    slope += cp[i] * cp[i]
            elif vi < 0:
                t = -vi - tau * cm[i]
                if t > 0:
                    g += cm[i] * t
                    slope += cm[i] * cm[i]
        if g - radius <= 1e-15 * max(radius, 1.0) or slope == 0.0:
            break
        tau += (g - radius) / slope
    out = np.empty(n)
    for i in range(n):
        vi = v[i]
        if vi > 0:
            t = vi - tau * cp[i]
            out[i] = t if t > 0 else 0.0
        else:
            t = vi + tau * cm[i]
            out[i] = t if t < 0 else 0.0
    return out, tau


def _project_ball_numpy(v, cp, cm, radius):
    pos = v > 0
    mag = np.where(pos, v, -v)
    c = np.where(pos, cp, cm)
    if c @ mag <= radius:
        return v.copy(), 0.0
    tau = 0.0
    for _ in range(200):
        t = mag - tau * c
        act = t > 0
        g = c[act] @ t[act]
        slope = c[act] @ c[act]
        if g - radius <= 1e-15 * max(radius, 1.0) or slope == 0.0:
            break
        tau += (g - radius) / slope
    t = np.maximum(mag - tau * c, 0.0)
    return np.where(pos, t, -t), tau


_project_ball = select(_project_ball_numba, _project_ball_numpy)


def project_weighted_l1(v, pos_a, pos_b, radius):
    """Euclidean projection of ``v`` onto ``{h : sum phi_i(h_i) <= radius}``.

    Returns the projection and the multiplier ``tau`` (zero when ``v`` is
    already inside).  Newton's method on the convex, decreasing,
    piecewise-linear map ``tau -> sum phi_i(prox(v_i))`` terminates in a
    handful of O(m) passes.
    """
    v = np.ascontiguousarray(v, dtype=float)
    cp = np.ascontiguousarray(-np.asarray(pos_a, dtype=float))
    cm = np.ascontiguousarray(np.asarray(pos_b, dtype=float))
    return _project_ball(v, cp, cm, float(radius))


# --- equality-constrained solves ----------------------------------------------


def _equality_solve(linear, w, rows, solver, refine=3, rhs=None, tol=1e-13):
    """Minimise ``linear @ h + 0.5 h @ (h / w)`` subject to ``rows @ h = rhs``.

    Returns ``(h, nu)`` with ``h = -w * (linear + rows^T nu)``.
    """
    h = -w * linear
    if rows is None:
        return h, None
    target = np.zeros(rows.shape[0]) if rhs is None else rhs
    nu = np.zeros(rows.shape[0])
    scale = max(np.abs(h).max(initial=0.0), 1e-300)
    for _ in range(1 + refine):
        res = rows.matvec(h) - target
        if np.abs(res).max(initial=0.0) <= tol * scale:
            break
        delta = solver(res)
        nu += delta
        h = h - w * rows.rmatvec(delta)
    return h, nu


def solve_equality_only(p: QuadraticProgram, tol=1e-9) -> QpSolution:
    """Exact KKT solve ignoring the positivity certificate."""
    w = 1.0 / p.hess_diag
    rows = p.eq_rows
    solver = rows.gram_solver(w) if rows is not None else None
    h, nu = _equality_solve(p.linear, w, rows, solver, refine=5)
    prim = float(np.abs(rows.matvec(h)).max(initial=0.0)) if rows is not None else 0.0
    return QpSolution(
        h=h,
        h_plus=np.maximum(h, 0.0),
        h_minus=np.maximum(-h, 0.0),
        objective=p.objective(h),
        status="optimal" if prim <= max(tol, 1e-12 * np.abs(h).max(initial=0.0)) else "max_iter",
        iterations=1,
        primal_residual=prim,
        dual_residual=0.0,
        polished=True,
        nu=nu,
    )


# --- full solve -----------------------------------------------------------------


def _kkt_report(p, h, nu, mu):
    """Primal and dual residuals of a candidate ``(h, nu, mu)``."""
    rows = p.eq_rows
    prim = float(np.abs(rows.matvec(h)).max(initial=0.0)) if rows is not None else 0.0
    cert = p.certificate(h) if p.pos_a is not None else 0.0
    prim = max(prim, max(-cert, 0.0))
    g = p.linear + p.hess_diag * h
    if rows is not None and nu is not None:
        g = g + rows.rmatvec(nu)
    if p.pos_a is None:
        return prim, float(np.abs(g).max(initial=0.0)), 0.0
    # stationarity: -g in mu * dphi(h)
    lo = np.where(h > 0, -p.pos_a, np.where(h < 0, -p.pos_b, -p.pos_b)) * mu
    hi = np.where(h > 0, -p.pos_a, np.where(h < 0, -p.pos_b, -p.pos_a)) * mu
    viol = np.maximum(np.maximum(lo + g, 0.0), np.maximum(-g - hi, 0.0))
    # complementary slackness of the certificate
    comp = abs(mu * cert)
    return prim, float(viol.max(initial=0.0)), comp


def _solve_pattern(p, sign, nu0, mu0):
    """Exact minimiser over the fixed sign pattern ``sign`` with the ball constraint active.

    On a small support the restricted rows are rank deficient and the
    multipliers are not unique; starting from ``(nu0, mu0)`` and applying
    only minimum-norm corrections keeps the null-space components of the
    estimate, which is what makes the zero coordinates dual feasible.
    """
    support = sign != 0
    c = np.where(sign > 0, -p.pos_a, -p.pos_b)  # phi restricted to the pattern is c @ h
    wgt = np.where(support, 1.0 / p.hess_diag, 0.0)
    lin = np.where(support, p.linear, 0.0)
    rows = p.eq_rows
    cw = c * wgt
    denom = c @ cw
    mu = float(mu0)
    if rows is not None:
        solver = rows.gram_solver(wgt)
        s_vec = rows.matvec(cw)
        xs = solver(s_vec)
        denom -= s_vec @ xs
        nu = np.zeros(rows.shape[0]) if nu0 is None else np.array(nu0, dtype=float)
        h = -wgt * (lin + rows.rmatvec(nu) + mu * c)
    else:
        nu = None
        h = -wgt * (lin + mu * c)
    if not denom > 0:
        return None
    for _ in range(5):
        res_c = c @ h - p.prior
        res_eq = rows.matvec(h) if rows is not None else np.zeros(0)
        if max(np.abs(res_eq).max(initial=0.0), abs(res_c)) <= 1e-15 * max(np.abs(h).max(), 1.0):
            break
        if rows is not None:
            e1 = solver(res_eq)
            dmu = (res_c - s_vec @ e1) / denom
            dnu = e1 - dmu * xs
            nu += dnu
            h -= wgt * (rows.rmatvec(dnu) + dmu * c)
        else:
            dmu = res_c / denom
            h -= wgt * dmu * c
        mu += dmu
    return h, nu, mu


def _polish(p, w_iter, tol, nu0=None, mu0=0.0, rounds=10):
    """Active-set refinement of the ADMM sign pattern, then an exact KKT check.

    Each round solves the pattern exactly, drops coordinates whose sign
    flipped, and adds zero coordinates whose dual bound is violated.
    Returns ``None`` when no certified solution is reached.
    """
    sign = np.sign(w_iter)
    nu, mu = nu0, mu0
    rows = p.eq_rows
    for _ in range(rounds):
        if not sign.any():
            return None
        got = _solve_pattern(p, sign, nu, mu)
        if got is None:
            return None
        h, nu, mu = got
        flipped = sign * h < -tol * max(1.0, np.abs(h).max())
        if flipped.any():
            sign[flipped] = 0.0
            continue
        if mu < -tol:
            return None
        mu = max(mu, 0.0)
        h = np.where(sign * h > 0, h, 0.0)
        g = p.linear + p.hess_diag * h
        if rows is not None:
            g = g + rows.rmatvec(nu)
        off = sign == 0
        go_neg = off & (g - mu * p.pos_b > tol)
        go_pos = off & (mu * p.pos_a - g > tol)
        if go_neg.any() or go_pos.any():
            sign[go_neg] = -1.0
            sign[go_pos] = 1.0
            continue
        prim, dual, comp = _kkt_report(p, h, nu, mu)
        if prim <= tol and dual <= tol and comp <= tol:
            return h, nu, mu, prim, dual
        return None
    return None


def solve(p: QuadraticProgram, tol=1e-8, max_iter=20000, rho=1.0, relax=1.6,
          adapt_every=25, polish_every=50, debug=False) -> QpSolution:
    """Solve the QP; KKT residuals are at most ``tol`` when ``status == "optimal"``.

    Without positivity bounds the problem reduces to the exact equality
    solve.  With them, an equality-only solution that already satisfies the
    certificate is optimal and returned directly.

    The cost is rescaled so that the largest Hessian entry is one before
    iterating; ``h`` does not depend on that scale, and the dual residual and
    multipliers are reported back in the caller's units.
    """
    scale = 1.0 / float(p.hess_diag.max())
    if scale == 1.0 or p.pos_a is None:
        return _solve_scaled(p, tol, max_iter, rho, relax, adapt_every, polish_every, debug)
    ps = QuadraticProgram(p.linear * scale, p.hess_diag * scale, p.eq_rows, p.pos_a, p.pos_b, p.prior)
    sol = _solve_scaled(ps, tol, max_iter, rho, relax, adapt_every, polish_every, debug)
    sol.objective = p.objective(sol.h)
    sol.dual_residual /= scale
    sol.mu /= scale
    if sol.nu is not None:
        sol.nu = sol.nu / scale
    return sol


def _solve_scaled(p, tol, max_iter, rho, relax, adapt_every, polish_every, debug):
    m = p.n_vars
    rows = p.eq_rows
    if p.pos_a is None:
        return solve_equality_only(p, tol)
    if p.prior < 0:
        zero = np.zeros(m)
        return QpSolution(zero, zero, zero, 0.0, "infeasible", 0, float(-p.prior), 0.0)

    eq = solve_equality_only(p, tol)
    if eq.status == "optimal" and p.certificate(eq.h) >= 0.0:
        eq.mu = 0.0
        return eq

    w = np.zeros(m)
    u = np.zeros(m)
    h = np.zeros(m)
    merit = []
    n_adapt = 0

    def setup(rho):
        wr = 1.0 / (p.hess_diag + rho)
        return wr, (rows.gram_solver(wr) if rows is not None else None)

    wr, solver = setup(rho)
    best = None
    tried = None
    it = 0
    prim_res = dual_res = np.inf
    for it in range(1, max_iter + 1):
        h, nu = _equality_solve(p.linear - rho * (w - u), wr, rows, solver, refine=1)
        hr = relax * h + (1.0 - relax) * w
        w_new, tau = project_weighted_l1(hr + u, p.pos_a, p.pos_b, p.prior)
        du = hr - w_new
        u_new = u + du
        if debug:
            cur = rho * (float((w_new - w) @ (w_new - w)) + float((u_new - u) @ (u_new - u)))
            prev = merit[-1] if merit else None
            # floor: rounding noise of the squared differences once the iterates have settled
            scale = max(np.abs(w_new).max(), np.abs(u_new).max(), 1.0)
            floor = rho * m * (1e-13 * scale) ** 2
            if prev is not None and cur > prev * (1.0 + 1e-9) + floor:
                raise AssertionError(f"merit increased at iteration {it}: {prev:.6e} -> {cur:.6e}")
            merit.append(cur)
        prim_res = float(np.abs(h - w_new).max())
        dual_res = rho * float(np.abs(w_new - w).max())
        w, u = w_new, u_new

        if it % polish_every == 0 or it == max_iter:
            pattern = np.sign(w)
            if tried is None or not np.array_equal(pattern, tried):
                tried = pattern
                pol = _polish(p, w, tol, nu, rho * tau)
                if pol is not None:
                    hp, nu, mu, pr, dr = pol
                    return QpSolution(
                        h=hp,
                        h_plus=np.maximum(hp, 0.0),
                        h_minus=np.maximum(-hp, 0.0),
                        objective=p.objective(hp),
                        status="optimal",
                        iterations=it,
                        primal_residual=pr,
                        dual_residual=dr,
                        polished=True,
                        nu=nu,
                        mu=mu,
                        merit_history=merit,
                    )
            if prim_res <= tol and dual_res <= tol:
                best = it
                break

        if it % adapt_every == 0 and n_adapt < 50:
            num = prim_res / max(np.abs(h).max(), np.abs(w).max(), 1e-300)
            den = dual_res / max(rho * np.abs(u).max(), np.abs(p.hess_diag * h).max(), np.abs(p.linear).max(), 1e-300)
            if num > 0 and den > 0:
                ratio = np.sqrt(num / den)
                if ratio > 5.0 or ratio < 0.2:
                    new_rho = float(np.clip(rho * ratio, 1e-12, 1e12))
                    u *= rho / new_rho
                    rho = new_rho
                    wr, solver = setup(rho)
                    n_adapt += 1
                    if debug:
                        merit.append(None)  # merit restarts after a penalty change

    status = "optimal" if best is not None else "max_iter"
    return QpSolution(
        h=w,
        h_plus=np.maximum(w, 0.0),
        h_minus=np.maximum(-w, 0.0),
        objective=p.objective(w),
        status=status,
        iterations=it,
        primal_residual=prim_res,
        dual_residual=dual_res,
        polished=False,
        nu=None,
        mu=0.0,
        merit_history=merit,
    )
