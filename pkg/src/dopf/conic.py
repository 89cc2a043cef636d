"""Interior-point solver for convex quadratic cone programs.

Solves::

    minimize    1/2 x'Px + q'x
    subject to  Ax = b
                Gx + s = h,   s in K

where ``K`` is a product of nonnegative orthants and second-order cones
``{(t, v) : ||v||_2 <= t}``.  The method is a homogeneous primal-dual
interior-point iteration (the quadratic homogeneous embedding) with
Nesterov-Todd scaling and a Mehrotra predictor-corrector step.  The
equalities are carried as a zero cone.  The KKT system is factored
with a sparse LU.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import logging
import warnings

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import DimensionMismatch

log = logging.getLogger(__name__)


class Status(str, Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    MAX_ITERS = "max_iters"
    NUMERICAL_ERROR = "numerical_error"


@dataclass(frozen=True)
class NonNeg:
    dim: int


@dataclass(frozen=True)
class Soc:
    """Second-order cone ``s[0] >= ||s[1:]||``."""

    dim: int


Cone = NonNeg | Soc


def _as2d(M, rows: int, cols: int, name: str) -> np.ndarray:
    if M is None:
        return np.zeros((rows, cols))
    M = np.asarray(M.toarray() if hasattr(M, "toarray") else M, dtype=float)
    if M.size == 0:
        M = M.reshape(rows, cols)
    if M.ndim == 1 and rows == 1:
        M = M.reshape(1, -1)
    if M.shape != (rows, cols):
        raise DimensionMismatch(f"{name} has shape {M.shape}, expected {(rows, cols)}")
    return M


@dataclass
class ConicProblem:
    P: np.ndarray | None
    q: np.ndarray
    A: np.ndarray | None = None
    b: np.ndarray | None = None
    G: np.ndarray | None = None
    h: np.ndarray | None = None
    cones: Sequence[Cone] = ()

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float).ravel()
        n = self.q.size
        self.b = np.zeros(0) if self.b is None else np.asarray(self.b, dtype=float).ravel()
        self.h = np.zeros(0) if self.h is None else np.asarray(self.h, dtype=float).ravel()
        self.P = _as2d(self.P, n, n, "P")
        self.A = _as2d(self.A, self.b.size, n, "A")
        self.G = _as2d(self.G, self.h.size, n, "G")
        self.cones = tuple(self.cones)
        if sum(c.dim for c in self.cones) != self.h.size:
            raise DimensionMismatch("cone dimensions do not add up to the rows of G")
        if any(c.dim < 1 for c in self.cones):
            raise DimensionMismatch("cone dimensions must be positive")

    @property
    def n(self) -> int:
        return self.q.size

    def check(self) -> None:
        """Raise if ``P`` is not symmetric positive semidefinite (to 1e-9)."""
        if self.n == 0:
            return
        if not np.allclose(self.P, self.P.T, rtol=0, atol=1e-12 * max(1.0, np.abs(self.P).max())):
            raise ValueError("P is not symmetric")
        if np.any(self.P) and np.linalg.eigvalsh(self.P).min() < -1e-9:
            raise ValueError("P is not positive semidefinite")

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ self.P @ x + self.q @ x)


@dataclass
class Settings:
    tol: float = 1e-8
    tol_infeasible: float = 1e-8
    max_iters: int = 200
    equilibrate: bool = True
    ruiz_iters: int = 15
    static_reg: float = 1e-10
    refine_iters: int = 3
    max_step_fraction: float = 0.99
    polish: bool = True
    polish_iters: int = 6


@dataclass
class ConicSolution:
    x: np.ndarray
    s: np.ndarray
    y: np.ndarray  # equality multipliers
    z: np.ndarray  # cone multipliers
    status: Status
    primal_residual: float
    dual_residual: float
    gap: float
    iterations: int
    objective: float
    dual_objective: float

    @property
    def optimal(self) -> bool:
        return self.status is Status.OPTIMAL


# --------------------------------------------------------------------------
# cone algebra on the stacked cone vector (zero-cone rows excluded)


class _Cones:
    def __init__(self, cones: Sequence[Cone]):
        lin, by_dim, pos = [], {}, 0
        for c in cones:
            if isinstance(c, NonNeg):
                lin.extend(range(pos, pos + c.dim))
            else:
                by_dim.setdefault(c.dim, []).append(pos)
            pos += c.dim
        self.m = pos
        self.lin = np.array(lin, dtype=int)
        # second-order blocks grouped by dimension: one (blocks, dim) index array per group
        self.groups = [np.asarray(starts)[:, None] + np.arange(d)[None, :]
                       for d, starts in sorted(by_dim.items())]
        self.socs = sorted((a, d) for d, starts in by_dim.items() for a in starts)
        self.degree = len(lin) + len(self.socs)
        e = np.zeros(pos)
        e[self.lin] = 1.0
        for g in self.groups:
            e[g[:, 0]] = 1.0
        self.e = e
        rows = [self.lin] + [np.broadcast_to(g[:, :, None], g.shape + (g.shape[1],)).ravel()
                             for g in self.groups]
        cols = [self.lin] + [np.broadcast_to(g[:, None, :], g.shape + (g.shape[1],)).ravel()
                             for g in self.groups]
        self.hess_rows = np.concatenate(rows)
        self.hess_cols = np.concatenate(cols)

    def min_eig(self, u: np.ndarray) -> float:
        vals = [u[self.lin].min()] if self.lin.size else []
        for g in self.groups:
            U = u[g]
            vals.append((U[:, 0] - np.linalg.norm(U[:, 1:], axis=1)).min())
        return float(min(vals)) if vals else 1.0

    def violation(self, u: np.ndarray) -> list[float]:
        """Per-block distance outside the cone (0 when inside)."""
        return [max(0.0, float(np.linalg.norm(u[a + 1:a + d]) - u[a])) for a, d in self.socs]

    def circ(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        w = np.empty_like(u)
        w[self.lin] = u[self.lin] * v[self.lin]
        for g in self.groups:
            U, V = u[g], v[g]
            w[g[:, 0]] = np.einsum("ij,ij->i", U, V)
            w[g[:, 1:]] = U[:, :1] * V[:, 1:] + V[:, :1] * U[:, 1:]
        return w

    def arrow(self, u: np.ndarray):
        """Coordinates of the matrix ``v -> u o v`` as (rows, cols, values)."""
        rows, cols, vals = [self.lin], [self.lin], [u[self.lin]]
        for g in self.groups:
            head, tail = g[:, :1], g[:, 1:]
            U = u[g]
            rows += [np.broadcast_to(head, g.shape).ravel(), tail.ravel(), tail.ravel()]
            cols += [g.ravel(), np.broadcast_to(head, tail.shape).ravel(), tail.ravel()]
            vals += [U.ravel(), U[:, 1:].ravel(), np.broadcast_to(U[:, :1], tail.shape).ravel()]
        return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)

    def inv_circ(self, lam: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Solve ``lam o x = v`` for x."""
        x = np.empty_like(v)
        x[self.lin] = v[self.lin] / lam[self.lin]
        for g in self.groups:
            L, V = lam[g], v[g]
            l0, l1 = L[:, 0], L[:, 1:]
            nrm = np.linalg.norm(l1, axis=1)
            det = (l0 - nrm) * (l0 + nrm)
            x0 = (l0 * V[:, 0] - np.einsum("ij,ij->i", l1, V[:, 1:])) / det
            x[g[:, 0]] = x0
            x[g[:, 1:]] = (V[:, 1:] - x0[:, None] * l1) / l0[:, None]
        return x

    def max_step(self, u: np.ndarray, du: np.ndarray) -> float:
        alpha = np.inf
        if self.lin.size:
            d = du[self.lin]
            neg = d < 0
            if np.any(neg):
                alpha = min(alpha, float(np.min(-u[self.lin][neg] / d[neg])))
        for g in self.groups:
            alpha = min(alpha, float(_soc_steps(u[g], du[g]).min()))
        return alpha


def _soc_steps(U: np.ndarray, D: np.ndarray) -> np.ndarray:
    """Largest alpha per row with U + alpha*D in the second-order cone (U interior)."""
    u0, u1, d0, d1 = U[:, 0], U[:, 1:], D[:, 0], D[:, 1:]
    nu1 = np.linalg.norm(u1, axis=1)
    c = (u0 - nu1) * (u0 + nu1)
    a = d0 * d0 - np.einsum("ij,ij->i", d1, d1)
    b = 2.0 * (u0 * d0 - np.einsum("ij,ij->i", u1, d1))
    with np.errstate(divide="ignore", invalid="ignore"):
        alpha = np.where(d0 < 0, -u0 / d0, np.inf)
        linear = (a == 0.0) & (b < 0)
        alpha = np.where(linear, np.minimum(alpha, -c / b), alpha)
        disc = b * b - 4.0 * a * c
        # a < 0: exactly one positive root; a > 0: positive roots only when b < 0
        quad = (a != 0.0) & ((a < 0) | ((b < 0) & (disc >= 0)))
        root = 2.0 * c / (-b + np.sqrt(np.maximum(disc, 0.0)))
        alpha = np.where(quad, np.minimum(alpha, root), alpha)
    return alpha


class _Scaling:
    """Nesterov-Todd scaling ``W`` with ``W z = W^{-1} s = lam``; W is symmetric."""

    def __init__(self, cones: _Cones, s: np.ndarray, z: np.ndarray):
        self.cones = cones
        lin = cones.lin
        self.w_lin = np.sqrt(s[lin] / z[lin])
        self.blocks = []
        lam = np.empty_like(s)
        lam[lin] = np.sqrt(s[lin] * z[lin])
        for g in cones.groups:
            S, Z = s[g], z[g]
            d = g.shape[1]
            sn, zn = _jnorm(S), _jnorm(Z)
            sbar, zbar = S / sn[:, None], Z / zn[:, None]
            gamma = np.sqrt(np.maximum((1.0 + np.einsum("ij,ij->i", sbar, zbar)) / 2.0, 0.0))
            wbar = sbar.copy()
            wbar[:, 0] += zbar[:, 0]
            wbar[:, 1:] -= zbar[:, 1:]
            wbar /= 2.0 * gamma[:, None]
            eta = np.sqrt(sn / zn)
            J = -np.eye(d)
            J[0, 0] = 1.0
            v = wbar.copy()
            v[:, 0] += 1.0
            v /= np.sqrt(2.0 * (wbar[:, 0] + 1.0))[:, None]
            W = eta[:, None, None] * (2.0 * v[:, :, None] * v[:, None, :] - J)
            Jv = v.copy()
            Jv[:, 1:] *= -1
            Winv = (2.0 * Jv[:, :, None] * Jv[:, None, :] - J) / eta[:, None, None]
            self.blocks.append((g, W, Winv))
            lam[g] = np.einsum("bij,bj->bi", W, Z)
        self.lam = lam

    def mul(self, v: np.ndarray) -> np.ndarray:
        out = np.empty_like(v)
        lin = self.cones.lin
        out[lin] = self.w_lin * v[lin]
        for g, W, _ in self.blocks:
            out[g] = np.einsum("bij,bj->bi", W, v[g])
        return out

    def inv_mul(self, v: np.ndarray) -> np.ndarray:
        out = np.empty_like(v)
        lin = self.cones.lin
        out[lin] = v[lin] / self.w_lin
        for g, _, Winv in self.blocks:
            out[g] = np.einsum("bij,bj->bi", Winv, v[g])
        return out

    def hessian_values(self) -> np.ndarray:
        """Entries of ``W'W`` in the order of ``cones.hess_rows/hess_cols``."""
        parts = [self.w_lin**2]
        for _, W, _ in self.blocks:
            parts.append(np.einsum("bij,bjk->bik", W, W).ravel())
        return np.concatenate(parts)


def _jnorm(U: np.ndarray) -> np.ndarray:
    n1 = np.linalg.norm(U[:, 1:], axis=1)
    return np.sqrt(np.maximum((U[:, 0] - n1) * (U[:, 0] + n1), 1e-300))


# --------------------------------------------------------------------------
# equilibration


def _colmax(idx: np.ndarray, vals: np.ndarray, size: int) -> np.ndarray:
    out = np.zeros(size)
    np.maximum.at(out, idx, vals)
    return out


def _cost_norm(pdata: np.ndarray, q: np.ndarray) -> float:
    """Reciprocal of the largest cost coefficient (1 for a zero cost)."""
    big = max(np.abs(pdata).max(initial=0.0), np.abs(q).max(initial=0.0))
    return 1.0 / big if big > 0 else 1.0


def _ruiz(P: sp.csc_matrix, A: sp.csc_matrix, q: np.ndarray, n_zero: int, cones: _Cones, iters: int):
    n, rows = P.shape[0], A.shape[0]
    D = np.ones(n)
    E = np.ones(rows)
    Pc, Ac = P.tocoo(), A.tocoo()
    # normalise the cost first so the column scaling, and hence the iterates, ignore its magnitude
    c0 = _cost_norm(Pc.data, q)
    pv, av = c0 * np.abs(Pc.data), np.abs(Ac.data)
    for _ in range(iters):
        col = np.maximum(_colmax(Pc.col, pv, n), _colmax(Ac.col, av, n))
        row = _colmax(Ac.row, av, rows)
        col = np.where(col < 1e-4, 1.0, np.minimum(col, 1e4))
        row = np.where(row < 1e-4, 1.0, np.minimum(row, 1e4))
        dd = 1.0 / np.sqrt(col)
        ee = 1.0 / np.sqrt(row)
        for g in cones.groups:
            blk = n_zero + g
            ee[blk] = np.exp(np.mean(np.log(ee[blk]), axis=1))[:, None]
        pv = pv * dd[Pc.row] * dd[Pc.col]
        av = av * ee[Ac.row] * dd[Ac.col]
        D *= dd
        E *= ee
        if np.max(np.abs(1 - col), initial=0.0) < 1e-3 and np.max(np.abs(1 - row), initial=0.0) < 1e-3:
            break
    qs = c0 * D * q
    pnorm = _colmax(Pc.col, pv, n).mean() if n else 0.0
    scale = max(pnorm, np.abs(qs).max(initial=0.0))
    c = 1.0 / min(max(scale, 1e-4), 1e4) if scale > 0 else 1.0
    return D, E, c * c0


# --------------------------------------------------------------------------
# main iteration


def solve(problem: ConicProblem, settings: Settings | None = None) -> ConicSolution:
    """Solve ``problem``; never raises on numerical trouble, reports it in ``status``."""
    st = settings or Settings()
    problem.check()
    n, p, m = problem.n, problem.b.size, problem.h.size
    cones = _Cones(problem.cones)
    Abar = sp.csc_matrix(np.vstack([problem.A, problem.G]) if p + m else np.zeros((0, n)))
    bbar = np.concatenate([problem.b, problem.h])
    P0, q0 = sp.csc_matrix(problem.P), problem.q
    # termination is judged in units of the normalised cost, so scaling (P, q) leaves it unchanged
    cn = _cost_norm(P0.data, q0)

    if st.equilibrate and n:
        D, E, c = _ruiz(P0, Abar, q0, p, cones, st.ruiz_iters)
    else:
        D, E, c = np.ones(n), np.ones(p + m), 1.0
    P = (c * (sp.diags(D) @ P0 @ sp.diags(D))).tocsc()
    q = c * D * q0
    A = (sp.diags(E) @ Abar @ sp.diags(D)).tocsc()
    b = E * bbar
    cone_rows = slice(p, p + m)
    N = n + p + m

    def unscale(x, s, z, tau):
        xu = D * x / tau
        su = s / E[p:] / tau if m else np.zeros(0)
        zu = E * z / c / tau
        return xu, su, zu

    # fixed part of the KKT matrix [P A'; A -H] plus the static regularisation
    Pc, Ac = P.tocoo(), A.tocoo()
    delta = st.static_reg * max(1.0, np.abs(P.diagonal()).max(initial=0.0))
    diag = np.arange(N)
    reg = np.concatenate([np.full(n, delta), np.full(p + m, -delta)])
    k_rows = np.concatenate([Pc.row, Ac.col, n + Ac.row, diag, n + p + cones.hess_rows])
    k_cols = np.concatenate([Pc.col, n + Ac.row, Ac.col, diag, n + p + cones.hess_cols])
    k_fixed = np.concatenate([Pc.data, Ac.data, Ac.data, reg])

    def factor(hvals: np.ndarray):
        Kreg = sp.csc_matrix((np.concatenate([k_fixed, -hvals]), (k_rows, k_cols)), shape=(N, N))
        lu = spla.splu(Kreg, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.1)

        def ksolve(rhs):
            sol = lu.solve(rhs)
            for _ in range(st.refine_iters):
                res = rhs - (Kreg @ sol - reg * sol)
                if not np.all(np.isfinite(res)) or np.abs(res).max(initial=0.0) <= 1e-15 * max(1.0, np.abs(rhs).max(initial=0.0)):
                    break
                sol = sol + lu.solve(res)
            return sol[:n], sol[n:]

        return ksolve

    # initial point: [P A'; A -I][x; z] = [-q; b] on the cone rows, s = -z shifted into the cone
    eye_vals = (cones.hess_rows == cones.hess_cols).astype(float)
    ksolve = factor(eye_vals)
    x, zfull = ksolve(np.concatenate([-q, b]))
    s = -zfull[p:].copy()
    zc = zfull[p:].copy()
    if m:
        for vec in (s, zc):
            a = -cones.min_eig(vec)
            if a >= -1e-8:
                vec += (1.0 + max(a, 0.0)) * cones.e
    z = np.concatenate([zfull[:p], zc])
    tau, kappa = 1.0, 1.0

    def measure(xu, su, zu):
        sfu = np.concatenate([np.zeros(p), su])
        pobj = cn * (0.5 * xu @ P0 @ xu + q0 @ xu)
        dobj = cn * (-0.5 * xu @ P0 @ xu - bbar @ zu)
        pres = np.abs(Abar @ xu + sfu - bbar).max(initial=0.0) / (
            1.0 + np.abs(bbar).max(initial=0.0) + np.abs(xu).max(initial=0.0) + np.abs(sfu).max(initial=0.0))
        dres = cn * np.abs(P0 @ xu + Abar.T @ zu + q0).max(initial=0.0) / (
            1.0 + cn * np.abs(q0).max(initial=0.0) + np.abs(xu).max(initial=0.0) + cn * np.abs(zu).max(initial=0.0))
        gap = abs(pobj - dobj) / max(1.0, min(abs(pobj), abs(dobj)))
        return pres, dres, gap

    def kkt_residual(x, s, z):
        sfull = np.concatenate([np.zeros(p), s])
        return np.concatenate([P @ x + A.T @ z + q, A @ x + sfull - b, cones.circ(s, z[cone_rows])])

    def polish(x, s, z):
        """Newton on the optimality conditions with exact complementarity, started at the last iterate.

        The interior-point exit pins the minimizer only to about the square root of the gap when the
        objective is flat along the cone boundary; a few undamped Newton steps recover it to rounding.
        """
        eye = np.arange(m)
        fixed_r = np.concatenate([Pc.row, Ac.col, n + Ac.row, n + p + eye])
        fixed_c = np.concatenate([Pc.col, n + Ac.row, Ac.col, N + eye])
        fixed_v = np.concatenate([Pc.data, Ac.data, Ac.data, np.ones(m)])
        res = kkt_residual(x, s, z)
        best = np.abs(res).max()
        for _ in range(st.polish_iters):
            # d(s o z) = arrow(s) dz + arrow(z) ds
            ar, ac, av = cones.arrow(s)
            br, bc, bv = cones.arrow(z[cone_rows])
            J = sp.csc_matrix((np.concatenate([fixed_v, av, bv]),
                               (np.concatenate([fixed_r, N + ar, N + br]),
                                np.concatenate([fixed_c, n + p + ac, N + bc]))), shape=(N + m, N + m))
            with warnings.catch_warnings():
                warnings.simplefilter("error")
                step = spla.splu(J, permc_spec="MMD_AT_PLUS_A").solve(-res)
            xn, zn, sn = x + step[:n], z + step[n:N], s + step[N:]
            rn = kkt_residual(xn, sn, zn)
            worst = np.abs(rn).max()
            if not worst < best:
                break
            x, s, z, res, best = xn, sn, zn, rn, worst
        return x, s, z

    status = Status.MAX_ITERS
    it = 0
    pres = dres = gap = np.inf
    for it in range(st.max_iters + 1):
        # -- residuals and termination on the original data --
        Px = P @ x
        xPx = float(x @ Px)
        rx = Px + A.T @ z + q * tau
        sfull = np.concatenate([np.zeros(p), s])
        rz = A @ x + sfull - b * tau
        rtau = kappa + q @ x + b @ z + xPx / tau

        pres, dres, gap = measure(*unscale(x, s, z, tau))
        if not (np.isfinite(pres) and np.isfinite(dres) and np.isfinite(gap)):
            status = Status.NUMERICAL_ERROR
            break
        log.debug("it %3d  pres %.2e  dres %.2e  gap %.2e  tau %.2e  kappa %.2e", it, pres, dres, gap, tau, kappa)
        if pres <= st.tol and dres <= st.tol and gap <= st.tol:
            status = Status.OPTIMAL
            break
        if tau < kappa:
            xr, zr = D * x, E * z
            btz = bbar @ zr
            if btz < 0 and np.abs(Abar.T @ zr).max(initial=0.0) <= st.tol_infeasible * -btz:
                status = Status.INFEASIBLE
                break
            qtx = q0 @ xr
            sr = np.concatenate([np.zeros(p), s / E[p:]]) if m else np.zeros(p)
            if qtx < 0 and max(np.abs(P0 @ xr).max(initial=0.0),
                               np.abs(Abar @ xr + sr).max(initial=0.0)) <= st.tol_infeasible * -qtx:
                status = Status.UNBOUNDED
                break
        if it == st.max_iters:
            break

        # -- Newton system --
        mu = (s @ z[cone_rows] + tau * kappa) / (cones.degree + 1)
        try:
            W = _Scaling(cones, s, z[cone_rows])
            ksolve = factor(W.hessian_values())
        except (ValueError, RuntimeError, np.linalg.LinAlgError, ZeroDivisionError):
            status = Status.NUMERICAL_ERROR
            break
        lam = W.lam
        xi = x / tau
        qP = q + 2.0 * (P @ xi)
        xiPxi = xPx / tau**2
        x2, z2 = ksolve(np.concatenate([-q, b]))
        denom_const = qP @ x2 + b @ z2 - xiPxi

        def direction(dx, dz, dtau, ds, dkappa):
            lds = cones.inv_circ(lam, ds)
            rhs_z = -dz.copy()
            rhs_z[cone_rows] += W.mul(lds)
            x1, z1 = ksolve(np.concatenate([-dx, rhs_z]))
            denom = denom_const - kappa / tau
            dt = (-dtau + dkappa / tau - qP @ x1 - b @ z1) / denom
            ddx = x1 + dt * x2
            ddz = z1 + dt * z2
            dds = -W.mul(lds + W.mul(ddz[cone_rows]))
            dk = -(dkappa + kappa * dt) / tau
            return ddx, ddz, dds, dt, dk

        def step_length(dz, ds, dt, dk):
            alpha = min(cones.max_step(s, ds), cones.max_step(z[cone_rows], dz[cone_rows]))
            if dt < 0:
                alpha = min(alpha, -tau / dt)
            if dk < 0:
                alpha = min(alpha, -kappa / dk)
            return alpha

        # affine (predictor)
        dxa, dza, dsa, dta, dka = direction(rx, rz, rtau, cones.circ(lam, lam), tau * kappa)
        alpha_a = min(1.0, step_length(dza, dsa, dta, dka))
        sigma = (1.0 - alpha_a) ** 3
        # combined (corrector)
        eta = cones.circ(W.inv_mul(dsa), W.mul(dza[cone_rows]))
        ds = cones.circ(lam, lam) + eta - sigma * mu * cones.e
        dkap = tau * kappa + dta * dka - sigma * mu
        dx, dz, dsv, dt, dk = direction((1 - sigma) * rx, (1 - sigma) * rz, (1 - sigma) * rtau, ds, dkap)
        alpha = min(1.0, st.max_step_fraction * step_length(dz, dsv, dt, dk))
        if not np.isfinite(alpha) or alpha < 1e-12:
            status = Status.NUMERICAL_ERROR
            break
        x = x + alpha * dx
        z = z + alpha * dz
        s = s + alpha * dsv
        tau = tau + alpha * dt
        kappa = kappa + alpha * dk

    xu, su, zu = unscale(x, s, z, tau)
    if status is Status.OPTIMAL and st.polish and m:
        try:
            cand = unscale(*polish(x / tau, s / tau, z / tau), 1.0)
        except (ValueError, RuntimeError, np.linalg.LinAlgError, ZeroDivisionError, RuntimeWarning):
            cand = None
        if cand is not None:
            scale = 1.0 + max(np.abs(cand[1]).max(), np.abs(cand[2][p:]).max())
            inside = min(cones.min_eig(cand[1]), cones.min_eig(cand[2][p:])) >= -1e-12 * scale
            checked = measure(*cand)
            if inside and max(checked) <= st.tol:
                xu, su, zu = cand
                pres, dres, gap = checked
    if status in (Status.INFEASIBLE, Status.UNBOUNDED):
        # certificates are returned unnormalised by tau
        xu, su, zu = unscale(x, s, z, 1.0)
    return ConicSolution(
        x=xu, s=su, y=zu[:p], z=zu[p:], status=status,
        primal_residual=float(pres), dual_residual=float(dres), gap=float(gap), iterations=it,
        objective=problem.objective(xu), dual_objective=float(-0.5 * xu @ P0 @ xu - bbar @ zu),
    )


# --------------------------------------------------------------------------
# residual audit


@dataclass
class ResidualReport:
    equality_residual: float
    cone_violation: list[float] = field(default_factory=list)
    objective: float = 0.0

    @property
    def max_violation(self) -> float:
        return max([self.equality_residual, *self.cone_violation], default=0.0)


def validate(problem: ConicProblem, x: np.ndarray) -> ResidualReport:
    """Equality residual, per-cone-block violation of ``h - Gx`` and the objective at ``x``."""
    x = np.asarray(x, dtype=float).ravel()
    if x.size != problem.n:
        raise DimensionMismatch(f"candidate has {x.size} entries, problem has {problem.n} variables")
    eq = float(np.abs(problem.A @ x - problem.b).max(initial=0.0))
    s = problem.h - problem.G @ x
    viol, pos = [], 0
    for c in problem.cones:
        blk = s[pos:pos + c.dim]
        if isinstance(c, NonNeg):
            viol.append(float(max(0.0, -blk.min())))
        else:
            viol.append(float(max(0.0, np.linalg.norm(blk[1:]) - blk[0])))
        pos += c.dim
    return ResidualReport(eq, viol, problem.objective(x))


def dump(problem: ConicProblem, path) -> None:
    """Write the problem as plain-text coordinate listings, one section per matrix."""
    lines = [f"% conic problem n={problem.n} eq={problem.b.size} cone_rows={problem.h.size}"]
    lines.append("% cones " + " ".join(
        f"{'l' if isinstance(c, NonNeg) else 'q'}{c.dim}" for c in problem.cones))
    for name, M in (("P", problem.P), ("A", problem.A), ("G", problem.G)):
        rows, cols = np.nonzero(M)
        lines.append(f"%% {name} {M.shape[0]} {M.shape[1]} {rows.size}")
        lines.extend(f"{i + 1} {j + 1} {M[i, j]!r}" for i, j in zip(rows, cols))
    for name, v in (("q", problem.q), ("b", problem.b), ("h", problem.h)):
        lines.append(f"%% {name} {v.size}")
        lines.extend(repr(float(val)) for val in v)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
