"""Tracking MPC with reference-generic terminal ingredients.

Problems are transcribed by direct multiple shooting and solved by a
Gauss-Newton SQP. Every cost term is written as a residual, so the QP
Hessian is ``2 J'J``. Subproblems go to quadprog's dense dual active-set
solver. A filter line search globalizes the iteration; with the default
budget of one iteration per sampling instant the scheme behaves like a
real-time iteration.
"""

from __future__ import annotations

import csv
import enum
import json
import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import quadprog
from scipy import sparse

from .certify import ConstraintRows, constraint_rows
from .model import QuasiLPVModel, ReferenceTrajectory
from .synthesis import TerminalIngredients

log = logging.getLogger(__name__)


class MPCError(RuntimeError):
    pass


class Infeasible(MPCError):
    pass


class NonFiniteIterate(MPCError):
    pass


class EmptyTightenedSet(MPCError):
    pass


class ConfigError(ValueError):
    pass


class Scheme(str, enum.Enum):
    QINF = "QINF"
    TEC = "TEC"
    UC = "UC"
    ROBUST = "ROBUST"
    PERIODIC = "PERIODIC"


@dataclass
class MPCConfig:
    """Controller settings.

    ``tightening`` holds the per-step, per-row fractions ``eps_{j,k}``
    (shape (N+1, rows)) used by the robust scheme; ``alpha`` defaults to the
    certified value stored in the ingredients. For the periodic scheme
    ``output`` maps references (k, n+m) to outputs (k, p) and ``period`` is
    the length of the artificial reference.
    """

    N: int
    scheme: Scheme = Scheme.QINF
    Q: np.ndarray | None = None
    R: np.ndarray | None = None
    ingredients: TerminalIngredients | None = None
    alpha: float | None = None
    max_iter: int = 1
    tol: float = 1e-9
    feas_tol: float = 1e-9
    line_search: bool = True
    tightening: np.ndarray | None = None
    alpha_w: float | None = None
    period: int | None = None
    output: Callable[[np.ndarray], np.ndarray] | None = None
    output_weight: float = 1.0
    regularization: float = 1e-10
    rows: ConstraintRows | None = None

    def __post_init__(self):
        self.scheme = Scheme(self.scheme)

    def validate(self, model: QuasiLPVModel):
        if self.N < 1:
            raise ConfigError("horizon N must be at least 1")
        if self.max_iter < 1:
            raise ConfigError("max_iter must be at least 1")
        if self.scheme in (Scheme.QINF, Scheme.ROBUST, Scheme.PERIODIC) and self.ingredients is None:
            raise ConfigError(f"scheme {self.scheme.value} needs terminal ingredients")
        if self.scheme in (Scheme.QINF, Scheme.ROBUST, Scheme.PERIODIC) and self.terminal_alpha is None:
            raise ConfigError(f"scheme {self.scheme.value} needs a terminal set size")
        if self.scheme == Scheme.ROBUST and self.tightening is None:
            raise ConfigError("robust scheme needs a tightening schedule")
        if self.scheme == Scheme.PERIODIC and (self.period is None or self.period < 1 or self.output is None):
            raise ConfigError("periodic scheme needs a period >= 1 and an output map")
        if self.tightening is not None and np.asarray(self.tightening).shape[0] < self.N + 1:
            raise ConfigError("tightening schedule shorter than the horizon")
        if self.tightening is not None and np.any(np.asarray(self.tightening)[: self.N + 1] >= 1.0):
            raise EmptyTightenedSet("tightening removes the whole constraint set")

    @property
    def terminal_alpha(self) -> float | None:
        if self.alpha_w is not None:
            return self.alpha_w
        if self.alpha is not None:
            return self.alpha
        return None if self.ingredients is None else self.ingredients.alpha

    def weights(self, model: QuasiLPVModel):
        Q = self.Q if self.Q is not None else (self.ingredients.Q if self.ingredients is not None else np.eye(model.n))
        R = self.R if self.R is not None else (self.ingredients.R if self.ingredients is not None else np.eye(model.m))
        return np.atleast_2d(np.asarray(Q, float)), np.atleast_2d(np.asarray(R, float))


def tighten(rows: ConstraintRows, schedule, N: int) -> list[ConstraintRows]:
    """Constraint rows ``Z_k`` for k = 0..N from a fraction schedule (rows scaled about the centre)."""
    schedule = np.asarray(schedule, float)
    if schedule.ndim == 1:
        schedule = schedule[:, None]
    if np.any(schedule[: N + 1] >= 1.0):
        raise EmptyTightenedSet("tightening removes the whole constraint set")
    return [rows.tightened(schedule[k]) for k in range(N + 1)]


def scalar_schedule(eps: float, rho: float, N: int) -> np.ndarray:
    k = np.arange(N + 1)
    return eps * (k.astype(float) if rho == 1.0 else (1.0 - rho**k) / (1.0 - rho))


# --------------------------------------------------------------------------
# solution containers


@dataclass
class MPCSolution:
    x: np.ndarray
    u: np.ndarray
    value: float
    status: str
    iterations: int
    violation: float
    step_norm: float
    reference: np.ndarray | None = None
    solve_time: float = 0.0

    @property
    def converged(self) -> bool:
        return self.status == "converged"


def _chol_upper(P):
    return np.linalg.cholesky(0.5 * (P + P.T)).T


class _Problem:
    """Multiple-shooting transcription for one sampling instant."""

    def __init__(self, cfg: MPCConfig, model: QuasiLPVModel, x_t, ref, y_e=None):
        self.cfg, self.model = cfg, model
        self.n, self.m, self.N = model.n, model.m, cfg.N
        self.nz = model.nz
        self.x_t = np.asarray(x_t, float)
        self.Q, self.R = cfg.weights(model)
        self.Qh, self.Rh = _chol_upper(self.Q), _chol_upper(self.R)
        self.periodic = cfg.scheme == Scheme.PERIODIC
        self.T = cfg.period if self.periodic else 0
        self.ref = None if self.periodic else np.asarray(ref, float)
        self.y_e = None if y_e is None else np.atleast_2d(np.asarray(y_e, float))
        if not self.periodic and self.ref.shape[0] < self.N + 1:
            raise ConfigError(f"reference window has {self.ref.shape[0]} rows, need N+1={self.N + 1}")
        rows = cfg.rows if cfg.rows is not None else constraint_rows(model)
        if cfg.tightening is not None:
            self.rows = tighten(rows, cfg.tightening, self.N)
        else:
            self.rows = [rows] * (self.N + 1)
        self.alpha = cfg.terminal_alpha
        self.nx = (self.N + 1) * self.n
        self.nu = self.N * self.m
        self.size = self.nx + self.nu + self.T * self.nz
        self.P_N = None

    # -- layout -----------------------------------------------------------

    def ix(self, k):
        return slice(k * self.n, (k + 1) * self.n)

    def iu(self, k):
        return slice(self.nx + k * self.m, self.nx + (k + 1) * self.m)

    def _ir_start(self, j):
        return self.nx + self.nu + (np.asarray(j) % self.T) * self.nz

    def split(self, z):
        X = z[: self.nx].reshape(self.N + 1, self.n)
        U = z[self.nx:self.nx + self.nu].reshape(self.N, self.m)
        Rv = z[self.nx + self.nu:].reshape(self.T, self.nz) if self.periodic else None
        return X, U, Rv

    def pack(self, X, U, Rv=None):
        parts = [np.asarray(X, float).ravel(), np.asarray(U, float).ravel()]
        if self.periodic:
            parts.append(np.asarray(Rv, float).ravel())
        return np.concatenate(parts)

    def references(self, z):
        """Reference rows r(0..N) seen by the horizon."""
        if not self.periodic:
            return self.ref[: self.N + 1]
        _, _, Rv = self.split(z)
        return Rv[np.arange(self.N + 1) % self.T]

    def freeze_terminal(self, z):
        """Evaluate P_f at the current terminal reference; constant within one QP."""
        if self.cfg.ingredients is None or self.cfg.scheme in (Scheme.UC, Scheme.TEC):
            self.P_N = None
            return
        rN = self.references(z)[self.N]
        P, _, _ = self.cfg.ingredients.evaluate(rN)
        self.P_N = P
        self.Ph_N = _chol_upper(P)

    # -- residuals ----------------------------------------------------------

    def residuals(self, z, jac=True):
        n, m, N = self.n, self.m, self.N
        X, U, Rv = self.split(z)
        refs = self.references(z)
        ex = X[:N] - refs[:N, :n]
        eu = U - refs[:N, n:]
        res = [np.concatenate([ex @ self.Qh.T, eu @ self.Rh.T], axis=1).ravel()]
        J = _Triplets(self.size)
        if jac:
            k = np.arange(N)
            rx, ru = k * (n + m), k * (n + m) + n
            J.batch(rx, k * n, self.Qh)
            J.batch(ru, self.nx + k * m, self.Rh)
            if self.periodic:
                s = self._ir_start(k)
                J.batch(rx, s, -self.Qh)
                J.batch(ru, s + n, -self.Rh)
        row = N * (n + m)
        if self.P_N is not None:
            e = X[N] - refs[N][:n]
            res.append(self.Ph_N @ e)
            if jac:
                J.block(row, N * n, self.Ph_N)
                if self.periodic:
                    J.block(row, self._ir_start(N), -self.Ph_N)
            row += n
        if self.periodic:
            w = np.sqrt(self.cfg.output_weight)
            hv = np.atleast_2d(self.cfg.output(Rv))
            p = hv.shape[1]
            res.append(w * (hv - self.y_e[: self.T]).ravel())
            if jac:
                j = np.arange(self.T)
                J.batch(row + j * p, self._ir_start(j), w * _output_jacobian(self.cfg.output, Rv))
            row += self.T * p
        r = np.concatenate(res)
        if not jac:
            return r
        return r, J.matrix(row)

    def cost(self, z):
        self.freeze_terminal(z)
        r = self.residuals(z, jac=False)
        return float(r @ r)

    # -- constraints ------------------------------------------------------

    def equalities(self, z, jac=True):
        n, m, N, T = self.n, self.m, self.N, self.T
        X, U, Rv = self.split(z)
        if jac:
            xp, A, B = self.model.step_sensitivity(X[:N], U)
            self.AB = (A, B)
        else:
            xp = self.model.step(X[:N], U)
        vals = [X[0] - self.x_t, (X[1:] - xp).ravel()]
        if self.periodic:
            nxt = Rv[(np.arange(T) + 1) % T, :n]
            if jac:
                rp, Ar, Br = self.model.step_sensitivity(Rv[:, :n], Rv[:, n:])
            else:
                rp = self.model.step(Rv[:, :n], Rv[:, n:])
            vals.append((nxt - rp).ravel())
        if self.cfg.scheme == Scheme.TEC:
            vals.append(X[N] - self.references(z)[N][:n])
        c = np.concatenate(vals)
        if not jac:
            return c
        J = _Triplets(self.size)
        eye = np.eye(n)
        J.block(0, 0, eye)
        k = np.arange(N)
        rows = n + k * n
        J.batch(rows, (k + 1) * n, eye)
        J.batch(rows, k * n, -A)
        J.batch(rows, self.nx + k * m, -B)
        row = n + N * n
        if self.periodic:
            j = np.arange(T)
            rows = row + j * n
            J.batch(rows, self._ir_start(j + 1), eye)
            J.batch(rows, self._ir_start(j), -Ar)
            J.batch(rows, self._ir_start(j) + n, -Br)
            row += T * n
        if self.cfg.scheme == Scheme.TEC:
            J.block(row, N * n, eye)
            row += n
        return c, J.matrix(row)

    def inequalities(self, z, jac=True):
        """Constraint values ``c(z) >= 0`` and their Jacobian."""
        n, m, N = self.n, self.m, self.N
        X, U, Rv = self.split(z)
        refs = self.references(z)
        base = self.rows[0]
        L, rel = base.L, base.relative
        q = len(base.l)
        lk = np.array([rw.l for rw in self.rows])  # (N+1, q)
        Zs = np.concatenate([X[:N], U], axis=1)
        V = lk[:N] - Zs @ L.T + rel * (refs[:N] @ L.T)
        vals = [V.ravel()]
        J = _Triplets(self.size)
        k = np.arange(N)
        if jac:
            J.batch(k * q, k * n, -L[:, :n])
            J.batch(k * q, self.nx + k * m, -L[:, n:])
            if self.periodic:
                J.batch(k * q, self._ir_start(k), L * rel[:, None])
        row = N * q
        # state rows at the end of the horizon; implied by the terminal set when one is used
        keep = np.all(L[:, n:] == 0, axis=1)
        Lx, relx = L[keep, :n], rel[keep]
        vals.append(lk[N, keep] - Lx @ X[N] + relx * (Lx @ refs[N][:n]))
        if jac:
            J.block(row, N * n, -Lx)
            if self.periodic:
                J.block(row, self._ir_start(N), Lx * relx[:, None])
        row += int(keep.sum())
        if self.P_N is not None and self.alpha is not None and np.isfinite(self.alpha):
            e = X[N] - refs[N][:n]
            vals.append(np.array([self.alpha - e @ self.P_N @ e]))
            if jac:
                g = 2 * self.P_N @ e
                J.block(row, N * n, -g[None])
                if self.periodic:
                    J.block(row, self._ir_start(N), g[None])
            row += 1
        if self.periodic:
            Lr = self.model.Z_r.polytope()
            vals.append((Lr.l[None] - Rv @ Lr.L.T).ravel())
            if jac:
                j = np.arange(self.T)
                J.batch(row + j * len(Lr.l), self._ir_start(j), -Lr.L)
            row += self.T * len(Lr.l)
        c = np.concatenate(vals)
        if not jac:
            return c
        return c, J.matrix(row)

    def violation(self, z) -> float:
        e = self.equalities(z, jac=False)
        i = self.inequalities(z, jac=False)
        return float(max(np.abs(e).max(initial=0.0), (-i).max(initial=0.0)))

    def infeasibility_l1(self, z) -> float:
        e = self.equalities(z, jac=False)
        i = self.inequalities(z, jac=False)
        return float(np.abs(e).sum() + np.maximum(-i, 0.0).sum())


class _Triplets:
    """Sparse Jacobian assembled from dense blocks; repeated entries are summed."""

    def __init__(self, cols: int):
        self.cols = cols
        self.r, self.c, self.v = [], [], []

    def block(self, row: int, col: int, M):
        M = np.atleast_2d(M)
        self.batch(np.array([row]), np.array([col]), M[None])

    def batch(self, rows, cols, M):
        """Blocks ``M[k]`` (or one shared ``M``) at offsets ``(rows[k], cols[k])``."""
        rows, cols = np.asarray(rows), np.asarray(cols)
        M = np.asarray(M, float)
        if M.ndim == 2:
            M = np.broadcast_to(M, (len(rows),) + M.shape)
        K, a, b = M.shape
        ii = rows[:, None, None] + np.arange(a)[None, :, None]
        jj = cols[:, None, None] + np.arange(b)[None, None, :]
        ii, jj = np.broadcast_to(ii, M.shape), np.broadcast_to(jj, M.shape)
        self.r.append(ii.ravel())
        self.c.append(jj.ravel())
        self.v.append(M.ravel())

    def matrix(self, nrows: int) -> sparse.csr_matrix:
        if not self.r:
            return sparse.csr_matrix((nrows, self.cols))
        r, c, v = (np.concatenate(a) for a in (self.r, self.c, self.v))
        return sparse.coo_matrix((v, (r, c)), shape=(nrows, self.cols)).tocsr()


def _output_jacobian(h, R, step=1e-7):
    R = np.atleast_2d(R)
    base = np.atleast_2d(h(R))
    out = np.zeros((R.shape[0], base.shape[1], R.shape[1]))
    for i in range(R.shape[1]):
        d = np.maximum(step, step * np.abs(R[:, i]))
        Rp, Rm = R.copy(), R.copy()
        Rp[:, i] += d
        Rm[:, i] -= d
        out[:, :, i] = (np.atleast_2d(h(Rp)) - np.atleast_2d(h(Rm))) / (2 * d[:, None])
    return out


def _solve_qp(H, g, Ae, be, Ai, bi):
    """min 1/2 d'Hd + g'd  s.t.  Ae d = be, Ai d >= bi."""
    C = np.vstack([Ae, Ai]).T if Ai.size else Ae.T
    b = np.concatenate([be, bi])
    try:
        d = quadprog.solve_qp(H, -g, C, b, meq=Ae.shape[0])[0]
    except ValueError as exc:
        raise Infeasible(f"QP subproblem infeasible: {exc}") from None
    return d


def _condensed_step(prob, cfg, r, Jr, ce, Je, ci, Ji):
    """Gauss-Newton QP step with the state increments eliminated.

    The initial-value and shooting rows form a unit lower-triangular system
    in the state increments, so ``dX = v + M dF`` with ``dF`` the inputs (and
    the artificial reference). The remaining QP is dense but small.
    Returns the full step and the full cost gradient.
    """
    nd, n = prob.nx, prob.n
    A = prob.AB[0]
    # forward substitution over the block bidiagonal shooting rows
    sol = np.column_stack([ce[:nd], Je[:nd, nd:].toarray()])
    for k in range(prob.N):
        sol[(k + 1) * n:(k + 2) * n] += A[k] @ sol[k * n:(k + 1) * n]
    nf = prob.size - nd
    Z = np.vstack([-sol[:, 1:], np.eye(nf)])
    z0 = np.concatenate([-sol[:, 0], np.zeros(nf)])
    Er = Je[nd:]
    JZ = Jr @ Z
    H = 2.0 * JZ.T @ JZ
    H[np.diag_indices_from(H)] += cfg.regularization * max(1.0, float(np.abs(np.diag(H)).max()))
    gF = 2.0 * JZ.T @ (r + Jr @ z0)
    dF = _solve_qp(H, gF, Er @ Z, -ce[nd:] - Er @ z0, Ji @ Z, -ci - Ji @ z0)
    return z0 + Z @ dF, 2.0 * (Jr.T @ r)


def _sqp(prob: _Problem, z0: np.ndarray) -> MPCSolution:
    cfg = prob.cfg
    z = z0.copy()
    filt: list[tuple[float, float]] = []
    status, it, step = "max_iter", 0, np.inf
    gamma, eta = 1e-5, 1e-4
    t0 = time.perf_counter()
    for it in range(1, cfg.max_iter + 1):
        prob.freeze_terminal(z)
        r, Jr = prob.residuals(z)
        ce, Je = prob.equalities(z)
        ci, Ji = prob.inequalities(z)
        d, g = _condensed_step(prob, cfg, r, Jr, ce, Je, ci, Ji)
        if not np.all(np.isfinite(d)):
            raise NonFiniteIterate("SQP step is not finite")
        f0 = float(r @ r)
        h0 = prob.infeasibility_l1(z)
        t = 1.0
        if cfg.line_search:
            slope = float(g @ d)
            accepted = False
            for _ in range(30):
                zt = z + t * d
                ht = prob.infeasibility_l1(zt)
                ft = float(np.sum(prob.residuals(zt, jac=False) ** 2))
                if not np.isfinite(ft):
                    t *= 0.5
                    continue
                if h0 <= cfg.feas_tol and slope < 0:
                    ok = ft <= f0 + eta * t * slope and ht <= max(cfg.feas_tol, 1e-3 * max(h0, 1e-12) + cfg.feas_tol)
                    if ok:
                        accepted = True
                        break
                else:
                    ok = all(ht <= (1 - gamma) * hi or ft <= fi - gamma * hi for hi, fi in filt + [(h0, f0)])
                    if ok:
                        filt.append((h0, f0))
                        accepted = True
                        break
                t *= 0.5
            if not accepted:
                t = 1.0
        z = z + t * d
        if not np.all(np.isfinite(z)):
            raise NonFiniteIterate("SQP iterate is not finite")
        step = float(np.abs(t * d).max(initial=0.0))
        if step <= cfg.tol * (1.0 + float(np.abs(z).max())) and prob.violation(z) <= max(cfg.feas_tol, 1e-8):
            status = "converged"
            break
    prob.freeze_terminal(z)
    X, U, Rv = prob.split(z)
    return MPCSolution(
        x=X, u=U, value=float(np.sum(prob.residuals(z, jac=False) ** 2)), status=status, iterations=it,
        violation=prob.violation(z), step_norm=step, reference=Rv, solve_time=time.perf_counter() - t0,
    )


def _rollout(model, x0, U):
    X = [np.asarray(x0, float)]
    for u in U:
        X.append(model.step(X[-1], u))
    return np.array(X)


def warmstart_shift(prev: MPCSolution | None, ingredients: TerminalIngredients | None, ref_window, model=None, x_t=None):
    """Candidate inputs: the previous plan shifted by one with the terminal controller appended.

    Without a previous plan the reference inputs are used.
    """
    ref_window = np.atleast_2d(ref_window)
    N = ref_window.shape[0] - 1
    if prev is None:
        return ref_window[:N, model.n:].copy()
    n = prev.x.shape[1]
    U = np.vstack([prev.u[1:], prev.u[-1:]])
    if ingredients is not None:
        try:
            U[-1] = ingredients.controller(prev.x[-1], ref_window[N - 1])[0]
        except Exception:  # noqa: BLE001 - outside the certified region fall back to the reference input
            U[-1] = ref_window[N - 1, n:]
    else:
        U[-1] = ref_window[N - 1, n:]
    return U


def solve_mpc(config: MPCConfig, model: QuasiLPVModel, x_t, ref_window, guess=None) -> MPCSolution:
    """One MPC solve for the tracking schemes (QINF, TEC, UC, ROBUST).

    ``guess`` is an input sequence (N, m); states are initialized by a
    rollout from ``x_t``.
    """
    config.validate(model)
    if config.scheme == Scheme.PERIODIC:
        raise ConfigError("use solve_periodic_mpc for the periodic scheme")
    ref_window = np.atleast_2d(np.asarray(ref_window, float))
    prob = _Problem(config, model, x_t, ref_window)
    U0 = ref_window[: config.N, model.n:] if guess is None else np.asarray(guess, float)
    X0 = _rollout(model, x_t, U0)
    return _sqp(prob, prob.pack(X0, U0))


def solve_periodic_mpc(config: MPCConfig, model: QuasiLPVModel, x_t, y_e, guess=None) -> MPCSolution:
    """Joint optimization of inputs and a T-periodic artificial reference.

    ``guess`` is ``(U, R_art)``; by default the inputs hold the centre of the
    input box and the artificial reference is a steady state there.
    """
    config.validate(model)
    T = config.period
    y_e = np.atleast_2d(np.asarray(y_e, float))
    if y_e.shape[0] < T:
        y_e = y_e[np.arange(T) % y_e.shape[0]]
    prob = _Problem(config, model, x_t, None, y_e)
    if guess is None:
        uc = model.Z_r.center[model.n:]
        U0 = np.tile(uc, (config.N, 1))
        xs = np.asarray(x_t, float)
        for _ in range(2000):
            xs = model.step(xs, uc)
        xs = np.clip(xs, model.Z_r.lo[: model.n], model.Z_r.hi[: model.n])
        R0 = np.tile(np.concatenate([xs, uc]), (T, 1))
    else:
        U0, R0 = guess
    X0 = _rollout(model, x_t, U0)
    return _sqp(prob, prob.pack(X0, U0, R0))


# --------------------------------------------------------------------------
# closed loop


@dataclass
class ClosedLoopTrace:
    t: list = field(default_factory=list)
    x: list = field(default_factory=list)
    u: list = field(default_factory=list)
    r: list = field(default_factory=list)
    w: list = field(default_factory=list)
    stage: list = field(default_factory=list)
    value: list = field(default_factory=list)
    status: list = field(default_factory=list)
    solve_time: list = field(default_factory=list)
    violation: list = field(default_factory=list)
    candidate_feasible: list = field(default_factory=list)
    x_final: np.ndarray | None = None
    terminated: str | None = None
    n: int = 0
    m: int = 0

    def __len__(self):
        return len(self.t)

    def arrays(self) -> dict:
        out = {k: np.asarray(getattr(self, k)) for k in ("t", "x", "u", "r", "w", "stage", "value", "solve_time", "violation")}
        return out

    @property
    def total_cost(self) -> float:
        return float(np.sum(self.stage))

    def state_cost(self, Q) -> float:
        if not self.x:
            return 0.0
        e = np.asarray(self.x) - np.asarray(self.r)[:, : self.n]
        return float(np.einsum("ka,ab,kb->", e, np.atleast_2d(Q), e))

    def input_cost(self, R) -> float:
        if not self.u:
            return 0.0
        e = np.asarray(self.u) - np.asarray(self.r)[:, self.n:]
        return float(np.einsum("ka,ab,kb->", e, np.atleast_2d(R), e))

    def summary(self, timing: bool = True) -> dict:
        out = {
            "steps": len(self), "total_cost": self.total_cost,
            "max_violation": float(max(self.violation, default=0.0)),
            "terminated": self.terminated,
            "statuses": {s: self.status.count(s) for s in sorted(set(self.status))},
        }
        if timing:
            out["mean_solve_time"] = float(np.mean(self.solve_time)) if self.solve_time else 0.0
            out["max_solve_time"] = float(max(self.solve_time, default=0.0))
        return out

    def to_csv(self, path, timing: bool = True):
        """One row per step. ``timing=False`` drops the wall-clock column for byte-reproducible files."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            head = ["t"] + [f"x_{i + 1}" for i in range(self.n)] + [f"u_{i + 1}" for i in range(self.m)]
            head += [f"xr_{i + 1}" for i in range(self.n)] + [f"ur_{i + 1}" for i in range(self.m)]
            head += [f"w_{i + 1}" for i in range(self.n)] + ["stage", "value", "status", "violation"]
            head += ["solve_time"] if timing else []
            w.writerow(head)
            for k in range(len(self)):
                row = [self.t[k], *self.x[k], *self.u[k], *self.r[k], *self.w[k], self.stage[k], self.value[k],
                       self.status[k], self.violation[k]]
                row += [self.solve_time[k]] if timing else []
                w.writerow([repr(float(v)) if not isinstance(v, str) else v for v in row])

    @classmethod
    def from_csv(cls, path) -> "ClosedLoopTrace":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise ValueError(f"{path}: empty trace file")
        head = rows[0]
        n = sum(1 for h in head if h.startswith("x_"))
        m = sum(1 for h in head if h.startswith("u_"))
        tr = cls(n=n, m=m)
        idx = {h: i for i, h in enumerate(head)}
        for row in rows[1:]:
            f = [float(v) if i != idx["status"] else 0.0 for i, v in enumerate(row)]
            tr.t.append(f[0])
            tr.x.append(np.array(f[1:1 + n]))
            tr.u.append(np.array(f[1 + n:1 + n + m]))
            tr.r.append(np.array(f[1 + n + m:1 + 2 * n + 2 * m]))
            tr.w.append(np.array(f[1 + 2 * n + 2 * m:1 + 3 * n + 2 * m]))
            tr.stage.append(f[idx["stage"]])
            tr.value.append(f[idx["value"]])
            tr.status.append(row[idx["status"]])
            tr.violation.append(f[idx["violation"]])
            tr.solve_time.append(f[idx["solve_time"]] if "solve_time" in idx else 0.0)
        return tr

    def save_summary(self, path, timing: bool = True):
        with open(path, "w") as fh:
            json.dump(self.summary(timing), fh, indent=1, sort_keys=True)


def disturbance_sequence(n: int, steps: int, w_hat: float, seed: int = 0) -> np.ndarray:
    """Uniform directions on the sphere scaled to ``w_hat``."""
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((steps, n))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    return w_hat * g


def _stage(Q, R, x, u, r, n):
    ex, eu = x - r[:n], u - r[n:]
    return float(ex @ Q @ ex + eu @ R @ eu)


def simulate(config: MPCConfig, model: QuasiLPVModel, x0, reference: ReferenceTrajectory | None = None,
             steps: int = 0, disturbances=None, y_e: Callable[[int], np.ndarray] | None = None,
             check_candidate: bool = False, stop_on_error: bool = True) -> ClosedLoopTrace:
    """Closed loop ``x(t+1) = f(x(t), u*(0|t)) + w(t)``.

    Tracking schemes read windows of ``reference``; the periodic scheme
    calls ``y_e(t)`` for the exogenous signal over one period.
    """
    config.validate(model)
    n = model.n
    Q, R = config.weights(model)
    tr = ClosedLoopTrace(n=n, m=model.m)
    x = np.asarray(x0, float)
    W = np.zeros((steps, n)) if disturbances is None else np.asarray(disturbances, float)
    prev = None
    for t in range(steps):
        try:
            if config.scheme == Scheme.PERIODIC:
                guess = None
                if prev is not None:
                    U = np.vstack([prev.u[1:], prev.u[-1:]])
                    Rs = np.roll(prev.reference, -1, axis=0)
                    rN = Rs[config.N % config.period]
                    try:
                        U[-1] = config.ingredients.controller(prev.x[-1], Rs[(config.N - 1) % config.period])[0]
                    except Exception:  # noqa: BLE001
                        U[-1] = rN[n:]
                    guess = (U, Rs)
                sol = solve_periodic_mpc(config, model, x, y_e(t), guess)
                r_t = sol.reference[0]
            else:
                window = reference.window(t, config.N + 1)
                guess = warmstart_shift(prev, config.ingredients, window, model, x) if prev is not None else None
                if check_candidate and prev is not None:
                    tr.candidate_feasible.append(_candidate_ok(config, model, x, window, guess))
                sol = solve_mpc(config, model, x, window, guess)
                r_t = window[0]
        except MPCError as exc:
            tr.terminated = f"{type(exc).__name__}: {exc}"
            if stop_on_error:
                break
            raise
        u = sol.u[0]
        tr.t.append(t * model.h)
        tr.x.append(x.copy())
        tr.u.append(u.copy())
        tr.r.append(np.asarray(r_t, float).copy())
        tr.w.append(W[t].copy())
        tr.stage.append(_stage(Q, R, x, u, r_t, n))
        tr.value.append(sol.value)
        tr.status.append(sol.status)
        tr.solve_time.append(sol.solve_time)
        tr.violation.append(sol.violation)
        x = model.step(x, u) + W[t]
        prev = sol
    tr.x_final = x
    return tr


def _candidate_ok(config, model, x_t, window, U, tol=1e-7) -> bool:
    prob = _Problem(config, model, x_t, window)
    X = _rollout(model, x_t, U)
    z = prob.pack(X, U)
    prob.freeze_terminal(z)
    return prob.violation(z) <= tol
