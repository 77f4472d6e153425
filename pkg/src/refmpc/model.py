"""Constrained nonlinear systems, reference trajectories and quasi-LPV parameterizations.

All dynamics callables are vectorized: states have shape ``(k, n)``, inputs
``(k, m)`` and Jacobians ``(k, n, n)`` / ``(k, n, m)``. Single points may
be passed as 1-d arrays; results are squeezed back.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

Array = np.ndarray


class NonFiniteInput(ValueError):
    pass


class EmptyFeasibleSet(ValueError):
    pass


# --------------------------------------------------------------------------
# constraint sets


@dataclass(frozen=True)
class Polytope:
    """``{z : L z <= l}``."""

    L: Array
    l: Array

    def __post_init__(self):
        object.__setattr__(self, "L", np.atleast_2d(np.asarray(self.L, float)))
        object.__setattr__(self, "l", np.asarray(self.l, float).reshape(-1))

    @property
    def dim(self) -> int:
        return self.L.shape[1]

    def slack(self, z: Array) -> Array:
        """``l - L z`` for every row of ``z`` (shape (..., rows))."""
        return self.l - np.asarray(z) @ self.L.T

    def contains(self, z: Array, tol: float = 0.0):
        return np.all(self.slack(z) >= -tol, axis=-1)

    def tighten(self, amounts: Array) -> "Polytope":
        """Shift every row inwards by ``amounts`` (scalar or per-row)."""
        return Polytope(self.L, self.l - np.broadcast_to(amounts, self.l.shape))

    def row_scale(self, center: Array) -> Array:
        """Distance of every facet from ``center`` in row units, ``l - L c``."""
        return self.l - self.L @ center


@dataclass(frozen=True)
class Box:
    """Axis-aligned box; infinite bounds mean the coordinate is unconstrained."""

    lo: Array
    hi: Array

    def __post_init__(self):
        lo = np.asarray(self.lo, float).reshape(-1)
        hi = np.asarray(self.hi, float).reshape(-1)
        if lo.shape != hi.shape:
            raise ValueError("box bounds differ in shape")
        if np.any(lo > hi):
            raise EmptyFeasibleSet(f"box has lo > hi: {lo} {hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return self.lo.size

    @property
    def center(self) -> Array:
        with np.errstate(invalid="ignore"):
            c = np.where(np.isfinite(self.lo) & np.isfinite(self.hi), 0.5 * (self.lo + self.hi), 0.0)
        c = np.where(np.isfinite(self.lo) & ~np.isfinite(self.hi), self.lo, c)
        return np.where(~np.isfinite(self.lo) & np.isfinite(self.hi), self.hi, c)

    @property
    def bounded(self) -> bool:
        return bool(np.all(np.isfinite(self.lo)) and np.all(np.isfinite(self.hi)))

    def polytope(self) -> Polytope:
        rows, rhs = [], []
        for i in range(self.dim):
            if np.isfinite(self.hi[i]):
                e = np.zeros(self.dim)
                e[i] = 1.0
                rows.append(e)
                rhs.append(self.hi[i])
            if np.isfinite(self.lo[i]):
                e = np.zeros(self.dim)
                e[i] = -1.0
                rows.append(e)
                rhs.append(-self.lo[i])
        return Polytope(np.array(rows).reshape(-1, self.dim), np.array(rhs))

    def contains(self, z: Array, tol: float = 0.0):
        z = np.asarray(z)
        return np.all((z >= self.lo - tol) & (z <= self.hi + tol), axis=-1)

    def restrict(self, dims, lo, hi) -> "Box":
        new_lo, new_hi = self.lo.copy(), self.hi.copy()
        new_lo[list(dims)] = lo
        new_hi[list(dims)] = hi
        return Box(new_lo, new_hi)

    def shrink(self, fraction: float) -> "Box":
        """Scale about the centre by ``1 - fraction`` on finite sides."""
        c = self.center
        return Box(c + (1 - fraction) * (self.lo - c), c + (1 - fraction) * (self.hi - c))

    def grid(self, dims, points: int | list[int]) -> Array:
        """Tensor grid over coordinates ``dims``; other coordinates at the centre."""
        dims = list(dims)
        if isinstance(points, int):
            points = [points] * len(dims)
        if not dims:
            return self.center[None].copy()
        axes = []
        for d, k in zip(dims, points):
            if not (np.isfinite(self.lo[d]) and np.isfinite(self.hi[d])):
                raise EmptyFeasibleSet(f"cannot grid unbounded coordinate {d}")
            axes.append(np.linspace(self.lo[d], self.hi[d], k) if k > 1 else np.array([0.5 * (self.lo[d] + self.hi[d])]))
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, len(dims))
        out = np.tile(self.center, (mesh.shape[0], 1))
        out[:, dims] = mesh
        return out

    def vertices(self, dims) -> Array:
        dims = list(dims)
        out = []
        for corner in itertools.product(*[(self.lo[d], self.hi[d]) for d in dims]):
            v = self.center.copy()
            v[dims] = corner
            out.append(v)
        return np.array(out)

    def sample(self, rng: np.random.Generator, count: int, dims=None) -> Array:
        dims = list(range(self.dim)) if dims is None else list(dims)
        out = np.tile(self.center, (count, 1))
        out[:, dims] = rng.uniform(self.lo[dims], self.hi[dims], size=(count, len(dims)))
        return out

    def to_json(self):
        return {"lo": [float(v) for v in self.lo], "hi": [float(v) for v in self.hi]}


# --------------------------------------------------------------------------
# quasi-LPV parameterization


@dataclass(frozen=True)
class Parameterization:
    """Jacobian split ``A(r) = A_0 + sum_j theta_j(r) A_j`` (same for B).

    ``theta`` maps references of shape (k, n+m) to (k, p). ``depends_on``
    lists the reference coordinates ``theta`` actually reads; the others
    can be left out of grids. ``gradient`` returns d theta / d r with shape
    (k, p, n+m) and is only needed for continuous-time synthesis.
    """

    theta: Callable[[Array], Array]
    A_basis: Array
    B_basis: Array
    depends_on: tuple[int, ...]
    gradient: Callable[[Array], Array] | None = None
    labels: tuple[str, ...] = ()

    @property
    def p(self) -> int:
        return self.A_basis.shape[0] - 1

    def theta_bar(self, r: Array) -> Array:
        """``(1, theta)`` for each reference, shape (k, p+1)."""
        r = np.atleast_2d(r)
        th = np.asarray(self.theta(r)).reshape(r.shape[0], self.p)
        return np.concatenate([np.ones((r.shape[0], 1)), th], axis=1)

    def A(self, theta_bar: Array) -> Array:
        return np.einsum("kj,jab->kab", np.atleast_2d(theta_bar), self.A_basis)

    def B(self, theta_bar: Array) -> Array:
        return np.einsum("kj,jab->kab", np.atleast_2d(theta_bar), self.B_basis)

    def theta_gradient(self, r: Array, step: float = 1e-6) -> Array:
        r = np.atleast_2d(np.asarray(r, float))
        if self.gradient is not None:
            return np.asarray(self.gradient(r))
        k, d = r.shape
        out = np.zeros((k, self.p, d))
        for i in self.depends_on:
            hstep = np.maximum(step, 1e-8 * np.abs(r[:, i]))
            rp, rm = r.copy(), r.copy()
            rp[:, i] += hstep
            rm[:, i] -= hstep
            out[:, :, i] = (self.theta(rp) - self.theta(rm)) / (2 * hstep[:, None])
        return out


def entry_parameterization(
    jac: Callable[[Array], tuple[Array, Array]],
    n: int,
    m: int,
    entries: list[tuple[int, int]],
    depends_on: tuple[int, ...],
    probe: Array,
    gradient=None,
) -> Parameterization:
    """Parameterize selected Jacobian entries directly.

    ``entries`` are (row, col) positions in ``[A B]`` (columns >= n address B).
    The constant part is read off the Jacobian at ``probe`` with the listed
    entries zeroed.
    """
    A, B = jac(np.atleast_2d(probe))
    AB = np.concatenate([A[0], B[0]], axis=1)
    rows = np.array([e[0] for e in entries], dtype=int)
    cols = np.array([e[1] for e in entries], dtype=int)
    base = AB.copy()
    base[rows, cols] = 0.0
    p = len(entries)
    basis = np.zeros((p + 1, n, n + m))
    basis[0] = base
    for j, (i, c) in enumerate(entries):
        basis[j + 1, i, c] = 1.0

    def theta(r):
        A, B = jac(np.atleast_2d(r))
        return np.concatenate([A, B], axis=2)[:, rows, cols]

    labels = tuple(f"d{i}/d{c}" for i, c in entries)
    return Parameterization(theta, basis[:, :, :n], basis[:, :, n:], tuple(depends_on), gradient, labels)


# --------------------------------------------------------------------------
# models


def _rows(a: Array, width: int) -> tuple[Array, bool]:
    a = np.asarray(a, float)
    single = a.ndim == 1
    return a.reshape(-1, width), single


@dataclass(frozen=True)
class QuasiLPVModel:
    """A constrained nonlinear system with a quasi-LPV Jacobian description.

    ``f`` is the continuous vector field when ``time_domain == "continuous"``
    and is integrated with ``method`` over ``h``; with ``"discrete"`` it is the
    transition map itself. ``jac`` returns the Jacobians of ``f`` (continuous
    or discrete, matching ``f``). Jacobians of the sampled map are obtained
    by differentiating through the integrator stages.
    """

    name: str
    n: int
    m: int
    f: Callable[[Array, Array], Array]
    Z: Box
    Z_r: Box
    h: float = 1.0
    time_domain: str = "continuous"
    method: str = "rk4"
    jac: Callable[[Array, Array], tuple[Array, Array]] | None = None
    param_discrete: Parameterization | None = None
    param_continuous: Parameterization | None = None
    sampling_box: Box | None = None
    input_increment: float | None = None
    u_rate_max: Array | None = None
    affine_inputs: tuple[int, ...] = ()
    state_names: tuple[str, ...] = ()
    input_names: tuple[str, ...] = ()
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.time_domain not in ("continuous", "discrete"):
            raise ValueError(f"unknown time domain {self.time_domain!r}")
        if self.method not in ("euler", "rk4", "exact"):
            raise ValueError(f"unknown discretization {self.method!r}")
        if self.h <= 0:
            raise ValueError("step size must be positive")
        for par in (self.param_discrete, self.param_continuous):
            if par is not None and par.p > self.n * (self.n + self.m):
                raise ValueError("too many scheduling parameters")

    # -- dynamics -------------------------------------------------------

    @property
    def nz(self) -> int:
        return self.n + self.m

    @property
    def Z_poly(self) -> Polytope:
        return self.Z.polytope()

    @property
    def sample_box(self) -> Box:
        """Finite box used for gridding and sampling references."""
        return self.sampling_box if self.sampling_box is not None else self.Z_r

    def vector_field(self, x: Array, u: Array) -> Array:
        if self.time_domain != "continuous":
            raise ValueError(f"model {self.name} is discrete-time")
        X, single = _rows(x, self.n)
        U, _ = _rows(u, self.m)
        out = self.f(X, U)
        return out[0] if single else out

    def step(self, x: Array, u: Array) -> Array:
        """One sampling period of the discrete map."""
        X, single = _rows(x, self.n)
        U, _ = _rows(u, self.m)
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(U))):
            raise NonFiniteInput(f"non-finite state or input passed to {self.name}")
        out = self._step(X, U)
        return out[0] if single else out

    def _step(self, X, U):
        if self.time_domain == "discrete" or self.method == "exact":
            return self.f(X, U)
        h = self.h
        if self.method == "euler":
            return X + h * self.f(X, U)
        k1 = self.f(X, U)
        k2 = self.f(X + 0.5 * h * k1, U)
        k3 = self.f(X + 0.5 * h * k2, U)
        k4 = self.f(X + h * k3, U)
        return X + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)

    def _cjac(self, X, U):
        if self.jac is not None:
            return self.jac(X, U)
        return _fd_jac(self.f, X, U)

    def continuous_jacobians(self, r: Array) -> tuple[Array, Array]:
        if self.time_domain != "continuous":
            raise ValueError(f"model {self.name} is discrete-time")
        R, single = _rows(r, self.nz)
        A, B = self._cjac(R[:, : self.n], R[:, self.n:])
        return (A[0], B[0]) if single else (A, B)

    def step_sensitivity(self, x: Array, u: Array) -> tuple[Array, Array, Array]:
        """``(x+, dx+/dx, dx+/du)`` through the integrator stages."""
        X, single = _rows(x, self.n)
        U, _ = _rows(u, self.m)
        out = self._step_sens(X, U)
        return tuple(o[0] for o in out) if single else out

    def _step_sens(self, X, U):
        k = X.shape[0]
        if self.time_domain == "discrete" or self.method == "exact":
            A, B = self._cjac(X, U)
            return self.f(X, U), A, B
        h, n = self.h, self.n
        eye = np.broadcast_to(np.eye(n), (k, n, n))
        if self.method == "euler":
            A, B = self._cjac(X, U)
            return X + h * self.f(X, U), eye + h * A, h * B
        k1 = self.f(X, U)
        J1x, J1u = self._cjac(X, U)
        d1x, d1u = J1x, J1u
        X2 = X + 0.5 * h * k1
        k2 = self.f(X2, U)
        J2x, J2u = self._cjac(X2, U)
        d2x = J2x @ (eye + 0.5 * h * d1x)
        d2u = J2x @ (0.5 * h * d1u) + J2u
        X3 = X + 0.5 * h * k2
        k3 = self.f(X3, U)
        J3x, J3u = self._cjac(X3, U)
        d3x = J3x @ (eye + 0.5 * h * d2x)
        d3u = J3x @ (0.5 * h * d2u) + J3u
        X4 = X + h * k3
        k4 = self.f(X4, U)
        J4x, J4u = self._cjac(X4, U)
        d4x = J4x @ (eye + h * d3x)
        d4u = J4x @ (h * d3u) + J4u
        xp = X + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        Ax = eye + h / 6.0 * (d1x + 2 * d2x + 2 * d3x + d4x)
        Bu = h / 6.0 * (d1u + 2 * d2u + 2 * d3u + d4u)
        return xp, Ax, Bu

    def jacobians(self, r: Array, time_domain: str = "discrete") -> tuple[Array, Array]:
        """Jacobians at ``r = (x_r, u_r)`` of the sampled map or of the vector field."""
        R, single = _rows(r, self.nz)
        if time_domain == "continuous":
            A, B = self.continuous_jacobians(R)
        else:
            _, A, B = self._step_sens(R[:, : self.n], R[:, self.n:])
        return (A[0], B[0]) if single else (A, B)

    def parameterization(self, time_domain: str = "discrete") -> Parameterization:
        par = self.param_discrete if time_domain == "discrete" else self.param_continuous
        if par is None:
            raise ValueError(f"model {self.name} has no {time_domain} parameterization")
        return par

    def theta(self, r: Array, time_domain: str = "discrete") -> Array:
        R, single = _rows(r, self.nz)
        th = self.parameterization(time_domain).theta(R)
        return th[0] if single else th

    def successor(self, r: Array) -> Array:
        """State part of the successor reference, ``f(x_r, u_r)``."""
        R, _ = _rows(r, self.nz)
        return self._step(R[:, : self.n], R[:, self.n:])

    def with_changes(self, **kw) -> "QuasiLPVModel":
        from dataclasses import replace

        return replace(self, **kw)


def _fd_jac(f, X, U, step=1e-6):
    """Central finite differences of a vectorized map, step max(step, 1e-8 |z|)."""
    k, n = X.shape
    m = U.shape[1]
    Z = np.concatenate([X, U], axis=1)
    out = np.zeros((k, n, n + m))
    for i in range(n + m):
        hstep = np.maximum(step, 1e-8 * np.linalg.norm(Z, axis=1))
        Zp, Zm = Z.copy(), Z.copy()
        Zp[:, i] += hstep
        Zm[:, i] -= hstep
        out[:, :, i] = (f(Zp[:, :n], Zp[:, n:]) - f(Zm[:, :n], Zm[:, n:])) / (2 * hstep[:, None])
    return out[:, :, :n], out[:, :, n:]


def finite_difference_jacobians(model: QuasiLPVModel, r: Array, time_domain: str = "discrete"):
    """Independent central-difference Jacobians of the sampled map (or of ``f``)."""
    R, single = _rows(r, model.nz)
    if time_domain == "discrete":
        A, B = _fd_jac(model._step, R[:, : model.n], R[:, model.n:])
    else:
        A, B = _fd_jac(model.f, R[:, : model.n], R[:, model.n:])
    return (A[0], B[0]) if single else (A, B)


def reconstruction_error(model: QuasiLPVModel, r: Array, time_domain: str = "discrete") -> float:
    """Largest Frobenius error of the affine Jacobian reconstruction over rows of ``r``."""
    par = model.parameterization(time_domain)
    A, B = model.jacobians(np.atleast_2d(r), time_domain)
    tb = par.theta_bar(np.atleast_2d(r))
    eA = np.linalg.norm(A - par.A(tb), axis=(1, 2))
    eB = np.linalg.norm(B - par.B(tb), axis=(1, 2))
    return float(max(eA.max(), eB.max()))


# --------------------------------------------------------------------------
# references


@dataclass
class ReferenceTrajectory:
    """Sequence of reference pairs ``(x_r(t), u_r(t))``, t = 0..K-1."""

    x: Array
    u: Array
    h: float = 1.0
    periodic: bool = False
    time_domain: str = "discrete"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, float))
        self.u = np.atleast_2d(np.asarray(self.u, float))
        if self.x.shape[0] != self.u.shape[0]:
            raise ValueError("state and input sequences differ in length")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def period(self) -> int | None:
        return len(self) if self.periodic else None

    @property
    def r(self) -> Array:
        return np.concatenate([self.x, self.u], axis=1)

    @property
    def t(self) -> Array:
        return np.arange(len(self)) * self.h

    def index(self, k) -> Array:
        k = np.asarray(k)
        if self.periodic:
            return k % len(self)
        if np.any(k >= len(self)) or np.any(k < 0):
            raise IndexError(f"reference index outside [0, {len(self)})")
        return k

    def window(self, start: int, length: int) -> Array:
        """References r(start .. start+length-1), shape (length, n+m)."""
        return self.r[self.index(np.arange(start, start + length))]

    def shifted(self, k: int) -> "ReferenceTrajectory":
        if not self.periodic:
            raise ValueError("cyclic shift needs a periodic trajectory")
        return ReferenceTrajectory(np.roll(self.x, -k, 0), np.roll(self.u, -k, 0), self.h, True, self.time_domain)

    def to_csv(self, path):
        n, m = self.x.shape[1], self.u.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"x_{i + 1}" for i in range(n)] + [f"u_{i + 1}" for i in range(m)])
            for t, xr, ur in zip(self.t, self.x, self.u):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in xr] + [repr(float(v)) for v in ur])

    @classmethod
    def from_csv(cls, path, periodic: bool = False, time_domain: str = "discrete"):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, data = rows[0], np.array(rows[1:], dtype=float)
        xs = [i for i, name in enumerate(header) if name.startswith("x_")]
        us = [i for i, name in enumerate(header) if name.startswith("u_")]
        h = float(data[1, 0] - data[0, 0]) if data.shape[0] > 1 else 1.0
        return cls(data[:, xs], data[:, us], h, periodic, time_domain)


@dataclass
class ReferenceReport:
    admissible: bool
    outside: Array
    defect: Array
    increment_violations: Array
    max_defect: float

    @property
    def first_violation(self) -> int | None:
        bad = np.flatnonzero(self.outside)
        return int(bad[0]) if bad.size else None


def validate_reference(
    model: QuasiLPVModel, traj: ReferenceTrajectory, tol: float = 1e-9, membership_tol: float = 1e-12
) -> ReferenceReport:
    """Check membership in Z_r and the one-step dynamics defect of every step."""
    r = traj.r
    outside = ~model.Z_r.contains(r, membership_tol)
    if traj.time_domain == "discrete":
        xp = model.successor(r)
        nxt = np.roll(traj.x, -1, 0)
        defect = np.linalg.norm(xp - nxt, axis=1)
        if not traj.periodic:
            defect[-1] = 0.0
    else:
        # continuous references are judged by the integrator defect over one sample
        xp = model.successor(r)
        nxt = np.roll(traj.x, -1, 0)
        defect = np.linalg.norm(xp - nxt, axis=1)
        if not traj.periodic:
            defect[-1] = 0.0
    incr = np.zeros(len(traj), dtype=bool)
    if model.input_increment is not None:
        du = np.abs(np.diff(traj.u, axis=0, append=traj.u[:1] if traj.periodic else traj.u[-1:]))
        incr = np.any(du > model.input_increment + membership_tol, axis=1)
    ok = not outside.any() and float(defect.max(initial=0.0)) <= tol and not incr.any()
    return ReferenceReport(bool(ok), outside, defect, incr, float(defect.max(initial=0.0)))


# --------------------------------------------------------------------------
# parameter hyperboxes


@dataclass(frozen=True)
class ParameterBoxes:
    Theta: Box
    Omega: Box
    samples: int


def hyperbox_bounds(
    model: QuasiLPVModel,
    time_domain: str = "discrete",
    density: int = 50,
    margin: float = 0.01,
    succ_density: int | None = None,
    max_points: int = 400_000,
) -> ParameterBoxes:
    """Sampled bounding boxes of theta over Z_r and of its one-step change.

    For discrete time the change is ``theta(r+) - theta(r)`` over grid pairs
    with ``r+`` admissible; for continuous time it is ``d theta/dt`` along
    ``r_dot = (f(x_r, u_r), u_dot)`` at the vertices of the input-rate bound.
    Both boxes are inflated by ``margin`` times their width on each side.
    """
    par = model.parameterization(time_domain)
    box = model.sample_box
    n = model.n
    succ_density = density if succ_density is None else succ_density
    grid_dims = sorted(par.depends_on)
    if time_domain == "discrete":
        grid_dims = sorted(set(d for d in par.depends_on if d < n) | {n + j for j in range(model.m)})
    density = max(2, min(density, int(max_points ** (1.0 / max(len(grid_dims), 1)))))
    r = box.grid(grid_dims, density)
    r = r[model.Z_r.contains(r)]
    if r.shape[0] == 0:
        raise EmptyFeasibleSet(f"no grid point of {model.name} lies in Z_r")
    th = par.theta(r)
    if time_domain == "discrete":
        deltas = []
        succ_in = [d for d in par.depends_on if d >= n]
        all_in = list(range(n, model.nz))
        u_axes = box.grid(succ_in, succ_density)[:, all_in] if succ_in else box.center[None, all_in]
        xp = model.successor(r)
        for start in range(0, r.shape[0], 4096):
            xs = xp[start:start + 4096]
            base = th[start:start + 4096]
            rp = np.concatenate(
                [np.repeat(xs, len(u_axes), 0), np.tile(u_axes, (xs.shape[0], 1))], axis=1
            )
            ok = model.Z_r.contains(rp).reshape(xs.shape[0], len(u_axes))
            thp = par.theta(rp).reshape(xs.shape[0], len(u_axes), -1)
            d = (thp - base[:, None, :])[ok]
            deltas.append(d)
        delta = np.concatenate(deltas) if deltas else np.zeros((0, par.p))
        if delta.shape[0] == 0:
            raise EmptyFeasibleSet("no admissible successor reference on the grid")
    else:
        grad = par.theta_gradient(r)
        xdot = model.vector_field(r[:, :n], r[:, n:])
        rate = np.zeros(model.m) if model.u_rate_max is None else np.asarray(model.u_rate_max, float)
        deltas = []
        for signs in itertools.product((-1.0, 1.0), repeat=model.m):
            rdot = np.concatenate([xdot, np.tile(np.array(signs) * rate, (r.shape[0], 1))], axis=1)
            deltas.append(np.einsum("kpd,kd->kp", grad, rdot))
        delta = np.concatenate(deltas)
    lo, hi = th.min(0), th.max(0)
    w = hi - lo
    dlo, dhi = delta.min(0), delta.max(0)
    dw = dhi - dlo
    return ParameterBoxes(
        Box(lo - margin * w, hi + margin * w),
        Box(dlo - margin * dw, dhi + margin * dw),
        int(r.shape[0]),
    )
