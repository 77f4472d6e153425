"""Reference-generic terminal ingredients from parameter-dependent LMIs.

The decision variables are the coefficient matrices of

    X(r) = X_0 + sum_j theta_j(r) X_j,     Y(r) = Y_0 + sum_j theta_j(r) Y_j

and the terminal cost and controller are ``P_f = X^{-1}`` and
``K_f = Y P_f``. Every synthesis maximizes ``log det X_min`` subject to
``X_min <= X(r)`` wherever the main inequality is imposed.
"""

from __future__ import annotations

import itertools
import json
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import sqrtm

from . import sdp
from .model import Box, Parameterization, QuasiLPVModel

FORMAT_VERSION = 1


class SynthesisError(RuntimeError):
    pass


class Infeasible(SynthesisError):
    def __init__(self, message, solution=None):
        super().__init__(message)
        self.solution = solution


class EmptyGrid(SynthesisError):
    pass


class VertexExplosion(SynthesisError):
    pass


class MissingThetaGradients(SynthesisError):
    pass


class NotPositiveDefinite(ValueError):
    pass


# --------------------------------------------------------------------------
# ingredients


@dataclass
class OutputCost:
    """Stage cost ``|| h(x,u) - h(x_r,u_r) ||^2_S`` linearized as C, D.

    Bases hold the constant term first and then one matrix per scheduling
    parameter, as for the dynamics. ``S_inv`` is the inverse weight.
    """

    C: np.ndarray  # (p+1, ny, n)
    D: np.ndarray  # (p+1, ny, m)
    S_inv: np.ndarray  # (p+1, ny, ny)
    eps: float

    @property
    def ny(self) -> int:
        return self.C.shape[1]

    @classmethod
    def constant(cls, C, D, S, eps, p=0):
        C = np.asarray(C, float)
        D = np.asarray(D, float)
        S_inv = np.linalg.inv(np.atleast_2d(np.asarray(S, float)))

        def pad(M):
            out = np.zeros((p + 1,) + M.shape)
            out[0] = M
            return out

        return cls(pad(C), pad(D), pad(S_inv), float(eps))

    @classmethod
    def quadratic(cls, Q, R, eps, p=0):
        """Output ``[Q^1/2 x; R^1/2 u]`` with unit weight."""
        Qh = np.real(sqrtm(np.atleast_2d(Q)))
        Rh = np.real(sqrtm(np.atleast_2d(R)))
        n, m = Qh.shape[0], Rh.shape[0]
        C = np.vstack([Qh, np.zeros((m, n))])
        D = np.vstack([np.zeros((n, m)), Rh])
        return cls.constant(C, D, np.eye(n + m), eps, p)

    def padded(self, p: int) -> "OutputCost":
        """Same cost on a basis of ``p`` scheduling parameters (extra terms are zero)."""
        have = self.C.shape[0] - 1
        if have == p:
            return self
        if have != 0:
            raise ValueError(f"output cost has {have} parameter terms, the model has {p}")

        def pad(M):
            out = np.zeros((p + 1,) + M.shape[1:])
            out[0] = M[0]
            return out

        return OutputCost(pad(self.C), pad(self.D), pad(self.S_inv), self.eps)


@dataclass
class TerminalIngredients:
    X: np.ndarray  # (p+1, n, n)
    Y: np.ndarray  # (p+1, m, n)
    par: Parameterization | None
    Q: np.ndarray
    R: np.ndarray
    epsilon: float
    time_domain: str = "discrete"
    mode: str = "grid"
    model_name: str = ""
    alpha: float | None = None
    h: float = 1.0
    theta_description: list = field(default_factory=list)
    audit: dict = field(default_factory=dict)
    output: OutputCost | None = None
    points: tuple | None = None  # constraint points used in synthesis (not serialized)

    @property
    def p(self) -> int:
        return self.X.shape[0] - 1

    @property
    def n(self) -> int:
        return self.X.shape[1]

    @property
    def m(self) -> int:
        return self.Y.shape[1]

    def theta_bar(self, r) -> np.ndarray:
        r = np.atleast_2d(r)
        if self.p == 0:
            return np.ones((r.shape[0], 1))
        return self.par.theta_bar(r)

    def X_of(self, r) -> np.ndarray:
        return np.einsum("kj,jab->kab", self.theta_bar(r), self.X)

    def Y_of(self, r) -> np.ndarray:
        return np.einsum("kj,jab->kab", self.theta_bar(r), self.Y)

    def evaluate(self, r, scale: float | None = None):
        """``(P_f, K_f, X)`` at every row of ``r``.

        For continuous-time ingredients used with a sampled loop, ``scale``
        divides P_f (the default is 1/h for continuous ingredients, 1 else).
        """
        r = np.asarray(r, float)
        single = r.ndim == 1
        Xr = self.X_of(r)
        Yr = self.Y_of(r)
        Xr = 0.5 * (Xr + np.swapaxes(Xr, -1, -2))
        w = np.linalg.eigvalsh(Xr)
        if np.any(w[:, 0] <= 1e-10 * np.abs(w[:, -1])) or np.any(w[:, 0] <= 0):
            bad = int(np.argmin(w[:, 0] / np.abs(w[:, -1])))
            raise NotPositiveDefinite(f"X(r) is not positive definite at row {bad} (lambda_min={w[bad, 0]:.3e})")
        P = np.linalg.inv(Xr)
        P = 0.5 * (P + np.swapaxes(P, -1, -2))
        K = Yr @ P
        if scale is None:
            scale = self.h if self.time_domain == "continuous" else 1.0
        P = P / scale
        if single:
            return P[0], K[0], Xr[0]
        return P, K, Xr

    def terminal_cost(self, x, r) -> np.ndarray:
        r = np.atleast_2d(r)
        x = np.atleast_2d(x)
        P, _, _ = self.evaluate(r)
        e = x - r[:, : self.n]
        return np.einsum("ka,kab,kb->k", e, P, e)

    def controller(self, x, r) -> np.ndarray:
        r = np.atleast_2d(r)
        x = np.atleast_2d(x)
        _, K, _ = self.evaluate(r)
        return r[:, self.n:] + np.einsum("kab,kb->ka", K, x - r[:, : self.n])

    def to_json(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "model": self.model_name,
            "p": self.p,
            "n": self.n,
            "m": self.m,
            "theta_description": list(self.theta_description),
            "X": self.X.tolist(),
            "Y": self.Y.tolist(),
            "Q": np.atleast_2d(self.Q).tolist(),
            "R": np.atleast_2d(self.R).tolist(),
            "alpha": self.alpha,
            "epsilon": self.epsilon,
            "mode": self.mode,
            "domain": self.time_domain,
            "h": self.h,
            "audit": self.audit,
        }

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True, default=_json_default)

    @classmethod
    def from_json(cls, data: dict, par: Parameterization | None):
        if data.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported ingredients format {data.get('format_version')!r}")
        X = np.array(data["X"], float)
        if par is not None and par.p != X.shape[0] - 1:
            raise ValueError("parameterization does not match the stored coefficients")
        return cls(
            X=X, Y=np.array(data["Y"], float), par=par, Q=np.array(data["Q"], float), R=np.array(data["R"], float),
            epsilon=float(data["epsilon"]), time_domain=data["domain"], mode=data["mode"], model_name=data["model"],
            alpha=data.get("alpha"), h=float(data.get("h", 1.0)), theta_description=data.get("theta_description", []),
            audit=data.get("audit", {}),
        )

    @classmethod
    def load(cls, path, model: QuasiLPVModel | None = None):
        with open(path) as fh:
            data = json.load(fh)
        par = None
        if model is not None and data["p"] > 0:
            par = model.parameterization(data["domain"])
        return cls.from_json(data, par)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"cannot serialize {type(o).__name__}")


@dataclass
class MultiConvexCertificate:
    Lam: np.ndarray  # (p, k, k)
    vertices: np.ndarray  # (nv, 2p): theta and successor (or rate) coordinates
    mode: str = "box"

    def check(self, X, Y, par: Parameterization, time_domain: str = "discrete", tol: float = 1e-7) -> float:
        """Smallest eigenvalue over the multiplier conditions (>= -tol means they hold)."""
        worst = np.inf
        for i in range(self.Lam.shape[0]):
            Zi = par.A_basis[i + 1] @ X[i + 1] + par.B_basis[i + 1] @ Y[i + 1]
            L = self.Lam[i]
            worst = min(worst, np.linalg.eigvalsh(L)[0])
            if time_domain == "discrete":
                n = Zi.shape[0]
                M = L.copy()
                M[n:2 * n, :n] -= Zi
                M[:n, n:2 * n] -= Zi.T
            else:
                M = L + Zi + Zi.T
            worst = min(worst, np.linalg.eigvalsh(M)[0])
        return float(worst)


# --------------------------------------------------------------------------
# grids and vertices


@dataclass
class GridSpec:
    """Tensor grid over reference coordinates.

    ``points`` maps a coordinate index to a number of grid points; two
    points on an input coordinate give its two vertices. ``successor_points``
    sets the grid density of successor inputs that the parameters read.
    """

    points: dict
    successor_points: int | None = None
    u_rate_vertices: bool = True

    def to_json(self):
        return {"points": {str(k): v for k, v in self.points.items()}, "successor_points": self.successor_points}


def grid_pairs(model: QuasiLPVModel, par: Parameterization, spec: GridSpec):
    """Admissible (r, r+) grid pairs for the sampled system.

    Keeps pairs with r, r+ in Z_r and a successor of r+ whose state part is
    in Z_r. Membership is judged on the gridded and scheduling coordinates;
    coordinates the parameters never read stay at the box centre.
    """
    n = model.n
    box = model.sample_box
    dims = sorted(spec.points)
    r = box.grid(dims, [spec.points[d] for d in dims])
    checked = sorted(set(dims) | set(par.depends_on))
    zr = model.Z_r

    def inside(z, cols):
        return np.all((z[:, cols] >= zr.lo[cols] - 1e-12) & (z[:, cols] <= zr.hi[cols] + 1e-12), axis=1)

    r = r[inside(r, checked)]
    succ_in = [d for d in par.depends_on if d >= n]
    all_in = list(range(n, model.nz))
    sp = spec.successor_points or max([spec.points.get(d, 2) for d in succ_in] + [2])
    u_next = box.grid(succ_in, sp)[:, all_in] if succ_in else box.center[None, all_in]
    xp = model.successor(r)
    rp = np.concatenate([np.repeat(xp, len(u_next), 0), np.tile(u_next, (r.shape[0], 1))], axis=1)
    rr = np.repeat(r, len(u_next), 0)
    ok = inside(rp, checked)
    # look-ahead: some successor of r+ must exist inside Z_r
    xpp = model.successor(rp)
    state_checked = [d for d in checked if d < n]
    ok &= np.all((xpp[:, state_checked] >= zr.lo[state_checked] - 1e-12) & (xpp[:, state_checked] <= zr.hi[state_checked] + 1e-12), axis=1)
    if not ok.any():
        raise EmptyGrid(f"no admissible grid pair for {model.name}")
    return rr[ok], rp[ok]


def continuous_grid(model: QuasiLPVModel, par: Parameterization, spec: GridSpec):
    """Grid points r and reference rates r_dot at the input-rate vertices."""
    n = model.n
    box = model.sample_box
    dims = sorted(spec.points)
    r = box.grid(dims, [spec.points[d] for d in dims])
    checked = sorted(set(dims) | set(par.depends_on))
    zr = model.Z_r
    r = r[np.all((r[:, checked] >= zr.lo[checked] - 1e-12) & (r[:, checked] <= zr.hi[checked] + 1e-12), axis=1)]
    if r.shape[0] == 0:
        raise EmptyGrid(f"no admissible grid point for {model.name}")
    xdot = model.vector_field(r[:, :n], r[:, n:])
    reads_input = any(d >= n for d in par.depends_on)
    rate = np.zeros(model.m) if model.u_rate_max is None else np.asarray(model.u_rate_max, float)
    if reads_input and spec.u_rate_vertices and np.any(rate > 0):
        corners = np.array(list(itertools.product((-1.0, 1.0), repeat=model.m))) * rate
    else:
        corners = np.zeros((1, model.m))
    rr = np.repeat(r, len(corners), 0)
    rdot = np.concatenate([np.repeat(xdot, len(corners), 0), np.tile(corners, (r.shape[0], 1))], axis=1)
    return rr, rdot


def hexagon_vertices(lo, hi, dlo, dhi) -> np.ndarray:
    """Vertices of {(a, b): a, b in [lo, hi], b - a in [dlo, dhi]}."""
    # half-planes g . z <= c
    G = np.array([[1, 0], [-1, 0], [0, 1], [0, -1], [-1, 1], [1, -1]], float)
    c = np.array([hi, -lo, hi, -lo, dhi, -dlo], float)
    pts = []
    for i, j in itertools.combinations(range(6), 2):
        M = G[[i, j]]
        if abs(np.linalg.det(M)) < 1e-12:
            continue
        z = np.linalg.solve(M, c[[i, j]])
        if np.all(G @ z <= c + 1e-12 * (1 + np.abs(c))):
            if not any(np.allclose(z, q, rtol=0, atol=1e-14 * (1 + abs(hi) + abs(lo))) for q in pts):
                pts.append(z)
    if not pts:
        raise EmptyGrid("empty parameter polygon")
    pts = np.array(pts)
    ctr = pts.mean(0)
    order = np.argsort(np.arctan2(pts[:, 1] - ctr[1], pts[:, 0] - ctr[0]))
    return pts[order]


def vertex_pairs(Theta: Box, Omega: Box, mode: str = "box", cap: int = 200_000) -> np.ndarray:
    """Vertices (theta, theta+) of the joint parameter set, shape (nv, 2p).

    ``box`` uses Theta x (Theta + Omega) with 4^p vertices; ``full`` uses the
    per-coordinate hexagons (up to 6^p vertices); ``rate`` uses Theta x Omega
    for continuous time.
    """
    p = Theta.dim
    if p == 0:
        return np.zeros((1, 0))
    if mode in ("box", "rate"):
        second = Box(Theta.lo + Omega.lo, Theta.hi + Omega.hi) if mode == "box" else Omega
        count = 4**p
        if count > cap:
            raise VertexExplosion(f"{count} vertices exceed the cap {cap}")
        a = np.array(list(itertools.product(*zip(Theta.lo, Theta.hi))))
        b = np.array(list(itertools.product(*zip(second.lo, second.hi))))
        return np.concatenate([np.repeat(a, len(b), 0), np.tile(b, (len(a), 1))], axis=1)
    if mode != "full":
        raise ValueError(f"unknown vertex mode {mode!r}")
    polys = [hexagon_vertices(Theta.lo[i], Theta.hi[i], Omega.lo[i], Omega.hi[i]) for i in range(p)]
    count = int(np.prod([len(q) for q in polys]))
    if count > cap:
        raise VertexExplosion(f"{count} vertices exceed the cap {cap}")
    out = np.zeros((count, 2 * p))
    for k, combo in enumerate(itertools.product(*polys)):
        combo = np.array(combo)
        out[k, :p] = combo[:, 0]
        out[k, p:] = combo[:, 1]
    return out


# --------------------------------------------------------------------------
# LMI assembly


def _embed(s, blocks):
    """Symmetric s x s matrices from lower blocks {(rows, cols): M} (batched)."""
    shape = None
    for M in blocks.values():
        shape = M.shape[:-2]
        break
    out = np.zeros(shape + (s, s))
    for (ri, ci), M in blocks.items():
        ri, ci = slice(*ri), slice(*ci)
        out[..., ri, ci] += M
        if ri != ci:
            out[..., ci, ri] += np.swapaxes(M, -1, -2)
    return out


class _Vars:
    def __init__(self, n, m, p, lam_dim=0, lam_diag=False):
        self.n, self.m, self.p = n, m, p
        self.layout = sdp.Layout()
        self.off_X = self.layout.add_sym("X", n, p + 1)
        self.off_Y = self.layout.add_full("Y", m, n, p + 1)
        self.off_Xmin = self.layout.add_sym("Xmin", n)
        self.lam_dim = lam_dim
        self.lam_diag = lam_diag
        if lam_dim and p:
            if lam_diag:
                self.off_L = self.layout.add_full("lam", 1, 1, p)
            else:
                self.off_L = self.layout.add_sym("Lam", lam_dim, p)
        self.S = sdp.sym_basis(n)
        self.E = sdp.full_basis(m, n)
        if lam_dim:
            self.SL = np.eye(lam_dim)[None] if lam_diag else sdp.sym_basis(lam_dim)

    def lam_values(self, y):
        v = self.layout.unpack(y)
        if not self.lam_dim or not self.p:
            return np.zeros((0, self.lam_dim, self.lam_dim))
        if self.lam_diag:
            return v["lam"][:, 0, 0][:, None, None] * np.eye(self.lam_dim)
        return v["Lam"]


class _Centering:
    """Affine rescaling of the scheduling variables used for the decision basis.

    The basis matrices multiply (theta - c) / w instead of theta. This is an
    exact change of variables that keeps the Newton systems well conditioned
    when a parameter barely varies over the grid.
    """

    def __init__(self, *theta_bars):
        th = np.concatenate([np.atleast_2d(t)[:, 1:] for t in theta_bars], axis=0)
        if th.shape[1] == 0:
            self.c = np.zeros(0)
            self.w = np.ones(0)
        else:
            lo, hi = th.min(axis=0), th.max(axis=0)
            self.c = 0.5 * (lo + hi)
            w = 0.5 * (hi - lo)
            self.w = np.where(w > 1e-12 * np.maximum(1.0, np.abs(self.c)), w, 1.0)

    def phi(self, tb):
        tb = np.atleast_2d(tb)
        return np.concatenate([tb[:, :1], (tb[:, 1:] - self.c) / self.w], axis=1)

    def restore(self, M):
        """Map basis coefficients of (theta - c)/w back to coefficients of theta."""
        M = np.array(M, dtype=float)
        out = M.copy()
        out[1:] = M[1:] / self.w[:, None, None]
        out[0] = M[0] - np.einsum("j,jab->ab", self.c, out[1:])
        return out


def _xmin_families(V: _Vars, theta_bar_unique):
    n = V.n
    nS = V.S.shape[0]
    fam = sdp.LMIFamily(
        np.zeros((n, n)),
        [
            sdp.Term(V.off_X, theta_bar_unique, V.S),
            sdp.Term(V.off_Xmin, np.ones((theta_bar_unique.shape[0], 1)), -V.S),
        ],
        "Xmin<=X",
    )
    logdet = sdp.LMIFamily(np.zeros((n, n)), [sdp.Term(V.off_Xmin, np.ones((1, 1)), V.S)], "logdet")
    del nS
    return fam, logdet


def _discrete_family(V: _Vars, par, tb, tbp, Qh, Rh, output: OutputCost | None, lam_phi=None, cen=None):
    """Main inequality at every row of (tb, tbp): theta_bar of r and of r+."""
    n, m = V.n, V.m
    phi, phip = (tb, tbp) if cen is None else (cen.phi(tb), cen.phi(tbp))
    nb = tb.shape[0]
    A = np.einsum("kj,jab->kab", tb, par.A_basis)
    B = np.einsum("kj,jab->kab", tb, par.B_basis)
    i1, i2 = (0, n), (n, 2 * n)
    if output is None:
        i3, i4 = (2 * n, 3 * n), (3 * n, 3 * n + m)
        s = 3 * n + m
    else:
        ny = output.ny
        i3, i4 = (2 * n, 2 * n + ny), (2 * n + ny, 3 * n + ny)
        s = 3 * n + ny
        C = np.einsum("kj,jab->kab", tb, output.C)
        D = np.einsum("kj,jab->kab", tb, output.D)
    S, E = V.S, V.E
    # X_j coefficient theta_bar_j(r)
    AS = np.einsum("kab,sbc->ksac", A, S)
    xblocks = {(i1, i1): np.broadcast_to(S, (nb,) + S.shape), (i2, i1): AS}
    if output is None:
        xblocks[(i3, i1)] = np.broadcast_to(Qh @ S, (nb,) + S.shape)
    else:
        xblocks[(i3, i1)] = np.einsum("kab,sbc->ksac", C, S)
        xblocks[(i4, i1)] = np.broadcast_to(np.sqrt(output.eps) * S, (nb,) + S.shape)
    Xmats = _embed(s, xblocks)
    Xplus = _embed(s, {(i2, i2): S})
    BE = np.einsum("kab,ebc->keac", B, E)
    yblocks = {(i2, i1): BE}
    if output is None:
        yblocks[(i4, i1)] = np.broadcast_to(Rh @ E, (nb,) + E.shape)
    else:
        yblocks[(i3, i1)] = yblocks.get((i3, i1), 0) + np.einsum("kab,ebc->keac", D, E)
    Ymats = _embed(s, yblocks)
    const = np.zeros((s, s))
    if output is None:
        const[slice(*i3), slice(*i3)] = np.eye(n)
        const[slice(*i4), slice(*i4)] = np.eye(m)
    else:
        Sinv = np.einsum("kj,jab->kab", tb, output.S_inv)
        const = np.zeros((nb, s, s))
        const[:, slice(*i3), slice(*i3)] = Sinv
        const[:, slice(*i4), slice(*i4)] = np.eye(n)
    terms = [
        sdp.Term(V.off_X, phi, Xmats),
        sdp.Term(V.off_X, phip, Xplus),
        sdp.Term(V.off_Y, phi, Ymats),
    ]
    if lam_phi is not None and V.p:
        k = V.lam_dim
        mats = np.zeros((V.SL.shape[0], s, s))
        mats[:, :k, :k] = -V.SL
        terms.append(sdp.Term(V.off_L, lam_phi, mats))
    return sdp.LMIFamily(const, terms, "decrease")


def _continuous_family(V: _Vars, par, tb, tdot, Qh, Rh, lam_phi=None, cen=None):
    """Negated continuous-time inequality: block size 2n+m."""
    n, m = V.n, V.m
    phi = tb if cen is None else cen.phi(tb)
    if cen is not None:
        tdot = tdot / cen.w
    nb = tb.shape[0]
    A = np.einsum("kj,jab->kab", tb, par.A_basis)
    B = np.einsum("kj,jab->kab", tb, par.B_basis)
    i1, i2, i3 = (0, n), (n, 2 * n), (2 * n, 2 * n + m)
    s = 2 * n + m
    S, E = V.S, V.E
    AS = np.einsum("kab,sbc->ksac", A, S)
    sym = AS + np.swapaxes(AS, -1, -2)
    Xmats = _embed(s, {(i1, i1): -sym, (i2, i1): np.broadcast_to(-Qh @ S, (nb,) + S.shape)})
    Xdot = _embed(s, {(i1, i1): S})
    BE = np.einsum("kab,ebc->keac", B, E)
    Ymats = _embed(s, {
        (i1, i1): -(BE + np.swapaxes(BE, -1, -2)),
        (i3, i1): np.broadcast_to(-Rh @ E, (nb,) + E.shape),
    })
    const = np.zeros((s, s))
    const[slice(*i2), slice(*i2)] = np.eye(n)
    const[slice(*i3), slice(*i3)] = np.eye(m)
    tdot_bar = np.concatenate([np.zeros((nb, 1)), tdot], axis=1)
    terms = [
        sdp.Term(V.off_X, phi, Xmats),
        sdp.Term(V.off_X, tdot_bar, Xdot),
        sdp.Term(V.off_Y, phi, Ymats),
    ]
    if lam_phi is not None and V.p:
        k = V.lam_dim
        mats = np.zeros((V.SL.shape[0], s, s))
        mats[:, :k, :k] = -V.SL
        terms.append(sdp.Term(V.off_L, lam_phi, mats))
    return sdp.LMIFamily(const, terms, "decrease")


def _multiconvex_families(V: _Vars, par, time_domain, output: OutputCost | None = None, cen=None):
    """Lam_i - [[0, Z_i'], [Z_i, 0]] >= 0 (discrete) or Lam_i + Z_i + Z_i' >= 0, and Lam_i >= 0."""
    fams = []
    n, p = V.n, V.p
    k = V.lam_dim
    nL = V.SL.shape[0]
    for i in range(1, p + 1):
        S, E = V.S, V.E
        Ai, Bi = par.A_basis[i], par.B_basis[i]
        nS, nE = S.shape[0], E.shape[0]
        xm = np.zeros((nS, k, k))
        ym = np.zeros((nE, k, k))
        AS = np.einsum("ab,sbc->sac", Ai, S)
        BE = np.einsum("ab,ebc->eac", Bi, E)
        if time_domain == "discrete":
            xm[:, n:2 * n, :n] = -AS
            xm[:, :n, n:2 * n] = -np.swapaxes(AS, -1, -2)
            ym[:, n:2 * n, :n] = -BE
            ym[:, :n, n:2 * n] = -np.swapaxes(BE, -1, -2)
            if output is not None:
                CS = np.einsum("ab,sbc->sac", output.C[i], S)
                DE = np.einsum("ab,ebc->eac", output.D[i], E)
                ny = output.ny
                xm[:, 2 * n:2 * n + ny, :n] = -CS
                xm[:, :n, 2 * n:2 * n + ny] = -np.swapaxes(CS, -1, -2)
                ym[:, 2 * n:2 * n + ny, :n] = -DE
                ym[:, :n, 2 * n:2 * n + ny] = -np.swapaxes(DE, -1, -2)
        else:
            xm[:] = AS + np.swapaxes(AS, -1, -2)
            ym[:] = BE + np.swapaxes(BE, -1, -2)
        if cen is not None:
            xm /= cen.w[i - 1]
            ym /= cen.w[i - 1]
        one = np.ones((1, 1))
        lam_off = V.off_L + (i - 1) * nL
        fams.append(sdp.LMIFamily(
            np.zeros((k, k)),
            [
                sdp.Term(lam_off, one, V.SL),
                sdp.Term(V.off_X + i * nS, one, xm),
                sdp.Term(V.off_Y + i * nE, one, ym),
            ],
            f"multiconvex-{i}",
        ))
        fams.append(sdp.LMIFamily(np.zeros((k, k)), [sdp.Term(lam_off, one, V.SL)], f"lam-{i}"))
    return fams


def _sqrt_weights(Q, R, eps):
    Q = np.atleast_2d(np.asarray(Q, float))
    R = np.atleast_2d(np.asarray(R, float))
    Qh = np.real(sqrtm(Q + eps * np.eye(Q.shape[0])))
    Rh = np.real(sqrtm(R))
    return Q, R, Qh, Rh


def _finish(V, problem, settings, par, model, Q, R, eps, time_domain, mode, audit, output=None, cen=None):
    t0 = time.perf_counter()
    sol = sdp.solve(problem, settings)
    wall = time.perf_counter() - t0
    audit = dict(audit)
    audit.update({
        "solver_status": sol.status.value,
        "solver_margin": float(sol.margin),
        "solver_iterations": sol.iterations,
        "objective": float(sol.objective) if np.isfinite(sol.objective) else None,
        "wall_time": wall,
        "blocks": problem.block_count(),
    })
    if not sol.ok:
        raise Infeasible(f"{mode} synthesis for {model.name}: {sol.status.value} ({sol.message})", sol)
    v = sol.variables
    X, Y = v["X"], v["Y"]
    if cen is not None:
        X, Y = cen.restore(X), cen.restore(Y)
    ing = TerminalIngredients(
        X=0.5 * (X + np.swapaxes(X, -1, -2)), Y=Y, par=par if par.p else None,
        Q=Q, R=R, epsilon=eps, time_domain=time_domain, mode=mode, model_name=model.name,
        h=model.h, theta_description=list(par.labels), audit=audit, output=output,
    )
    ing.audit["Xmin_logdet"] = float(np.linalg.slogdet(v["Xmin"][0])[1])
    return ing, sol, V


def synthesize_grid_discrete(
    model: QuasiLPVModel, Q, R, eps: float = 0.1, grid: GridSpec | None = None,
    settings: sdp.Settings | None = None, pairs=None, output: OutputCost | None = None,
) -> TerminalIngredients:
    """Gridded synthesis for the sampled system (one LMI block per grid pair)."""
    par = model.parameterization("discrete")
    if pairs is None:
        grid = grid or GridSpec(model.extra.get("grid_discrete", {}))
        r, rp = grid_pairs(model, par, grid)
    else:
        r, rp = pairs
    Q, R, Qh, Rh = _sqrt_weights(Q, R, eps)
    V = _Vars(model.n, model.m, par.p)
    tb, tbp = par.theta_bar(r), par.theta_bar(rp)
    cen = _Centering(tb, tbp)
    main = _discrete_family(V, par, tb, tbp, Qh, Rh, output, cen=cen)
    xfam, logdet = _xmin_families(V, cen.phi(np.unique(tb, axis=0)))
    problem = sdp.SDProblem(V.layout, [main, xfam], logdet)
    audit = {"pairs": int(r.shape[0]), "grid": None if grid is None else grid.to_json()}
    ing, _, _ = _finish(V, problem, settings, par, model, Q, R, eps, "discrete",
                        "output-grid" if output is not None else "grid", audit, output, cen)
    ing.points = (r, rp)
    return ing


def synthesize_convex_discrete(
    model: QuasiLPVModel, Q, R, eps: float, Theta: Box, Omega: Box, box_mode: str = "box",
    settings: sdp.Settings | None = None, diagonal_multipliers: bool = False,
    vertex_cap: int = 200_000, output: OutputCost | None = None, screen: int | None = 512,
    seed: int = 0,
) -> tuple[TerminalIngredients, MultiConvexCertificate]:
    """Vertex synthesis over the parameter polytope with multi-convexity multipliers.

    With more than ``screen`` vertices, a random subset of that size is solved
    first. The subset problem is a relaxation, so its infeasibility settles
    the full problem without assembling every vertex block.
    """
    par = model.parameterization("discrete")
    p = par.p
    verts = vertex_pairs(Theta, Omega, box_mode, vertex_cap)
    if screen is not None and len(verts) > screen:
        pick = np.sort(np.random.default_rng(seed).choice(len(verts), screen, replace=False))
        try:
            _convex_discrete(model, par, Q, R, eps, verts[pick], box_mode, settings,
                             diagonal_multipliers, output, {"screened_from": int(len(verts))})
        except Infeasible as exc:
            exc.args = (f"{exc.args[0]} [vertex subset {screen} of {len(verts)}]",)
            raise
    return _convex_discrete(model, par, Q, R, eps, verts, box_mode, settings, diagonal_multipliers, output, {})


def _convex_discrete(model, par, Q, R, eps, verts, box_mode, settings, diagonal_multipliers, output, extra):
    p = par.p
    Q, R, Qh, Rh = _sqrt_weights(Q, R, eps)
    k = 2 * model.n + (output.ny if output is not None else 0)
    V = _Vars(model.n, model.m, p, lam_dim=k, lam_diag=diagonal_multipliers)
    tb = np.concatenate([np.ones((len(verts), 1)), verts[:, :p]], axis=1)
    tbp = np.concatenate([np.ones((len(verts), 1)), verts[:, p:]], axis=1)
    cen = _Centering(tb, tbp)
    main = _discrete_family(V, par, tb, tbp, Qh, Rh, output, lam_phi=verts[:, :p] ** 2, cen=cen)
    xfam, logdet = _xmin_families(V, cen.phi(np.unique(tb, axis=0)))
    fams = [main, xfam] + _multiconvex_families(V, par, "discrete", output, cen)
    problem = sdp.SDProblem(V.layout, fams, logdet)
    audit = {"vertices": int(len(verts)), "vertex_mode": box_mode, "diagonal_multipliers": diagonal_multipliers, **extra}
    ing, sol, V = _finish(V, problem, settings, par, model, Q, R, eps, "discrete", f"convex-{box_mode}", audit, output, cen)
    cert = MultiConvexCertificate(V.lam_values(sol.y), verts, box_mode)
    return ing, cert


def synthesize_grid_continuous(
    model: QuasiLPVModel, Q, R, eps: float = 0.1, grid: GridSpec | None = None,
    settings: sdp.Settings | None = None, allow_finite_differences: bool = True,
) -> TerminalIngredients:
    """Gridded continuous-time synthesis including the rate term of X(r)."""
    par = model.parameterization("continuous")
    if par.gradient is None and not allow_finite_differences and par.p:
        raise MissingThetaGradients(f"{model.name}: no analytic parameter gradient")
    grid = grid or GridSpec(model.extra.get("grid_continuous", {}))
    r, rdot = continuous_grid(model, par, grid)
    Q, R, Qh, Rh = _sqrt_weights(Q, R, eps)
    V = _Vars(model.n, model.m, par.p)
    tb = par.theta_bar(r)
    tdot = np.einsum("kpd,kd->kp", par.theta_gradient(r), rdot) if par.p else np.zeros((len(r), 0))
    cen = _Centering(tb)
    main = _continuous_family(V, par, tb, tdot, Qh, Rh, cen=cen)
    xfam, logdet = _xmin_families(V, cen.phi(np.unique(tb, axis=0)))
    problem = sdp.SDProblem(V.layout, [main, xfam], logdet)
    audit = {"points": int(r.shape[0]), "grid": grid.to_json()}
    ing, _, _ = _finish(V, problem, settings, par, model, Q, R, eps, "continuous", "grid", audit, cen=cen)
    ing.points = (r, rdot)
    return ing


def synthesize_convex_continuous(
    model: QuasiLPVModel, Q, R, eps: float, Theta: Box, Omega: Box,
    settings: sdp.Settings | None = None, diagonal_multipliers: bool = False, vertex_cap: int = 200_000,
) -> tuple[TerminalIngredients, MultiConvexCertificate]:
    """Vertex synthesis over Theta x Omega (parameter and parameter rate)."""
    par = model.parameterization("continuous")
    p = par.p
    verts = vertex_pairs(Theta, Omega, "rate", vertex_cap)
    Q, R, Qh, Rh = _sqrt_weights(Q, R, eps)
    V = _Vars(model.n, model.m, p, lam_dim=model.n, lam_diag=diagonal_multipliers)
    tb = np.concatenate([np.ones((len(verts), 1)), verts[:, :p]], axis=1)
    cen = _Centering(tb)
    main = _continuous_family(V, par, tb, verts[:, p:], Qh, Rh, lam_phi=verts[:, :p] ** 2, cen=cen)
    xfam, logdet = _xmin_families(V, cen.phi(np.unique(tb, axis=0)))
    fams = [main, xfam] + _multiconvex_families(V, par, "continuous", cen=cen)
    problem = sdp.SDProblem(V.layout, fams, logdet)
    audit = {"vertices": int(len(verts)), "vertex_mode": "rate", "diagonal_multipliers": diagonal_multipliers}
    ing, sol, V = _finish(V, problem, settings, par, model, Q, R, eps, "continuous", "convex", audit, cen=cen)
    return ing, MultiConvexCertificate(V.lam_values(sol.y), verts, "rate")


def synthesize_output_cost(
    model: QuasiLPVModel, output: OutputCost, grid: GridSpec | None = None,
    settings: sdp.Settings | None = None, pairs=None, Q=None, R=None,
) -> TerminalIngredients:
    """Gridded synthesis with a linearized output stage cost."""
    n, m = model.n, model.m
    Q = np.eye(n) if Q is None else Q
    R = np.eye(m) if R is None else R
    output = output.padded(model.parameterization("discrete").p)
    return synthesize_grid_discrete(model, Q, R, output.eps, grid, settings, pairs, output)


# --------------------------------------------------------------------------
# checks


def decrease_margin(ing: TerminalIngredients, model: QuasiLPVModel, r, r_next) -> np.ndarray:
    """Smallest eigenvalue of the one-step decrease inequality at each pair.

    Discrete: P(r) - Q - K'RK - eps I - A_cl' P(r+) A_cl. Continuous (``r_next``
    is the reference rate): -(A_cl'P + P A_cl + dP/dt + Q + eps I + K'RK).
    """
    r = np.atleast_2d(r)
    r_next = np.atleast_2d(r_next)
    n = model.n
    P, K, Xr = ing.evaluate(r, scale=1.0)
    A, B = model.jacobians(r, ing.time_domain)
    Acl = A + B @ K
    if ing.output is None:
        stage = np.atleast_2d(ing.Q) + np.swapaxes(K, -1, -2) @ np.atleast_2d(ing.R) @ K
    else:
        tb = ing.theta_bar(r)
        C = np.einsum("kj,jab->kab", tb, ing.output.C)
        D = np.einsum("kj,jab->kab", tb, ing.output.D)
        S = np.linalg.inv(np.einsum("kj,jab->kab", tb, ing.output.S_inv))
        G = C + D @ K
        stage = np.swapaxes(G, -1, -2) @ S @ G
    eye = np.eye(n)
    eps = ing.epsilon if ing.output is None else ing.output.eps
    if ing.time_domain == "discrete":
        Pp, _, _ = ing.evaluate(r_next, scale=1.0)
        M = P - stage - eps * eye - np.swapaxes(Acl, -1, -2) @ Pp @ Acl
    else:
        if ing.p:
            grad = ing.par.theta_gradient(r)
            tdot = np.einsum("kpd,kd->kp", grad, r_next)
            Xdot = np.einsum("kj,jab->kab", tdot, ing.X[1:])
        else:
            Xdot = np.zeros_like(P)
        Pdot = -P @ Xdot @ P
        M = -(np.swapaxes(Acl, -1, -2) @ P + P @ Acl + Pdot + stage + eps * eye)
    M = 0.5 * (M + np.swapaxes(M, -1, -2))
    return np.linalg.eigvalsh(M)[:, 0]


def lmi_margin(ing: TerminalIngredients, model: QuasiLPVModel, r, r_next) -> np.ndarray:
    """Smallest eigenvalue of the synthesis LMI block itself (scale-free check)."""
    r = np.atleast_2d(r)
    par = model.parameterization(ing.time_domain)
    V = _Vars(model.n, model.m, ing.p)
    _, _, Qh, Rh = _sqrt_weights(ing.Q, ing.R, ing.epsilon)
    y = np.zeros(V.layout.size)
    nS = V.S.shape[0]
    iu = np.triu_indices(model.n)
    for j in range(ing.p + 1):
        y[V.off_X + j * nS:V.off_X + (j + 1) * nS] = ing.X[j][iu]
        y[V.off_Y + j * model.m * model.n:V.off_Y + (j + 1) * model.m * model.n] = ing.Y[j].reshape(-1)
    tb = ing.theta_bar(r)
    if ing.time_domain == "discrete":
        fam = _discrete_family(V, par, tb, ing.theta_bar(r_next), Qh, Rh, ing.output)
    else:
        tdot = np.einsum("kpd,kd->kp", par.theta_gradient(r), np.atleast_2d(r_next)) if ing.p else np.zeros((len(r), 0))
        fam = _continuous_family(V, par, tb, tdot, Qh, Rh)
    return np.linalg.eigvalsh(fam.value(y))[:, 0]


def lambda_max(ing: TerminalIngredients, r) -> float:
    P, _, _ = ing.evaluate(np.atleast_2d(r), scale=1.0)
    return float(np.linalg.eigvalsh(P)[:, -1].max())


MODES = ("grid-discrete", "convex-discrete", "grid-continuous", "convex-continuous", "output-cost")


def synthesize(model: QuasiLPVModel, mode: str, Q, R, eps: float = 0.1, grid: GridSpec | None = None,
               settings: sdp.Settings | None = None, box_mode: str = "box", hyperbox_density: int = 50,
               screen: int | None = 512, seed: int = 0) -> TerminalIngredients:
    """Run one synthesis mode by name; convex modes bound theta by sampling first."""
    from .model import hyperbox_bounds

    if mode == "grid-discrete":
        return synthesize_grid_discrete(model, Q, R, eps, grid, settings)
    if mode == "grid-continuous":
        return synthesize_grid_continuous(model, Q, R, eps, grid, settings)
    if mode == "output-cost":
        out = OutputCost.quadratic(Q, R, eps)
        return synthesize_output_cost(model, out, grid, settings, Q=Q, R=R)
    if mode in ("convex-discrete", "convex-continuous"):
        td = mode.split("-")[1]
        pb = hyperbox_bounds(model, td, density=hyperbox_density)
        if td == "discrete":
            ing, _ = synthesize_convex_discrete(model, Q, R, eps, pb.Theta, pb.Omega, box_mode, settings,
                                                screen=screen, seed=seed)
        else:
            ing, _ = synthesize_convex_continuous(model, Q, R, eps, pb.Theta, pb.Omega, settings)
        return ing
    raise ValueError(f"unknown synthesis mode {mode!r}; choose one of {', '.join(MODES)}")
