"""Dense primal-dual solver for small block-diagonal LMI problems.

Problems have the form::

    minimize    c'y - log det G(y)
    subject to  F_b(y) >= 0   for every block b

where every F_b and G is affine in the decision vector ``y``. Blocks are
grouped into :class:`LMIFamily` objects that share a size ``s``. A family
stores its linear part in factored form: a term contributes
``sum_{j,a} phi[b, j] * mats[b, a] * y[offset + j*A + a]`` to block ``b``.
This matches the gain-scheduled LMIs used for terminal ingredient
synthesis (coefficients ``theta_j(r)`` times a handful of per-block
template matrices) and keeps memory proportional to the number of
templates, not to the number of decision variables.

The solver is an infeasible-start primal-dual path-following method with
Nesterov-Todd scaling and Mehrotra's predictor-corrector.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

log = logging.getLogger(__name__)

_CHUNK_BYTES = 64 * 2**20


class Status(str, Enum):
    OPTIMAL = "Optimal"
    FEASIBLE = "Feasible"
    INFEASIBLE = "Infeasible"
    MAX_ITER = "MaxIter"
    NUMERICAL_FAILURE = "NumericalFailure"


class SDPError(RuntimeError):
    pass


def sym_basis(n: int) -> np.ndarray:
    """Basis of symmetric n x n matrices, shape (n(n+1)/2, n, n)."""
    out = []
    for i in range(n):
        for j in range(i, n):
            e = np.zeros((n, n))
            e[i, j] = 1.0
            e[j, i] = 1.0
            out.append(e)
    return np.array(out).reshape(-1, n, n)


def full_basis(rows: int, cols: int) -> np.ndarray:
    """Basis of rows x cols matrices, shape (rows*cols, rows, cols)."""
    return np.eye(rows * cols).reshape(rows * cols, rows, cols)


class Layout:
    """Maps named matrix variables onto slices of the decision vector."""

    def __init__(self):
        self._vars: dict[str, tuple[str, tuple[int, ...], int]] = {}
        self.size = 0

    def add_sym(self, name: str, n: int, count: int = 1) -> int:
        """Register ``count`` symmetric n x n matrices; returns the offset."""
        return self._add(name, "sym", (count, n), count * n * (n + 1) // 2)

    def add_full(self, name: str, rows: int, cols: int, count: int = 1) -> int:
        return self._add(name, "full", (count, rows, cols), count * rows * cols)

    def _add(self, name, kind, shape, size):
        if name in self._vars:
            raise ValueError(f"variable {name!r} already registered")
        offset = self.size
        self._vars[name] = (kind, shape, offset)
        self.size += size
        return offset

    def offset(self, name: str) -> int:
        return self._vars[name][2]

    def names(self):
        return list(self._vars)

    def unpack(self, y: np.ndarray) -> dict[str, np.ndarray]:
        """Turn a decision vector into ``{name: array}``; matrices stacked on axis 0."""
        out = {}
        for name, (kind, shape, off) in self._vars.items():
            if kind == "sym":
                count, n = shape
                k = n * (n + 1) // 2
                basis = sym_basis(n)
                coef = y[off:off + count * k].reshape(count, k)
                out[name] = np.einsum("ca,aij->cij", coef, basis)
            else:
                count, r, c = shape
                out[name] = y[off:off + count * r * c].reshape(count, r, c)
        return out

    def to_json(self):
        return {k: [v[0], list(v[1]), v[2]] for k, v in self._vars.items()}

    @classmethod
    def from_json(cls, data):
        lay = cls()
        for name, (kind, shape, off) in data.items():
            lay._vars[name] = (kind, tuple(shape), off)
            count = shape[0]
            size = count * (shape[1] * (shape[1] + 1) // 2 if kind == "sym" else shape[1] * shape[2])
            lay.size = max(lay.size, off + size)
        return lay


@dataclass
class Term:
    """Factored linear contribution of one variable group to a family."""

    offset: int
    phi: np.ndarray  # (nb, J)
    mats: np.ndarray  # (nb, A, s, s) or shared (A, s, s)

    @property
    def shared(self) -> bool:
        return self.mats.ndim == 3

    @property
    def J(self) -> int:
        return self.phi.shape[1]

    @property
    def A(self) -> int:
        return self.mats.shape[-3]

    @property
    def width(self) -> int:
        return self.J * self.A

    def take(self, sl: slice) -> "Term":
        mats = self.mats if self.shared else self.mats[sl]
        return Term(self.offset, self.phi[sl], mats)


@dataclass
class LMIFamily:
    """A set of ``nb`` affine symmetric blocks of equal size, each required PSD."""

    const: np.ndarray  # (nb, s, s) or shared (s, s)
    terms: list[Term]
    name: str = ""
    nb: int = field(init=False)
    s: int = field(init=False)

    def __post_init__(self):
        self.const = np.asarray(self.const, dtype=float)
        self.s = self.const.shape[-1]
        nbs = {t.phi.shape[0] for t in self.terms}
        if self.const.ndim == 3:
            nbs.add(self.const.shape[0])
        if len(nbs) > 1:
            raise ValueError(f"family {self.name!r}: inconsistent block counts {nbs}")
        self.nb = nbs.pop() if nbs else 1
        for t in self.terms:
            if t.mats.shape[-1] != self.s or t.mats.shape[-2] != self.s:
                raise ValueError(f"family {self.name!r}: term size mismatch")

    @classmethod
    def dense(cls, const, coeffs, name="", offset=0):
        """Family from explicit coefficient matrices ``coeffs`` of shape (nb, d, s, s)."""
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.ndim == 3:
            coeffs = coeffs[None]
        const = np.asarray(const, dtype=float)
        if const.ndim == 2:
            const = np.broadcast_to(const, (coeffs.shape[0],) + const.shape).copy()
        phi = np.ones((coeffs.shape[0], 1))
        return cls(const, [Term(offset, phi, coeffs)], name)

    def take(self, sl: slice) -> "LMIFamily":
        const = self.const if self.const.ndim == 2 else self.const[sl]
        sub = LMIFamily.__new__(LMIFamily)
        sub.const = const
        sub.terms = [t.take(sl) for t in self.terms]
        sub.name = self.name
        sub.s = self.s
        sub.nb = len(range(*sl.indices(self.nb)))
        return sub

    def chunks(self):
        per_block = self.s * self.s * 8 * (2 + sum(t.A for t in self.terms))
        size = max(1, _CHUNK_BYTES // per_block)
        for start in range(0, self.nb, size):
            yield self.take(slice(start, min(start + size, self.nb)))

    def linear(self, y: np.ndarray) -> np.ndarray:
        out = np.zeros((self.nb, self.s, self.s))
        for t in self.terms:
            coef = t.phi @ y[t.offset:t.offset + t.width].reshape(t.J, t.A)
            if t.shared:
                out += np.einsum("ba,ast->bst", coef, t.mats)
            else:
                out += np.einsum("ba,bast->bst", coef, t.mats)
        return out

    def value(self, y: np.ndarray) -> np.ndarray:
        const = self.const if self.const.ndim == 3 else self.const[None]
        return const + self.linear(y)

    def to_json(self):
        return {
            "name": self.name,
            "const": self.const.tolist(),
            "terms": [{"offset": t.offset, "phi": t.phi.tolist(), "mats": t.mats.tolist()} for t in self.terms],
        }

    @classmethod
    def from_json(cls, data):
        terms = [Term(d["offset"], np.array(d["phi"], float), np.array(d["mats"], float)) for d in data["terms"]]
        return cls(np.array(data["const"], float), terms, data.get("name", ""))


@dataclass
class SDProblem:
    layout: Layout
    families: list[LMIFamily]
    logdet: LMIFamily | None = None
    c: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.layout.size

    @property
    def barrier_degree(self) -> int:
        return sum(f.nb * f.s for f in self.families)

    def block_count(self) -> int:
        return sum(f.nb for f in self.families)

    def dump(self, path):
        data = {
            "format": "refmpc-sdp/1",
            "layout": self.layout.to_json(),
            "families": [f.to_json() for f in self.families],
            "logdet": None if self.logdet is None else self.logdet.to_json(),
            "c": None if self.c is None else np.asarray(self.c).tolist(),
        }
        with open(path, "w") as fh:
            json.dump(data, fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            data = json.load(fh)
        if data.get("format") != "refmpc-sdp/1":
            raise ValueError("not a refmpc SDP dump")
        return cls(
            Layout.from_json(data["layout"]),
            [LMIFamily.from_json(f) for f in data["families"]],
            None if data["logdet"] is None else LMIFamily.from_json(data["logdet"]),
            None if data["c"] is None else np.array(data["c"], float),
        )


@dataclass
class Settings:
    tol_psd: float = 1e-8
    gap_tol: float = 1e-7
    kkt_tol: float = 1e-7
    max_iter: int = 200
    step_fraction: float = 0.95
    divergence: float = 1e8
    verbose: bool = False


@dataclass
class SDSolution:
    status: Status
    y: np.ndarray
    variables: dict
    objective: float
    margin: float
    gap: float
    iterations: int
    wall_time: float
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.status in (Status.OPTIMAL, Status.FEASIBLE)


# --------------------------------------------------------------------------
# primal-dual machinery


def _slices(fam: LMIFamily):
    per_block = fam.s * fam.s * 8 * (2 + sum(t.A for t in fam.terms))
    size = max(1, _CHUNK_BYTES // per_block)
    for start in range(0, fam.nb, size):
        yield slice(start, min(start + size, fam.nb))


def _sym(M):
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def _adjoint(fam: LMIFamily, Z, out):
    """out += A*(Z): the derivative of sum_b <F_b(y), Z_b> with respect to y."""
    for sl in _slices(fam):
        ch = fam.take(sl)
        Zc = Z[sl]
        for t in ch.terms:
            if t.shared:
                val = np.einsum("ast,bst->ba", t.mats, Zc)
            else:
                val = np.einsum("bast,bst->ba", t.mats, Zc)
            out[t.offset:t.offset + t.width] += (t.phi.T @ val).reshape(-1)


def _schur(fam: LMIFamily, K, H, weight=1.0):
    """H[i, j] += weight * sum_b <K F_i K', K F_j K'> over the blocks of ``fam``."""
    for sl in _slices(fam):
        ch = fam.take(sl)
        Kc = K[sl]
        Kt = np.swapaxes(Kc, -1, -2)
        s2 = ch.s * ch.s
        tilde = []
        for t in ch.terms:
            mats = t.mats[None] if t.shared else t.mats
            T = Kc[:, None] @ mats @ Kt[:, None]
            tilde.append(T.reshape(ch.nb, t.A, s2))
        for i, ti in enumerate(ch.terms):
            for k in range(i, len(ch.terms)):
                tk = ch.terms[k]
                gram = tilde[i] @ np.swapaxes(tilde[k], -1, -2)
                W = (ti.phi[:, :, None] * tk.phi[:, None, :]).reshape(ch.nb, -1)
                blk = (W.T @ gram.reshape(ch.nb, -1)).reshape(ti.J, tk.J, ti.A, tk.A)
                blk = weight * blk.transpose(0, 2, 1, 3).reshape(ti.width, tk.width)
                H[ti.offset:ti.offset + ti.width, tk.offset:tk.offset + tk.width] += blk
                if k != i:
                    H[tk.offset:tk.offset + tk.width, ti.offset:ti.offset + ti.width] += blk.T


def _min_eig(fams, y):
    out = np.inf
    for fam in fams:
        for sl in _slices(fam):
            out = min(out, np.linalg.eigvalsh(fam.take(sl).value(y))[:, 0].min())
    return out


def _max_step(M):
    """Largest a with I + a*M >= 0 for a batch of symmetric M (inf if unbounded)."""
    if M.size == 0:
        return np.inf
    lo = np.linalg.eigvalsh(_sym(M))[:, 0].min()
    return np.inf if lo >= 0 else float(-1.0 / lo)


def _lin_map(fam: LMIFamily, d):
    """Dense matrix of y -> vec(F(y) - F(0)) restricted to the touched variables."""
    idx = sorted({i for t in fam.terms for i in range(t.offset, t.offset + t.width)})
    cols = []
    for i in idx:
        e = np.zeros(d)
        e[i] = 1.0
        cols.append(fam.linear(e).reshape(-1))
    return np.array(idx, dtype=int), np.array(cols).T


def _ray_quality(states, Ginv, ld, d, tol=1e-6):
    """Normalized <F0, Z> if the current duals form a Farkas certificate, else None.

    A certificate needs A*(Z) ~ 0 relative to tr Z while <F0, Z> < 0; the
    log-det block contributes through G^-1 like one more family.
    """
    AZ = np.zeros(d)
    ztr, f0z = 0.0, 0.0
    for st in states:
        _adjoint(st.fam, st.Z, AZ)
        ztr += float(np.trace(st.Z, axis1=-2, axis2=-1).sum())
        f0z += float((st.fam.const * st.Z).sum())
    if ld is not None:
        _adjoint(ld, Ginv, AZ)
        ztr += float(np.trace(Ginv, axis1=-2, axis2=-1).sum())
        f0z += float((ld.const * Ginv).sum())
    if ztr <= 0 or f0z >= 0:
        return None
    if float(np.abs(AZ).max(initial=0.0)) > tol * ztr and float(np.abs(AZ).max(initial=0.0)) > 1e-3 * -f0z:
        return None
    return f0z / ztr


class _Factor:
    """Jacobi-scaled eigendecomposition of the Schur matrix.

    Curvature below ``rcond`` of the largest (after scaling) is dropped.
    Nearly collinear scheduling parameters create such directions; nothing
    in the problem pins them down, so the minimum-norm step ignores them.
    """

    def __init__(self, H, rcond=1e-11):
        diag = np.diag(H).copy()
        diag[diag <= 0] = 1.0
        self.D = 1.0 / np.sqrt(diag)
        Hs = H * self.D[:, None] * self.D[None, :]
        w, V = np.linalg.eigh(_sym(Hs))
        keep = w > rcond * max(w.max(initial=0.0), 1e-300)
        self.w, self.V = w[keep], V[:, keep]

    def solve(self, b):
        z = self.V @ ((self.V.T @ (b * self.D)) / self.w)
        return z * self.D

    def project(self, r):
        """Component of a dual residual inside the resolved subspace."""
        return (self.V @ (self.V.T @ (r * self.D))) / self.D


class _State:
    """Per-family primal slack S = F(y) - residual and dual Z, both PSD."""

    def __init__(self, fam: LMIFamily, S, Z):
        self.fam, self.S, self.Z = fam, S, Z

    def scale(self):
        """Nesterov-Todd scaling: K S K' = K^-T Z K^-1 = diag(lam)."""
        Ls = np.linalg.cholesky(self.S)
        Lz = np.linalg.cholesky(self.Z)
        U, sig, _ = np.linalg.svd(np.swapaxes(Lz, -1, -2) @ Ls)
        self.lam = sig
        self.K = (sig ** -0.5)[:, :, None] * (np.swapaxes(U, -1, -2) @ np.swapaxes(Lz, -1, -2))


def solve(problem: SDProblem, settings: Settings | None = None, y0=None) -> SDSolution:
    """Solve an :class:`SDProblem` by primal-dual path following.

    Infeasible start with Nesterov-Todd scaling and a Mehrotra
    predictor-corrector. The log-det objective enters the Newton system
    through its exact Hessian; the duality gap bound
    ``f(y) - f* <= sum <S, Z>`` still holds because the objective is convex.

    With a log-det objective the second-order correction can point the step
    against the predictor. When plain Mehrotra stalls on such a problem the
    solve is repeated with the correction dropped in those iterations; the
    returned iteration count and wall time cover both attempts.
    """
    settings = settings or Settings()
    first = _solve(problem, settings, y0, guarded=False)
    if problem.logdet is None or first.status not in (Status.MAX_ITER, Status.NUMERICAL_FAILURE):
        return first
    log.info("plain corrector stalled (%s); retrying with guarded corrector", first.message)
    second = _solve(problem, settings, y0, guarded=True)
    second.iterations += first.iterations
    second.wall_time += first.wall_time
    return second


def _solve(problem: SDProblem, settings: Settings, y0, guarded: bool) -> SDSolution:
    start = time.perf_counter()
    d = problem.dim
    fams = list(problem.families)
    ld = problem.logdet
    c = np.zeros(d) if problem.c is None else np.asarray(problem.c, float)
    y = np.zeros(d) if y0 is None else np.asarray(y0, float).copy()
    scale = max([1.0] + [float(np.abs(f.const).max()) for f in fams + ([ld] if ld else []) if f.const.size])
    feasibility = ld is None and problem.c is None

    def objective(y):
        val = float(c @ y)
        if ld is not None:
            G = ld.value(y)
            sign, logdet = np.linalg.slogdet(G)
            if np.any(sign <= 0):
                return np.nan
            val -= float(logdet.sum())
        return val

    def result(status, y, iters, msg="", gap=np.inf):
        margin = _min_eig(fams, y) if fams else np.inf
        return SDSolution(status, y, problem.layout.unpack(y), objective(y), margin, gap, iters,
                          time.perf_counter() - start, msg)

    if ld is not None:
        G0 = ld.value(y)
        if np.linalg.eigvalsh(G0)[:, 0].min() <= 0:
            idx, Amat = _lin_map(ld, d)
            target = (np.eye(ld.s)[None] * np.ones((ld.nb, 1, 1)) - G0).reshape(-1)
            sol, *_ = np.linalg.lstsq(Amat, target - Amat @ y[idx], rcond=None)
            y[idx] += sol

    states = []
    for fam in fams:
        F = fam.value(y)
        xi = max(1.0, 10.0 * float(np.abs(F).max()))
        eye = np.broadcast_to(np.eye(fam.s), F.shape)
        states.append(_State(fam, xi * eye.copy(), eye.copy()))
    m = sum(f.nb * f.s for f in fams)

    stall = 0
    gap = np.inf
    for it in range(settings.max_iter):
        try:
            rps = [st.fam.value(y) - st.S for st in states]
            for st in states:
                st.scale()
            gf = c.copy()
            H = np.zeros((d, d))
            if ld is not None:
                G = ld.value(y)
                Lg = np.linalg.cholesky(G)
                Lginv = np.linalg.solve(Lg, np.broadcast_to(np.eye(ld.s), G.shape))
                Ginv = np.swapaxes(Lginv, -1, -2) @ Lginv
                neg = np.zeros(d)
                _adjoint(ld, Ginv, neg)
                gf -= neg
                _schur(ld, Lginv, H)
            AZ = np.zeros(d)
            for st in states:
                _adjoint(st.fam, st.Z, AZ)
                _schur(st.fam, st.K, H)
        except np.linalg.LinAlgError as exc:
            return result(Status.NUMERICAL_FAILURE, y, it, f"factorization breakdown: {exc}", gap)

        gap = float(sum((st.lam ** 2).sum() for st in states))
        mu = gap / max(m, 1)
        fac = _Factor(H)
        rd = fac.project(gf - AZ)
        pinf = max([float(np.abs(r).max()) for r in rps] + [0.0]) / (1.0 + scale)
        dinf = float(np.abs(rd).max(initial=0.0)) / (1.0 + max(np.abs(gf).max(initial=0.0), np.abs(AZ).max(initial=0.0)))
        obj = objective(y)
        if settings.verbose:
            log.info("it=%3d obj=% .8e gap=%.2e pinf=%.2e dinf=%.2e", it, obj, gap, pinf, dinf)

        if feasibility:
            if fams and _min_eig(fams, y) >= 0.0:
                return result(Status.FEASIBLE, y, it, gap=0.0)
            if not fams:
                return result(Status.FEASIBLE, y, it, gap=0.0)
        elif pinf <= settings.kkt_tol and dinf <= settings.kkt_tol and gap <= settings.gap_tol * max(1.0, abs(obj)):
            if not fams or _min_eig(fams, y) >= -settings.tol_psd:
                return result(Status.OPTIMAL, y, it, gap=gap)

        # A dual ray proves infeasibility: PSD (Z, Z_G) with A*(Z) + A_G*(Z_G) = 0
        # and <F(0), Z> + <G(0), Z_G> < 0. Here Z_G = G^-1, and A*(Z) + A_G*(G^-1)
        # stays equal to c - r_d, so the ray appears as the traces growing
        # without bound while the normalized pairing turns negative.
        ztr = sum(float(np.trace(st.Z, axis1=-2, axis2=-1).sum()) for st in states)
        f0z = sum(float((st.fam.const * st.Z).sum()) for st in states)
        if ld is not None:
            ztr += float(np.trace(Ginv, axis1=-2, axis2=-1).sum())
            f0z += float((ld.const * Ginv).sum())
        if ztr > settings.divergence * (1.0 + float(np.abs(c).max(initial=0.0))) and f0z < 0:
            return result(Status.INFEASIBLE, y, it, f"dual ray found (<F0,Z>/tr Z = {f0z / ztr:.2e})", gap)
        # Weak infeasibility: only the boundary of the domain is reachable and the
        # duality gap blows up instead of closing.
        gap0 = gap if it == 0 else gap0
        if gap > settings.divergence * max(1.0, gap0):
            return result(Status.INFEASIBLE, y, it, f"duality gap diverged to {gap:.2e}", gap)

        def direction(Ds):
            rhs = -gf.copy()
            for st, rp, D in zip(states, rps, Ds):
                Kt = np.swapaxes(st.K, -1, -2)
                inner = D - st.K @ rp @ Kt
                _adjoint(st.fam, st.Z + Kt @ inner @ st.K, rhs)
            dy = fac.solve(rhs)
            dSh, dZh = [], []
            for st, rp, D in zip(states, rps, Ds):
                dS = st.fam.linear(dy) + rp
                sh = _sym(st.K @ dS @ np.swapaxes(st.K, -1, -2))
                dSh.append(sh)
                dZh.append(_sym(D - sh))
            return dy, dSh, dZh

        def step_length(dy, dSh, dZh):
            a = np.inf
            for st, sh, zh in zip(states, dSh, dZh):
                r = st.lam ** -0.5
                a = min(a, _max_step(r[:, :, None] * sh * r[:, None, :]), _max_step(r[:, :, None] * zh * r[:, None, :]))
            if ld is not None:
                dG = ld.linear(dy)
                a = min(a, _max_step(Lginv @ dG @ np.swapaxes(Lginv, -1, -2)))
            return a

        # predictor
        Daff = [-(st.lam[:, :, None] * np.eye(st.fam.s)) for st in states]
        dy, dSh, dZh = direction(Daff)
        a_aff = min(1.0, step_length(dy, dSh, dZh))
        mu_aff = sum(
            float(np.einsum("bij,bji->", np.eye(st.fam.s) * st.lam[:, :, None] + a_aff * sh,
                            np.eye(st.fam.s) * st.lam[:, :, None] + a_aff * zh))
            for st, sh, zh in zip(states, dSh, dZh)
        ) / max(m, 1)
        sigma = min(1.0, max(0.0, (mu_aff / mu) ** 3)) if mu > 0 else 0.0
        # corrector
        dy_aff = dy

        def corrector(second_order):
            Ds = []
            for st, sh, zh in zip(states, dSh, dZh):
                lam = st.lam
                R = 2.0 * sigma * mu * np.eye(st.fam.s) - 2.0 * lam[:, :, None] ** 2 * np.eye(st.fam.s)
                if second_order:
                    R = R - (sh @ zh + zh @ sh)
                Ds.append(R / (lam[:, :, None] + lam[:, None, :]))
            return direction(Ds)

        dy, dSh2, dZh2 = corrector(True)
        if guarded and float(dy @ dy_aff) < 0.0:
            # the second-order term turned the predictor around, which the
            # log-det curvature does not support; take the centred step alone
            dy, dSh2, dZh2 = corrector(False)
        dSh, dZh = dSh2, dZh2
        amax = step_length(dy, dSh, dZh)
        a = min(1.0, settings.step_fraction * amax)
        if a < 1e-12:
            stall += 1
            if stall >= 3:
                ray = _ray_quality(states, Ginv if ld is not None else None, ld, d)
                if ray is not None:
                    return result(Status.INFEASIBLE, y, it, f"dual ray at step collapse (<F0,Z>/tr Z = {ray:.2e})", gap)
                return result(Status.NUMERICAL_FAILURE, y, it, "step length collapsed", gap)
            continue
        stall = 0
        dS = [np.linalg.solve(st.K, np.swapaxes(np.linalg.solve(st.K, sh), -1, -2)) for st, sh in zip(states, dSh)]
        dZ = [np.swapaxes(st.K, -1, -2) @ zh @ st.K for st, zh in zip(states, dZh)]
        for _ in range(30):
            # rounding can leave a nominally interior step on the boundary
            try:
                newS = [_sym(st.S + a * ds) for st, ds in zip(states, dS)]
                newZ = [_sym(st.Z + a * dz) for st, dz in zip(states, dZ)]
                for M in newS + newZ:
                    np.linalg.cholesky(M)
                break
            except np.linalg.LinAlgError:
                a *= 0.5
        else:
            return result(Status.NUMERICAL_FAILURE, y, it, "iterates left the cone", gap)
        y = y + a * dy
        for st, S, Z in zip(states, newS, newZ):
            st.S, st.Z = S, Z
    return result(Status.MAX_ITER, y, settings.max_iter, "iteration limit", gap)
