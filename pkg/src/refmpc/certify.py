"""Terminal set size, incremental stability constants and robust bounds.

Everything here is sampling based. Random draws come from
``numpy.random.SeedSequence`` children keyed by chunk index, so results do
not depend on how many workers process the chunks.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import Box, QuasiLPVModel
from .synthesis import GridSpec, NotPositiveDefinite, TerminalIngredients, grid_pairs

log = logging.getLogger(__name__)


class CertificationError(RuntimeError):
    pass


class ZeroSlack(CertificationError):
    pass


class KDependsOnInput(CertificationError):
    pass


class WBoundViolated(CertificationError):
    pass


# --------------------------------------------------------------------------
# constraint rows


@dataclass(frozen=True)
class ConstraintRows:
    """Rows ``L_j r <= l_j`` of Z in reference coordinates.

    Rows flagged ``relative`` bound the deviation from the reference instead,
    ``L_j (r - r_ref) <= l_j``; the car's lateral corridor is such a row.
    ``scale`` is the distance of each facet from the nominal centre and is
    used when constraints are tightened by a fraction.
    """

    L: np.ndarray
    l: np.ndarray
    relative: np.ndarray
    scale: np.ndarray

    def slack(self, r) -> np.ndarray:
        r = np.atleast_2d(r)
        return np.where(self.relative, self.l, self.l - r @ self.L.T)

    def tightened(self, fractions) -> "ConstraintRows":
        """Shift every row inwards by ``fractions * scale``."""
        shift = np.broadcast_to(np.asarray(fractions, float), self.l.shape) * self.scale
        return ConstraintRows(self.L, self.l - shift, self.relative, self.scale)


def constraint_rows(model: QuasiLPVModel, center=None) -> ConstraintRows:
    poly = model.Z_poly
    c = model.Z_r.center if center is None else np.asarray(center, float)
    L, l = poly.L, poly.l
    rel = np.zeros(len(l), dtype=bool)
    scale = l - L @ c
    corridor = model.extra.get("corridor")
    if corridor is not None:
        e = np.zeros(model.nz)
        e[model.extra.get("corridor_row", 1)] = 1.0
        L = np.vstack([L, e, -e])
        l = np.concatenate([l, [corridor, corridor]])
        rel = np.concatenate([rel, [True, True]])
        scale = np.concatenate([scale, [corridor, corridor]])
    return ConstraintRows(L, l, rel, scale)


def _in_constraints(rows: ConstraintRows, z, r, tol=0.0) -> np.ndarray:
    """Worst slack of points ``z`` (k, n+m) given their references ``r``."""
    absolute = rows.l - z @ rows.L.T
    relative = rows.l - (z - r) @ rows.L.T
    return np.where(rows.relative, relative, absolute).min(axis=1)


# --------------------------------------------------------------------------
# sampling helpers


def reference_points(model: QuasiLPVModel, density: int = 20, max_points: int = 200_000) -> np.ndarray:
    """Tensor grid over the finite, non-degenerate coordinates of the sample box, inside Z_r."""
    box = model.sample_box
    dims = [d for d in range(model.nz) if np.isfinite(box.lo[d]) and np.isfinite(box.hi[d]) and box.hi[d] > box.lo[d]]
    density = max(2, min(density, int(max_points ** (1.0 / max(len(dims), 1)))))
    r = box.grid(dims, density)
    return r[model.Z_r.contains(r)]


def sample_references(model: QuasiLPVModel, count: int, rng: np.random.Generator, box: Box | None = None) -> np.ndarray:
    box = model.sample_box if box is None else box
    dims = [d for d in range(model.nz) if box.hi[d] > box.lo[d]]
    out = np.zeros((0, model.nz))
    while out.shape[0] < count:
        r = box.sample(rng, 2 * (count - out.shape[0]) + 16, dims)
        out = np.vstack([out, r[model.Z_r.contains(r)]])
    return out[:count]


def sample_pairs(model: QuasiLPVModel, count: int, rng: np.random.Generator, box: Box | None = None, tries: int = 50):
    """Random admissible pairs (r, r+) with a successor of r+ inside Z_r."""
    box = model.sample_box if box is None else box
    n = model.n
    in_dims = [d for d in range(n, model.nz) if box.hi[d] > box.lo[d]]
    rs, rps = [], []
    have = 0
    for _ in range(tries):
        r = sample_references(model, 2 * (count - have) + 16, rng, box)
        up = box.sample(rng, r.shape[0], in_dims)[:, n:]
        rp = np.concatenate([model.successor(r), up], axis=1)
        ok = model.Z_r.contains(rp)
        xpp = model.successor(rp)
        ok &= _states_inside(model, xpp)
        rs.append(r[ok])
        rps.append(rp[ok])
        have += int(ok.sum())
        if have >= count:
            break
    r, rp = np.concatenate(rs)[:count], np.concatenate(rps)[:count]
    if r.shape[0] < count:
        raise CertificationError(f"only {r.shape[0]} admissible pairs found for {model.name}")
    return r, rp


def _states_inside(model, x):
    lo, hi = model.Z_r.lo[: model.n], model.Z_r.hi[: model.n]
    return np.all((x >= lo) & (x <= hi), axis=1)


def unit_ball(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    g = rng.standard_normal((count, dim))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    return g * rng.uniform(size=(count, 1)) ** (1.0 / dim)


def ellipsoid_offsets(P: np.ndarray, alpha: float, z: np.ndarray) -> np.ndarray:
    """Map unit-ball points ``z`` (k, s, n) into ``{dx : dx' P dx <= alpha}`` (P is (k, n, n))."""
    C = np.linalg.cholesky(P)
    Ct = np.swapaxes(C, -1, -2)
    return np.sqrt(alpha) * np.linalg.solve(Ct[:, None], z[..., None])[..., 0]


def _chunks(total: int, size: int):
    return [(s, min(total, s + size)) for s in range(0, total, size)]


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(fn, items))


# --------------------------------------------------------------------------
# report


@dataclass
class CertificationReport:
    c_l: float = float("nan")
    c_u: float = float("nan")
    k_u: float = float("nan")
    c_u2: float = float("nan")
    sweep_points: int = 0
    lipschitz: float = float("nan")
    taylor: float = float("nan")
    taylor_raw: float = float("nan")
    alpha1_formula: float = float("nan")
    alpha1_sampling: float | None = None
    alpha2: float = float("nan")
    alpha: float = float("nan")
    rho: float = float("nan")
    overshoot: float = float("nan")
    robust: dict = field(default_factory=dict)
    sampling: dict = field(default_factory=dict)

    @property
    def alpha1(self) -> float:
        return self.alpha1_formula if self.alpha1_sampling is None else self.alpha1_sampling

    def to_json(self) -> dict:
        def clean(v):
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            if isinstance(v, (list, tuple)):
                return [clean(x) for x in v]
            if isinstance(v, np.ndarray):
                return clean(v.tolist())
            if isinstance(v, (np.floating, np.integer)):
                v = v.item()
            if isinstance(v, float) and not np.isfinite(v):
                return None if np.isnan(v) else ("inf" if v > 0 else "-inf")
            return v

        return clean(asdict(self))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True)

    def to_text(self) -> str:
        lines = [
            f"c_l = {self.c_l:.6g}    c_u = {self.c_u:.6g}    k_u = {self.k_u:.6g}    c_u2 = {self.c_u2:.6g}",
            f"lipschitz = {self.lipschitz:.6g}    taylor = {self.taylor:.6g} (raw {self.taylor_raw:.6g})",
            f"alpha1 (formula) = {self.alpha1_formula:.6g}",
            f"alpha1 (sampling) = {self.alpha1_sampling if self.alpha1_sampling is None else format(self.alpha1_sampling, '.6g')}",
            f"alpha2 = {self.alpha2:.6g}    alpha = {self.alpha:.6g}",
            f"rho = {self.rho:.8g}    overshoot = {self.overshoot:.6g}",
        ]
        for k, v in self.robust.items():
            if not isinstance(v, (list, dict)):
                lines.append(f"robust.{k} = {v}")
        for k, v in self.sampling.items():
            if not isinstance(v, (list, dict)):
                lines.append(f"sampling.{k} = {v}")
        return "\n".join(lines)


# --------------------------------------------------------------------------
# constants


def constants_sweep(ing: TerminalIngredients, model: QuasiLPVModel, points=None, density: int = 20,
                    max_points: int = 200_000, chunk: int = 50_000):
    """``(c_l, c_u, k_u, c_u2, count)`` over a dense sample of Z_r.

    ``c_u2`` bounds ``lambda_max(P_f - eps I - Q - K_f' R K_f)``.
    """
    r = reference_points(model, density, max_points) if points is None else np.atleast_2d(points)
    Q = np.atleast_2d(ing.Q)
    R = np.atleast_2d(ing.R)
    eye = np.eye(ing.n)
    c_l, c_u, k_u, c_u2 = np.inf, 0.0, 0.0, -np.inf
    for a, b in _chunks(r.shape[0], chunk):
        P, K, _ = ing.evaluate(r[a:b])
        w = np.linalg.eigvalsh(P)
        c_l = min(c_l, float(w[:, 0].min()))
        c_u = max(c_u, float(w[:, -1].max()))
        k_u = max(k_u, float(np.linalg.norm(K, 2, axis=(1, 2)).max()) if ing.m else 0.0)
        rest = P - ing.epsilon * eye - Q - np.swapaxes(K, -1, -2) @ R @ K
        c_u2 = max(c_u2, float(np.linalg.eigvalsh(0.5 * (rest + np.swapaxes(rest, -1, -2)))[:, -1].max()))
    return c_l, c_u, k_u, c_u2, int(r.shape[0])


def lipschitz_margin(c_u: float, c_u2: float, eps: float) -> float:
    """Largest Lipschitz constant of the remainder that the decrease margin absorbs."""
    c_u2 = max(c_u2, 0.0)
    return float(np.sqrt((c_u2 + eps) / c_u) - np.sqrt(c_u2 / c_u))


def alpha_constraint(ing: TerminalIngredients, model: QuasiLPVModel, points=None, rows: ConstraintRows | None = None,
                     density: int = 20, max_points: int = 200_000, chunk: int = 50_000) -> float:
    """Largest alpha whose terminal ellipsoid keeps ``(x, k_f(x, r))`` in Z.

    Per reference and row the bound is ``slack^2 / (v' P_f^{-1} v)`` with
    ``v = [I K_f'] L_j'``; the minimum over the sample is returned.
    """
    r = reference_points(model, density, max_points) if points is None else np.atleast_2d(points)
    rows = constraint_rows(model) if rows is None else rows
    n = ing.n
    best = np.inf
    for a, b in _chunks(r.shape[0], chunk):
        rr = r[a:b]
        P, K, _ = ing.evaluate(rr)
        slack = rows.slack(rr)
        if np.any(slack <= 0):
            k, j = np.argwhere(slack <= 0)[0]
            raise ZeroSlack(f"constraint row {j} has no slack at reference {rr[k].tolist()}")
        v = rows.L[None, :, :n] + rows.L[None, :, n:] @ K  # (k, rows, n) = (L_x + L_u K)
        Pinv = np.linalg.inv(P)
        denom = np.einsum("kja,kab,kjb->kj", v, Pinv, v)
        with np.errstate(divide="ignore"):
            ratio = np.where(denom > 0, slack**2 / np.where(denom > 0, denom, 1.0), np.inf)
        best = min(best, float(ratio.min()))
    return best


def taylor_constant(ing: TerminalIngredients, model: QuasiLPVModel, samples: int = 100_000, radius: float | None = None,
                    seed: int = 0, points=None, inflate: float = 0.1, linear_tol: float = 1e-7):
    """Empirical bound ``T`` with ``|Phi| <= T (|dx|^2 + |du|^2)``.

    ``Phi`` is the linearization remainder of the sampled map around a
    reference. Offsets are drawn with log-uniform radius up to ``radius``
    and must stay in Z. Returns ``(inflated, raw)``; both are 0 when the
    ratio never exceeds ``linear_tol`` (a linear map).
    """
    rng = np.random.default_rng(seed)
    r = sample_references(model, samples, rng) if points is None else np.atleast_2d(points)[rng.integers(0, len(points), samples)]
    n, nz = model.n, model.nz
    if radius is None:
        radius = 1.0
    d = rng.standard_normal((samples, nz))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    rad = radius * np.exp(rng.uniform(np.log(1e-3), 0.0, size=(samples, 1)))
    z = r + rad * d
    ok = model.Z.contains(z)
    r, z, d, rad = r[ok], z[ok], d[ok], rad[ok]
    A, B = model.jacobians(r)
    fx = model.step(z[:, :n], z[:, n:])
    f0 = model.successor(r)
    dz = z - r
    phi = fx - f0 - np.einsum("kab,kb->ka", A, dz[:, :n]) - np.einsum("kab,kb->ka", B, dz[:, n:])
    ratio = np.linalg.norm(phi, axis=1) / np.sum(dz**2, axis=1)
    raw = float(ratio.max()) if ratio.size else 0.0
    if raw <= linear_tol:
        return 0.0, raw
    return (1.0 + inflate) * raw, raw


def alpha_lipschitz(ing: TerminalIngredients, model: QuasiLPVModel, T: float | None = None, constants=None,
                    samples: int = 100_000, radius: float | None = None, seed: int = 0) -> tuple[float, float, float]:
    """Conservative alpha for the decrease condition from the Lipschitz argument.

    Returns ``(alpha_1, L_phi, T)``; alpha_1 is ``inf`` when the map is linear.
    """
    c_l, c_u, k_u, c_u2, _ = constants if constants is not None else constants_sweep(ing, model)
    L_phi = lipschitz_margin(c_u, c_u2, ing.epsilon)
    if T is None:
        T, _ = taylor_constant(ing, model, samples, radius, seed)
    if T == 0:
        return np.inf, L_phi, 0.0
    return float(c_l * (L_phi / (T * (1.0 + k_u**2))) ** 2), L_phi, float(T)


# --------------------------------------------------------------------------
# decrease sampling


@dataclass
class SamplingSpec:
    """Sampling plan for the decrease check.

    Pairs come from ``grid`` (or the model's synthesis grid) unless
    ``random_pairs`` is set; ``per_pair`` offsets are drawn for each pair.
    """

    per_pair: int = 100
    grid: GridSpec | None = None
    random_pairs: int | None = None
    seed: int = 0
    chunk_pairs: int = 2000
    workers: int = 1
    tol: float = 1e-8
    check_constraints: bool = True
    surface: float = 0.0  # fraction of offsets placed on the ellipsoid boundary


@dataclass
class SamplingResult:
    passed: bool
    samples: int
    worst_decrease: float
    worst_constraint: float
    worst_sample: dict

    def to_json(self):
        return asdict(self)


def _pairs_for(model, spec: SamplingSpec, pairs):
    if pairs is not None:
        return np.atleast_2d(pairs[0]), np.atleast_2d(pairs[1])
    if spec.random_pairs:
        return sample_pairs(model, spec.random_pairs, np.random.default_rng(spec.seed))
    grid = spec.grid or GridSpec(model.extra.get("grid_discrete", {}))
    return grid_pairs(model, model.parameterization("discrete"), grid)


def alpha_decrease_sampling(ing: TerminalIngredients, model: QuasiLPVModel, alpha: float,
                            spec: SamplingSpec | None = None, pairs=None, rows: ConstraintRows | None = None) -> SamplingResult:
    """Check ``V_f(x+, r+) <= V_f(x, r) - l(x, k_f(x, r), r)`` on sampled terminal states.

    Offsets are uniform in the ellipsoid ``|dx|^2_{P_f(r)} <= alpha``. The
    constraint membership of ``(x, k_f(x, r))`` is reported alongside.
    """
    spec = spec or SamplingSpec()
    r, rp = _pairs_for(model, spec, pairs)
    rows = constraint_rows(model) if rows is None else rows
    n = model.n
    Q = np.atleast_2d(ing.Q)
    R = np.atleast_2d(ing.R)
    seeds = np.random.SeedSequence(spec.seed).spawn(len(_chunks(len(r), spec.chunk_pairs)))

    def work(item):
        (a, b), ss = item
        rng = np.random.default_rng(ss)
        rr, rrp = r[a:b], rp[a:b]
        P, K, _ = ing.evaluate(rr)
        Pp, _, _ = ing.evaluate(rrp)
        z = unit_ball(rng, (b - a) * spec.per_pair, n).reshape(b - a, spec.per_pair, n)
        on_surface = int(round(spec.surface * spec.per_pair))
        if on_surface:
            z[:, :on_surface] /= np.linalg.norm(z[:, :on_surface], axis=-1, keepdims=True)
        dx = ellipsoid_offsets(P, alpha, z)
        du = np.einsum("kab,ksb->ksa", K, dx)
        x = rr[:, None, :n] + dx
        u = rr[:, None, n:] + du
        xp = model.step(x.reshape(-1, n), u.reshape(-1, model.m)).reshape(b - a, spec.per_pair, n)
        ep = xp - rrp[:, None, :n]
        V = np.einsum("ksa,kab,ksb->ks", dx, P, dx)
        Vp = np.einsum("ksa,kab,ksb->ks", ep, Pp, ep)
        stage = np.einsum("ksa,ab,ksb->ks", dx, Q, dx) + np.einsum("ksa,ab,ksb->ks", du, R, du)
        viol = Vp - V + stage
        zz = np.concatenate([x, u], axis=2).reshape(-1, model.nz)
        cs = _in_constraints(rows, zz, np.repeat(rr, spec.per_pair, 0)).reshape(b - a, spec.per_pair)
        k, s = np.unravel_index(int(np.argmax(viol)), viol.shape)
        return float(viol.max()), float(cs.min()), {
            "r": rr[k].tolist(), "r_next": rrp[k].tolist(), "dx": dx[k, s].tolist(), "violation": float(viol[k, s]),
        }

    out = _map(work, list(zip(_chunks(len(r), spec.chunk_pairs), seeds)), spec.workers)
    worst = max(out, key=lambda o: o[0])
    worst_c = min(o[1] for o in out)
    ok = worst[0] <= spec.tol and (not spec.check_constraints or worst_c >= -spec.tol)
    return SamplingResult(bool(ok), int(len(r) * spec.per_pair), worst[0], worst_c, worst[2])


# --------------------------------------------------------------------------
# orchestration


def certify_alpha(ing: TerminalIngredients, model: QuasiLPVModel, spec: SamplingSpec | None = None,
                  sweep_density: int = 20, taylor_samples: int = 100_000, iterations: int = 20,
                  rel_tol: float = 0.05, use_sampling: bool = True, pairs=None, confirm_rounds: int = 10,
                  shrink: float = 0.8, surface: float = 0.5) -> CertificationReport:
    """Constants, both alpha bounds and the resulting terminal set size.

    The sampled alpha_1 is found by bisection below alpha_2, then re-checked
    on a fresh sample set and shrunk by ``shrink`` until that passes too. The
    sampling check only tests the decrease condition because alpha_2 already
    covers the constraints. A ``surface`` fraction of the offsets lies on
    the ellipsoid boundary, where the higher-order terms are largest.
    """
    spec = spec or SamplingSpec()
    t0 = time.perf_counter()
    points = reference_points(model, sweep_density)
    c_l, c_u, k_u, c_u2, count = constants_sweep(ing, model, points)
    rep = CertificationReport(c_l=c_l, c_u=c_u, k_u=k_u, c_u2=c_u2, sweep_points=count)
    rep.alpha2 = alpha_constraint(ing, model, points)
    radius = np.sqrt(rep.alpha2 * (1.0 + k_u**2) / c_l)
    rep.taylor, rep.taylor_raw = taylor_constant(ing, model, taylor_samples, radius, spec.seed)
    rep.alpha1_formula, rep.lipschitz, _ = alpha_lipschitz(ing, model, rep.taylor, (c_l, c_u, k_u, c_u2, count))
    rep.rho = float(np.sqrt(max(0.0, 1.0 - np.linalg.eigvalsh(np.atleast_2d(ing.Q))[0] / c_u)))
    rep.overshoot = float(np.sqrt(c_u / c_l))
    runs = []
    if use_sampling:
        no_constraints = SamplingSpec(**{**asdict(spec), "check_constraints": False, "surface": surface})
        no_constraints.grid = spec.grid

        def check(a):
            res = alpha_decrease_sampling(ing, model, a, no_constraints, pairs)
            runs.append({"alpha": a, "passed": res.passed, "worst": res.worst_decrease, "samples": res.samples})
            log.info("alpha=%.6g passed=%s worst=%.3e", a, res.passed, res.worst_decrease)
            return res

        hi = rep.alpha2
        first = check(hi)
        if first.passed:
            lo = hi
        else:
            lo = 0.0
            for _ in range(iterations):
                if lo > 0 and (hi - lo) <= rel_tol * hi:
                    break
                mid = 0.5 * (lo + hi)
                if check(mid).passed:
                    lo = mid
                else:
                    hi = mid
        # the bisection reuses one sample set per alpha; confirm on fresh draws
        # and shrink until those pass too
        confirm = SamplingSpec(**{**asdict(no_constraints), "seed": spec.seed + 1})
        confirm.grid = spec.grid
        for _ in range(confirm_rounds):
            if lo <= 0.0:
                break
            res = alpha_decrease_sampling(ing, model, lo, confirm, pairs)
            runs.append({"alpha": lo, "passed": res.passed, "worst": res.worst_decrease, "samples": res.samples,
                         "confirmation": True})
            if res.passed:
                break
            lo *= shrink
        else:
            lo = 0.0
        rep.alpha1_sampling = float(lo)
        rep.sampling = {
            "seed": spec.seed, "per_pair": spec.per_pair, "pairs": runs[0]["samples"] // max(spec.per_pair, 1),
            "total_samples": int(sum(x["samples"] for x in runs)), "runs": runs,
        }
    rep.alpha = float(min(rep.alpha1, rep.alpha2))
    rep.sampling["wall_time"] = time.perf_counter() - t0
    ing.alpha = rep.alpha
    ing.audit.update({"c_l": c_l, "c_u": c_u, "certification": rep.to_json()})
    return rep


# --------------------------------------------------------------------------
# incremental stability


def random_reference(model: QuasiLPVModel, steps: int, rng: np.random.Generator, candidates: int = 32,
                     start=None, lookahead: int = 10) -> np.ndarray:
    """An admissible reference path of ``steps`` pairs built by rejection sampling of inputs.

    Each step draws ``candidates`` inputs and keeps the admissible ones. A
    candidate is scored by how deep inside Z_r the state stays when its input
    is held for ``lookahead`` steps; the pick is random among the better
    half, so paths stay varied without running into dead ends.
    """
    n = model.n
    box = model.sample_box
    in_dims = [d for d in range(n, model.nz) if box.hi[d] > box.lo[d]]
    lo, hi = model.Z_r.lo[:n], model.Z_r.hi[:n]
    finite = np.isfinite(lo) & np.isfinite(hi)
    width = np.where(finite, hi - lo, 1.0)

    def depth(cand):
        x = cand[:, :n]
        worst = np.full(len(cand), np.inf)
        for _ in range(lookahead):
            x = model.step(x, cand[:, n:])
            slack = np.minimum(x - lo, hi - x)[:, finite] / width[finite]
            worst = np.minimum(worst, slack.min(axis=1, initial=np.inf))
        return worst

    for _ in range(100):
        r = sample_references(model, 1, rng)[0] if start is None else np.asarray(start, float)
        path = [r]
        for _ in range(steps - 1):
            xp = model.successor(path[-1])[0]
            u = box.sample(rng, candidates, in_dims)[:, n:]
            cand = np.concatenate([np.tile(xp, (candidates, 1)), u], axis=1)
            ok = model.Z_r.contains(cand)
            ok &= _states_inside(model, model.successor(cand))
            if not ok.any():
                break
            idx = np.flatnonzero(ok)
            if lookahead and finite.any():
                score = depth(cand[idx])
                idx = idx[score >= np.median(score)]
            path.append(cand[rng.choice(idx)])
        if len(path) == steps:
            return np.array(path)
    raise CertificationError(f"could not build an admissible reference for {model.name}")


def _rollout(model, controller, r, x0):
    xs = [np.asarray(x0, float)]
    for t in range(len(r) - 1):
        u = controller(xs[-1], r[t])
        xs.append(model.step(xs[-1], u))
    return np.array(xs)


def incremental_stability_check(ing: TerminalIngredients, model: QuasiLPVModel, report: CertificationReport,
                                samples: int = 100, steps: int = 200, seed: int = 0, tol: float = 1e-9,
                                references=None) -> tuple[float, float, bool, dict]:
    """Simulate ``k_f`` from the terminal set and check the geometric envelope ``overshoot * rho^t``."""
    rng = np.random.default_rng(seed)
    rho, gain = report.rho, report.overshoot
    alpha = report.alpha if np.isfinite(report.alpha) else 1.0
    worst = {"excess": -np.inf}
    for i in range(samples):
        r = references[i % len(references)] if references is not None else random_reference(model, steps, rng)
        P, _, _ = ing.evaluate(r[0])
        dx = ellipsoid_offsets(P[None], alpha, unit_ball(rng, 1, model.n)[None])[0, 0]
        xs = _rollout(model, lambda x, rr: ing.controller(x, rr)[0], r, r[0, : model.n] + dx)
        e = np.linalg.norm(xs - r[:, : model.n], axis=1)
        bound = gain * rho ** np.arange(len(r)) * e[0] + tol
        excess = float(np.max(e - bound))
        if excess > worst["excess"]:
            worst = {"excess": excess, "trajectory": i, "step": int(np.argmax(e - bound))}
    return rho, gain, bool(worst["excess"] <= 0), worst


def _depends_on_input(ing: TerminalIngredients, model: QuasiLPVModel, rng) -> bool:
    if ing.p == 0:
        return False
    r = sample_references(model, 20, rng)
    _, K, _ = ing.evaluate(r)
    r2 = r.copy()
    in_dims = [d for d in range(model.n, model.nz) if model.sample_box.hi[d] > model.sample_box.lo[d]]
    r2[:, in_dims] = model.sample_box.sample(rng, len(r), in_dims)[:, in_dims]
    _, K2, _ = ing.evaluate(r2)
    return bool(np.max(np.abs(K - K2)) > 1e-9 * max(1.0, np.max(np.abs(K))))


def prestabilizer_check(ing: TerminalIngredients, model: QuasiLPVModel, report: CertificationReport,
                        samples: int = 1000, steps: int = 100, seed: int = 0, tol: float = 1e-9,
                        test_box: Box | None = None) -> tuple[bool, dict]:
    """Contraction of ``kappa(x, r) = K(x) x - K(x_r) x_r + u_r`` from arbitrary states.

    ``K`` must depend on the state part of the reference only; the check is
    refused otherwise.
    """
    rng = np.random.default_rng(seed)
    if _depends_on_input(ing, model, rng):
        raise KDependsOnInput("terminal gain varies with the reference input")
    n = model.n
    box = test_box or model.Z_r
    u_mid = model.sample_box.center[n:]

    def gain(x):
        _, K, _ = ing.evaluate(np.concatenate([x, u_mid]))
        return K

    def kappa(x, r):
        return gain(x) @ x - gain(r[:n]) @ r[:n] + r[n:]

    worst = {"excess": -np.inf}
    ref = random_reference(model, steps, rng)
    for i in range(samples):
        x0 = box.sample(rng, 1, range(n))[0, :n]
        xs = _rollout(model, kappa, ref, x0)
        e = np.linalg.norm(xs - ref[:, :n], axis=1)
        if not np.all(np.isfinite(e)):
            return False, {"excess": np.inf, "trajectory": i}
        excess = float(np.max(e - report.overshoot * report.rho ** np.arange(steps) * e[0] - tol))
        if excess > worst["excess"]:
            worst = {"excess": excess, "trajectory": i}
    return bool(worst["excess"] <= 0), worst


# --------------------------------------------------------------------------
# robust tracking


def tightening_schedule(eps_rows, rho: float, N: int) -> np.ndarray:
    """``eps_{j,k} = eps_j (1 - rho^k) / (1 - rho)`` for k = 0..N, shape (N+1, rows)."""
    k = np.arange(N + 1)[:, None]
    eps_rows = np.atleast_1d(np.asarray(eps_rows, float))[None, :]
    factor = k.astype(float) if rho == 1.0 else (1.0 - rho**k) / (1.0 - rho)
    return factor * eps_rows


def contraction_rate(ing: TerminalIngredients, model: QuasiLPVModel, samples: int = 100_000, alpha: float = 1.0,
                     seed: int = 0, pairs=None) -> float:
    """Sampled ``rho`` with ``V(x+, r+) <= rho^2 V(x, r)`` under ``k_f``."""
    rng = np.random.default_rng(seed)
    if pairs is None:
        r, rp = sample_pairs(model, samples, rng)
    else:
        r, rp = pairs
    n = model.n
    P, K, _ = ing.evaluate(r)
    Pp, _, _ = ing.evaluate(rp)
    dx = ellipsoid_offsets(P, alpha, unit_ball(rng, len(r), n)[:, None, :])[:, 0]
    u = r[:, n:] + np.einsum("kab,kb->ka", K, dx)
    xp = model.step(r[:, :n] + dx, u)
    ep = xp - rp[:, :n]
    ratio = np.einsum("ka,kab,kb->k", ep, Pp, ep) / np.einsum("ka,kab,kb->k", dx, P, dx)
    return float(np.sqrt(ratio.max()))


def robust_certificate(ing: TerminalIngredients, model: QuasiLPVModel, w_hat: float, N: int,
                       report: CertificationReport, global_ing: TerminalIngredients | None = None,
                       global_model: QuasiLPVModel | None = None, rho: float | None = None,
                       samples: int = 100_000, seed: int = 0, scalar: bool = True,
                       sweep_density: int = 20, raise_on_violation: bool = False) -> dict:
    """Constants for robust tracking with scalar constraint tightening.

    The incremental Lyapunov function comes from ``global_ing`` (valid on
    the whole constraint set, see ``global_model``); without it the terminal
    ingredients themselves are used on Z_r. Constraint rows are normalized
    by their distance from the nominal centre before ``c_j`` is computed.
    """
    g_ing = global_ing or ing
    g_model = global_model or model
    n = model.n
    gpts = reference_points(g_model, sweep_density)
    cdl, cdu, _, _, _ = constants_sweep(g_ing, g_model, gpts)
    if rho is None:
        rho = contraction_rate(g_ing, g_model, samples, seed=seed)
    rows = constraint_rows(model)
    Ln = rows.L / rows.scale[:, None]
    c_j = np.zeros(len(rows.l))
    for a, b in _chunks(len(gpts), 50_000):
        P, K, _ = g_ing.evaluate(gpts[a:b])
        v = Ln[None, :, :n] + Ln[None, :, n:] @ K
        c_j = np.maximum(c_j, np.sqrt(np.einsum("kja,kab,kjb->kj", v, np.linalg.inv(P), v).max(axis=0)))
    eps_j = c_j * np.sqrt(cdu) * w_hat
    if scalar:
        eps_j = np.full_like(eps_j, eps_j.max())
    sched = tightening_schedule(eps_j, rho, N)
    geo = (1.0 - rho**N) / (1.0 - rho) if rho < 1 else float(N)
    w1 = 1.0 / (c_j.max() * np.sqrt(cdu) * geo)
    rho_f_formula = 1.0 - np.linalg.eigvalsh(np.atleast_2d(ing.Q))[0] / report.c_u
    # the decrease condition only guarantees rho_f^2 <= 1 - lambda_min(Q)/c_u
    rho_f_bound = float(np.sqrt(max(0.0, rho_f_formula)))
    alpha_f = report.alpha if np.isfinite(report.alpha) and report.alpha > 0 else 1.0
    rho_f_sampled = contraction_rate(ing, model, samples, alpha=alpha_f, seed=seed + 1)
    rho_f = min(rho_f_bound, rho_f_sampled)
    points = reference_points(model, sweep_density)
    tight = rows.tightened(sched[N])
    try:
        alpha_w = alpha_constraint(ing, model, points, tight) if np.all(sched[N] < 1) else 0.0
    except ZeroSlack:
        alpha_w = 0.0
    alpha_w = min(alpha_w, report.alpha1)
    w2 = float(np.sqrt(alpha_w * cdl / (cdu * report.c_u)) * (1.0 - rho_f) / rho**N)
    w_N = w_hat * rho**N * np.sqrt(cdu / cdl)
    out = {
        "w_hat": float(w_hat), "N": int(N), "rho": float(rho), "rho_f": rho_f,
        "rho_f_formula": float(rho_f_formula), "rho_f_bound": rho_f_bound, "rho_f_sampled": float(rho_f_sampled),
        "c_delta_l": float(cdl), "c_delta_u": float(cdu), "c_j": c_j.tolist(), "eps_j": eps_j.tolist(),
        "eps_scalar": float(eps_j.max()), "schedule": sched.tolist(), "alpha_w": float(alpha_w),
        "w_bound_feasibility": float(w1), "w_bound_invariance": w2, "w_bound": float(min(w1, w2)),
        "w_N": float(w_N), "global_ingredients": global_ing is not None,
    }
    report.robust = out
    if raise_on_violation and w_hat > out["w_bound"]:
        raise WBoundViolated(f"w_hat={w_hat:.3e} exceeds the admissible bound {out['w_bound']:.3e}")
    return out
