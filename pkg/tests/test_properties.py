"""Property checks on the invariants each module promises."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from refmpc import certify as cf
from refmpc import nmpc, sdp
from refmpc import synthesis as syn
from refmpc.bench.models import bicycle_model, cstr_model, double_integrator, scalar_quadratic
from refmpc.bench.scenarios import cstr_periodic_reference
from refmpc.model import Box, ReferenceTrajectory, reconstruction_error, validate_reference

GRID = syn.GridSpec({0: 21, 1: 11})


@pytest.fixture(scope="module")
def scalar():
    model = scalar_quadratic()
    ing = syn.synthesize_grid_discrete(model, np.eye(1), np.eye(1), 0.1, GRID)
    rep = cf.certify_alpha(ing, model, cf.SamplingSpec(per_pair=200, grid=GRID), sweep_density=20,
                           taylor_samples=5000)
    return model, ing, rep


@pytest.fixture(scope="module")
def lti():
    model = double_integrator()
    ing = syn.synthesize(model, "grid-discrete", np.eye(2), np.eye(1))
    rep = cf.certify_alpha(ing, model, cf.SamplingSpec(per_pair=50), sweep_density=5, taylor_samples=2000)
    return model, ing, rep


# model ---------------------------------------------------------------------


@pytest.mark.parametrize("factory", [cstr_model, bicycle_model])
def test_reconstruction_on_thousand_samples(factory):
    model = factory()
    r = model.sample_box.sample(np.random.default_rng(11), 1000)
    assert reconstruction_error(model, r) < 1e-10


def test_rk4_global_order():
    x0, u = np.array([0.3, 0.4, 0.12]), np.array([0.13])

    def final(h):
        model = cstr_model(h=h)
        x = x0.copy()
        for _ in range(round(1.0 / h)):
            x = model.step(x, u)
        return x

    exact = final(1e-3 / 8)
    e1 = np.linalg.norm(final(0.1) - exact)
    e2 = np.linalg.norm(final(0.05) - exact)
    assert np.log2(e1 / e2) >= 3.5


def test_periodic_reference_validity_survives_cyclic_shift():
    model = cstr_model()
    ref = cstr_periodic_reference(model, period=200, periods=40)
    base = validate_reference(model, ref)
    for k in (1, 57, 199):
        assert validate_reference(model, ref.shifted(k)).admissible == base.admissible


# sdp -----------------------------------------------------------------------


def lyapunov_feasibility(a, scale, n=2, cap=10.0):
    """Find X >= 0 with (1 - a^2) X >= I and X <= cap I, every block multiplied by ``scale``."""
    lay = sdp.Layout()
    lay.add_sym("X", n)
    B = sdp.sym_basis(n)
    decrease = sdp.LMIFamily.dense(-scale * np.eye(n), (scale * (1 - a * a) * B)[None], "decrease")
    upper = sdp.LMIFamily.dense(scale * cap * np.eye(n), (-scale * B)[None], "upper")
    positive = sdp.LMIFamily.dense(np.zeros((n, n)), (scale * B)[None], "positive")
    return sdp.SDProblem(lay, [decrease, upper, positive], None)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.0, 2.0).filter(lambda a: abs(a * a - 0.9) > 0.02), st.sampled_from([1e-3, 1e3]))
def test_feasibility_status_is_scale_invariant(a, c):
    base = sdp.solve(lyapunov_feasibility(a, 1.0))
    scaled = sdp.solve(lyapunov_feasibility(a, c))
    assert base.status == scaled.status
    # the problem is feasible exactly when (1 - a^2) cap >= 1
    assert base.ok == (a * a < 0.9)


def test_xmin_below_every_grid_constraint(scalar):
    _, ing, _ = scalar
    r, _ = ing.points
    Xr = ing.X_of(r)
    # X_min is not stored; its log det bounds every X(r) from below
    worst = np.linalg.slogdet(Xr)[1].min()
    assert ing.audit["Xmin_logdet"] <= worst + 1e-7


def test_more_constraints_never_raise_objective():
    model = scalar_quadratic()
    coarse = syn.synthesize_grid_discrete(model, np.eye(1), np.eye(1), 0.1, syn.GridSpec({0: 5, 1: 3}))
    fine = syn.synthesize_grid_discrete(model, np.eye(1), np.eye(1), 0.1, GRID)
    assert fine.audit["Xmin_logdet"] <= coarse.audit["Xmin_logdet"] + 1e-6


# synthesis -----------------------------------------------------------------


def test_convex_is_more_conservative_than_grid(scalar):
    model, grid_ing, _ = scalar
    convex = syn.synthesize(model, "convex-discrete", np.eye(1), np.eye(1), 0.1)
    assert convex.audit["Xmin_logdet"] <= grid_ing.audit["Xmin_logdet"] + 1e-6


def test_convex_decrease_on_random_pairs(scalar):
    model = scalar[0]
    convex = syn.synthesize(model, "convex-discrete", np.eye(1), np.eye(1), 0.1)
    r, rp = cf.sample_pairs(model, 10_000, np.random.default_rng(5))
    assert syn.decrease_margin(convex, model, r, rp).min() >= -1e-6


@settings(max_examples=50, deadline=None)
@given(st.floats(-0.5, 0.5), st.floats(-1.0, 1.0), st.floats(1e-9, 1e-3))
def test_terminal_cost_continuous_in_reference(scalar, x, u, d):
    ing = scalar[1]
    P1, _, _ = ing.evaluate(np.array([x, u]))
    P2, _, _ = ing.evaluate(np.array([min(x + d, 0.5), u]))
    assert np.linalg.norm(P1 - P2) <= 1e2 * d * (1 + np.linalg.norm(P1))


# certify -------------------------------------------------------------------


def test_report_invariants(scalar):
    rep = scalar[2]
    assert rep.c_l <= rep.c_u
    assert rep.alpha <= min(rep.alpha1, rep.alpha2)
    assert 0 < rep.rho < 1
    assert rep.overshoot >= 1


def test_certified_level_holds_on_fresh_samples(scalar):
    model, ing, rep = scalar
    # gridded synthesis certifies its grid pairs; the offsets are fresh draws
    res = cf.alpha_decrease_sampling(ing, model, rep.alpha, cf.SamplingSpec(grid=GRID, per_pair=500, seed=99))
    assert res.samples >= 100_000
    assert res.worst_decrease <= 1e-8
    assert res.worst_constraint >= -1e-8


def test_tighter_constraint_set_never_enlarges_alpha2(lti):
    model, ing, _ = lti
    pts = cf.reference_points(model, 5)
    wide = cf.alpha_constraint(ing, model, pts)
    narrow_model = model.with_changes(Z=Box([-5.0] * 3, [5.0] * 3))
    narrow = cf.alpha_constraint(ing, narrow_model, pts)
    assert narrow <= wide


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 0.999), st.integers(1, 40), st.floats(1e-6, 1.0))
def test_tightening_matches_closed_form(rho, N, eps):
    s = cf.tightening_schedule(eps, rho, N)[:, 0]
    k = np.arange(N + 1)
    np.testing.assert_allclose(s, eps * (1 - rho**k) / (1 - rho), atol=1e-12)
    assert np.all(np.diff(s) >= 0)


def test_robust_terminal_set_is_invariant(lti):
    model, ing, rep = lti
    rob = cf.robust_certificate(ing, model, 1e-3, 10, rep, samples=5000, sweep_density=5)
    alpha_w, w_N = rob["alpha_w"], rob["w_N"]
    rng = np.random.default_rng(2)
    r = cf.sample_references(model, 10_000, rng)
    rp = np.c_[model.successor(r), r[:, 2:]]
    P, K, _ = ing.evaluate(r)
    Pp, _, _ = ing.evaluate(rp)
    dx = cf.ellipsoid_offsets(P, alpha_w, _sphere(rng, len(r)))[:, 0]
    e = model.step(r[:, :2] + dx, r[:, 2:] + np.einsum("kab,kb->ka", K, dx)) - rp[:, :2]
    # worst disturbance of size w_N points along the gradient of the successor cost
    g = np.einsum("kab,kb->ka", Pp, e)
    w = w_N * g / np.linalg.norm(g, axis=1, keepdims=True)
    v = np.einsum("ka,kab,kb->k", e + w, Pp, e + w)
    assert v.max() <= alpha_w * (1 + 1e-9)


def _sphere(rng, k):
    z = rng.standard_normal((k, 1, 2))
    return z / np.linalg.norm(z, axis=-1, keepdims=True)


def test_error_envelope(scalar):
    model, ing, rep = scalar
    _, _, passed, worst = cf.incremental_stability_check(ing, model, rep, samples=50, steps=100)
    assert passed, worst


# nmpc ----------------------------------------------------------------------


def test_nominal_decrease_and_candidate_feasibility(scalar):
    model, ing, rep = scalar
    ref = ReferenceTrajectory(np.full((4, 1), 0.2), np.full((4, 1), -0.04), h=model.h, periodic=True)
    assert validate_reference(model, ref).admissible
    cfg = nmpc.MPCConfig(N=10, ingredients=ing, max_iter=50, tol=1e-10)
    tr = nmpc.simulate(cfg, model, np.array([0.35]), ref, steps=40, check_candidate=True)
    assert tr.terminated is None
    assert all(tr.candidate_feasible)
    V, ell = np.asarray(tr.value), np.asarray(tr.stage)
    assert np.all(V[1:] <= V[:-1] - ell[:-1] + 1e-6)


def test_qinf_without_terminal_ingredients_equals_uc(lti):
    model, ing, _ = lti
    flat = syn.TerminalIngredients(X=1e14 * np.eye(2)[None], Y=np.zeros((1, 1, 2)), par=None, Q=ing.Q, R=ing.R,
                                   epsilon=0.1, alpha=1e30)
    x0, window = np.array([0.4, -0.1]), np.zeros((9, 3))
    a = nmpc.solve_mpc(nmpc.MPCConfig(N=8, ingredients=flat, max_iter=10), model, x0, window)
    b = nmpc.solve_mpc(nmpc.MPCConfig(N=8, scheme="UC", Q=ing.Q, R=ing.R, max_iter=10), model, x0, window)
    np.testing.assert_allclose(a.u, b.u, atol=1e-8)
    np.testing.assert_allclose(a.x, b.x, atol=1e-8)


def test_disturbance_realizations_shared():
    from refmpc.bench.scenarios import Scenario

    model = double_integrator()
    ref = ReferenceTrajectory(np.zeros((3, 2)), np.zeros((3, 1)), periodic=True)
    a = Scenario("a", model, ref, np.zeros(2), [], 20, 0.1, 4)
    b = Scenario("b", model, ref, np.zeros(2), [], 20, 0.1, 4)
    assert a.disturbances().tobytes() == b.disturbances().tobytes()
