import numpy as np
import pytest

from refmpc import certify as cf
from refmpc import nmpc
from refmpc import synthesis as syn
from refmpc.bench.models import double_integrator
from refmpc.model import ReferenceTrajectory


@pytest.fixture(scope="module")
def lti():
    model = double_integrator()
    ing = syn.synthesize(model, "grid-discrete", np.eye(2), np.eye(1))
    ing.alpha = 1.0
    return model, ing


def riccati_oracle(A, B, Q, R, P_f, N, x0):
    """First input and optimal value of the unconstrained finite-horizon LQ problem."""
    P = P_f
    for _ in range(N):
        K = -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
        P = Q + A.T @ P @ A + A.T @ P @ B @ K
    return K @ x0, float(x0 @ P @ x0)


def zero_window(N):
    return np.zeros((N + 1, 3))


def test_lq_solution_matches_riccati_recursion(lti):
    model, ing = lti
    N = 8
    x0 = np.array([0.05, -0.02])
    cfg = nmpc.MPCConfig(N=N, ingredients=ing, max_iter=5)
    sol = nmpc.solve_mpc(cfg, model, x0, zero_window(N))
    A, B = model.jacobians(np.zeros((1, 3)))
    P_f, _, _ = ing.evaluate(np.zeros(3))
    u0, value = riccati_oracle(A[0], B[0], np.eye(2), np.eye(1), P_f, N, x0)
    np.testing.assert_allclose(sol.u[0], u0, rtol=1e-6, atol=1e-10)
    assert sol.value == pytest.approx(value, rel=1e-6)


def test_value_is_zero_on_reference(lti):
    model, ing = lti
    r = np.array([0.5, 0.0, 0.0])
    window = np.tile(r, (6, 1))
    sol = nmpc.solve_mpc(nmpc.MPCConfig(N=5, ingredients=ing), model, r[:2], window)
    assert abs(sol.value) < 1e-12
    np.testing.assert_allclose(sol.u[:, 0], 0.0, atol=1e-10)


def test_terminal_equality_unreachable_is_infeasible(lti):
    model, _ = lti
    cfg = nmpc.MPCConfig(N=1, scheme="TEC", max_iter=10)
    with pytest.raises(nmpc.Infeasible):
        nmpc.solve_mpc(cfg, model, np.array([9.0, 9.0]), zero_window(1))


def test_simulate_records_termination(lti):
    model, _ = lti
    cfg = nmpc.MPCConfig(N=1, scheme="TEC", max_iter=10)
    ref = ReferenceTrajectory(np.zeros((10, 2)), np.zeros((10, 1)), h=model.h, periodic=True)
    tr = nmpc.simulate(cfg, model, np.array([9.0, 9.0]), ref, steps=3)
    assert len(tr) == 0
    assert tr.terminated.startswith("Infeasible")


def test_unconstrained_terminal_scheme_runs_without_ingredients(lti):
    model, _ = lti
    cfg = nmpc.MPCConfig(N=10, scheme="UC", max_iter=5)
    sol = nmpc.solve_mpc(cfg, model, np.array([0.3, 0.0]), zero_window(10))
    assert sol.converged
    assert sol.u[0, 0] < 0


def test_closed_loop_converges(lti):
    model, ing = lti
    ref = ReferenceTrajectory(np.zeros((5, 2)), np.zeros((5, 1)), h=model.h, periodic=True)
    tr = nmpc.simulate(nmpc.MPCConfig(N=10, ingredients=ing), model, np.array([0.5, 0.0]), ref, steps=150)
    assert np.linalg.norm(tr.x_final) < 1e-3
    assert np.all(np.diff(tr.value) <= 1e-9)


@pytest.mark.parametrize("kwargs, match", [
    ({"N": 0}, "horizon"),
    ({"N": 3, "max_iter": 0}, "max_iter"),
    ({"N": 3, "scheme": "ROBUST", "alpha": 1.0}, "tightening"),
    ({"N": 3, "scheme": "PERIODIC", "alpha": 1.0}, "periodic"),
])
def test_config_validation(lti, kwargs, match):
    model, ing = lti
    with pytest.raises(nmpc.ConfigError, match=match):
        nmpc.MPCConfig(ingredients=ing, **kwargs).validate(model)


def test_unknown_scheme():
    with pytest.raises(ValueError):
        nmpc.MPCConfig(N=3, scheme="MAGIC")


def test_tightening_to_empty_set(lti):
    model, _ = lti
    rows = cf.constraint_rows(model)
    with pytest.raises(nmpc.EmptyTightenedSet):
        nmpc.tighten(rows, nmpc.scalar_schedule(0.5, 0.9, 5), 5)
    tight = nmpc.tighten(rows, nmpc.scalar_schedule(0.01, 0.9, 5), 5)
    assert len(tight) == 6
    assert np.all(tight[-1].l >= rows.l) or np.all(tight[-1].scale <= rows.scale + 1e-12)


def test_warm_start_shift_appends_terminal_input(lti):
    model, ing = lti
    prev = nmpc.MPCSolution(x=np.array([[0.0, 0.0], [0.1, 0.0], [0.2, 0.0]]), u=np.array([[1.0], [2.0]]),
                            value=0.0, status="converged", iterations=1, violation=0.0, step_norm=0.0)
    U = nmpc.warmstart_shift(prev, ing, zero_window(2), model)
    assert U[0, 0] == 2.0
    np.testing.assert_allclose(U[1], ing.controller(prev.x[-1], np.zeros(3))[0])


def test_trace_csv_roundtrip(lti, tmp_path):
    model, ing = lti
    ref = ReferenceTrajectory(np.zeros((5, 2)), np.zeros((5, 1)), h=model.h, periodic=True)
    tr = nmpc.simulate(nmpc.MPCConfig(N=5, ingredients=ing), model, np.array([0.2, 0.1]), ref, steps=5)
    tr.to_csv(tmp_path / "t.csv", timing=False)
    back = nmpc.ClosedLoopTrace.from_csv(tmp_path / "t.csv")
    np.testing.assert_array_equal(np.asarray(back.x), np.asarray(tr.x))
    assert back.total_cost == tr.total_cost
    assert back.status == tr.status


def test_disturbances_have_requested_norm():
    W = nmpc.disturbance_sequence(3, 50, 0.2, seed=1)
    np.testing.assert_allclose(np.linalg.norm(W, axis=1), 0.2)
