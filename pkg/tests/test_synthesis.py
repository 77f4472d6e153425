import numpy as np
import pytest
from scipy.linalg import solve_discrete_are

from refmpc import synthesis as syn
from refmpc.bench.models import double_integrator, lti_model, scalar_quadratic
from refmpc.model import Box


@pytest.fixture(scope="module")
def scalar_ing():
    return syn.synthesize_grid_discrete(scalar_quadratic(), np.eye(1), np.eye(1), 0.1, syn.GridSpec({0: 21, 1: 11}))


def test_decrease_holds_on_grid(scalar_ing):
    r, rp = scalar_ing.points
    assert syn.decrease_margin(scalar_ing, scalar_quadratic(), r, rp).min() > -1e-6


def test_lti_terminal_cost_matches_riccati():
    model = double_integrator()
    Q, R, eps = np.eye(2), np.eye(1), 0.1
    ing = syn.synthesize(model, "grid-discrete", Q, R, eps)
    A, B = model.jacobians(np.zeros((1, 3)))
    P_are = solve_discrete_are(A[0], B[0], Q + eps * np.eye(2), R)
    P, _, _ = ing.evaluate(np.zeros(3))
    assert np.linalg.norm(P - P_are) / np.linalg.norm(P_are) < 1e-5


def test_convex_equals_grid_without_scheduling():
    model = double_integrator()
    grid = syn.synthesize(model, "grid-discrete", np.eye(2), np.eye(1))
    convex = syn.synthesize(model, "convex-discrete", np.eye(2), np.eye(1))
    np.testing.assert_allclose(convex.X, grid.X, rtol=1e-5, atol=1e-8)


def test_json_roundtrip(scalar_ing, tmp_path):
    scalar_ing.save(tmp_path / "ing.json")
    back = syn.TerminalIngredients.load(tmp_path / "ing.json", scalar_quadratic())
    r = scalar_quadratic().Z_r.sample(np.random.default_rng(0), 10)
    for a, b in zip(scalar_ing.evaluate(r), back.evaluate(r)):
        np.testing.assert_array_equal(a, b)


def test_load_rejects_unknown_format(scalar_ing, tmp_path):
    data = scalar_ing.to_json()
    data["format_version"] = -1
    with pytest.raises(ValueError):
        syn.TerminalIngredients.from_json(data, None)


def test_unknown_mode():
    with pytest.raises(ValueError, match="unknown synthesis mode"):
        syn.synthesize(double_integrator(), "bogus", np.eye(2), np.eye(1))


def test_unstabilizable_plant_is_infeasible():
    box = Box([-1.0, -1.0], [1.0, 1.0])
    model = lti_model(np.array([[1.5]]), np.array([[0.0]]), box, box.shrink(0.5), "unstabilizable")
    with pytest.raises(syn.Infeasible):
        syn.synthesize(model, "grid-discrete", np.eye(1), np.eye(1))


def test_evaluate_rejects_indefinite_X(scalar_ing):
    bad = syn.TerminalIngredients(X=-scalar_ing.X, Y=scalar_ing.Y, par=scalar_ing.par, Q=scalar_ing.Q,
                                  R=scalar_ing.R, epsilon=0.1)
    with pytest.raises(syn.NotPositiveDefinite):
        bad.evaluate(np.zeros(2))


def test_constant_output_cost_padded_to_scheduling_basis():
    out = syn.OutputCost.quadratic(np.eye(1), np.eye(1), 0.1).padded(2)
    assert out.C.shape[0] == 3
    np.testing.assert_array_equal(out.C[1:], 0.0)
    with pytest.raises(ValueError):
        out.padded(1)
