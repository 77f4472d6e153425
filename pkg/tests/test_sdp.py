import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from refmpc import sdp


def lyapunov_problem(a, n=2, cap=10.0):
    """max log det X  s.t.  X - a^2 X >= I,  X <= cap I.  Optimum X = cap I when (1 - a^2) cap >= 1."""
    lay = sdp.Layout()
    lay.add_sym("X", n)
    B = sdp.sym_basis(n)
    decrease = sdp.LMIFamily.dense(-np.eye(n), ((1 - a * a) * B)[None], "decrease")
    upper = sdp.LMIFamily.dense(cap * np.eye(n), (-B)[None], "upper")
    ld = sdp.LMIFamily.dense(np.zeros((n, n)), B[None], "logdet")
    return sdp.SDProblem(lay, [decrease, upper], ld)


def test_logdet_optimum_at_cap():
    sol = sdp.solve(lyapunov_problem(0.5))
    assert sol.status == sdp.Status.OPTIMAL
    np.testing.assert_allclose(sol.variables["X"][0], 10 * np.eye(2), atol=1e-5)
    assert sol.margin >= -1e-8


@pytest.mark.parametrize("a", [0.99, 2.0])
def test_infeasible_reported(a):
    sol = sdp.solve(lyapunov_problem(a))
    assert sol.status == sdp.Status.INFEASIBLE
    assert not sol.ok


def test_linear_objective_scalar_blocks():
    # minimize y subject to 1 <= y <= 3
    lay = sdp.Layout()
    lay.add_full("y", 1, 1)
    lo = sdp.LMIFamily.dense(-np.ones((1, 1)), np.ones((1, 1, 1)), "lo")
    hi = sdp.LMIFamily.dense(3 * np.ones((1, 1)), -np.ones((1, 1, 1)), "hi")
    sol = sdp.solve(sdp.SDProblem(lay, [lo, hi], c=np.array([1.0])))
    assert sol.ok
    assert sol.y[0] == pytest.approx(1.0, abs=1e-6)


def test_dump_load_roundtrip(tmp_path):
    prob = lyapunov_problem(0.5)
    prob.dump(tmp_path / "p.json")
    back = sdp.SDProblem.load(tmp_path / "p.json")
    a, b = sdp.solve(prob), sdp.solve(back)
    np.testing.assert_allclose(a.y, b.y, atol=1e-10)
    assert back.block_count() == prob.block_count()


def test_load_rejects_foreign_file(tmp_path):
    (tmp_path / "x.json").write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        sdp.SDProblem.load(tmp_path / "x.json")


def test_sym_basis_unpack_roundtrip():
    lay = sdp.Layout()
    lay.add_sym("S", 3, count=2)
    lay.add_full("F", 2, 3)
    y = np.arange(lay.size, dtype=float)
    out = lay.unpack(y)
    assert out["S"].shape == (2, 3, 3)
    np.testing.assert_array_equal(out["S"], out["S"].transpose(0, 2, 1))
    assert out["F"].shape == (1, 2, 3)
    with pytest.raises(ValueError):
        lay.add_sym("S", 2)


@settings(max_examples=15, deadline=None)
@given(st.lists(st.floats(0.1, 20.0), min_size=1, max_size=4))
def test_diagonal_logdet_hits_bounds(bounds):
    # max sum log y_i  s.t.  y_i <= b_i  has the solution y = b
    k = len(bounds)
    lay = sdp.Layout()
    lay.add_full("y", k, 1)
    E = np.zeros((k, k, k))
    for i in range(k):
        E[i, i, i] = 1.0
    upper = sdp.LMIFamily.dense(np.diag(bounds), -E[None], "upper")
    ld = sdp.LMIFamily.dense(np.zeros((k, k)), E[None], "logdet")
    sol = sdp.solve(sdp.SDProblem(lay, [upper], ld))
    assert sol.ok
    np.testing.assert_allclose(sol.y, bounds, rtol=1e-5)
