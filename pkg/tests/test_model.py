import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from refmpc.bench.models import REGISTRY, bicycle_model, cstr_model, double_integrator, get_model
from refmpc.model import (
    Box,
    EmptyFeasibleSet,
    ReferenceTrajectory,
    finite_difference_jacobians,
    reconstruction_error,
    validate_reference,
)


@pytest.mark.parametrize("factory", [cstr_model, bicycle_model])
def test_sampled_jacobians_match_finite_differences(factory):
    m = factory()
    r = m.sample_box.sample(np.random.default_rng(0), 20)
    A, B = m.jacobians(r)
    Af, Bf = finite_difference_jacobians(m, r)
    np.testing.assert_allclose(A, Af, atol=1e-6)
    np.testing.assert_allclose(B, Bf, atol=1e-6)


@pytest.mark.parametrize("name", sorted(REGISTRY))
def test_quasi_lpv_reconstruction_is_exact(name):
    m = get_model(name)
    r = m.sample_box.sample(np.random.default_rng(1), 50)
    for td in ("discrete", "continuous"):
        try:
            m.parameterization(td)
        except (ValueError, KeyError):
            continue
        if (td == "discrete" and m.param_discrete is None) or (td == "continuous" and m.param_continuous is None):
            continue
        assert reconstruction_error(m, r, td) < 1e-8


def test_unknown_model():
    with pytest.raises(KeyError):
        get_model("nonexistent")


def test_box_grid_without_dims_is_centre():
    b = Box([-1.0, 0.0], [1.0, 4.0])
    np.testing.assert_array_equal(b.grid([], 5), [[0.0, 2.0]])


def test_box_grid_rejects_unbounded():
    b = Box([-np.inf, 0.0], [np.inf, 1.0])
    with pytest.raises(EmptyFeasibleSet):
        b.grid([0], 3)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(2, 6))
def test_box_grid_points_inside(dims, k):
    b = Box(-np.arange(1, dims + 1, dtype=float), np.arange(1, dims + 1, dtype=float))
    g = b.grid(list(range(dims)), k)
    assert g.shape == (k**dims, dims)
    assert b.contains(g).all()


def test_reference_csv_roundtrip(tmp_path):
    m = double_integrator()
    x = np.zeros((5, 2))
    u = np.zeros((5, 1))
    ref = ReferenceTrajectory(x, u, h=m.h)
    ref.to_csv(tmp_path / "r.csv")
    back = ReferenceTrajectory.from_csv(tmp_path / "r.csv")
    np.testing.assert_array_equal(back.r, ref.r)
    assert back.h == pytest.approx(m.h)


def test_reference_window_wraps_when_periodic():
    ref = ReferenceTrajectory(np.arange(4.0)[:, None], np.zeros((4, 1)), periodic=True)
    np.testing.assert_array_equal(ref.window(3, 3)[:, 0], [3.0, 0.0, 1.0])
    flat = ReferenceTrajectory(np.arange(4.0)[:, None], np.zeros((4, 1)))
    with pytest.raises(IndexError):
        flat.window(3, 3)


def test_validate_reference_flags_defect():
    m = double_integrator()
    x = np.array([[0.0, 0.0], [0.5, 0.0], [0.5, 0.0]])
    rep = validate_reference(m, ReferenceTrajectory(x, np.zeros((3, 1)), h=m.h))
    assert not rep.admissible
    assert rep.max_defect == pytest.approx(0.5)
    ok = validate_reference(m, ReferenceTrajectory(np.full((3, 2), [0.5, 0.0]), np.zeros((3, 1)), h=m.h))
    assert ok.admissible
