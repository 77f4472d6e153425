import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from refmpc import certify as cf
from refmpc import synthesis as syn
from refmpc.bench.models import double_integrator


@pytest.fixture(scope="module")
def lti():
    model = double_integrator()
    ing = syn.synthesize(model, "grid-discrete", np.eye(2), np.eye(1))
    rep = cf.certify_alpha(ing, model, cf.SamplingSpec(per_pair=200), sweep_density=5, taylor_samples=2000)
    return model, ing, rep


def alpha_box_oracle(P, K, slack):
    # largest level set of |dx|_P inside |x_i| <= slack, |u| <= slack around the reference
    Pinv = np.linalg.inv(P)
    rows = np.vstack([np.eye(P.shape[0]), K])
    return min(slack**2 / float(v @ Pinv @ v) for v in rows)


def test_constants_of_constant_cost(lti):
    model, ing, rep = lti
    P, _, _ = ing.evaluate(np.zeros(3))
    w = np.linalg.eigvalsh(P)
    assert rep.c_l == pytest.approx(w[0], rel=1e-9)
    assert rep.c_u == pytest.approx(w[-1], rel=1e-9)
    assert rep.overshoot == pytest.approx(np.sqrt(w[-1] / w[0]), rel=1e-9)


def test_alpha_constraint_matches_box_oracle(lti):
    _, ing, rep = lti
    P, K, _ = ing.evaluate(np.zeros(3))
    # Z_r reaches 1, Z reaches 10: the tightest reference leaves slack 9
    assert rep.alpha2 == pytest.approx(alpha_box_oracle(P, K, 9.0), rel=1e-9)


def test_linear_plant_decreases_on_whole_constraint_set(lti):
    _, _, rep = lti
    assert rep.alpha1_sampling == rep.alpha2
    assert rep.alpha == rep.alpha2


def test_sampling_detects_too_large_level(lti):
    model, ing, rep = lti
    res = cf.alpha_decrease_sampling(ing, model, 100 * rep.alpha2, cf.SamplingSpec(per_pair=200))
    assert res.passed is False
    assert res.worst_constraint < 0


def test_report_json_has_no_nan(lti):
    import json

    text = json.dumps(lti[2].to_json())
    assert "NaN" not in text


def test_tightening_schedule_values():
    sched = cf.tightening_schedule([1.0, 2.0], 0.5, 3)
    np.testing.assert_allclose(sched[:, 0], [0.0, 1.0, 1.5, 1.75])
    np.testing.assert_allclose(sched[:, 1], [0.0, 2.0, 3.0, 3.5])
    np.testing.assert_allclose(cf.tightening_schedule(0.1, 1.0, 4)[:, 0], [0.0, 0.1, 0.2, 0.3, 0.4])


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 0.999), st.integers(1, 30), st.floats(1e-6, 1.0))
def test_tightening_schedule_monotone_and_bounded(rho, N, eps):
    s = cf.tightening_schedule(eps, rho, N)[:, 0]
    assert np.all(np.diff(s) >= 0)
    assert s[-1] <= eps / (1 - rho) * (1 + 1e-12)


def test_robust_without_disturbance_keeps_terminal_level(lti):
    model, ing, rep = lti
    out = cf.robust_certificate(ing, model, 0.0, 10, rep, samples=2000, sweep_density=5)
    assert out["eps_scalar"] == 0.0
    assert out["alpha_w"] == pytest.approx(rep.alpha2, rel=1e-12)
    assert out["w_bound"] > 0


def test_robust_raises_above_bound(lti):
    model, ing, rep = lti
    with pytest.raises(cf.WBoundViolated):
        cf.robust_certificate(ing, model, 1e3, 10, rep, samples=2000, sweep_density=5, raise_on_violation=True)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.floats(1e-3, 10.0), st.integers(0, 2**31 - 1))
def test_ellipsoid_offsets_land_on_level_set(n, alpha, seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, n))
    P = (A @ A.T + n * np.eye(n))[None]
    z = rng.standard_normal((1, 5, n))
    z /= np.linalg.norm(z, axis=-1, keepdims=True)
    dx = cf.ellipsoid_offsets(P, alpha, z)
    np.testing.assert_allclose(np.einsum("ksa,ab,ksb->ks", dx, P[0], dx), alpha, rtol=1e-9)


def test_unit_ball_inside():
    z = cf.unit_ball(np.random.default_rng(0), 1000, 3)
    assert np.all(np.linalg.norm(z, axis=1) <= 1.0)
