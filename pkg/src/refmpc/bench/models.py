"""Registered benchmark systems."""

from __future__ import annotations

import numpy as np

from ..model import Box, Parameterization, QuasiLPVModel, entry_parameterization

# --------------------------------------------------------------------------
# CSTR

CSTR_ZR = ([0.05, 0.05, 0.05, 0.059], [0.45, 0.15, 0.2, 0.439])
CSTR_Z = ([0.0, 0.0, 0.0, 0.049], [1.0, 1.0, 1.0, 0.449])


def _cstr_f(x, u):
    x1, x2, x3 = x[:, 0], x[:, 1], x[:, 2]
    e1 = np.exp(-1.0 / x3)
    e2 = np.exp(-0.55 / x3)
    return np.stack(
        [
            1.0 - x1 - 1e4 * x1**2 * e1 - 400.0 * x1 * e2,
            1e4 * x1**2 * e1 - x2,
            u[:, 0] - x3,
        ],
        axis=1,
    )


def cstr_theta_continuous(r):
    x1, x3 = r[:, 0], r[:, 2]
    e1 = np.exp(-1.0 / x3)
    e2 = np.exp(-0.55 / x3)
    return np.stack(
        [
            400.0 * e2,
            2e4 * x1 * e1,
            1e4 * (x1 / x3) ** 2 * e1,
            400.0 * 0.55 * x1 / x3**2 * e2,
        ],
        axis=1,
    )


def _cstr_theta_gradient(r):
    x1, x3 = r[:, 0], r[:, 2]
    e1 = np.exp(-1.0 / x3)
    e2 = np.exp(-0.55 / x3)
    th = cstr_theta_continuous(r)
    g = np.zeros((r.shape[0], 4, 4))
    g[:, 0, 2] = th[:, 0] * 0.55 / x3**2
    g[:, 1, 0] = 2e4 * e1
    g[:, 1, 2] = th[:, 1] / x3**2
    g[:, 2, 0] = 2e4 * x1 / x3**2 * e1
    g[:, 2, 2] = th[:, 2] * (-2.0 / x3 + 1.0 / x3**2)
    g[:, 3, 0] = 220.0 / x3**2 * e2
    g[:, 3, 2] = th[:, 3] * (-2.0 / x3 + 0.55 / x3**2)
    return g


def _cstr_jac(x, u):
    k = x.shape[0]
    th = cstr_theta_continuous(np.concatenate([x, u], axis=1))
    A = np.zeros((k, 3, 3))
    A[:, 0, 0] = -1.0 - th[:, 0] - th[:, 1]
    A[:, 0, 2] = -th[:, 2] - th[:, 3]
    A[:, 1, 0] = th[:, 1]
    A[:, 1, 1] = -1.0
    A[:, 1, 2] = th[:, 2]
    A[:, 2, 2] = -1.0
    B = np.zeros((k, 3, 1))
    B[:, 2, 0] = 1.0
    return A, B


def _cstr_continuous_param() -> Parameterization:
    A = np.zeros((5, 3, 3))
    A[0] = -np.eye(3)
    A[1, 0, 0] = -1.0
    A[2, 0, 0] = -1.0
    A[2, 1, 0] = 1.0
    A[3, 0, 2] = -1.0
    A[3, 1, 2] = 1.0
    A[4, 0, 2] = -1.0
    B = np.zeros((5, 3, 1))
    B[0, 2, 0] = 1.0
    return Parameterization(
        cstr_theta_continuous, A, B, (0, 2), _cstr_theta_gradient,
        ("400e^(-0.55/x3)", "2e4 x1 e^(-1/x3)", "1e4 (x1/x3)^2 e^(-1/x3)", "220 x1/x3^2 e^(-0.55/x3)"),
    )


def cstr_model(h: float = 0.01, u_rate_max: float = 0.0) -> QuasiLPVModel:
    """Three-state CSTR, RK4 sampled, with continuous and discrete parameterizations."""
    base = QuasiLPVModel(
        name="cstr", n=3, m=1, f=_cstr_f, jac=_cstr_jac, h=h, method="rk4",
        Z=Box(*CSTR_Z), Z_r=Box(*CSTR_ZR),
        param_continuous=_cstr_continuous_param(),
        u_rate_max=np.array([u_rate_max]),
        affine_inputs=(0,),
        state_names=("x1", "x2", "x3"), input_names=("u",),
        extra={
            "grid_discrete": {0: 10, 2: 10, 3: 10},
            "grid_continuous": {0: 10, 2: 10, 3: 2},
        },
    )

    def djac(r):
        _, A, B = base.step_sensitivity(r[:, :3], r[:, 3:])
        return A, B

    # entries of the sampled Jacobian that vary: rows x1, x2 against x1, x3, u
    entries = [(0, 0), (0, 2), (0, 3), (1, 0), (1, 2), (1, 3)]
    par = entry_parameterization(djac, 3, 1, entries, (0, 2, 3), np.array([0.25, 0.1, 0.12, 0.2]))
    return base.with_changes(param_discrete=par)


# --------------------------------------------------------------------------
# kinematic bicycle

L_F, L_R = 1.4, 1.5
CAR_ZR = ([-np.inf, -np.inf, -np.inf, 10.0, -0.4, -1.0, -3.0], [np.inf, np.inf, np.inf, 50.0, 0.4, 1.0, 3.0])
CAR_Z = ([-np.inf, -np.inf, -np.inf, 5.0, -0.5, -2.0, -6.0], [np.inf, np.inf, np.inf, 55.0, 0.5, 2.0, 6.0])
CAR_SAMPLE = ([0.0, 0.0, -np.pi, 10.0, -0.4, -1.0, -3.0], [0.0, 0.0, np.pi, 50.0, 0.4, 1.0, 3.0])


def slip_angle(delta, lf=L_F, lr=L_R):
    return np.arctan(lr / (lf + lr) * np.tan(delta))


def _slip_derivative(delta, lf=L_F, lr=L_R):
    kap = lr / (lf + lr)
    t = np.tan(delta)
    return kap * (1.0 + t**2) / (1.0 + (kap * t) ** 2)


def _car_f(x, u):
    psi, v, delta = x[:, 2], x[:, 3], x[:, 4]
    beta = slip_angle(delta)
    return np.stack(
        [
            v * np.cos(psi + beta),
            v * np.sin(psi + beta),
            v / L_R * np.sin(beta),
            u[:, 0],
            u[:, 1],
        ],
        axis=1,
    )


def _car_jac(x, u):
    k = x.shape[0]
    psi, v, delta = x[:, 2], x[:, 3], x[:, 4]
    beta = slip_angle(delta)
    db = _slip_derivative(delta)
    c, s = np.cos(psi + beta), np.sin(psi + beta)
    A = np.zeros((k, 5, 5))
    A[:, 0, 2] = -v * s
    A[:, 0, 3] = c
    A[:, 0, 4] = -v * s * db
    A[:, 1, 2] = v * c
    A[:, 1, 3] = s
    A[:, 1, 4] = v * c * db
    A[:, 2, 3] = np.sin(beta) / L_R
    A[:, 2, 4] = v * np.cos(beta) * db / L_R
    B = np.zeros((k, 5, 2))
    B[:, 3, 0] = 1.0
    B[:, 4, 1] = 1.0
    return A, B


CAR_ENTRIES = [(0, 2), (0, 3), (0, 4), (1, 2), (1, 3), (1, 4), (2, 3), (2, 4)]


def bicycle_model(h: float = 0.002, corridor: float = 0.35, u_rate_max=(0.0, 0.0)) -> QuasiLPVModel:
    """Kinematic bicycle, Euler sampled; theta are the eight varying Jacobian entries."""
    base = QuasiLPVModel(
        name="car", n=5, m=2, f=_car_f, jac=_car_jac, h=h, method="euler",
        Z=Box(*CAR_Z), Z_r=Box(*CAR_ZR), sampling_box=Box(*CAR_SAMPLE),
        u_rate_max=np.asarray(u_rate_max, float), affine_inputs=(0, 1),
        state_names=("z1", "z2", "psi", "v", "delta"), input_names=("a", "u_delta"),
        extra={
            "corridor": corridor,
            "corridor_row": 1,
            "grid_discrete": {2: 10, 3: 10, 4: 10, 5: 2, 6: 5},
            "grid_continuous": {2: 10, 3: 10, 4: 10, 5: 2, 6: 2},
        },
    )
    probe = np.array([0.0, 0.0, 0.3, 20.0, 0.1, 0.0, 0.0])

    def cjac(r):
        return _car_jac(r[:, :5], r[:, 5:])

    def djac(r):
        _, A, B = base.step_sensitivity(r[:, :5], r[:, 5:])
        return A, B

    pc = entry_parameterization(cjac, 5, 2, CAR_ENTRIES, (2, 3, 4), probe)
    pd = entry_parameterization(djac, 5, 2, CAR_ENTRIES, (2, 3, 4), probe)
    return base.with_changes(param_continuous=pc, param_discrete=pd)


# --------------------------------------------------------------------------
# small systems used by tests and examples


def lti_model(A, B, Z: Box, Z_r: Box, name: str = "lti", time_domain: str = "discrete", h: float = 1.0) -> QuasiLPVModel:
    """Linear system with an empty parameterization (p = 0)."""
    A = np.asarray(A, float)
    B = np.asarray(B, float)
    n, m = B.shape

    def f(x, u):
        return x @ A.T + u @ B.T

    def jac(x, u):
        k = x.shape[0]
        return np.broadcast_to(A, (k, n, n)).copy(), np.broadcast_to(B, (k, n, m)).copy()

    empty = lambda r: np.zeros((np.atleast_2d(r).shape[0], 0))  # noqa: E731
    grad = lambda r: np.zeros((np.atleast_2d(r).shape[0], 0, n + m))  # noqa: E731
    par = Parameterization(empty, A[None], B[None], (), grad)
    method = "exact" if time_domain == "discrete" else "rk4"
    return QuasiLPVModel(
        name=name, n=n, m=m, f=f, jac=jac, Z=Z, Z_r=Z_r, h=h, time_domain=time_domain, method=method,
        param_discrete=par if time_domain == "discrete" else None,
        param_continuous=par if time_domain == "continuous" else None,
        u_rate_max=np.zeros(m),
    )


def double_integrator(time_domain: str = "discrete", h: float = 0.1) -> QuasiLPVModel:
    big = Box([-10.0, -10.0, -10.0], [10.0, 10.0, 10.0])
    ref = Box([-1.0, -1.0, -1.0], [1.0, 1.0, 1.0])
    if time_domain == "discrete":
        A = np.array([[1.0, h], [0.0, 1.0]])
        B = np.array([[0.5 * h * h], [h]])
        return lti_model(A, B, big, ref, "double-integrator")
    A = np.array([[0.0, 1.0], [0.0, 0.0]])
    B = np.array([[0.0], [1.0]])
    return lti_model(A, B, big, ref, "double-integrator-ct", "continuous", h)


def scalar_quadratic(h: float = 0.1, c: float = 1.0) -> QuasiLPVModel:
    """``x+ = x + h (u + c x^2)``; the Jacobian is scheduled by x_r."""

    def f(x, u):
        return x + h * (u + c * x**2)

    def jac(x, u):
        k = x.shape[0]
        return (1.0 + 2 * h * c * x).reshape(k, 1, 1), np.full((k, 1, 1), h)

    A = np.array([[[1.0]], [[2 * h * c]]])
    B = np.array([[[h]], [[0.0]]])
    par = Parameterization(lambda r: r[:, :1], A, B, (0,), lambda r: np.tile(np.array([[[1.0, 0.0]]]), (r.shape[0], 1, 1)))
    return QuasiLPVModel(
        name="scalar-quadratic", n=1, m=1, f=f, jac=jac, time_domain="discrete", method="exact",
        Z=Box([-2.0, -3.0], [2.0, 3.0]), Z_r=Box([-0.5, -1.0], [0.5, 1.0]), param_discrete=par,
    )


def cubic_toy(h: float = 0.1) -> QuasiLPVModel:
    """``x+ = x + h(-x - 0.1 x^3 + u)``, a one-state plant for the periodic scheme."""

    def f(x, u):
        return x + h * (-x - 0.1 * x**3 + u)

    def jac(x, u):
        k = x.shape[0]
        return (1.0 + h * (-1.0 - 0.3 * x**2)).reshape(k, 1, 1), np.full((k, 1, 1), h)

    A = np.array([[[1.0 - h]], [[-0.3 * h]]])
    B = np.array([[[h]], [[0.0]]])
    par = Parameterization(lambda r: r[:, :1] ** 2, A, B, (0,), lambda r: np.stack([2 * r[:, :1], np.zeros_like(r[:, :1])], -1))
    return QuasiLPVModel(
        name="cubic-toy", n=1, m=1, f=f, jac=jac, time_domain="discrete", method="exact",
        Z=Box([-3.0, -3.0], [3.0, 3.0]), Z_r=Box([-2.0, -2.5], [2.0, 2.5]), param_discrete=par,
        extra={"grid_discrete": {0: 41, 1: 11}},
    )


REGISTRY = {
    "cstr": cstr_model,
    "car": bicycle_model,
    "double-integrator": double_integrator,
    "scalar-quadratic": scalar_quadratic,
    "cubic-toy": cubic_toy,
}


def get_model(name: str, **params) -> QuasiLPVModel:
    try:
        factory = REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown model {name!r}; registered: {', '.join(sorted(REGISTRY))}") from None
    return factory(**params)
