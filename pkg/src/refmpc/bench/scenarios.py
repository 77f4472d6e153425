"""Benchmark references and scenario definitions.

Neither the CSTR orbit nor the lane-change path of the original studies is
published, so both are regenerated here by forward simulation of an explicit
input profile. Figures therefore agree qualitatively, not point-wise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..model import QuasiLPVModel, ReferenceTrajectory, validate_reference
from .models import bicycle_model, cstr_model


class GenerationFailed(RuntimeError):
    pass


def _checked(model: QuasiLPVModel, ref: ReferenceTrajectory, what: str) -> ReferenceTrajectory:
    rep = validate_reference(model, ref, tol=1e-9)
    if not rep.admissible:
        k = rep.first_violation
        raise GenerationFailed(f"{what}: reference leaves Z_r or violates the dynamics (first bad step {k}, "
                               f"max defect {rep.max_defect:.2e})")
    return ref


def cstr_periodic_reference(model: QuasiLPVModel | None = None, period: int = 1144, u_mean: float = 0.13,
                            u_amp: float = 0.03, periods: int = 30) -> ReferenceTrajectory:
    """Periodic CSTR orbit under a sinusoidal input.

    The plant is simulated over ``periods`` cycles of the input so the state
    settles on the attracting periodic orbit; the last cycle is returned and
    closed by checking ``x(T) = x(0)``.
    """
    model = model or cstr_model()
    k = np.arange(period)
    u = u_mean + u_amp * np.sin(2.0 * np.pi * k / period)
    x = model.Z_r.center[: model.n].copy()
    x[2] = u_mean
    X = np.zeros((period, model.n))
    for _ in range(periods):
        for t in range(period):
            X[t] = x
            x = model.step(x, u[t : t + 1])
    ref = ReferenceTrajectory(X, u[:, None], h=model.h, periodic=True,
                              extra={"generator": "sinusoidal input", "u_mean": u_mean, "u_amp": u_amp})
    return _checked(model, ref, "CSTR orbit")


def steering_profile(t, starts, duration: float, amplitude: float):
    """Sum of full sine periods of steering, one per lane change, with alternating sign."""
    delta = np.zeros_like(t)
    for i, t0 in enumerate(starts):
        s = (t - t0) / duration
        on = (s >= 0) & (s <= 1)
        delta[on] += (-1) ** i * amplitude * np.sin(2 * np.pi * s[on])
    return delta


def evasive_reference(model: QuasiLPVModel | None = None, speed: float = 20.0, duration: float = 3.0,
                      change_time: float = 1.0, hold_time: float = 0.4, lead_time: float = 0.3,
                      amplitude: float = 0.12) -> ReferenceTrajectory:
    """Double lane change at constant speed.

    The steering angle follows one sine period per lane change (left, then
    back); the steering rate is its exact first difference, so the Euler
    model reproduces ``delta`` without defect. Positions and heading come
    from forward simulation of the model.
    """
    model = model or bicycle_model()
    h = model.h
    steps = int(round(duration / h))
    t = np.arange(steps + 1) * h
    starts = [lead_time, lead_time + change_time + hold_time]
    delta = steering_profile(t, starts, change_time, amplitude)
    u = np.zeros((steps, 2))
    u[:, 1] = np.diff(delta) / h
    X = np.zeros((steps, model.n))
    x = np.array([0.0, 0.0, 0.0, speed, delta[0]])
    for k in range(steps):
        X[k] = x
        x = model.step(x, u[k])
    ref = ReferenceTrajectory(X, u, h=h, periodic=False,
                              extra={"corridor": model.extra.get("corridor"), "speed": speed,
                                     "lane_offset": float(X[:, 1].max() - X[:, 1].min())})
    return _checked(model, ref, "evasive manoeuvre")


# --------------------------------------------------------------------------
# scenarios


@dataclass
class ControllerSpec:
    """One entry of a comparison: a label plus the keyword arguments for MPCConfig."""

    label: str
    scheme: str
    N: int
    max_iter: int = 1
    options: dict = field(default_factory=dict)


@dataclass
class Scenario:
    name: str
    model: QuasiLPVModel
    reference: ReferenceTrajectory
    x0: np.ndarray
    controllers: list[ControllerSpec]
    steps: int
    w_hat: float = 0.0
    seed: int = 0
    ingredients: object = None
    tightening: np.ndarray | None = None
    alpha_w: float | None = None

    def disturbances(self) -> np.ndarray:
        from ..nmpc import disturbance_sequence

        return disturbance_sequence(self.model.n, self.steps, self.w_hat, self.seed)
