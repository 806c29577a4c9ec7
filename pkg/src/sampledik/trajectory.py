"""Reference trajectory generation.

References q^r(t) must be twice continuously differentiable with uniformly
bounded velocity and acceleration on a compact range.  Three families cover
the experiments: constant set-points, per-coordinate sinusoids, and quintic
smoothstep waypoint moves (C^2 with zero end velocity and acceleration).
Velocity/acceleration bounds are computed analytically where exact and by
dense-grid maximization otherwise, erring on the conservative side because
they feed the convergence-rate parameter estimates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Tuple, Union

import numpy as np

# max of s'(u) and |s''(u)| for the quintic smoothstep on [0, 1]
_SMOOTHSTEP_DMAX = 15.0 / 8.0
_SMOOTHSTEP_DDMAX = 10.0 / np.sqrt(3.0)


@dataclass(frozen=True)
class ConstantSpec:
    """Constant reference q^r(t) = value; derivatives identically zero."""
    value: np.ndarray
    duration: float = 60.0


@dataclass(frozen=True)
class SinusoidSpec:
    """Per-coordinate sinusoid q_i(t) = offset_i + amp_i sin(omega_i t + phase_i).

    ``amplitude``, ``omega`` and ``phase`` broadcast against the system
    dimension, so a scalar omega drives every coordinate at the same rate.
    """
    offset: np.ndarray
    amplitude: np.ndarray
    omega: Union[float, np.ndarray]
    phase: Union[float, np.ndarray] = 0.0
    duration: float = 60.0


@dataclass(frozen=True)
class SmoothstepSpec:
    """Quintic smoothstep move from ``start`` to ``end`` over ``duration``."""
    start: np.ndarray
    end: np.ndarray
    duration: float


TrajectoryFamily = Union[ConstantSpec, SinusoidSpec, SmoothstepSpec]


@dataclass(frozen=True)
class ReferenceTrajectory:
    """Sampled reference with consistent derivatives and certified bounds.

    ``eval`` maps t to (q^r, dq^r/dt, d2q^r/dt2).  ``v_max`` and ``a_max``
    bound the norms of the first and second derivative over [0, duration].
    Immutable after construction; freely shared across workers.
    """
    dim: int
    duration: float
    v_max: float
    a_max: float
    _eval: "callable" = field(repr=False)

    def eval(self, t: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self._eval(t)


def sample(traj: ReferenceTrajectory, t: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sample (q^r, qdot^r, qddot^r) at time t, 0 <= t <= duration."""
    if not (0.0 <= t <= traj.duration + 1e-12):
        raise ValueError(f"t={t} outside [0, {traj.duration}]")
    return traj.eval(t)


def make_trajectory(spec: TrajectoryFamily, dim: int) -> ReferenceTrajectory:
    """Build a :class:`ReferenceTrajectory` from a family spec.

    Raises:
        ValueError: non-positive duration, zero dimension, or shapes that do
            not broadcast to the system dimension.
    """

    if dim <= 0:
        raise ValueError("system dimension must be positive")
    if spec.duration <= 0:
        raise ValueError("trajectory duration must be positive")

    if isinstance(spec, ConstantSpec):
        value = _as_vec(spec.value, dim)
        zero = np.zeros(dim)

        def ev(t, value=value, zero=zero):
            return value.copy(), zero.copy(), zero.copy()

        return ReferenceTrajectory(dim, float(spec.duration), 0.0, 0.0, ev)

    if isinstance(spec, SinusoidSpec):
        off = _as_vec(spec.offset, dim)
        amp = _as_vec(spec.amplitude, dim)
        om = _as_vec(spec.omega, dim)
        ph = _as_vec(spec.phase, dim)

        def ev(t, off=off, amp=amp, om=om, ph=ph):
            arg = om * t + ph
            s, c = np.sin(arg), np.cos(arg)
            return off + amp * s, amp * om * c, -amp * om * om * s

        # exact when phases align, conservative otherwise
        v_max = float(np.sqrt(np.sum((amp * om) ** 2)))
        a_max = float(np.sqrt(np.sum((amp * om * om) ** 2)))
        return ReferenceTrajectory(dim, float(spec.duration), v_max, a_max, ev)

    if isinstance(spec, SmoothstepSpec):
        q0 = _as_vec(spec.start, dim)
        q1 = _as_vec(spec.end, dim)
        D = float(spec.duration)
        delta = q1 - q0

        def ev(t, q0=q0, delta=delta, D=D):
            u = min(max(t / D, 0.0), 1.0)
            s = u * u * u * (10.0 + u * (-15.0 + 6.0 * u))
            ds = 30.0 * u * u * (u - 1.0) ** 2 / D
            dds = (120.0 * u ** 3 - 180.0 * u ** 2 + 60.0 * u) / (D * D)
            return q0 + delta * s, delta * ds, delta * dds

        dn = float(np.linalg.norm(delta))
        return ReferenceTrajectory(dim, D, _SMOOTHSTEP_DMAX * dn / D,
                                   _SMOOTHSTEP_DDMAX * dn / (D * D), ev)

    raise ValueError(f"unknown trajectory spec {type(spec).__name__}")


def grid_bounds(traj: ReferenceTrajectory, points: int = 10_000) -> Tuple[float, float]:
    """Dense-grid maxima of ||qdot^r|| and ||qddot^r|| over the duration."""
    ts = np.linspace(0.0, traj.duration, points)
    v = a = 0.0
    for t in ts:
        _, qd, qdd = traj.eval(t)
        v = max(v, float(np.linalg.norm(qd)))
        a = max(a, float(np.linalg.norm(qdd)))
    return v, a


def _as_vec(x, dim: int) -> np.ndarray:
    v = np.broadcast_to(np.asarray(x, dtype=float), (dim,)).copy()
    return v
