"""Closed-loop hybrid simulation and trace analysis.

The plant obeys pdot = u; in configuration space that is qdot = A_q^{-1} u.
The controller refreshes its sampled state every T seconds from the (possibly
noisy) measured configuration and holds its feedback term in between, so each
run alternates discrete sampling events with continuous integration.
Integration is classical fixed-step RK4 on the configuration flow, where the
tracking error e(t) = q(t) - q^r(t) lives and where the invertibility
assumption is stated.

Measurement noise, when enabled, perturbs only the sampled configuration fed
to the controller, never the plant state.  A singular Jacobian mid-run aborts
the run with a structured report instead of being regularized: invertibility
violations must surface.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Union

import numpy as np

from .control import (
    ControlStrategy,
    OfflineGain,
    OnlineGainSearch,
    feedforward_term,
    make_sampled_state,
    online_gain,
)
from .kinematics import (
    DEFAULT_GUARD,
    ConditioningGuard,
    SingularConfiguration,
    SquareSystem,
    guard_matrix,
)
from .trajectory import ReferenceTrajectory


class ConfigError(ValueError):
    """Invalid simulation or experiment configuration."""


class BoundHypothesisError(ValueError):
    """The hypotheses of the point-stabilization error bound do not hold."""


@dataclass
class SingularityReport:
    """Where and when a run hit a singular configuration."""
    time: float
    q: Optional[np.ndarray]
    sigma_min: Optional[float]
    message: str


@dataclass
class SimConfig:
    """Configuration of one closed-loop run.

    ``dt`` is the integrator substep (default T/200, must satisfy
    dt <= T/50); ``horizon`` must be a whole number of sampling periods and
    fit inside the trajectory duration.  ``noise_sigma`` is the per-coordinate
    standard deviation of gaussian measurement noise applied to the sampled
    configuration (0 disables noise).  Identical configs with the same seed
    produce bitwise-identical traces.
    """

    system: SquareSystem
    trajectory: ReferenceTrajectory
    strategy: ControlStrategy
    horizon: float
    initial_error: np.ndarray
    dt: Optional[float] = None
    noise_sigma: Union[float, np.ndarray] = 0.0
    seed: int = 0
    guard: ConditioningGuard = field(default_factory=lambda: DEFAULT_GUARD)

    def __post_init__(self):
        T = self.strategy.sampling_period
        if self.dt is None:
            self.dt = T / 200.0
        if self.dt > T / 50.0 + 1e-15:
            raise ConfigError(f"dt={self.dt} violates dt <= T/50 (T={T})")
        if self.horizon <= 0:
            raise ConfigError("horizon must be positive")
        cycles = self.horizon / T
        if abs(cycles - round(cycles)) > 1e-9 * max(1.0, cycles):
            raise ConfigError(f"horizon={self.horizon} is not a multiple of T={T}")
        if self.horizon > self.trajectory.duration + 1e-9:
            raise ConfigError("horizon exceeds trajectory duration")
        self.initial_error = np.asarray(self.initial_error, dtype=float)
        if self.initial_error.shape != (self.system.dim,):
            raise ConfigError(f"initial_error must have length {self.system.dim}")
        sig = np.asarray(self.noise_sigma, dtype=float)
        if np.any(sig < 0):
            raise ConfigError("noise sigma must be nonnegative")


@dataclass
class SimTrace:
    """Time-indexed record of one run.

    ``e`` equals ``q - q_ref`` column by column; times are strictly
    increasing.  ``sample_indices`` marks the sampling instants inside the
    grid, ``gain`` carries the feedback gain active at each point, and
    ``singularity`` is set when the run aborted early.
    """

    t: np.ndarray
    q: np.ndarray
    q_ref: np.ndarray
    e: np.ndarray
    e_norm: np.ndarray
    u: np.ndarray
    gain: np.ndarray
    is_sample: np.ndarray
    sample_indices: np.ndarray
    sampling_period: float
    singularity: Optional[SingularityReport] = None

    @property
    def completed(self) -> bool:
        return self.singularity is None


@dataclass
class Metrics:
    """Aggregate tracking metrics of a trace.

    ``mean_error`` is the trapezoidal time average of ||e(t)||;
    ``contraction_ratios`` holds the boundary ratios
    ||e((h+1)T)|| / ||e(hT)|| for intervals whose start error exceeds 1e-12;
    ``contraction_violations`` counts intervals whose error norm exceeded its
    start-of-interval value somewhere in (hT, (h+1)T].
    """

    mean_error: float
    max_error: float
    final_error: float
    contraction_ratios: np.ndarray
    contraction_violations: int


def run(config: SimConfig) -> SimTrace:
    """Simulate the closed loop; deterministic given the config seed.

    Returns the full-horizon trace, or a truncated trace with a
    :class:`SingularityReport` attached if a Jacobian lost rank mid-run.

    Raises:
        SingularConfiguration: the initial configuration itself is singular.
    """

    sys, traj, strat = config.system, config.trajectory, config.strategy
    T = strat.sampling_period
    n = sys.dim
    n_intervals = int(round(config.horizon / T))
    m = int(math.ceil(T / config.dt - 1e-9))
    dt = T / m
    n_pts = n_intervals * m + 1

    t_arr = np.empty(n_pts)
    q_arr = np.empty((n_pts, n))
    qr_arr = np.empty((n_pts, n))
    u_arr = np.empty((n_pts, n))
    gain_arr = np.empty(n_pts)

    rng = np.random.default_rng(config.seed)
    sigma = np.broadcast_to(np.asarray(config.noise_sigma, dtype=float), (n,))
    noisy = bool(np.any(sigma > 0))

    qr0, _, _ = traj.eval(0.0)
    q = qr0 + config.initial_error
    A0 = sys.jacobian(q)
    guard_matrix(A0, config.guard, q=q, time=0.0)   # Assumption on the initial point

    filled = 0
    report: Optional[SingularityReport] = None

    for h in range(n_intervals):
        t_h = h * T
        q_meas = q + rng.normal(0.0, 1.0, n) * sigma if noisy else q
        try:
            if isinstance(strat.gain, OfflineGain):
                k_h = strat.gain.k
            else:
                qr_h, _, _ = traj.eval(t_h)
                k_h, _ = online_gain(sys, traj, q_meas - qr_h, t_h, T,
                                     strat.gain, ff_kind=strat.ff_kind,
                                     guard=config.guard)
            state = make_sampled_state(sys, traj, t_h, q_meas, k_h, config.guard)
        except SingularConfiguration as exc:
            report = _report_from(exc, t_h)
            break

        u_fb = -k_h * (state.jac @ state.error)
        try:
            # feedforward on the half-substep grid shared by the RK4 stages
            ff = np.empty((2 * m + 1, n))
            for j in range(2 * m + 1):
                ff[j] = feedforward_term(sys, strat.ff_kind, state.jac, traj,
                                         t_h + 0.5 * j * dt, config.guard)
        except SingularConfiguration as exc:
            report = _report_from(exc, t_h)
            break

        aborted = False
        for j in range(m):
            p = h * m + j
            t_p = t_h + j * dt
            t_arr[p] = t_p
            q_arr[p] = q
            qr_arr[p], _, _ = traj.eval(t_p)
            u_arr[p] = u_fb + ff[2 * j]
            gain_arr[p] = k_h
            filled = p + 1
            try:
                q = _rk4_config_step(sys, q, u_fb, ff, j, dt, config.guard, t_p)
            except SingularConfiguration as exc:
                report = _report_from(exc, t_p)
                aborted = True
                break
        if aborted or report is not None:
            break

    if report is None:
        p = n_pts - 1
        t_arr[p] = n_intervals * T
        q_arr[p] = q
        qr_arr[p], _, _ = traj.eval(t_arr[p])
        u_arr[p] = u_fb + ff[2 * m]
        gain_arr[p] = k_h
        filled = n_pts

    t_arr = t_arr[:filled]
    q_arr = q_arr[:filled]
    qr_arr = qr_arr[:filled]
    u_arr = u_arr[:filled]
    gain_arr = gain_arr[:filled]
    e_arr = q_arr - qr_arr
    is_sample = np.zeros(filled, dtype=bool)
    is_sample[::m] = True
    sample_indices = np.flatnonzero(is_sample)

    return SimTrace(t=t_arr, q=q_arr, q_ref=qr_arr, e=e_arr,
                    e_norm=np.linalg.norm(e_arr, axis=1), u=u_arr,
                    gain=gain_arr, is_sample=is_sample,
                    sample_indices=sample_indices, sampling_period=T,
                    singularity=report)


def _rk4_config_step(sys, q, u_fb, ff, j, dt, guard, t_p):
    """One RK4 step of qdot = A_q^{-1} (u_fb + u_ff(t)) from t_p."""

    def f(qs, ff_idx):
        A = sys.jacobian(qs)
        guard_matrix(A, guard, q=qs, time=t_p)
        return np.linalg.solve(A, u_fb + ff[ff_idx])

    k1 = f(q, 2 * j)
    k2 = f(q + 0.5 * dt * k1, 2 * j + 1)
    k3 = f(q + 0.5 * dt * k2, 2 * j + 1)
    k4 = f(q + dt * k3, 2 * j + 2)
    return q + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _report_from(exc: SingularConfiguration, t: float) -> SingularityReport:
    return SingularityReport(time=exc.time if exc.time is not None else t,
                             q=exc.q, sigma_min=exc.sigma_min, message=str(exc))


def compute_metrics(trace: SimTrace) -> Metrics:
    """Aggregate metrics from a (possibly truncated) trace."""
    if trace.t.size == 0:
        raise ValueError("empty trace")
    en = trace.e_norm
    if trace.t.size > 1:
        mean = float(np.trapezoid(en, trace.t) / (trace.t[-1] - trace.t[0]))
    else:
        mean = float(en[0])
    ratios = []
    violations = 0
    for b0, b1 in zip(trace.sample_indices[:-1], trace.sample_indices[1:]):
        start = en[b0]
        if np.max(en[b0 + 1:b1 + 1]) > start * (1.0 + 1e-12) + 1e-15:
            violations += 1
        if start > 1e-12:
            ratios.append(en[b1] / start)
    return Metrics(mean_error=mean, max_error=float(np.max(en)),
                   final_error=float(en[-1]),
                   contraction_ratios=np.asarray(ratios),
                   contraction_violations=violations)


def check_contractive(trace: SimTrace, rho: float,
                      rel_slack: float = 1e-12) -> Tuple[bool, List[dict]]:
    """Check monotone contraction with rate ``rho`` on every interval.

    Two conditions per interval: (1) the error norm never exceeds its
    start-of-interval value inside the interval, and (2) the end-of-interval
    norm is at most rho times the start value.  Intervals starting with a
    numerically zero error (<= 1e-12) are skipped.

    Returns:
        (ok, violations) where each violation records the interval index,
        which condition failed, and the offending values.
    """
    if not (0.0 <= rho < 1.0):
        raise ValueError("rho must lie in [0, 1)")
    violations: List[dict] = []
    en = trace.e_norm
    for h, (b0, b1) in enumerate(zip(trace.sample_indices[:-1],
                                     trace.sample_indices[1:])):
        start = en[b0]
        if start <= 1e-12:
            continue
        interior_max = float(np.max(en[b0:b1]))
        if interior_max > start * (1.0 + rel_slack):
            violations.append({"interval": h, "condition": "monotone",
                               "start": float(start), "max": interior_max})
        if en[b1] > rho * start * (1.0 + rel_slack):
            violations.append({"interval": h, "condition": "boundary",
                               "start": float(start), "end": float(en[b1]),
                               "ratio": float(en[b1] / start)})
    return len(violations) == 0, violations


def exponential_envelope_check(trace: SimTrace, rho: float,
                               T: Optional[float] = None,
                               rel_slack: float = 1e-9) -> bool:
    """Check ||e(t)|| <= rho^(t/T - 1) ||e(0)|| at every trace point."""
    if not (0.0 < rho < 1.0):
        raise ValueError("rho must lie in (0, 1)")
    T = trace.sampling_period if T is None else T
    bound = rho ** (trace.t / T - 1.0) * trace.e_norm[0]
    return bool(np.all(trace.e_norm <= bound * (1.0 + rel_slack) + 1e-15))


def ps_bound_check(trace: SimTrace, rho: float, beta: float, d: float) -> bool:
    """Check the sampled point-stabilization error bound on a trace.

    Hypotheses: consecutive reference samples move by at most ``beta`` with
    beta < (1 - rho) d.  Under them the sampled error must satisfy
    ||e(hT)|| <= rho d + beta / (1 - rho) at every sampling instant, and the
    tail (last 20% of samples) must stay below beta / (1 - rho) * 1.001.

    Raises:
        BoundHypothesisError: the hypotheses themselves fail (reported
            distinctly from a bound violation).
    """
    if not (0.0 < rho < 1.0):
        raise ValueError("rho must lie in (0, 1)")
    idx = trace.sample_indices
    qr = trace.q_ref[idx]
    increments = np.linalg.norm(np.diff(qr, axis=0), axis=1)
    if increments.size and float(np.max(increments)) > beta * (1.0 + 1e-9):
        raise BoundHypothesisError(
            f"reference increment {np.max(increments):.6g} exceeds beta={beta}")
    if not beta < (1.0 - rho) * d:
        raise BoundHypothesisError(
            f"beta={beta} must be below (1-rho)*d={(1.0 - rho) * d:.6g}")

    en = trace.e_norm[idx]
    steady = beta / (1.0 - rho)
    if np.any(en > rho * d + steady + 1e-12):
        return False
    tail = en[int(math.floor(0.8 * en.size)):]
    # absolute floor covers the beta = 0 case, where the error only reaches
    # numerical zero
    return bool(np.all(tail <= steady * 1.001 + 1e-12))
