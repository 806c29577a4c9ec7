"""Tracking controllers under sampled communication.

Four strategies are provided.  All of them hold the proportional feedback
term constant over each sampling interval [hT, (h+1)T), using the Jacobian
and error measured at the sampling instant; they differ only in the
feedforward term:

* ``PS``     - sampled proportional feedback, no feedforward.
* ``FF``     - feedforward with the Jacobian frozen at the sampled
  configuration; the reference is not an equilibrium trajectory.
* ``SIKM-C`` / ``SIKM-D`` - sampled inverse-kinematic multi-robot controller:
  the feedforward Jacobian is evaluated on the reference trajectory,
  continuously in time, which makes the reference an equilibrium trajectory.
  The C variant recomputes its gain online each interval (centralized); the D
  variant runs a fixed offline gain and decouples per robot (distributed).

The gain optimizer minimizes the predicted end-of-interval error norm over a
gain bracket by a coarse grid followed by golden-section refinement.  The
prediction integrates the closed-loop error flow

    edot = A^{-1}_{e + q^r(t)} u(t) - qdot^r(t),
    u(t) = -k A_{q_h} e_h + u_ff(t),

which is the configuration-space dynamics induced by holding the sampled
feedback.  An alternative cheap gain rule integrates an auxiliary
point-stabilization flow and rescales its optimal stopping time by T.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple, Union

import numpy as np

from .kinematics import (
    DEFAULT_GUARD,
    ConditioningGuard,
    SingularConfiguration,
    SquareSystem,
    guard_matrix,
    guard_matrix_many,
)
from .trajectory import ReferenceTrajectory

STRATEGY_KINDS = ("PS", "FF", "SIKM-C", "SIKM-D")

# feedforward flavor used by each strategy
_FF_KIND = {"PS": "ps", "FF": "ff", "SIKM-C": "sikm", "SIKM-D": "sikm"}

_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


class InfeasibleStepError(RuntimeError):
    """Every candidate gain drove the predicted flow into a singularity."""


@dataclass(frozen=True)
class OfflineGain:
    """Constant feedback gain k > 0 chosen ahead of time [1/s]."""
    k: float

    def __post_init__(self):
        if self.k <= 0:
            raise ValueError("offline gain k must be positive")


@dataclass(frozen=True)
class OnlineGainSearch:
    """Search configuration for the per-interval gain optimizer.

    The bracket defaults to [0, 2/T]: beyond kT = 2 the sampled feedback
    cannot contract the error even on a constant reference.  ``backend``
    selects the predictor: "flow" integrates the closed-loop error flow,
    "auxiliary" uses the auxiliary-system stopping-time rule.
    """

    k_min: float = 0.0
    k_max: Optional[float] = None          # None -> 2/T
    grid_points: int = 64
    refine_iters: int = 40
    substeps: int = 50                     # integrator substeps per interval
    backend: str = "flow"                  # "flow" | "auxiliary"
    zero_error_tol: float = 1e-9           # equilibrium short-circuit
    tie_tol: float = 1e-9                  # near-optimal tie-break window
    aux_horizon: float = 3.0
    aux_dt: float = 5e-3

    def __post_init__(self):
        if self.k_min < 0 or (self.k_max is not None and self.k_max <= self.k_min):
            raise ValueError("need 0 <= k_min < k_max")
        if self.grid_points < 2:
            raise ValueError("grid_points must be >= 2")
        if self.backend not in ("flow", "auxiliary"):
            raise ValueError(f"unknown online gain backend {self.backend!r}")


GainSource = Union["OfflineGain", "OnlineGainSearch"]


@dataclass
class ControlStrategy:
    """Strategy selection: kind, gain source, and sampling period T [s].

    By default PS, FF and SIKM-C use the online gain optimizer while SIKM-D
    requires an offline gain; pass ``gain`` explicitly to override.
    """

    kind: str
    sampling_period: float
    gain: Optional[object] = None

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"kind must be one of {STRATEGY_KINDS}, got {self.kind!r}")
        if self.sampling_period <= 0:
            raise ValueError("sampling_period T must be positive")
        if self.gain is None:
            if self.kind == "SIKM-D":
                raise ValueError("SIKM-D uses an offline gain; pass gain=OfflineGain(k)")
            self.gain = OnlineGainSearch()

    @property
    def ff_kind(self) -> str:
        return _FF_KIND[self.kind]


@dataclass
class SampledState:
    """State held by the controller over one interval [hT, (h+1)T).

    ``q`` is the (possibly noisy) configuration measured at the sampling
    instant; ``jac`` caches the Jacobian evaluated there.  All fields stay
    constant until the next sample arrives.
    """

    t: float
    q: np.ndarray
    q_ref: np.ndarray
    qdot_ref: np.ndarray
    gain: float
    jac: np.ndarray = field(repr=False)

    @property
    def error(self) -> np.ndarray:
        return self.q - self.q_ref


def make_sampled_state(sys: SquareSystem, traj: ReferenceTrajectory, t: float,
                       q_measured: np.ndarray, gain: float,
                       guard: ConditioningGuard = DEFAULT_GUARD) -> SampledState:
    """Refresh the sampled state at instant t with measured configuration."""
    q_ref, qd_ref, _ = traj.eval(t)
    A = sys.jacobian(np.asarray(q_measured, dtype=float))
    guard_matrix(A, guard, q=q_measured, time=t)
    return SampledState(t=float(t), q=np.asarray(q_measured, dtype=float).copy(),
                        q_ref=q_ref, qdot_ref=qd_ref, gain=float(gain), jac=A)


def u_ps(sys: SquareSystem, state: SampledState, k: Optional[float] = None) -> np.ndarray:
    """Sampled proportional feedback u = -k A_{q_h} (q_h - q^r_h), held over the interval."""
    k = state.gain if k is None else k
    return -k * (state.jac @ state.error)


def u_ff_naive(sys: SquareSystem, state: SampledState, traj: ReferenceTrajectory,
               t: float, k: Optional[float] = None) -> np.ndarray:
    """Feedback plus feedforward with the Jacobian frozen at the sampled state.

    u = -k A_{q_h} (q_h - q^r_h) + A_{q_h} qdot^r(t).  The reference rate is
    evaluated continuously but the feedforward Jacobian is stale, so a
    nonconstant reference is not an equilibrium trajectory under this law.
    """
    _, qd_ref, _ = traj.eval(t)
    return u_ps(sys, state, k) + state.jac @ qd_ref


def u_sikm(sys: SquareSystem, state: SampledState, traj: ReferenceTrajectory,
           t: float, k: Optional[float] = None,
           guard: ConditioningGuard = DEFAULT_GUARD) -> np.ndarray:
    """Feedback plus reference-Jacobian feedforward.

    u = -k A_{q_h} (q_h - q^r_h) + A_{q^r(t)} qdot^r(t).  Evaluating the
    feedforward Jacobian on the reference makes q^r an equilibrium
    trajectory: zero error implies zero error rate for all time.
    """
    q_ref, qd_ref, _ = traj.eval(t)
    A_ref = sys.jacobian(q_ref)
    guard_matrix(A_ref, guard, q=q_ref, time=t)
    return u_ps(sys, state, k) + A_ref @ qd_ref


def u_sikm_distributed(sys: SquareSystem, robot_index: int, state: SampledState,
                       traj: ReferenceTrajectory, t: float,
                       k: Optional[float] = None,
                       guard: ConditioningGuard = DEFAULT_GUARD) -> np.ndarray:
    """Per-robot slice of the SIKM command, using only local + broadcast data.

    Robot i combines its own coordinates with the pivot pose received at the
    last broadcast; stacking the slices over all robots reproduces the
    centralized command.
    """
    if sys.block_structure is None:
        raise ValueError("system has no block structure; distributed form undefined")
    block = sys.block_structure[robot_index]
    k = state.gain if k is None else k
    q_ref, qd_ref, _ = traj.eval(t)
    A_ref = sys.jacobian(q_ref)
    guard_matrix(A_ref, guard, q=q_ref, time=t)

    rows = np.asarray(block.rows, dtype=int)
    own = np.asarray(block.own_cols, dtype=int)
    piv = np.asarray(block.pivot_cols, dtype=int)
    e = state.error
    u = -k * (state.jac[np.ix_(rows, own)] @ e[own]
              + state.jac[np.ix_(rows, piv)] @ e[piv])
    u += A_ref[np.ix_(rows, own)] @ qd_ref[own]
    u += A_ref[np.ix_(rows, piv)] @ qd_ref[piv]
    return u


def command(sys: SquareSystem, kind: str, state: SampledState,
            traj: ReferenceTrajectory, t: float,
            guard: ConditioningGuard = DEFAULT_GUARD) -> np.ndarray:
    """Dispatch to the strategy's control law at time t."""
    if kind == "PS":
        return u_ps(sys, state)
    if kind == "FF":
        return u_ff_naive(sys, state, traj, t)
    if kind in ("SIKM-C", "SIKM-D"):
        return u_sikm(sys, state, traj, t, guard=guard)
    raise ValueError(f"unknown strategy kind {kind!r}")


def feedforward_term(sys: SquareSystem, ff_kind: str, jac_sample: np.ndarray,
                     traj: ReferenceTrajectory, t: float,
                     guard: ConditioningGuard = DEFAULT_GUARD) -> np.ndarray:
    """Feedforward vector u_ff(t) for one of the kinds "ps" | "ff" | "sikm"."""
    if ff_kind == "ps":
        return np.zeros(sys.dim)
    _, qd_ref, _ = traj.eval(t)
    if ff_kind == "ff":
        return jac_sample @ qd_ref
    if ff_kind == "sikm":
        q_ref, _, _ = traj.eval(t)
        A_ref = sys.jacobian(q_ref)
        guard_matrix(A_ref, guard, q=q_ref, time=t)
        return A_ref @ qd_ref
    raise ValueError(f"unknown feedforward kind {ff_kind!r}")


def integrate_error_flow(sys: SquareSystem, traj: ReferenceTrajectory,
                         e0: np.ndarray, t0: float, duration: float,
                         gains: np.ndarray, ff_kind: str = "sikm",
                         substeps: int = 50,
                         guard: ConditioningGuard = DEFAULT_GUARD,
                         ) -> Tuple[np.ndarray, np.ndarray]:
    """Integrate the sampled error flow over one interval for a gain batch.

    All candidates share the initial error e0 = e(hT) and the frozen sampled
    Jacobian; they differ only in the feedback gain.  Fixed-step RK4 with
    ``substeps`` steps.

    Returns:
        (E, ok): final errors with shape (B, n) and a boolean validity mask;
        rows that hit a singular Jacobian along the flow are masked out.
    """
    gains = np.atleast_1d(np.asarray(gains, dtype=float))
    B, n = gains.shape[0], sys.dim
    e0 = np.asarray(e0, dtype=float)
    q_ref0, _, _ = traj.eval(t0)
    A_h = sys.jacobian(q_ref0 + e0)
    guard_matrix(A_h, guard, q=q_ref0 + e0, time=t0)
    v_fb = A_h @ e0                       # feedback direction, shared

    def ff_vec(t):
        if ff_kind == "ps":
            return None
        _, qd, _ = traj.eval(t)
        if ff_kind == "ff":
            return A_h @ qd
        q_ref, _, _ = traj.eval(t)
        A_ref = sys.jacobian(q_ref)
        guard_matrix(A_ref, guard, q=q_ref, time=t)
        return A_ref @ qd

    E = np.tile(e0, (B, 1))
    ok = np.ones(B, dtype=bool)
    h = duration / substeps
    eye = np.eye(n)

    def rhs(t, E):
        q_ref, qd_ref, _ = traj.eval(t)
        A = sys.jacobian_many(E + q_ref)
        good = guard_matrix_many(A, guard)
        bad = ~good
        if bad.any():
            # keep the batched solve well-posed; masked rows are discarded
            A = A.copy()
            A[bad] = eye
        U = -gains[:, None] * v_fb
        ffv = ff_vec(t)
        if ffv is not None:
            U = U + ffv
        dE = np.linalg.solve(A, U[..., None])[..., 0] - qd_ref
        return dE, good

    t = t0
    for _ in range(substeps):
        k1, g1 = rhs(t, E)
        k2, g2 = rhs(t + 0.5 * h, E + 0.5 * h * k1)
        k3, g3 = rhs(t + 0.5 * h, E + 0.5 * h * k2)
        k4, g4 = rhs(t + h, E + h * k3)
        ok &= g1 & g2 & g3 & g4
        E = E + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        t += h
    E[~ok] = np.nan
    return E, ok


def online_gain(sys: SquareSystem, traj: ReferenceTrajectory, e_h: np.ndarray,
                t_h: float, T: float, search: OnlineGainSearch,
                ff_kind: str = "sikm",
                guard: ConditioningGuard = DEFAULT_GUARD) -> Tuple[float, float]:
    """Gain minimizing the predicted error norm at the end of the interval.

    Coarse grid over [k_min, k_max] followed by golden-section refinement of
    the best bracket; near-optimal ties (objective within ``tie_tol`` of the
    minimum) break toward the smallest gain, which also resolves the
    zero-error case where every gain is optimal.

    Returns:
        (k_on, objective) where objective is the achieved ||e(t_h + T)||.

    Raises:
        InfeasibleStepError: every candidate hit a singularity along the flow.
    """
    e_h = np.asarray(e_h, dtype=float)
    if float(np.linalg.norm(e_h)) <= search.zero_error_tol:
        return float(search.k_min), 0.0

    k_max = search.k_max if search.k_max is not None else 2.0 / T

    if search.backend == "auxiliary":
        q_ref0, _, _ = traj.eval(t_h)
        k_aux = auxiliary_gain(sys, q_ref0 + e_h, q_ref0, T,
                               horizon=search.aux_horizon, dt=search.aux_dt,
                               guard=guard)
        k_aux = min(max(k_aux, search.k_min), k_max)
        E, ok = integrate_error_flow(sys, traj, e_h, t_h, T, np.array([k_aux]),
                                     ff_kind, search.substeps, guard)
        if not ok[0]:
            raise InfeasibleStepError(f"auxiliary gain {k_aux:.4g} hits a singularity")
        return float(k_aux), float(np.linalg.norm(E[0]))

    def objective(ks):
        E, ok = integrate_error_flow(sys, traj, e_h, t_h, T, ks, ff_kind,
                                     search.substeps, guard)
        f = np.linalg.norm(E, axis=1)
        f[~ok] = np.inf
        return f

    ks = np.linspace(search.k_min, k_max, search.grid_points)
    fs = objective(ks)
    if not np.isfinite(fs).any():
        raise InfeasibleStepError("all candidate gains hit a singularity over the interval")
    evaluated = list(zip(ks.tolist(), fs.tolist()))
    best = int(np.argmin(fs))
    a = ks[max(best - 1, 0)]
    b = ks[min(best + 1, len(ks) - 1)]
    for _ in range(search.refine_iters):
        if b - a < 1e-15:
            break
        x1 = b - _GOLDEN * (b - a)
        x2 = a + _GOLDEN * (b - a)
        f1, f2 = objective(np.array([x1, x2]))
        evaluated.append((x1, f1))
        evaluated.append((x2, f2))
        if f1 <= f2:
            b = x2
        else:
            a = x1

    f_min = min(f for _, f in evaluated)
    k_on, f_on = min(((k, f) for k, f in evaluated if f <= f_min + search.tie_tol),
                     key=lambda kf: kf[0])
    return float(k_on), float(f_on)


def auxiliary_gain(sys: SquareSystem, q_h: np.ndarray, q_ref: np.ndarray, T: float,
                   horizon: float = 3.0, dt: float = 5e-3,
                   guard: ConditioningGuard = DEFAULT_GUARD) -> float:
    """Gain from the auxiliary point-stabilization flow, k_h = tau_o / T.

    Integrates qdot' = -A^{-1}_{q'} A_{q_h} (q_h - q^r) from q'(0) = q_h in
    normalized time, records tau_s (first time the error norm returns to its
    initial value, or the horizon if it never does) and tau_o (the time of
    minimum error norm on [0, tau_s]), and returns tau_o / T.
    """
    q_h = np.asarray(q_h, dtype=float)
    q_ref = np.asarray(q_ref, dtype=float)
    e0 = q_h - q_ref
    n0 = float(np.linalg.norm(e0))
    if n0 <= 1e-12:
        return 0.0

    A_h = sys.jacobian(q_h)
    guard_matrix(A_h, guard, q=q_h)
    rhs_const = A_h @ e0

    def f(qp):
        A = sys.jacobian(qp)
        guard_matrix(A, guard, q=qp)
        return -np.linalg.solve(A, rhs_const)

    steps = max(int(round(horizon / dt)), 2)
    qp = q_h.copy()
    norms = [n0]
    for j in range(steps):
        k1 = f(qp)
        k2 = f(qp + 0.5 * dt * k1)
        k3 = f(qp + 0.5 * dt * k2)
        k4 = f(qp + dt * k3)
        qp = qp + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        norms.append(float(np.linalg.norm(qp - q_ref)))
        if norms[-1] >= n0:
            break
    norms = np.asarray(norms)
    i = int(np.argmin(norms))
    tau_o = i * dt
    if 0 < i < len(norms) - 1:
        # parabolic refinement around the discrete minimum
        y0, y1, y2 = norms[i - 1], norms[i], norms[i + 1]
        denom = y0 - 2.0 * y1 + y2
        if denom > 0:
            tau_o += dt * 0.5 * (y0 - y2) / denom
    return tau_o / T
