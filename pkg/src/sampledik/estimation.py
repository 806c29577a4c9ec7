"""Data-driven estimation of the convergence-rate bound parameters.

Each simulated sampling interval yields one inequality on the bound
parameters theta = (mu, alpha, gamma1, gamma2): with y = ||e((h+1)T)||,
b = |1 - kT| ||e(hT)|| and the regressor row

    s = [T^2 k^2,  T,  T^2 k,  T^2] * ||e(hT)||,

the per-interval contraction bound reads y <= s . theta + b.  The smallest
bound consistent with all collected samples is the minimum-norm point of the
polyhedron

    minimize ||theta||^2   s.t.  theta >= 0,  y_i <= s_i . theta + b_i,

a tiny quadratic program (4 variables, possibly very many constraints).  It
is solved here by a dual active-set method: since every regressor is
nonnegative, the optimum is a nonnegative combination of active rows, which
reduces the problem to nonnegative least squares on the active set;
constraints enter lazily, most-violated first, after screening out rows that
are implied by theta >= 0 alone.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .analysis import ThetaParams
from .control import ControlStrategy, InfeasibleStepError, OfflineGain
from .kinematics import DEFAULT_GUARD, ConditioningGuard, SingularConfiguration, SquareSystem
from .simulation import SimConfig, run
from .trajectory import ReferenceTrajectory, TrajectoryFamily, make_trajectory


class InfeasibleSamplesError(ValueError):
    """No parameter vector satisfies the sample constraints.

    Only possible when a sample has a vanishing start error but a positive
    end error, making its constraint 0 >= y_i unsatisfiable.
    """

    def __init__(self, indices: Sequence[int]):
        super().__init__(f"infeasible samples at indices {list(indices)}")
        self.indices = list(indices)


@dataclass(frozen=True)
class EstimationSample:
    """One observed sampling interval: gains, period and boundary error norms."""

    gain: float
    period: float
    start_norm: float
    end_norm: float

    @property
    def y(self) -> float:
        return self.end_norm

    @property
    def b(self) -> float:
        return abs(1.0 - self.gain * self.period) * self.start_norm

    @property
    def regressors(self) -> np.ndarray:
        """Row s ordered as (mu, alpha, gamma1, gamma2)."""
        k, T = self.gain, self.period
        return np.array([T * T * k * k, T, T * T * k, T * T]) * self.start_norm


@dataclass
class ThetaEstimate:
    """Estimated bound parameters with solver diagnostics."""

    theta: ThetaParams
    kkt_residual: float
    max_violation: float
    n_samples: int
    n_active: int


def sample_matrices(samples: Sequence[EstimationSample]) -> Tuple[np.ndarray, np.ndarray]:
    """Stack regressor rows S and right-hand sides c = y - b for all samples."""
    S = np.array([s.regressors for s in samples])
    c = np.array([s.y - s.b for s in samples])
    return S, c


def estimate_theta(samples: Sequence[EstimationSample],
                   feasibility_slack: float = 1e-9) -> ThetaEstimate:
    """Solve the minimum-norm QP over the sample constraints.

    Returns:
        ThetaEstimate whose theta satisfies every constraint up to
        ``feasibility_slack`` and whose KKT residual is reported.

    Raises:
        InfeasibleSamplesError: some sample forces 0 >= y_i > 0.
        ValueError: empty or non-finite sample set.
    """
    if len(samples) == 0:
        raise ValueError("need at least one sample")
    S, c = sample_matrices(samples)
    if not (np.isfinite(S).all() and np.isfinite(c).all()):
        raise ValueError("samples contain non-finite values")

    row_norm = np.linalg.norm(S, axis=1)
    bad = np.flatnonzero((row_norm == 0.0) & (c > feasibility_slack))
    if bad.size:
        raise InfeasibleSamplesError(bad.tolist())

    # theta >= 0 and S >= 0 make every row with c <= 0 redundant
    keep = np.flatnonzero((c > 0.0) & (row_norm > 0.0))
    if keep.size == 0:
        return ThetaEstimate(theta=ThetaParams(0.0, 0.0, 0.0, 0.0),
                             kkt_residual=0.0, max_violation=float(np.max(c, initial=0.0)),
                             n_samples=len(samples), n_active=0)

    Sn = S[keep] / row_norm[keep, None]
    cn = c[keep] / row_norm[keep]
    theta, lam_n, n_active = _lazy_active_set(Sn, cn)
    theta = np.maximum(theta, 0.0)

    resid = c - S @ theta
    max_violation = float(np.max(resid, initial=0.0))
    # stationarity holds by construction (theta is the active combination);
    # report feasibility, dual feasibility and complementarity residuals
    lam_full = np.zeros(len(samples))
    lam_full[keep] = lam_n / row_norm[keep]
    stat = np.linalg.norm(2.0 * theta - S.T @ lam_full, ord=np.inf)
    comp = float(np.max(np.abs(lam_full * resid), initial=0.0))
    kkt = max(stat, max_violation, comp, float(np.max(-lam_full, initial=0.0)))

    return ThetaEstimate(theta=ThetaParams(*theta), kkt_residual=kkt,
                         max_violation=max_violation, n_samples=len(samples),
                         n_active=n_active)


def _lazy_active_set(S: np.ndarray, c: np.ndarray,
                     tol: float = 1e-12, max_outer: int = 2000):
    """Minimum-norm point over {theta : S theta >= c} with S >= 0.

    Outer loop adds the currently most violated constraint to the working
    set; the inner solve is Lawson-Hanson nonnegative least squares on the
    dual of the working-set problem.
    """
    m = S.shape[0]
    scale = max(1.0, float(np.max(c)))
    work: List[int] = [int(np.argmax(c))]
    theta = np.zeros(S.shape[1])
    lam_w = np.zeros(1)
    for _ in range(max_outer):
        lam_w = _dual_nnls(S[work], c[work])
        theta = 0.5 * S[work].T @ lam_w
        viol = c - S @ theta
        viol[work] = -np.inf
        j = int(np.argmax(viol))
        if viol[j] <= tol * scale:
            break
        work.append(j)
    lam = np.zeros(m)
    lam[work] = lam_w
    return theta, lam, int(np.count_nonzero(lam_w > 0))


def _dual_nnls(Sw: np.ndarray, cw: np.ndarray, max_iter: int = 500) -> np.ndarray:
    """Lawson-Hanson NNLS on the dual: min_{lam>=0} 1/4 ||Sw' lam||^2 - cw . lam.

    The optimality conditions match the working-set QP: theta = Sw' lam / 2,
    lam >= 0, Sw theta >= cw on passive rows, equality on active rows.
    """
    m = Sw.shape[0]
    lam = np.zeros(m)
    P: List[int] = []
    G = Sw @ Sw.T
    w = cw - 0.5 * (G @ lam)
    tol = 1e-13 * max(1.0, float(np.max(np.abs(cw))))
    for _ in range(max_iter):
        mask = np.ones(m, dtype=bool)
        mask[P] = False
        if not mask.any() or float(np.max(w[mask], initial=-np.inf)) <= tol:
            break
        cand = np.flatnonzero(mask)
        P.append(int(cand[np.argmax(w[cand])]))
        while True:
            Gp = G[np.ix_(P, P)]
            z = np.linalg.lstsq(0.5 * Gp, cw[P], rcond=None)[0]
            if (z > 0).all():
                lam[:] = 0.0
                lam[P] = z
                break
            lam_p = lam[P]
            neg = z <= 0
            steps = lam_p[neg] / (lam_p[neg] - z[neg])
            alpha = float(np.min(steps))
            lam_p = lam_p + alpha * (z - lam_p)
            lam[:] = 0.0
            lam[P] = lam_p
            P = [i for i, v in zip(P, lam_p) if v > 1e-14]
            if not P:
                return np.zeros(m)
        w = cw - 0.5 * (G @ lam)
    return lam


TrajectorySource = Union[ReferenceTrajectory, TrajectoryFamily,
                         Callable[[np.random.Generator], ReferenceTrajectory]]


def collect_samples(sys: SquareSystem, trajectory: TrajectorySource,
                    k_values: Sequence[float], T_values: Sequence[float],
                    initial_errors: Sequence[np.ndarray],
                    runs_per_cell: int = 1, seed: int = 0,
                    horizon_intervals: int = 8, dt: Optional[float] = None,
                    min_start_norm: float = 1e-10,
                    guard: ConditioningGuard = DEFAULT_GUARD,
                    workers: int = 1,
                    ) -> Tuple[List[EstimationSample], List[dict]]:
    """Simulate a (k, T) sweep and harvest per-interval contraction samples.

    Every run uses the offline-gain reference-feedforward controller, whose
    error flow is the one the bound describes.  ``trajectory`` may be a ready
    trajectory, a family spec, or a factory taking a seeded generator (one
    fresh draw per run).  Intervals whose start error norm is at most
    ``min_start_norm`` are filtered out.

    Per-run seeds are derived from the sweep seed and the run's position in
    the grid, so results are deterministic and independent of ``workers``
    (runs are pure; a single collector merges them in grid order).

    Returns:
        (samples, failures): the harvested samples and one report dict per
        run that aborted on a singular configuration.
    """
    tasks = []
    for ik, k in enumerate(k_values):
        for iT, T in enumerate(T_values):
            for ie, e0 in enumerate(initial_errors):
                for r in range(runs_per_cell):
                    tasks.append((ik, iT, ie, r, float(k), float(T),
                                  np.asarray(e0, dtype=float)))

    def run_one(task):
        ik, iT, ie, r, k, T, e0 = task
        run_seed = int(np.random.SeedSequence([seed, ik, iT, ie, r, 0])
                       .generate_state(1)[0])
        traj_rng = np.random.default_rng(
            np.random.SeedSequence([seed, ik, iT, ie, r, 1]))
        traj = _resolve_trajectory(trajectory, sys.dim, traj_rng)
        horizon = horizon_intervals * T
        if horizon > traj.duration:
            raise ValueError(f"horizon {horizon} exceeds trajectory duration "
                             f"{traj.duration} for cell (k={k}, T={T})")
        cfg = SimConfig(system=sys, trajectory=traj,
                        strategy=ControlStrategy("SIKM-D", sampling_period=T,
                                                 gain=OfflineGain(k)),
                        horizon=horizon, initial_error=e0, dt=dt,
                        seed=run_seed, guard=guard)
        try:
            trace = run(cfg)
        except (SingularConfiguration, InfeasibleStepError) as exc:
            return [], {"k": k, "T": T, "run": r, "error": str(exc)}
        if trace.singularity is not None:
            return [], {"k": k, "T": T, "run": r,
                        "error": trace.singularity.message,
                        "time": trace.singularity.time}
        en = trace.e_norm[trace.sample_indices]
        got = [EstimationSample(gain=k, period=T, start_norm=float(en[h]),
                                end_norm=float(en[h + 1]))
               for h in range(en.size - 1) if en[h] > min_start_norm]
        return got, None

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_one, tasks))
    else:
        results = [run_one(t) for t in tasks]

    samples: List[EstimationSample] = []
    failures: List[dict] = []
    for got, failure in results:
        samples.extend(got)
        if failure is not None:
            failures.append(failure)
    return samples, failures


def _resolve_trajectory(source: TrajectorySource, dim: int,
                        rng: np.random.Generator) -> ReferenceTrajectory:
    if isinstance(source, ReferenceTrajectory):
        return source
    if callable(source):
        return source(rng)
    return make_trajectory(source, dim)
