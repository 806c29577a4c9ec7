"""Square multi-robot kinematic systems.

A square system maps a configuration vector q (per-robot coordinates stacked
with the shared pivot pose) to a task vector p of the same dimension, so the
Jacobian A_q = dh/dq is square and generically invertible.  Velocity commands
in task space are converted to configuration rates through A_q^{-1}.

Three concrete systems ship with the library:

* :class:`PlanarFormation` - three ground robots holding fixed bearings
  around a movable pivot frame (6 x 6 Jacobian).
* :class:`ScalarSystem` - a one-dimensional analytic fixture whose Jacobian
  a(q) = 1 + 0.5 sin(q) is smooth and never singular.
* :class:`LinearSystem` - a constant-Jacobian system, useful wherever the
  closed loop admits an exact linear solution.

All operations are pure functions of their inputs and safe to call
concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np


class SingularConfiguration(RuntimeError):
    """Jacobian lost rank: the smallest singular value fell below the guard.

    Signals that the invertibility assumption is violated at the offending
    configuration.  Callers running a simulation must abort the run and
    surface the attached report instead of regularizing the matrix.
    """

    def __init__(self, message: str, q: Optional[np.ndarray] = None,
                 sigma_min: Optional[float] = None, time: Optional[float] = None):
        super().__init__(message)
        self.q = None if q is None else np.asarray(q, dtype=float).copy()
        self.sigma_min = sigma_min
        self.time = time


@dataclass(frozen=True)
class ConditioningGuard:
    """Invertibility guard for Jacobian solves.

    Args:
        min_singular_value: solves fail when the smallest singular value of
            A_q drops below this threshold (dimensionless).
        safe_radius: configuration-space radius d within which invertibility
            is assumed to hold around the reference.  Stored for bound checks
            (e.g. the point-stabilization error bound); not enforced here.
    """

    min_singular_value: float = 1e-8
    safe_radius: float = math.inf


DEFAULT_GUARD = ConditioningGuard()


@dataclass(frozen=True)
class RobotBlock:
    """Row/column layout of one robot inside a block-sparse Jacobian.

    ``rows`` are the task rows owned by the robot, ``own_cols`` the columns of
    its private coordinates and ``pivot_cols`` the columns of the shared pivot
    pose.  Every entry of the Jacobian outside these blocks is exactly zero.
    """

    rows: tuple
    own_cols: tuple
    pivot_cols: tuple


class SquareSystem:
    """Base class for n = m kinematic systems.

    Subclasses implement :meth:`h` and :meth:`jacobian`; ``dim`` is the shared
    configuration/task dimension.  ``block_structure`` is optional and lists
    one :class:`RobotBlock` per robot when the Jacobian is block sparse.
    ``jacobian_many`` has a generic loop fallback; override it with a
    vectorized version for systems used in batched integration.
    """

    dim: int = 0
    block_structure: Optional[Sequence[RobotBlock]] = None

    def h(self, q: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, q: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def jacobian_many(self, Q: np.ndarray) -> np.ndarray:
        """Stacked Jacobians for a batch of configurations, shape (B, n, n)."""
        Q = np.asarray(Q, dtype=float)
        return np.stack([self.jacobian(q) for q in Q])


class PlanarFormation(SquareSystem):
    """Three planar robots keeping fixed bearings w.r.t. a pivot frame.

    Configuration order is (x_V, y_V, phi_V, d_1, d_2, d_3): pivot position
    and heading followed by the robot distances.  Each robot sits at bearing
    phi_i (fixed) in the pivot frame, so its world position is

        p_i = p_V + d_i * (cos(phi_V + phi_i), sin(phi_V + phi_i)).

    Task order is (x_1, y_1, x_2, y_2, x_3, y_3).  The 6 x 6 Jacobian is
    block sparse: robot i depends only on the pivot pose and its own d_i.
    """

    def __init__(self, fixed_angles: Sequence[float] = (0.0, 2.0 * np.pi / 3.0, 4.0 * np.pi / 3.0)):
        if len(fixed_angles) != 3:
            raise ValueError("PlanarFormation expects exactly 3 fixed bearing angles")
        self.fixed_angles = np.asarray(fixed_angles, dtype=float)
        self.dim = 6
        self.num_robots = 3
        self.block_structure = tuple(
            RobotBlock(rows=(2 * i, 2 * i + 1), own_cols=(3 + i,), pivot_cols=(0, 1, 2))
            for i in range(3)
        )

    def h(self, q: np.ndarray) -> np.ndarray:
        q = _check_config(self, q)
        ang = q[2] + self.fixed_angles
        p = np.empty(6)
        p[0::2] = q[0] + q[3:6] * np.cos(ang)
        p[1::2] = q[1] + q[3:6] * np.sin(ang)
        return p

    def jacobian(self, q: np.ndarray) -> np.ndarray:
        q = _check_config(self, q)
        ang = q[2] + self.fixed_angles
        c, s = np.cos(ang), np.sin(ang)
        d = q[3:6]
        A = np.zeros((6, 6))
        for i in range(3):
            r = 2 * i
            A[r, 0] = 1.0
            A[r + 1, 1] = 1.0
            A[r, 2] = -d[i] * s[i]
            A[r + 1, 2] = d[i] * c[i]
            A[r, 3 + i] = c[i]
            A[r + 1, 3 + i] = s[i]
        return A

    def jacobian_many(self, Q: np.ndarray) -> np.ndarray:
        Q = np.asarray(Q, dtype=float)
        B = Q.shape[0]
        ang = Q[:, 2:3] + self.fixed_angles[None, :]   # (B, 3)
        c, s = np.cos(ang), np.sin(ang)
        d = Q[:, 3:6]
        A = np.zeros((B, 6, 6))
        rows = np.arange(3) * 2
        cols = np.arange(3) + 3
        A[:, rows, 0] = 1.0
        A[:, rows + 1, 1] = 1.0
        A[:, rows, 2] = -d * s
        A[:, rows + 1, 2] = d * c
        A[:, rows, cols] = c
        A[:, rows + 1, cols] = s
        return A


class ScalarSystem(SquareSystem):
    """One-dimensional analytic system with Jacobian a(q) = 1 + 0.5 sin(q).

    a(q) >= 0.5 everywhere, so the system is never singular.  The kinematic
    map is the antiderivative h(q) = q - 0.5 cos(q), keeping h and jacobian
    consistent.  A custom (a, antiderivative) pair may be supplied as long as
    the two stay consistent.
    """

    def __init__(self, a: Optional[Callable[[float], float]] = None,
                 antiderivative: Optional[Callable[[float], float]] = None):
        if (a is None) != (antiderivative is None):
            raise ValueError("supply both a and its antiderivative, or neither")
        self._a = a if a is not None else (lambda x: 1.0 + 0.5 * math.sin(x))
        self._H = antiderivative if antiderivative is not None else (lambda x: x - 0.5 * math.cos(x))
        self.dim = 1

    def a(self, x: float) -> float:
        return self._a(float(x))

    def h(self, q: np.ndarray) -> np.ndarray:
        q = _check_config(self, q)
        return np.array([self._H(q[0])])

    def jacobian(self, q: np.ndarray) -> np.ndarray:
        q = _check_config(self, q)
        return np.array([[self._a(q[0])]])

    def jacobian_many(self, Q: np.ndarray) -> np.ndarray:
        Q = np.asarray(Q, dtype=float)
        vals = np.array([self._a(x) for x in Q[:, 0]])
        return vals.reshape(-1, 1, 1)


class LinearSystem(SquareSystem):
    """Constant-Jacobian system h(q) = A q, default A = identity."""

    def __init__(self, dim: int = 1, matrix: Optional[np.ndarray] = None):
        if dim <= 0:
            raise ValueError("dim must be positive")
        self.dim = int(dim)
        if matrix is None:
            self._A = np.eye(self.dim)
        else:
            self._A = np.asarray(matrix, dtype=float)
            if self._A.shape != (self.dim, self.dim):
                raise ValueError(f"matrix must be {self.dim}x{self.dim}")

    def h(self, q: np.ndarray) -> np.ndarray:
        q = _check_config(self, q)
        return self._A @ q

    def jacobian(self, q: np.ndarray) -> np.ndarray:
        _check_config(self, q)
        return self._A.copy()

    def jacobian_many(self, Q: np.ndarray) -> np.ndarray:
        Q = np.asarray(Q, dtype=float)
        return np.broadcast_to(self._A, (Q.shape[0], self.dim, self.dim)).copy()


def _check_config(sys: SquareSystem, q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape != (sys.dim,):
        raise ValueError(f"configuration has shape {q.shape}, expected ({sys.dim},)")
    return q


def eval_h(sys: SquareSystem, q: np.ndarray) -> np.ndarray:
    """Evaluate the kinematic map, returning the task vector p (length n)."""
    return sys.h(q)


def eval_jacobian(sys: SquareSystem, q: np.ndarray) -> np.ndarray:
    """Evaluate the n x n Jacobian A_q at configuration q."""
    A = sys.jacobian(q)
    if A.shape != (sys.dim, sys.dim):
        raise ValueError(f"jacobian has shape {A.shape}, expected square ({sys.dim},{sys.dim})")
    return A


def guard_matrix(A: np.ndarray, guard: ConditioningGuard = DEFAULT_GUARD,
                 q: Optional[np.ndarray] = None, time: Optional[float] = None) -> None:
    """Raise :class:`SingularConfiguration` if sigma_min(A) < guard threshold.

    Uses the cheap sufficient bound sigma_min >= |det A| / ||A||_F^{n-1}
    first and falls back to an exact SVD only when that bound is
    inconclusive.
    """

    t = guard.min_singular_value
    n = A.shape[0]
    det = abs(np.linalg.det(A))
    fro = np.linalg.norm(A)
    if det >= t * fro ** (n - 1):
        return
    sigma_min = np.linalg.svd(A, compute_uv=False)[-1]
    if sigma_min < t:
        raise SingularConfiguration(
            f"Jacobian singular: smallest singular value {sigma_min:.3e} below "
            f"threshold {t:.3e}", q=q, sigma_min=float(sigma_min), time=time)


def guard_matrix_many(A: np.ndarray, guard: ConditioningGuard = DEFAULT_GUARD) -> np.ndarray:
    """Vectorized guard for a (B, n, n) stack; returns a boolean ok-mask."""
    t = guard.min_singular_value
    n = A.shape[-1]
    det = np.abs(np.linalg.det(A))
    fro = np.linalg.norm(A, axis=(1, 2))
    ok = det >= t * fro ** (n - 1)
    if not ok.all():
        for b in np.flatnonzero(~ok):
            sig = np.linalg.svd(A[b], compute_uv=False)[-1]
            ok[b] = sig >= t
    return ok


def solve_jacobian(sys: SquareSystem, q: np.ndarray, rhs: np.ndarray,
                   guard: ConditioningGuard = DEFAULT_GUARD) -> np.ndarray:
    """Solve A_q x = rhs by dense factorization with a singularity guard.

    The residual satisfies ||A_q x - rhs|| <= 1e-9 (1 + ||rhs||) on any
    configuration the guard accepts (system sizes here are tiny).

    Raises:
        SingularConfiguration: smallest singular value below the guard
            threshold; the caller must abort the run and report.
    """

    A = eval_jacobian(sys, q)
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape != (sys.dim,):
        raise ValueError(f"rhs has shape {rhs.shape}, expected ({sys.dim},)")
    guard_matrix(A, guard, q=q)
    return np.linalg.solve(A, rhs)


def solve_matrix(A: np.ndarray, rhs: np.ndarray,
                 guard: ConditioningGuard = DEFAULT_GUARD,
                 q: Optional[np.ndarray] = None, time: Optional[float] = None) -> np.ndarray:
    """Guarded dense solve for an already-evaluated Jacobian."""
    guard_matrix(A, guard, q=q, time=time)
    return np.linalg.solve(A, rhs)
