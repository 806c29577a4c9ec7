"""Convergence-rate bound and closed-form stability analysis.

The per-interval decrease of the tracking error norm is bounded by

    z(k, tau) = |1 - k tau| + tau alpha + tau^2 (k^2 mu + k gamma1 + gamma2),

with nonnegative parameters theta = (mu, alpha, gamma1, gamma2) tied to the
system dynamics and the reference bounds.  The pair (k, tau) is guaranteed
stable when z(k, tau) < 1.  Everything here is elementary case analysis of
that piecewise parabola:

* ``tau_s(k)``  - largest stable sampling time at gain k (the z = 1 crossing),
* ``tau_o(k)``  - sampling time minimizing z at fixed k, with rate rho_o(k),
* ``k_o(tau)``  - gain minimizing z at fixed tau, with rate rho_o(tau),
* ``thresholds`` - the largest stabilizable sampling time T_max = 2/alpha and
  the critical time below which some stabilizing gain always exists,
  computed both by the stationary-point rule applied to the small-gain branch
  and by direct numerical maximization of the full case split (the two
  disagree by construction; both are reported).

Case boundaries: ``k_bar`` is where the z = 1 crossing migrates from the
k tau < 1 parabola to the k tau > 1 one (only for mu < 1), and ``k_bbar`` is
where the minimizer of z(k, .) hits the kink tau = 1/k (only for mu < 1/2).
All formulas were cross-checked against brute-force root finding and grid
minimization; see the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np


class OutsideValidityWindow(ValueError):
    """Requested sampling time falls outside the window where the optimal
    gain formulas are defined and yield a rate below one."""

    def __init__(self, message: str, window: Tuple[float, float]):
        super().__init__(message)
        self.window = window


@dataclass(frozen=True)
class ThetaParams:
    """Bound parameters theta = (mu, alpha, gamma1, gamma2).

    Units are nominal: mu dimensionless, alpha [1/s], gamma1 [1/s^2],
    gamma2 [1/s^3].  All must be nonnegative; mu and gamma2 must be positive
    for the closed-form case analysis to be well defined.
    """

    mu: float
    alpha: float
    gamma1: float
    gamma2: float

    def __post_init__(self):
        vals = (self.mu, self.alpha, self.gamma1, self.gamma2)
        if any(v < 0 for v in vals) or not all(np.isfinite(vals)):
            raise ValueError("theta components must be finite and nonnegative")

    def as_array(self) -> np.ndarray:
        return np.array([self.mu, self.alpha, self.gamma1, self.gamma2])


def _quad(theta: ThetaParams, k):
    """Common quadratic coefficient k^2 mu + k gamma1 + gamma2."""
    return theta.mu * k * k + theta.gamma1 * k + theta.gamma2


def z_bound(theta: ThetaParams, k, tau):
    """Evaluate z(k, tau); broadcasts over array-valued k and tau.

    Exact piecewise form with the |1 - k tau| kink kept intact, continuous
    at k tau = 1.
    """
    k = np.asarray(k, dtype=float)
    tau = np.asarray(tau, dtype=float)
    out = np.abs(1.0 - k * tau) + tau * theta.alpha + tau * tau * _quad(theta, k)
    return out if out.ndim else float(out)


def k_bar(theta: ThetaParams) -> float:
    """Gain above which the z = 1 crossing lies beyond the kink (mu < 1).

    For mu >= 1 the crossing never leaves the k tau < 1 branch and the
    boundary is irrelevant; infinity is returned.  (The analogous expression
    with the opposite sign of the square root, which the mu > 1 case of the
    boundary definition would produce, is available as :func:`k_bar_alt` but
    plays no role in tau_s.)
    """
    if theta.mu >= 1.0:
        return math.inf
    a1 = theta.alpha + theta.gamma1
    return (a1 + math.sqrt(a1 * a1 + 4.0 * theta.gamma2 * (1.0 - theta.mu))) \
        / (2.0 * (1.0 - theta.mu))


def k_bar_alt(theta: ThetaParams) -> float:
    """Computed-but-unused mu > 1 branch of the k_bar definition (NaN if complex)."""
    if theta.mu <= 1.0:
        return math.nan
    a1 = theta.alpha + theta.gamma1
    disc = a1 * a1 + 4.0 * theta.gamma2 * (1.0 - theta.mu)
    if disc < 0:
        return math.nan
    return (a1 - math.sqrt(disc)) / (2.0 * (1.0 - theta.mu))


def k_bbar(theta: ThetaParams) -> float:
    """Gain above which the minimizer of z(k, .) sits at the kink (mu < 1/2)."""
    if theta.mu >= 0.5:
        return math.inf
    a2 = theta.alpha + 2.0 * theta.gamma1
    return (a2 + math.sqrt(a2 * a2 + 8.0 * theta.gamma2 * (1.0 - 2.0 * theta.mu))) \
        / (2.0 * (1.0 - 2.0 * theta.mu))


def tau_s(theta: ThetaParams, k: float) -> float:
    """Stability-boundary sampling time: z(k, tau) < 1 iff 0 < tau < tau_s(k).

    Requires k > alpha; the guaranteed stable set is empty otherwise.  The
    returned value satisfies z(k, tau_s) = 1 up to roundoff.
    """
    if k <= theta.alpha:
        raise ValueError(f"k={k} must exceed alpha={theta.alpha} for a stable window")
    q = _quad(theta, k)
    if theta.mu >= 1.0 or k <= k_bar(theta):
        return (k - theta.alpha) / q
    s = theta.alpha + k
    return (-s + math.sqrt(s * s + 8.0 * q)) / (2.0 * q)


def tau_o(theta: ThetaParams, k: float) -> float:
    """Sampling time minimizing z at fixed gain k (k > alpha)."""
    if k <= theta.alpha:
        raise ValueError(f"k={k} must exceed alpha={theta.alpha}")
    if theta.mu >= 0.5 or k <= k_bbar(theta):
        return (k - theta.alpha) / (2.0 * _quad(theta, k))
    return 1.0 / k


def rho_o_of_k(theta: ThetaParams, k: float) -> float:
    """Best convergence rate at fixed gain, rho_o(k) = z(k, tau_o(k)) < 1."""
    if k <= theta.alpha:
        raise ValueError(f"k={k} must exceed alpha={theta.alpha}")
    if theta.mu >= 0.5 or k <= k_bbar(theta):
        d = k - theta.alpha
        return 1.0 - d * d / (4.0 * _quad(theta, k))
    return theta.mu + (theta.alpha + theta.gamma1) / k + theta.gamma2 / (k * k)


def _pv_root(theta: ThetaParams) -> float:
    """Smallest positive root of (4 g2 mu - g1^2) t^2 + 2 (g1 + 2 a mu) t - 1.

    This is where the vertex-branch rate reaches one.  Returns inf when the
    polynomial stays negative for all positive t.
    """
    D = 4.0 * theta.gamma2 * theta.mu - theta.gamma1 ** 2
    E = theta.gamma1 + 2.0 * theta.alpha * theta.mu
    if abs(D) < 1e-300:
        return math.inf if E <= 0 else 1.0 / (2.0 * E)
    disc = E * E + D
    if disc < 0:
        return math.inf
    roots = np.array([(-E + math.sqrt(disc)) / D, (-E - math.sqrt(disc)) / D])
    roots = roots[roots > 0]
    return float(roots.min()) if roots.size else math.inf


def k_o_validity_window(theta: ThetaParams) -> Tuple[float, float]:
    """Open interval of sampling times where k_o is defined with rate < 1."""
    if theta.mu <= 0:
        raise ValueError("mu must be positive for the optimal-gain formulas")
    if theta.mu >= 0.5:
        hi = _pv_root(theta)
        if theta.gamma1 > 0:
            hi = min(hi, 1.0 / theta.gamma1)
        return (0.0, hi)
    tau_mk = math.inf if theta.gamma1 == 0 else (1.0 - 2.0 * theta.mu) / theta.gamma1
    kb = k_bar(theta)
    kink_limit = math.inf if kb == 0 else 1.0 / kb   # where the kink-branch rate hits 1
    if kink_limit <= tau_mk:
        return (0.0, kink_limit)
    hi = _pv_root(theta)
    if theta.gamma1 > 0:
        hi = min(hi, 1.0 / theta.gamma1)
    return (0.0, hi)


def k_o(theta: ThetaParams, tau: float) -> float:
    """Gain minimizing z at fixed sampling time tau.

    Case split: for mu < 1/2 and tau below (1 - 2 mu) / gamma1 the minimizer
    sits at the kink k = 1/tau; otherwise it is the parabola vertex
    (1 - tau gamma1) / (2 tau mu).

    Raises:
        OutsideValidityWindow: tau is outside the window where the formulas
            apply with a rate below one (reported, never silently clamped).
    """
    lo, hi = k_o_validity_window(theta)
    if not (lo < tau < hi):
        raise OutsideValidityWindow(
            f"tau={tau} outside validity window ({lo:.6g}, {hi:.6g})", (lo, hi))
    if theta.mu < 0.5:
        tau_mk = math.inf if theta.gamma1 == 0 else (1.0 - 2.0 * theta.mu) / theta.gamma1
        if tau < tau_mk:
            return 1.0 / tau
    return (1.0 - tau * theta.gamma1) / (2.0 * tau * theta.mu)


def rho_o_of_tau(theta: ThetaParams, tau: float) -> float:
    """Best convergence rate at fixed sampling time, rho_o(tau) = z(k_o, tau)."""
    lo, hi = k_o_validity_window(theta)
    if not (lo < tau < hi):
        raise OutsideValidityWindow(
            f"tau={tau} outside validity window ({lo:.6g}, {hi:.6g})", (lo, hi))
    if theta.mu < 0.5:
        tau_mk = math.inf if theta.gamma1 == 0 else (1.0 - 2.0 * theta.mu) / theta.gamma1
        if tau < tau_mk:
            return theta.gamma2 * tau * tau + (theta.alpha + theta.gamma1) * tau + theta.mu
    D = 4.0 * theta.gamma2 * theta.mu - theta.gamma1 ** 2
    E = theta.gamma1 + 2.0 * theta.alpha * theta.mu
    return (D * tau * tau + 2.0 * E * tau + 4.0 * theta.mu - 1.0) / (4.0 * theta.mu)


@dataclass(frozen=True)
class Thresholds:
    """Stabilizability thresholds derived from theta.

    ``t_max``          largest sampling time any gain can stabilize (2/alpha,
                       identifying the minimum useful gain with alpha);
    ``tau_cr_formula`` critical time from the stationary point of the
                       small-gain branch tau_s1 (the curve rule, kept even
                       where the other branch is the active one);
    ``tau_cr_numeric`` numerical maximum of the full case-split tau_s(k);
    ``k_star``         gain at the tau_s1 stationary point;
    ``k_bar``/``k_bbar`` case boundaries (inf when the case never occurs).
    """

    t_max: float
    k_star: float
    tau_cr_formula: float
    tau_cr_numeric: float
    k_bar: float
    k_bbar: float


def thresholds(theta: ThetaParams, k_search_max: float = 1e3) -> Thresholds:
    """Compute stabilizability thresholds; both critical-time variants reported."""
    t_max = math.inf if theta.alpha == 0 else 2.0 / theta.alpha
    if theta.mu > 0:
        k_star = theta.alpha + math.sqrt(
            theta.alpha ** 2 + (theta.gamma2 + theta.alpha * theta.gamma1) / theta.mu)
        tau_cr_formula = (k_star - theta.alpha) / _quad(theta, k_star)
    else:
        k_star = math.inf
        tau_cr_formula = math.inf

    # numerical maximum of the case-split tau_s over (alpha, k_search_max]
    ks = theta.alpha + np.geomspace(1e-6, k_search_max - theta.alpha, 4096)
    vals = np.array([tau_s(theta, k) for k in ks])
    i = int(np.argmax(vals))
    a = ks[max(i - 1, 0)]
    b = ks[min(i + 1, len(ks) - 1)]
    phi = (math.sqrt(5.0) - 1.0) / 2.0
    for _ in range(80):
        x1 = b - phi * (b - a)
        x2 = a + phi * (b - a)
        if tau_s(theta, x1) >= tau_s(theta, x2):
            b = x2
        else:
            a = x1
    k_num = 0.5 * (a + b)
    tau_cr_numeric = tau_s(theta, k_num)

    return Thresholds(t_max=t_max, k_star=k_star, tau_cr_formula=tau_cr_formula,
                      tau_cr_numeric=tau_cr_numeric, k_bar=k_bar(theta),
                      k_bbar=k_bbar(theta))


@dataclass
class RegionGrid:
    """Gridded stability region with overlay curves.

    ``z`` has shape (len(k_values), len(tau_values)); ``stable`` is the
    pointwise mask z < 1.  Overlays are NaN where undefined: ``tau_s_curve``
    and ``tau_o_curve`` per gain, ``k_o_curve`` per sampling time.
    """

    k_values: np.ndarray
    tau_values: np.ndarray
    z: np.ndarray
    stable: np.ndarray
    tau_s_curve: np.ndarray
    tau_o_curve: np.ndarray
    k_o_curve: np.ndarray


def region_grid(theta: ThetaParams, k_range: Tuple[float, float],
                tau_range: Tuple[float, float],
                resolution: Tuple[int, int] = (200, 200)) -> RegionGrid:
    """Evaluate z on a (k, tau) grid together with the three overlay curves."""
    k_lo, k_hi = k_range
    t_lo, t_hi = tau_range
    if not (0 <= k_lo < k_hi and 0 < t_lo < t_hi):
        raise ValueError("ranges must be positive and increasing")
    nk, nt = resolution
    if nk < 2 or nt < 2:
        raise ValueError("resolution must be at least 2x2")
    kv = np.linspace(k_lo, k_hi, nk)
    tv = np.linspace(t_lo, t_hi, nt)
    z = z_bound(theta, kv[:, None], tv[None, :])

    tau_s_curve = np.full(nk, np.nan)
    tau_o_curve = np.full(nk, np.nan)
    for i, k in enumerate(kv):
        if k > theta.alpha:
            tau_s_curve[i] = tau_s(theta, k)
            tau_o_curve[i] = tau_o(theta, k)
    k_o_curve = np.full(nt, np.nan)
    for j, tau in enumerate(tv):
        try:
            k_o_curve[j] = k_o(theta, tau)
        except OutsideValidityWindow:
            pass
    return RegionGrid(k_values=kv, tau_values=tv, z=z, stable=z < 1.0,
                      tau_s_curve=tau_s_curve, tau_o_curve=tau_o_curve,
                      k_o_curve=k_o_curve)


@dataclass(frozen=True)
class GainRecommendation:
    """Result of picking a gain for a given sampling time.

    ``verdict`` is "ok" when a stabilizing gain exists, otherwise
    "no stabilizing gain".  ``monotone`` flags whether the optimal-gain curve
    was locally decreasing at T, as the inversion assumes.
    """

    k: Optional[float]
    rho: Optional[float]
    verdict: str
    window: Tuple[float, float]
    monotone: bool = True


def gain_for_sampling_time(theta: ThetaParams, T: float,
                           k_cap: float = 1e6) -> GainRecommendation:
    """Gain achieving the fastest guaranteed rate at sampling time T.

    Reads the optimal-gain curve at T, i.e. inverts the monotone decreasing
    map from sampling time to optimal gain.  Beyond the validity window no
    gain keeps z below one and an explicit verdict is returned instead.
    Gains are capped at ``k_cap`` (stability is preserved by the cap since z
    decreases toward the optimum from either side).
    """
    if T <= 0:
        raise ValueError("T must be positive")
    window = k_o_validity_window(theta)
    try:
        k = k_o(theta, T)
    except OutsideValidityWindow:
        return GainRecommendation(k=None, rho=None, verdict="no stabilizing gain",
                                  window=window)
    monotone = True
    eps = 1e-6 * T
    try:
        if k_o(theta, T - eps) < k or k_o(theta, T + eps) > k:
            monotone = False
    except OutsideValidityWindow:
        pass
    k = min(k, k_cap)
    rho = float(z_bound(theta, k, T))
    if rho >= 1.0:
        return GainRecommendation(k=None, rho=rho, verdict="no stabilizing gain",
                                  window=window, monotone=monotone)
    return GainRecommendation(k=float(k), rho=rho, verdict="ok", window=window,
                              monotone=monotone)
