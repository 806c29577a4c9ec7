import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import bisect_tau_s, grid_argmin_k, grid_argmin_tau, random_theta
from sampledik.analysis import (
    OutsideValidityWindow,
    ThetaParams,
    gain_for_sampling_time,
    k_bar,
    k_bbar,
    k_o,
    k_o_validity_window,
    region_grid,
    rho_o_of_k,
    rho_o_of_tau,
    tau_o,
    tau_s,
    thresholds,
    z_bound,
)

# headline parameter set used throughout the experiments
THETA = ThetaParams(mu=0.02, alpha=0.13, gamma1=0.1, gamma2=0.2)
THETA_BIG_MU = ThetaParams(mu=0.6, alpha=0.1, gamma1=0.1, gamma2=0.1)


def test_z_direct_evaluation():
    # 0.5 + 0.5*0.13 + 0.25*(0.02 + 0.1 + 0.2)
    assert z_bound(THETA, 1.0, 0.5) == pytest.approx(0.645, abs=1e-12)


def test_z_limit_at_zero_sampling():
    for theta in (THETA, THETA_BIG_MU):
        assert z_bound(theta, 1.0, 1e-12) == pytest.approx(1.0, abs=1e-10)


def test_z_constant_reference_reduction():
    theta = ThetaParams(mu=0.3, alpha=0.0, gamma1=0.0, gamma2=0.0)
    # on the kink k tau = 1 only the quadratic feedback term survives
    assert z_bound(theta, 2.0, 0.5) == pytest.approx(0.3, abs=1e-14)


@given(st.floats(0.2, 5.0), st.floats(0.01, 2.0))
@settings(max_examples=200, deadline=None)
def test_z_continuous_at_kink(k, eps_scale):
    kink = 1.0 / k
    eps = 1e-9 * eps_scale
    lo = z_bound(THETA, k, kink - eps)
    hi = z_bound(THETA, k, kink + eps)
    assert abs(lo - hi) < 1e-7


def test_case_boundaries_paper_values():
    assert k_bar(THETA) == pytest.approx(0.5841, abs=1e-3)
    assert k_bbar(THETA) == pytest.approx(0.8399, abs=1e-3)
    assert k_bar(THETA_BIG_MU) < k_bbar(THETA_BIG_MU) == math.inf


def test_tau_s_branch_values():
    # below k_bar the small-gain branch applies, above it the kink branch
    assert tau_s(THETA, 0.4) == pytest.approx(1.1102, abs=1e-3)
    assert tau_s(THETA, 1.0) == pytest.approx(1.2950, abs=1e-3)
    for k in (0.4, 1.0, 3.0):
        assert z_bound(THETA, k, tau_s(THETA, k)) == pytest.approx(1.0, abs=1e-9)


def test_tau_s_vanishes_at_alpha():
    assert tau_s(THETA, THETA.alpha + 1e-9) < 1e-8
    with pytest.raises(ValueError):
        tau_s(THETA, THETA.alpha)


def test_tau_s_matches_bisection_oracle():
    rng = np.random.default_rng(0)
    for _ in range(10):
        theta = random_theta(rng)
        for k in theta.alpha + np.array([0.05, 0.3, 1.0, 4.0]):
            assert tau_s(theta, k) == pytest.approx(bisect_tau_s(theta, k), abs=1e-7)


def test_tau_o_and_rate_at_unit_gain():
    # k = 1 exceeds k_bbar, so the optimum sits at the kink
    assert tau_o(THETA, 1.0) == pytest.approx(1.0, abs=1e-12)
    assert rho_o_of_k(THETA, 1.0) == pytest.approx(0.45, abs=1e-12)


def test_tau_o_small_gain_branch():
    k = 0.5
    expected_rho = 1.0 - (THETA.alpha - k) ** 2 / (4.0 * (k * k * THETA.mu
                                                          + k * THETA.gamma1 + THETA.gamma2))
    assert rho_o_of_k(THETA, k) == pytest.approx(expected_rho, abs=1e-12)
    t, zmin = grid_argmin_tau(THETA, k)
    assert tau_o(THETA, k) == pytest.approx(t, abs=1e-6)
    assert rho_o_of_k(THETA, k) == pytest.approx(zmin, abs=1e-9)


def test_tau_o_single_branch_for_large_mu():
    for k in (0.2, 0.7, 2.0, 8.0):
        expected = (k - THETA_BIG_MU.alpha) / (2.0 * (k * k * THETA_BIG_MU.mu
                                                      + k * THETA_BIG_MU.gamma1
                                                      + THETA_BIG_MU.gamma2))
        assert tau_o(THETA_BIG_MU, k) == pytest.approx(expected, rel=1e-12)
        t, _ = grid_argmin_tau(THETA_BIG_MU, k)
        assert tau_o(THETA_BIG_MU, k) == pytest.approx(t, abs=1e-6)


def test_rho_o_self_consistency_and_below_one():
    rng = np.random.default_rng(1)
    for _ in range(20):
        theta = random_theta(rng)
        for k in theta.alpha + np.array([0.1, 0.7, 2.5]):
            t = tau_o(theta, k)
            assert rho_o_of_k(theta, k) == pytest.approx(z_bound(theta, k, t), abs=1e-12)
            assert rho_o_of_k(theta, k) < 1.0


def test_k_o_kink_branch_for_small_mu():
    # tau_mk = (1 - 2 mu) / gamma1 = 9.6 but the window ends where the kink
    # rate reaches one
    lo, hi = k_o_validity_window(THETA)
    assert hi == pytest.approx(1.0 / k_bar(THETA), rel=1e-12)
    for tau in (0.2, 0.75, 1.5):
        assert k_o(THETA, tau) == pytest.approx(1.0 / tau, rel=1e-12)
        assert k_o(THETA, tau) * tau <= 1.0 + 1e-12
        kk, zmin = grid_argmin_k(THETA, tau)
        assert k_o(THETA, tau) == pytest.approx(kk, abs=1e-6)
        assert rho_o_of_tau(THETA, tau) == pytest.approx(zmin, abs=1e-9)


def test_k_o_vertex_branch_for_large_mu():
    theta = THETA_BIG_MU
    for tau in (0.2, 0.6, 1.2):
        expected = (1.0 - tau * theta.gamma1) / (2.0 * tau * theta.mu)
        assert k_o(theta, tau) == pytest.approx(expected, rel=1e-12)
        kk, _ = grid_argmin_k(theta, tau)
        assert k_o(theta, tau) == pytest.approx(kk, abs=1e-6)
        assert rho_o_of_tau(theta, tau) == pytest.approx(
            z_bound(theta, k_o(theta, tau), tau), abs=1e-12)


def test_k_o_outside_window_is_reported():
    lo, hi = k_o_validity_window(THETA)
    with pytest.raises(OutsideValidityWindow) as exc_info:
        k_o(THETA, hi * 1.01)
    assert exc_info.value.window == (lo, hi)


def test_thresholds_paper_values():
    th = thresholds(THETA)
    assert th.t_max == pytest.approx(2.0 / 0.13, abs=1e-12)
    assert th.k_star == pytest.approx(3.396, abs=1e-3)
    assert th.tau_cr_formula == pytest.approx(4.240, abs=1e-3)
    # the numeric maximum of the full case split sits at k_bar instead
    assert th.tau_cr_numeric == pytest.approx(1.0 / k_bar(THETA), abs=1e-6)
    assert th.tau_cr_numeric < th.tau_cr_formula


def test_t_max_diverges_for_vanishing_alpha():
    theta = ThetaParams(mu=0.1, alpha=0.0, gamma1=0.1, gamma2=0.1)
    assert thresholds(theta).t_max == math.inf


def test_region_grid_paper_theta():
    grid = region_grid(THETA, (0.15, 5.0), (0.01, 5.0), (120, 120))
    assert grid.stable.any() and not grid.stable.all()
    assert np.array_equal(grid.stable, grid.z < 1.0)
    # stable region is bounded away from the top of the window
    assert not grid.stable[:, -1].any()


def test_region_grid_constant_reference_shape():
    theta = ThetaParams(mu=0.3, alpha=0.0, gamma1=0.0, gamma2=0.0)
    grid = region_grid(theta, (0.1, 4.0), (0.05, 4.0), (80, 80))
    kk = grid.k_values[:, None]
    tt = grid.tau_values[None, :]
    expected = (np.abs(1.0 - kk * tt) + kk * kk * tt * tt * theta.mu) < 1.0
    assert np.array_equal(grid.stable, expected)


def test_region_grid_huge_mu_empty_window():
    theta = ThetaParams(mu=1e3, alpha=0.13, gamma1=0.1, gamma2=0.2)
    grid = region_grid(theta, (0.15, 5.0), (0.01, 5.0), (100, 100))
    assert not grid.stable[grid.k_values > theta.alpha].any()


def test_region_overlays_consistent_with_grid():
    grid = region_grid(THETA, (0.2, 4.0), (0.01, 2.0), (200, 200))
    dk = grid.k_values[1] - grid.k_values[0]
    dt = grid.tau_values[1] - grid.tau_values[0]
    for i, k in enumerate(grid.k_values):
        ts = grid.tau_s_curve[i]
        if np.isnan(ts) or not (grid.tau_values[0] <= ts <= grid.tau_values[-1]):
            continue
        j = int(np.clip(np.searchsorted(grid.tau_values, ts), 1, len(grid.tau_values) - 1))
        # the z = 1 contour lies within one cell of the curve
        assert (grid.z[i, j - 1] - 1.0) * (grid.z[i, min(j + 1, len(grid.tau_values) - 1)] - 1.0) <= 1e-9
        to = grid.tau_o_curve[i]
        if grid.tau_values[0] <= to <= grid.tau_values[-1]:
            j_min = int(np.argmin(grid.z[i]))
            assert abs(grid.tau_values[j_min] - to) <= 2 * dt
    for j, tau in enumerate(grid.tau_values):
        ko = grid.k_o_curve[j]
        if np.isnan(ko) or not (grid.k_values[0] <= ko <= grid.k_values[-1]):
            continue
        i_min = int(np.argmin(grid.z[:, j]))
        assert abs(grid.k_values[i_min] - ko) <= 2 * dk


def test_region_rejects_bad_ranges():
    with pytest.raises(ValueError):
        region_grid(THETA, (1.0, 1.0), (0.1, 2.0))
    with pytest.raises(ValueError):
        region_grid(THETA, (0.1, 1.0), (2.0, 0.1))


def test_gain_recommendation_kink_branch():
    rec = gain_for_sampling_time(THETA, 0.75)
    assert rec.verdict == "ok" and rec.monotone
    assert rec.k == pytest.approx(1.0 / 0.75, rel=1e-12)
    assert rec.rho < 1.0
    # cross-check the inversion: bisect k_o(tau) = rec.k back to tau = T
    lo, hi = 1e-6, k_o_validity_window(THETA)[1] * 0.999999
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if k_o(THETA, mid) > rec.k:
            lo = mid
        else:
            hi = mid
    assert 0.5 * (lo + hi) == pytest.approx(0.75, abs=1e-9)


def test_gain_recommendation_beyond_region():
    rec = gain_for_sampling_time(THETA, 2.5)   # above the 1.712 window edge
    assert rec.verdict == "no stabilizing gain"
    assert rec.k is None


def test_gain_recommendation_tiny_T():
    rec = gain_for_sampling_time(THETA, 1e-4)
    assert rec.verdict == "ok"
    assert rec.k == pytest.approx(1e4, rel=1e-9)
    assert z_bound(THETA, rec.k, 1e-4) < 1.0
    capped = gain_for_sampling_time(THETA, 1e-4, k_cap=100.0)
    assert capped.k == 100.0 and capped.rho < 1.0


def test_theta_validation():
    with pytest.raises(ValueError):
        ThetaParams(mu=-0.1, alpha=0.1, gamma1=0.1, gamma2=0.1)
    with pytest.raises(ValueError):
        ThetaParams(mu=0.1, alpha=math.nan, gamma1=0.1, gamma2=0.1)
