import numpy as np
import pytest

from sampledik.kinematics import (
    ConditioningGuard,
    LinearSystem,
    PlanarFormation,
    ScalarSystem,
    SingularConfiguration,
    eval_h,
    eval_jacobian,
    solve_jacobian,
)


def fd_jacobian(sys, q, h=1e-6):
    """Central-difference Jacobian, the independent oracle for eval_jacobian."""
    n = sys.dim
    J = np.zeros((n, n))
    for j in range(n):
        qp, qm = q.copy(), q.copy()
        qp[j] += h
        qm[j] -= h
        J[:, j] = (sys.h(qp) - sys.h(qm)) / (2.0 * h)
    return J


def formation_h_reference(q, fixed_angles):
    """Hand-coded rotation-matrix form of the formation map, written
    independently of the implementation."""
    xv, yv, phiv = q[0], q[1], q[2]
    R = np.array([[np.cos(phiv), -np.sin(phiv)], [np.sin(phiv), np.cos(phiv)]])
    p = []
    for i in range(3):
        local = q[3 + i] * np.array([np.cos(fixed_angles[i]), np.sin(fixed_angles[i])])
        p.extend(np.array([xv, yv]) + R @ local)
    return np.array(p)


ALL_SYSTEMS = [
    PlanarFormation(),
    ScalarSystem(),
    LinearSystem(dim=3, matrix=np.array([[2.0, 0.3, 0.0], [0.0, 1.0, -0.2], [0.1, 0.0, 1.5]])),
]


def random_config(sys, rng):
    q = rng.uniform(-1.0, 1.0, sys.dim)
    if isinstance(sys, PlanarFormation):
        q[3:6] = rng.uniform(0.5, 1.5, 3)   # keep distances away from zero
    return q


def test_formation_zero_rotation_identity_case():
    sys = PlanarFormation(fixed_angles=(0.0, 2 * np.pi / 3, 4 * np.pi / 3))
    q = np.array([0.0, 0.0, 0.0, 1.0, 1.0, 1.0])
    p = eval_h(sys, q)
    assert np.allclose(p[0:2], [1.0, 0.0], atol=1e-15)


def test_formation_quarter_turn():
    sys = PlanarFormation(fixed_angles=(0.0, 2 * np.pi / 3, 4 * np.pi / 3))
    q = np.array([0.0, 0.0, np.pi / 2, 1.0, 1.0, 1.0])
    p = eval_h(sys, q)
    assert np.allclose(p[0:2], [0.0, 1.0], atol=1e-12)


def test_formation_matches_rotation_matrix_form():
    rng = np.random.default_rng(7)
    sys = PlanarFormation()
    for _ in range(20):
        q = random_config(sys, rng)
        expected = formation_h_reference(q, sys.fixed_angles)
        assert np.allclose(eval_h(sys, q), expected, atol=1e-13)


def test_scalar_jacobian_at_origin():
    sys = ScalarSystem()
    assert eval_jacobian(sys, np.array([0.0]))[0, 0] == pytest.approx(1.0)


def test_formation_block_sparsity_exact_zeros():
    rng = np.random.default_rng(3)
    sys = PlanarFormation()
    for _ in range(10):
        A = eval_jacobian(sys, random_config(sys, rng))
        for i, block in enumerate(sys.block_structure):
            other_cols = [c for j, b in enumerate(sys.block_structure) if j != i
                          for c in b.own_cols]
            for r in block.rows:
                for c in other_cols:
                    assert A[r, c] == 0.0   # bitwise zero, not just small
    # the d_2 column of robot-1 rows in particular
    A = eval_jacobian(sys, random_config(sys, rng))
    assert A[0, 4] == 0.0 and A[1, 4] == 0.0


@pytest.mark.parametrize("sys", ALL_SYSTEMS, ids=lambda s: type(s).__name__)
def test_jacobian_matches_finite_differences(sys):
    rng = np.random.default_rng(11)
    for _ in range(100):
        q = random_config(sys, rng)
        assert np.allclose(eval_jacobian(sys, q), fd_jacobian(sys, q), atol=1e-5)


def test_jacobian_many_matches_single():
    rng = np.random.default_rng(5)
    for sys in ALL_SYSTEMS:
        Q = np.stack([random_config(sys, rng) for _ in range(8)])
        batch = sys.jacobian_many(Q)
        for b in range(8):
            assert np.array_equal(batch[b], sys.jacobian(Q[b]))


def test_solve_scalar_trivial():
    sys = ScalarSystem()
    x = solve_jacobian(sys, np.array([0.0]), np.array([2.0]))
    assert x[0] == pytest.approx(2.0)


def test_solve_translation_identity_block():
    # with phi_V = phi_1 = 0 the translation columns are identity blocks
    sys = PlanarFormation(fixed_angles=(0.0, 2 * np.pi / 3, 4 * np.pi / 3))
    q = np.array([0.3, -0.2, 0.0, 1.0, 1.0, 1.0])
    rhs = np.tile([0.7, -0.4], 3)           # pure common translation of all robots
    x = solve_jacobian(sys, q, rhs)
    assert np.allclose(x[0:2], [0.7, -0.4], atol=1e-12)
    assert np.allclose(x[2:], 0.0, atol=1e-12)


def test_solve_residual_and_roundtrip():
    rng = np.random.default_rng(13)
    for sys in ALL_SYSTEMS:
        for _ in range(25):
            q = random_config(sys, rng)
            rhs = rng.normal(size=sys.dim)
            x = solve_jacobian(sys, q, rhs)
            A = eval_jacobian(sys, q)
            assert np.linalg.norm(A @ x - rhs) <= 1e-9 * (1.0 + np.linalg.norm(rhs))


def test_singular_configuration_detected():
    sys = PlanarFormation()
    # grid search for the configuration with vanishing determinant: shrinking
    # all distances collapses the robots onto the pivot and kills the heading
    # column
    scales = np.linspace(0.0, 1.0, 41)
    dets = []
    for s in scales:
        q = np.array([0.0, 0.0, 0.2, s, s, s])
        dets.append(abs(np.linalg.det(eval_jacobian(sys, q))))
    s_star = scales[int(np.argmin(dets))]
    assert min(dets) < 1e-12
    q_sing = np.array([0.0, 0.0, 0.2, s_star, s_star, s_star])
    with pytest.raises(SingularConfiguration) as exc_info:
        solve_jacobian(sys, q_sing, np.ones(6))
    assert exc_info.value.sigma_min is not None


def test_guard_threshold_is_configurable():
    sys = ScalarSystem()
    strict = ConditioningGuard(min_singular_value=10.0)   # absurdly strict
    with pytest.raises(SingularConfiguration):
        solve_jacobian(sys, np.array([0.0]), np.array([1.0]), guard=strict)


def test_dimension_mismatch_errors():
    sys = PlanarFormation()
    with pytest.raises(ValueError):
        eval_h(sys, np.zeros(5))
    with pytest.raises(ValueError):
        eval_jacobian(sys, np.zeros(7))
    with pytest.raises(ValueError):
        solve_jacobian(sys, np.zeros(6) + 0.5, np.zeros(4))
