from itertools import combinations

import numpy as np
import pytest

from impactmpc.qp import QpError, QpResult, solve_qp


def brute_force_qp(P, q, G, h):
    """Enumerate working sets; for a strictly convex QP the first KKT point
    (primal feasible, dual nonnegative) is the unique optimum."""
    n, m = len(q), len(h)
    best = None
    for k in range(0, min(n, m) + 1):
        for subset in combinations(range(m), k):
            A = G[list(subset)]
            K = np.block([[P, A.T], [A, np.zeros((k, k))]])
            rhs = np.concatenate([-q, h[list(subset)]])
            try:
                sol = np.linalg.solve(K, rhs)
            except np.linalg.LinAlgError:
                continue
            w, lam = sol[:n], sol[n:]
            if np.any(G @ w - h > 1e-9):
                continue
            if k and np.min(lam) < -1e-9:
                continue
            obj = 0.5 * w @ P @ w + q @ w
            if best is None or obj < best[1] - 1e-12:
                best = (w, obj)
    assert best is not None
    return best[0]


def random_qp(rng, n, m):
    L = rng.normal(size=(n, n))
    P = L @ L.T + n * np.eye(n)
    q = rng.normal(size=n)
    G = rng.normal(size=(m, n))
    w_feas = rng.normal(size=n) * 0.1
    h = G @ w_feas + rng.uniform(0.0, 1.0, m)  # w_feas strictly feasible
    return P, q, G, h, w_feas


def test_unconstrained_reduces_to_newton():
    P = np.diag([2.0, 4.0])
    q = np.array([-2.0, -8.0])
    res = solve_qp(P, q, np.empty((0, 2)), np.empty(0), np.zeros(2))
    np.testing.assert_allclose(res.w, [1.0, 2.0], atol=1e-12)
    assert res.converged


def test_projection_onto_box():
    # min |w - (2, -3)|^2 over the unit box
    P = 2 * np.eye(2)
    q = np.array([-4.0, 6.0])
    G = np.vstack([np.eye(2), -np.eye(2)])
    h = np.ones(4)
    res = solve_qp(P, q, G, h, np.zeros(2))
    np.testing.assert_allclose(res.w, [1.0, -1.0], atol=1e-10)
    # active rows carry positive multipliers, inactive rows zero
    assert res.multipliers[0] > 0 and res.multipliers[3] > 0
    assert res.multipliers[1] == 0 and res.multipliers[2] == 0


def test_matches_enumeration_oracle_on_random_instances():
    rng = np.random.default_rng(7)
    for _ in range(60):
        n = int(rng.integers(2, 5))
        m = int(rng.integers(1, 8))
        P, q, G, h, w0 = random_qp(rng, n, m)
        res = solve_qp(P, q, G, h, w0)
        assert res.converged
        want = brute_force_qp(P, q, G, h)
        np.testing.assert_allclose(res.w, want, atol=1e-7)


def test_kkt_conditions_on_mpc_scale_instances():
    rng = np.random.default_rng(42)
    for _ in range(20):
        P, q, G, h, w0 = random_qp(rng, 33, 120)
        res = solve_qp(P, q, G, h, w0)
        assert res.converged
        viol = G @ res.w - h
        assert np.max(viol) <= 1e-8
        stat = P @ res.w + q + G.T @ res.multipliers
        assert np.max(np.abs(stat)) <= 1e-6
        assert np.min(res.multipliers) >= 0
        comp = np.abs(res.multipliers * viol)
        assert np.max(comp) <= 1e-6


def test_start_on_boundary():
    P = 2 * np.eye(2)
    q = np.array([-4.0, 0.0])
    G = np.array([[1.0, 0.0]])
    h = np.array([0.5])
    res = solve_qp(P, q, G, h, np.array([0.5, 3.0]))  # starts active
    np.testing.assert_allclose(res.w, [0.5, 0.0], atol=1e-10)


def test_infeasible_start_rejected():
    with pytest.raises(QpError):
        solve_qp(np.eye(1), np.zeros(1), np.array([[1.0]]), np.array([-1.0]), np.zeros(1))


def test_result_type():
    res = solve_qp(np.eye(2), np.zeros(2), np.empty((0, 2)), np.empty(0), np.ones(2))
    assert isinstance(res, QpResult)
    np.testing.assert_allclose(res.w, 0.0, atol=1e-14)
