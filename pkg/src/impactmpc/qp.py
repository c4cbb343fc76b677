"""Dense primal active-set solver for strictly convex inequality QPs.

Solves  min 0.5 w'Pw + q'w  s.t.  G w <= h  from a feasible starting
point.  P must be symmetric positive definite (the SQP layer guarantees
this through damped BFGS).  Equality constraints never appear here: the
MPC condenses its dynamics equalities before calling the QP.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class QpError(RuntimeError):
    pass


@dataclass
class QpResult:
    w: np.ndarray
    multipliers: np.ndarray   # one per row of G, >= 0, zero when inactive
    iterations: int
    converged: bool


def _kkt_solve(P, G_act, rhs_top):
    """Solve [P A'; A 0] [p; lam] = [rhs_top; 0] for the active rows A."""
    na = G_act.shape[0]
    n = P.shape[0]
    if na == 0:
        return np.linalg.solve(P, rhs_top), np.empty(0)
    K = np.zeros((n + na, n + na))
    K[:n, :n] = P
    K[:n, n:] = G_act.T
    K[n:, :n] = G_act
    rhs = np.concatenate([rhs_top, np.zeros(na)])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    return sol[:n], sol[n:]


def solve_qp(
    P: np.ndarray,
    q: np.ndarray,
    G: np.ndarray,
    h: np.ndarray,
    w0: np.ndarray,
    max_iter: int = 400,
    tol: float = 1e-10,
) -> QpResult:
    """Primal active-set iteration (Nocedal & Wright, alg. 16.3).

    w0 must satisfy G w0 <= h (up to tol); the iterates stay feasible.
    """
    n = P.shape[0]
    m = G.shape[0]
    w = np.asarray(w0, dtype=float).copy()

    resid0 = G @ w - h
    worst = float(np.max(resid0)) if m else 0.0
    if worst > 1e-8:
        raise QpError(f"infeasible starting point (violation {worst:.3e})")

    # start from the rows that are (numerically) active at w0
    active = [int(i) for i in np.flatnonzero(resid0 > -1e-11)]
    active = active[:n]  # never exceed the variable count

    mult = np.zeros(m)
    for it in range(1, max_iter + 1):
        G_act = G[active] if active else np.empty((0, n))
        p, lam = _kkt_solve(P, G_act, -(P @ w + q))

        if np.max(np.abs(p)) <= tol:
            if len(active) == 0 or np.min(lam) >= -tol:
                mult[:] = 0.0
                for k, i in enumerate(active):
                    mult[i] = max(lam[k], 0.0) if len(lam) else 0.0
                return QpResult(w, mult, it, True)
            # drop the most negative multiplier
            drop = int(np.argmin(lam))
            active.pop(drop)
            continue

        # ratio test against the inactive rows
        Gp = G @ p
        resid = G @ w - h
        alpha = 1.0
        blocker = -1
        for i in range(m):
            if i in active or Gp[i] <= tol:
                continue
            a_i = -resid[i] / Gp[i]
            if a_i < alpha - 1e-14:
                alpha = max(a_i, 0.0)
                blocker = i
        w = w + alpha * p
        if blocker >= 0:
            active.append(blocker)
            if len(active) > n:
                # keep the working set independent by dropping the oldest row
                active.pop(0)

    # iteration cap hit: report multipliers for the final working set
    G_act = G[active] if active else np.empty((0, n))
    _, lam = _kkt_solve(P, G_act, -(P @ w + q))
    mult[:] = 0.0
    for k, i in enumerate(active):
        mult[i] = max(float(lam[k]), 0.0)
    return QpResult(w, mult, max_iter, False)
