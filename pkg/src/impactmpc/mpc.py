"""Free-final-time MPC for the impact-wrench model.

At each 1 ms tick an NLP over [x_0..x_N, u_0..u_{N-1}, t_s, eps1, eps2]
is solved: the first prediction step uses the fixed sampling time, the
remaining steps share the free step size t_s, so the horizon end can be
steered onto the impact event.  Spring-angle and terminal rows are
softened by slacks (linear penalty on eps1, quadratic on eps2).

The solver is an SQP with the states condensed out: iterates live in
(u_seq, t_s, eps1, eps2), states always come from an exact forward
rollout, and each iteration solves a dense QP (active set, see qp.py)
over the linearized spring/terminal rows plus the exact bound rows.
"""

from __future__ import annotations

import math
import time
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from impactmpc.dynamics import (
    MechConstants,
    f_continuous,
    feature_vector,
    jacobians,
    step_euler,
)
from impactmpc.qp import solve_qp

OPTIMAL = "Optimal"
MAX_ITER = "MaxIter"
INFEASIBLE = "Infeasible"


@dataclass(frozen=True)
class MpcProblem:
    """Problem data; numeric defaults follow the reference configuration."""

    theta: np.ndarray                 # identified parameters [lam, kf*x0, kf, 1]
    mech: MechConstants
    gp: object | None = None          # optional residual model (mean/mean_grad)
    horizon: int = 30
    ts_fixed: float = 1e-3            # first-step sampling time [s]
    ts_min: float = 1e-6              # avoids a degenerate zero-length prediction
    ts_max: float = 1e-3
    u_min: float = -0.5
    u_max: float = 0.0
    phi_b: float = 2.11
    spring_at_impact: float = 0.2
    lambda_u: float = 4.0
    lambda_eps1: float = 100.0
    lambda_eps2: float = 5.0
    kkt_tol: float = 1e-6
    max_iter: int = 100

    def __post_init__(self):
        if self.ts_max != self.ts_fixed:
            raise ValueError("t_s upper bound equals the fixed sampling time")
        if not (0 < self.ts_min < self.ts_max):
            raise ValueError("need 0 < ts_min < ts_max")


@dataclass(frozen=True)
class ImpactReference:
    """Terminal target for the next impact.

    phi_h_ref = phi_h_prev_impact - pi + phi_ap_est, and the spindle
    target keeps the configured spring angle at impact.
    """

    phi_h_ref: float
    phi_s_ref: float
    phi_h_prev_impact: float
    phi_ap_est: float

    def __post_init__(self):
        want = self.phi_h_prev_impact - math.pi + self.phi_ap_est
        if abs(self.phi_h_ref - want) > 1e-9:
            raise ValueError("phi_h_ref inconsistent with previous impact")

    @classmethod
    def from_impact(cls, phi_h_prev_impact: float, phi_ap_est: float,
                    spring_at_impact: float = 0.2) -> "ImpactReference":
        ref = phi_h_prev_impact - math.pi + phi_ap_est
        return cls(ref, ref - spring_at_impact, phi_h_prev_impact, phi_ap_est)


@dataclass
class MpcSolution:
    u_seq: np.ndarray
    x_seq: np.ndarray
    t_s_star: float
    eps1: float
    eps2: float
    kkt_residual: float
    iterations: int
    solve_time: float
    status: str
    hessian: np.ndarray | None = None   # BFGS curvature, reused on warm starts

    def shifted(self) -> "MpcSolution":
        """Warm start for the next tick: drop the first input, repeat the last."""
        u = np.roll(self.u_seq, -1)
        u[-1] = u[-2]
        return replace(self, u_seq=u)


class Nlp:
    """One tick's NLP: full-space view for inspection plus the condensed
    rollout/sensitivity machinery the solver uses."""

    def __init__(self, problem: MpcProblem, x_hat: np.ndarray, u_prev: float,
                 ref: ImpactReference):
        self.p = problem
        self.x_hat = np.asarray(x_hat, dtype=float)
        self.u_prev = float(u_prev)
        self.ref = ref
        self.N = problem.horizon
        # decision vector [x_0..x_N, u_0..u_{N-1}, t_s, eps1, eps2]
        self.n_var = 4 * (self.N + 1) + self.N + 3

    # ---- full-space view -------------------------------------------------

    def pack(self, x_seq, u_seq, t_s, eps1, eps2) -> np.ndarray:
        return np.concatenate(
            [np.asarray(x_seq).ravel(), np.asarray(u_seq), [t_s, eps1, eps2]]
        )

    def unpack(self, v):
        N = self.N
        x_seq = v[: 4 * (N + 1)].reshape(N + 1, 4)
        u_seq = v[4 * (N + 1): 4 * (N + 1) + N]
        t_s, eps1, eps2 = v[-3], v[-2], v[-1]
        return x_seq, u_seq, t_s, eps1, eps2

    def objective(self, v: np.ndarray) -> float:
        _, u, _, eps1, eps2 = self.unpack(v)
        p = self.p
        du = np.diff(u)
        j_u = p.lambda_u * (u[0] - self.u_prev) ** 2 + p.lambda_u * np.sum(du**2)
        j_s = p.lambda_eps1 * eps1 + p.lambda_eps2 * eps2**2
        return float(j_u + j_s)

    def objective_gradient(self, v: np.ndarray) -> np.ndarray:
        _, u, _, _, eps2 = self.unpack(v)
        p = self.p
        g = np.zeros(self.n_var)
        gu = np.zeros(self.N)
        gu[0] = 2 * p.lambda_u * (u[0] - self.u_prev)
        gu[:-1] -= 2 * p.lambda_u * np.diff(u)
        gu[1:] += 2 * p.lambda_u * np.diff(u)
        g[4 * (self.N + 1): 4 * (self.N + 1) + self.N] = gu
        g[-2] = p.lambda_eps1
        g[-1] = 2 * p.lambda_eps2 * eps2
        return g

    def constraint_counts(self) -> dict:
        N = self.N
        return {
            "dynamics": 4 * (N + 1),
            "terminal": 2,
            "spring": 2 * (N + 1),
            "input": 2 * N,
            "step": 2,
            "slack": 2,
        }

    def dynamics_defects(self, v: np.ndarray) -> np.ndarray:
        """Rows: x_0 - x_hat, then x_{i+1} - step(x_i, u_i); shape (N+1, 4)."""
        x_seq, u_seq, t_s, _, _ = self.unpack(v)
        out = np.empty((self.N + 1, 4))
        out[0] = x_seq[0] - self.x_hat
        for i in range(self.N):
            dt = self.p.ts_fixed if i == 0 else t_s
            out[i + 1] = x_seq[i + 1] - step_euler(
                x_seq[i], u_seq[i], self.p.theta, self.p.mech, dt, self.p.gp
            )
        return out

    # ---- condensed machinery ---------------------------------------------

    def rollout(self, u_seq: np.ndarray, t_s: float) -> np.ndarray:
        p = self.p
        x = np.empty((self.N + 1, 4))
        x[0] = self.x_hat
        for i in range(self.N):
            dt = p.ts_fixed if i == 0 else t_s
            x[i + 1] = step_euler(x[i], u_seq[i], p.theta, p.mech, dt, p.gp)
        return x

    def rollout_sens(self, u_seq: np.ndarray, t_s: float):
        """States plus sensitivities X_i = dx_i/dw, w = [u_0.., tau, e1, e2]
        with tau = t_s / ts_max.  Returns (x_seq, X) where X is
        (N+1, 4, N+3)."""
        p = self.p
        N = self.N
        nw = N + 3
        x = np.empty((N + 1, 4))
        X = np.zeros((N + 1, 4, nw))
        x[0] = self.x_hat
        for i in range(N):
            dt = p.ts_fixed if i == 0 else t_s
            A, B = jacobians(x[i], u_seq[i], p.theta, p.mech, dt, p.gp)
            fx = f_continuous(x[i], u_seq[i], p.theta, p.mech)
            if p.gp is not None:
                fx = fx.copy()
                fx[3] += p.gp.mean(feature_vector(x[i], u_seq[i]))
            X[i + 1] = A @ X[i]
            X[i + 1][:, i] += B[:, 0]
            if i > 0:
                X[i + 1][:, N] += p.ts_max * fx  # d/d tau
            x[i + 1] = x[i] + dt * fx
        return x, X


def _constraints(nlp: Nlp, x_seq, X, u_seq, tau, eps1, eps2):
    """Linearized inequality rows G w_step <= -c at the current iterate.

    Returns (c, G, nonlin) with c the constraint values, G their Jacobians
    w.r.t. the condensed variables, and nonlin a mask of rows whose value
    depends on the rollout (spring/terminal)."""
    p = nlp.p
    N = nlp.N
    nw = N + 3
    phi = x_seq[:, 0] - x_seq[:, 1]
    Sx = X[:, 0, :] - X[:, 1, :]          # (N+1, nw) spring-angle sensitivities

    rows_c = []
    rows_G = []

    # spring angle, both signs, all nodes
    for sgn in (1.0, -1.0):
        c = sgn * phi - p.phi_b - eps1
        G = sgn * Sx.copy()
        G[:, N + 1] -= 1.0
        rows_c.append(c)
        rows_G.append(G)

    # terminal rows, both signs, hammer and spindle targets
    t_res = np.array(
        [x_seq[N, 0] - nlp.ref.phi_h_ref, x_seq[N, 1] - nlp.ref.phi_s_ref]
    )
    for k in (0, 1):
        for sgn in (1.0, -1.0):
            c = np.array([sgn * t_res[k] - eps2])
            G = sgn * X[N, k, :].reshape(1, nw)
            G = G.copy()
            G[0, N + 2] -= 1.0
            rows_c.append(c)
            rows_G.append(G)

    n_nonlin = 2 * (N + 1) + 4

    # input bounds
    eye_u = np.zeros((N, nw))
    eye_u[:, :N] = np.eye(N)
    rows_c.append(u_seq - p.u_max)
    rows_G.append(eye_u)
    rows_c.append(p.u_min - u_seq)
    rows_G.append(-eye_u)

    # step-size bounds on tau = t_s / ts_max
    g_tau = np.zeros((1, nw))
    g_tau[0, N] = 1.0
    rows_c.append(np.array([tau - 1.0]))
    rows_G.append(g_tau)
    rows_c.append(np.array([p.ts_min / p.ts_max - tau]))
    rows_G.append(-g_tau)

    # slack nonnegativity
    for col, val in ((N + 1, eps1), (N + 2, eps2)):
        g = np.zeros((1, nw))
        g[0, col] = -1.0
        rows_c.append(np.array([-val]))
        rows_G.append(g)

    c = np.concatenate(rows_c)
    G = np.vstack(rows_G)
    nonlin = np.zeros(len(c), dtype=bool)
    nonlin[:n_nonlin] = True
    return c, G, nonlin


def _nonlin_values(nlp: Nlp, phi_t, t_res_t, w_t, p) -> np.ndarray:
    """Nonlinear (spring/terminal) constraint values at a trial point,
    padded with zeros on the linear rows to match the row layout of
    _constraints."""
    N = nlp.N
    e1_t, e2_t = w_t[N + 1], w_t[N + 2]
    m = 2 * (N + 1) + 4 + 2 * N + 4
    c = np.zeros(m)
    c[: N + 1] = phi_t - p.phi_b - e1_t
    c[N + 1: 2 * (N + 1)] = -phi_t - p.phi_b - e1_t
    base = 2 * (N + 1)
    c[base + 0] = t_res_t[0] - e2_t
    c[base + 1] = -t_res_t[0] - e2_t
    c[base + 2] = t_res_t[1] - e2_t
    c[base + 3] = -t_res_t[1] - e2_t
    return c


def _objective_reduced(nlp: Nlp, u_seq, eps1, eps2) -> float:
    p = nlp.p
    du = np.diff(u_seq)
    return float(
        p.lambda_u * (u_seq[0] - nlp.u_prev) ** 2
        + p.lambda_u * np.sum(du**2)
        + p.lambda_eps1 * eps1
        + p.lambda_eps2 * eps2**2
    )


def _gradient_reduced(nlp: Nlp, u_seq, eps2) -> np.ndarray:
    p = nlp.p
    N = nlp.N
    g = np.zeros(N + 3)
    g[0] = 2 * p.lambda_u * (u_seq[0] - nlp.u_prev)
    du = np.diff(u_seq)
    g[:N][:-1] -= 2 * p.lambda_u * du
    g[:N][1:] += 2 * p.lambda_u * du
    g[N + 1] = p.lambda_eps1
    g[N + 2] = 2 * p.lambda_eps2 * eps2
    return g


def _objective_hessian(nlp: Nlp) -> np.ndarray:
    """Exact Hessian of the (purely input/slack) objective, plus small
    diagonal regularization so the QP model is positive definite."""
    p = nlp.p
    N = nlp.N
    H = np.zeros((N + 3, N + 3))
    d = np.full(N, 4 * p.lambda_u)
    d[-1] = 2 * p.lambda_u
    H[:N, :N] = np.diag(d)
    off = np.full(N - 1, -2 * p.lambda_u)
    H[:N, :N] += np.diag(off, 1) + np.diag(off, -1)
    H[N, N] = 10.0          # tau direction: curvature comes from BFGS
    H[N + 1, N + 1] = 1e-2  # eps1 enters linearly everywhere
    H[N + 2, N + 2] = 2 * p.lambda_eps2
    return H


def _initial_guess(nlp: Nlp, warm: MpcSolution | None):
    p = nlp.p
    N = nlp.N
    if warm is not None:
        u = np.clip(warm.u_seq, p.u_min, p.u_max)
        tau = np.clip(warm.t_s_star / p.ts_max, p.ts_min / p.ts_max, 1.0)
    else:
        u, tau = _soft_catch_seed(nlp)
    x_seq = nlp.rollout(u, tau * p.ts_max)
    phi = x_seq[:, 0] - x_seq[:, 1]
    eps1 = max(0.0, float(np.max(np.abs(phi))) - p.phi_b) + 1e-12
    t_res = max(
        abs(x_seq[N, 0] - nlp.ref.phi_h_ref), abs(x_seq[N, 1] - nlp.ref.phi_s_ref)
    )
    eps2 = t_res + 1e-12
    if warm is not None:
        eps1 = max(eps1, warm.eps1)
        eps2 = max(eps2, warm.eps2)
    return u, float(tau), eps1, eps2


def _soft_catch_seed(nlp: Nlp):
    """Cold-start profile search for a gentle rendezvous.

    Torque during spring wind-up pumps the relative oscillation; torque
    during unwind feeds momentum while draining it.  Over a small grid of
    (duty, step size), score rollouts by how closely the spring
    trajectory's own minimum lands on the terminal pair, so the seed
    catches near the turning point instead of mid-release.
    """
    p = nlp.p
    N = nlp.N
    coast = nlp.rollout(np.zeros(N), 0.85 * p.ts_max)
    unwind = (coast[:-1, 2] - coast[:-1, 3]) < -10.0

    best = None
    for duty in (0.25, 0.45, 0.65, 0.85):
        u_c = np.where(unwind, duty * p.u_min, 0.15 * p.u_min)
        for tau_c in (0.55, 0.7, 0.85, 1.0):
            x = nlp.rollout(u_c, tau_c * p.ts_max)
            phi = x[:, 0] - x[:, 1]
            i0 = min(4, N - 1)  # skip the immediate post-impact transient
            i_min = i0 + int(np.argmin(phi[i0:]))
            miss = (x[i_min, 0] - nlp.ref.phi_h_ref) ** 2
            miss += (phi[i_min] - (nlp.ref.phi_h_ref - nlp.ref.phi_s_ref)) ** 2
            miss += 0.1 * max(0.0, np.max(np.abs(phi)) - p.phi_b) ** 2
            if best is None or miss < best[0]:
                best = (miss, u_c, tau_c)
    return best[1], float(best[2])


def build_nlp(problem: MpcProblem, x_hat: np.ndarray, u_prev: float,
              ref: ImpactReference) -> Nlp:
    return Nlp(problem, x_hat, u_prev, ref)


def solve(nlp: Nlp, warm_start: MpcSolution | None = None) -> MpcSolution:
    """SQP iteration on the condensed problem.

    Damped-BFGS quadratic model, dense active-set QP subproblem,
    l1-merit backtracking line search; terminates at KKT infinity-norm
    <= kkt_tol or max_iter.
    """
    t0 = time.perf_counter()
    p = nlp.p
    N = nlp.N
    nw = N + 3

    u, tau, eps1, eps2 = _initial_guess(nlp, warm_start)
    if (
        warm_start is not None
        and warm_start.hessian is not None
        and warm_start.status == OPTIMAL
    ):
        B = warm_start.hessian.copy()
    else:
        B = _objective_hessian(nlp)
    rho = 2.0 * p.lambda_eps1
    pending = None  # (s, mu, grad_L_old)

    best = None
    kkt = np.inf
    it = 0
    status = MAX_ITER
    mu = np.zeros(1)
    small_steps = 0      # consecutive heavily-backtracked steps
    stalled_once = False

    while it < p.max_iter:
        it += 1
        x_seq, X = nlp.rollout_sens(u, tau * p.ts_max)
        if not np.all(np.isfinite(x_seq)):
            status = INFEASIBLE
            break
        c, G, nonlin = _constraints(nlp, x_seq, X, u, tau, eps1, eps2)
        grad = _gradient_reduced(nlp, u, eps2)

        if pending is not None:
            s, mu_old, grad_L_old = pending
            y = grad + G.T @ mu_old - grad_L_old
            sBs = float(s @ B @ s)
            sy = float(s @ y)
            if sBs > 1e-14:
                if sy < 0.2 * sBs:
                    th = 0.8 * sBs / (sBs - sy)
                    y = th * y + (1 - th) * (B @ s)
                    sy = float(s @ y)
                if sy > 1e-14:
                    Bs = B @ s
                    B = B - np.outer(Bs, Bs) / sBs + np.outer(y, y) / sy
            pending = None

        # feasible step for the QP: clamp the bound variables, then lift slacks
        w = np.concatenate([u, [tau, eps1, eps2]])
        d0 = np.zeros(nw)
        d0[:N] = np.clip(u, p.u_min, p.u_max) - u
        d0[N] = np.clip(tau, p.ts_min / p.ts_max, 1.0) - tau
        lin_pred = c + G @ d0
        spring_need = float(np.max(lin_pred[: 2 * (N + 1)]))
        term_need = float(np.max(lin_pred[2 * (N + 1): 2 * (N + 1) + 4]))
        d0[N + 1] = max(spring_need, -eps1, 0.0) + 1e-12
        d0[N + 2] = max(term_need, -eps2, 0.0) + 1e-12

        res = solve_qp(B, grad, G, -c, d0)
        d, mu = res.w, res.multipliers

        stat = float(np.max(np.abs(grad + G.T @ mu)))
        feas = float(max(0.0, np.max(c)))
        comp = float(np.max(np.abs(mu * c))) if len(mu) else 0.0
        kkt = max(stat, feas, comp)
        J = _objective_reduced(nlp, u, eps1, eps2)
        merit = J + rho * float(np.sum(np.maximum(c[nonlin], 0.0)))
        if best is None or merit < best[0]:
            best = (merit, u.copy(), tau, eps1, eps2, kkt)
        if kkt <= p.kkt_tol:
            status = OPTIMAL
            break
        if it == 40 and kkt > 1e-3 and not stalled_once:
            # far from optimality after many iterations: curvature is
            # likely poisoned, rebuild it once
            stalled_once = True
            B = _objective_hessian(nlp)
            pending = None

        rho = max(rho, 1.5 * float(np.max(mu, initial=0.0)) + 1.0)
        viol = float(np.sum(np.maximum(c[nonlin], 0.0)))
        D = float(grad @ d) - rho * viol
        merit0 = J + rho * viol

        def merit_at(w_trial):
            u_t, tau_t = w_trial[:N], w_trial[N]
            e1_t, e2_t = w_trial[N + 1], w_trial[N + 2]
            x_t = nlp.rollout(u_t, tau_t * p.ts_max)
            phi_t = x_t[:, 0] - x_t[:, 1]
            v = np.sum(np.maximum(np.abs(phi_t) - p.phi_b - e1_t, 0.0))
            t_res_t = np.array(
                [x_t[N, 0] - nlp.ref.phi_h_ref, x_t[N, 1] - nlp.ref.phi_s_ref]
            )
            v += np.sum(np.maximum(np.abs(t_res_t) - e2_t, 0.0))
            m = _objective_reduced(nlp, u_t, e1_t, e2_t) + rho * float(v)
            return m, phi_t, t_res_t

        w0 = np.concatenate([u, [tau, eps1, eps2]])
        alpha = 1.0
        accepted = False
        w_acc = None
        for trial in range(25):
            w_t = w0 + alpha * d
            merit_t, phi_t, t_res_t = merit_at(w_t)
            if merit_t <= merit0 + 1e-4 * alpha * min(D, 0.0) + 1e-12:
                accepted = True
                w_acc = w_t
                break
            if trial == 0:
                # second-order correction: cancel the curvature-induced
                # violation on the active nonlinear rows (Maratos guard)
                c_t = _nonlin_values(nlp, phi_t, t_res_t, w_t, p)
                act = (mu > 1e-9) & nonlin
                if np.any(act):
                    dc, *_ = np.linalg.lstsq(G[act], -c_t[act], rcond=None)
                    w_soc = w_t + dc
                    merit_s, _, _ = merit_at(w_soc)
                    if merit_s <= merit0 + 1e-4 * min(D, 0.0) + 1e-12:
                        accepted = True
                        w_acc = w_soc
                        d = w_soc - w0  # keep BFGS pair consistent
                        break
            alpha *= 0.5
        if not accepted:
            # stalled line search: retry once with fresh curvature
            if not stalled_once:
                stalled_once = True
                B = _objective_hessian(nlp)
                pending = None
                small_steps = 0
                continue
            break  # fall through with best iterate

        small_steps = small_steps + 1 if alpha <= 0.25 else 0
        if small_steps >= 2:
            B = _objective_hessian(nlp)
            small_steps = 0
            pending = None
        else:
            pending = (w_acc - w0, mu, grad + G.T @ mu)
        u, tau = w_acc[:N], float(w_acc[N])
        eps1, eps2 = float(w_acc[N + 1]), float(w_acc[N + 2])

    if status != OPTIMAL and best is not None and status != INFEASIBLE:
        _, u, tau, eps1, eps2, kkt = best

    x_seq = nlp.rollout(u, tau * p.ts_max)
    return MpcSolution(
        u_seq=np.clip(u, p.u_min, p.u_max),
        x_seq=x_seq,
        t_s_star=tau * p.ts_max,
        eps1=max(eps1, 0.0),
        eps2=max(eps2, 0.0),
        kkt_residual=kkt,
        iterations=it,
        solve_time=time.perf_counter() - t0,
        status=status,
        hessian=B,
    )


@dataclass
class TickState:
    """Cross-tick controller memory: applied-input history for the
    near-impact moving average, plus the warm-start solution."""

    window: int = 5
    fallback_horizon: float = 2e-3   # [s]
    history: deque = field(default_factory=lambda: deque(maxlen=64))
    prev_solution: MpcSolution | None = None
    prev_ref_value: float | None = None

    def note_reference_update(self):
        self.prev_solution = None
        self.prev_ref_value = None


def control_tick(problem: MpcProblem, x_hat: np.ndarray, ref: ImpactReference,
                 u_prev: float, tick: TickState):
    """One 1 ms control decision.

    If the previous solve (against the same, still-stale reference)
    predicts impact within the fallback horizon, apply the moving average
    of the last `window` applied inputs instead of re-solving.
    """
    prev = tick.prev_solution
    stale = tick.prev_ref_value is not None and tick.prev_ref_value == ref.phi_h_ref
    if (
        prev is not None
        and stale
        and problem.horizon * prev.t_s_star <= tick.fallback_horizon
        and len(tick.history) > 0
    ):
        hist = list(tick.history)[-tick.window:]
        u_apply = float(np.mean(hist))
        diag = {
            "fallback": True,
            "status": prev.status,
            "iterations": 0,
            "kkt": prev.kkt_residual,
            "solve_time": 0.0,
            "eps1": prev.eps1,
            "eps2": prev.eps2,
        }
        tick.history.append(u_apply)
        return u_apply, prev.t_s_star, diag

    warm = prev.shifted() if (prev is not None and stale) else None
    sol = solve(build_nlp(problem, x_hat, u_prev, ref), warm_start=warm)
    u_apply = float(sol.u_seq[0])
    tick.prev_solution = sol
    tick.prev_ref_value = ref.phi_h_ref
    tick.history.append(u_apply)
    diag = {
        "fallback": False,
        "status": sol.status,
        "iterations": sol.iterations,
        "kkt": sol.kkt_residual,
        "solve_time": sol.solve_time,
        "eps1": sol.eps1,
        "eps2": sol.eps2,
    }
    return u_apply, sol.t_s_star, diag
