"""Offline identification from sensor records.

Two stages: least-squares estimation of the physical parameters from
filtered spindle accelerations, then Gaussian-process regression of the
residual spindle acceleration on (spring angle, spring velocity, torque),
with an active-learning subset to keep the inducing set small enough for
microsecond mean evaluation inside MPC rollouts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import signal
from scipy.cluster.vq import kmeans2
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize

from impactmpc.dynamics import MechConstants, ThetaParams

TICK_DT = 1e-3


class RecordTooShort(RuntimeError):
    pass


class RankDeficient(RuntimeError):
    pass


class IllConditioned(RuntimeError):
    pass


@dataclass
class SensorRecord:
    """Column-wise 1 kHz sensor log with impact tick indices."""

    t: np.ndarray
    motor_angle: np.ndarray
    hammer_angle: np.ndarray
    u: np.ndarray
    impact_ticks: np.ndarray

    @classmethod
    def from_samples(cls, samples, impact_ticks) -> "SensorRecord":
        return cls(
            t=np.array([s.t for s in samples]),
            motor_angle=np.array([s.motor_angle_meas for s in samples]),
            hammer_angle=np.array([s.hammer_angle_meas for s in samples]),
            u=np.array([s.u for s in samples]),
            impact_ticks=np.asarray(impact_ticks, dtype=int),
        )

    def __len__(self):
        return len(self.t)


def _zero_phase_lowpass(x: np.ndarray, cutoff_hz: float, fs: float) -> np.ndarray:
    sos = signal.butter(2, cutoff_hz / (fs / 2), output="sos")
    return signal.sosfiltfilt(sos, x)


def _central_velocity(angle: np.ndarray, dt: float) -> np.ndarray:
    v = np.gradient(angle, dt)
    return v


def estimate_acceleration(record: SensorRecord, cutoff_hz: float = 150.0,
                          drop_ticks: int = 3):
    """Spindle acceleration from double central differences plus a
    zero-phase second-order low-pass.

    Returns (accel, valid): samples within drop_ticks of an impact, and
    the record edges, are marked invalid.  Raises RecordTooShort when an
    impact-to-impact segment has fewer than 10 samples.
    """
    n = len(record)
    if n < 20:
        raise RecordTooShort(f"record has only {n} samples")
    bounds = np.concatenate([[0], np.sort(record.impact_ticks), [n]])
    seg_lengths = np.diff(bounds)
    if np.any(seg_lengths[1:-1] < 10) if len(seg_lengths) > 2 else False:
        raise RecordTooShort("fewer than 10 samples between impacts")

    dt = TICK_DT
    phi = record.motor_angle
    acc_raw = np.zeros(n)
    acc_raw[1:-1] = (phi[2:] - 2 * phi[1:-1] + phi[:-2]) / dt**2
    acc = _zero_phase_lowpass(acc_raw, cutoff_hz, 1.0 / dt)

    valid = np.ones(n, dtype=bool)
    valid[:2] = valid[-2:] = False
    for k in record.impact_ticks:
        lo = max(0, k - drop_ticks)
        hi = min(n, k + drop_ticks + 1)
        valid[lo:hi] = False
    return acc, valid


@dataclass
class RegressionDataset:
    """Measured spindle-acceleration regression rows.

    rows[:, :3] are the free-parameter channels of the spindle regressor
    row, rows[:, 3] is the constant bias channel (1).  features are the
    residual-model inputs [phi_spring, dphi_spring, u].
    """

    rows: np.ndarray       # (K, 4)
    targets: np.ndarray    # (K,) measured spindle acceleration
    features: np.ndarray   # (K, 3)

    def __len__(self):
        return len(self.targets)


def build_dataset(record: SensorRecord, mech: MechConstants,
                  cutoff_hz: float = 150.0, drop_ticks: int = 3) -> RegressionDataset:
    """Assemble the regression problem from one sensor record.

    The double central difference smooths the true acceleration with a
    one-tick triangular kernel, so the regressor columns receive the same
    triangle plus the same zero-phase low-pass; the regression equation is
    linear in theta pointwise, and matched filtering keeps it unbiased.
    The torque column uses the half-tick convention (u is held constant
    over [t_k, t_k+1)), so its triangle average is (u[k-1] + u[k]) / 2.
    """
    acc, valid = estimate_acceleration(record, cutoff_hz, drop_ticks)
    dt = TICK_DT
    fs = 1.0 / dt
    v_s = _zero_phase_lowpass(_central_velocity(record.motor_angle, dt), cutoff_hz, fs)
    v_h = _zero_phase_lowpass(_central_velocity(record.hammer_angle, dt), cutoff_hz, fs)
    phi = record.hammer_angle - record.motor_angle
    c = mech.cam_lead
    s = np.tanh(phi / mech.eps_sign)

    u_tri = record.u.copy()
    u_tri[1:] = 0.5 * (record.u[:-1] + record.u[1:])
    cols = [
        u_tri / mech.j_s,
        _triangle(s) * (c / mech.j_s),
        _triangle(phi) * (c * c / mech.j_s),
        np.ones(len(record)),
    ]
    rows = np.column_stack([_zero_phase_lowpass(col, cutoff_hz, fs) for col in cols])
    feats = np.column_stack([phi, v_h - v_s, record.u])
    if valid.sum() < 4:
        raise RecordTooShort("fewer than 4 usable samples")
    return RegressionDataset(rows[valid], acc[valid], feats[valid])


def _triangle(x: np.ndarray) -> np.ndarray:
    out = x.copy()
    out[1:-1] = 0.25 * (x[:-2] + 2 * x[1:-1] + x[2:])
    return out


@dataclass(frozen=True)
class IdentReport:
    theta: ThetaParams
    spindle_bias: float       # identified constant bias [rad/s^2]
    condition_number: float
    residual_rms: float
    n_samples: int


def identify_theta(dataset: RegressionDataset,
                   max_condition: float = 1e10) -> IdentReport:
    """Least squares for [lambda, k_f x0, k_f] plus the spindle bias.

    The fourth parameter entry stays pinned to 1; the bias channel
    coefficient is identified on the spindle equation only and reported
    separately.  Raises RankDeficient when the free-parameter columns are
    effectively dependent.
    """
    if len(dataset) < 4:
        raise RankDeficient("need at least 4 samples")
    A = dataset.rows
    sub = A[:, :3]
    scale = np.linalg.norm(sub, axis=0)
    if np.any(scale == 0.0):
        raise RankDeficient("unexcited parameter channel (zero column)")
    cond = np.linalg.cond(sub / scale)
    if not np.isfinite(cond) or cond > max_condition:
        raise RankDeficient(f"condition number {cond:.3e}")
    sol, *_ = np.linalg.lstsq(A, dataset.targets, rcond=None)
    resid = dataset.targets - A @ sol
    theta = ThetaParams(float(sol[0]), float(sol[1]), float(sol[2]))
    return IdentReport(
        theta=theta,
        spindle_bias=float(sol[3]),
        condition_number=float(cond),
        residual_rms=float(np.sqrt(np.mean(resid**2))),
        n_samples=len(dataset),
    )


def gp_training_targets(dataset: RegressionDataset, theta: ThetaParams,
                        spindle_bias: float = 0.0) -> np.ndarray:
    """Residuals of the identified nominal model on the spindle channel."""
    th = np.array([theta.lambda_gain, theta.spring_preload,
                   theta.spring_stiffness, spindle_bias])
    return dataset.targets - dataset.rows @ th


# ---------------------------------------------------------------------------
# Gaussian-process residual model


def _sq_dists(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Pairwise squared distances between row sets (already lengthscaled)."""
    return (
        np.sum(A**2, axis=1)[:, None]
        + np.sum(B**2, axis=1)[None, :]
        - 2.0 * A @ B.T
    )


class GpModel:
    """Squared-exponential GP with per-dimension lengthscales.

    Inputs are normalized per dimension with the stored statistics; the
    prior mean is zero, so predictions revert to zero far from the data.
    """

    def __init__(self, Z: np.ndarray, y: np.ndarray, sigma_f2: float,
                 lengthscales: np.ndarray, sigma_n2: float,
                 norm_mu: np.ndarray, norm_sd: np.ndarray):
        self.Z = np.asarray(Z, dtype=float)          # normalized inducing inputs
        self.y = np.asarray(y, dtype=float)
        self.sigma_f2 = float(sigma_f2)
        self.lengthscales = np.asarray(lengthscales, dtype=float)
        self.sigma_n2 = float(sigma_n2)
        self.norm_mu = np.asarray(norm_mu, dtype=float)
        self.norm_sd = np.asarray(norm_sd, dtype=float)
        self._factorize()

    def _factorize(self):
        n = len(self.Z)
        K = self.kernel(self.Z, self.Z)
        jitter = 0.0
        while True:
            try:
                self._L = np.linalg.cholesky(
                    K + (self.sigma_n2 + jitter) * np.eye(n)
                )
                break
            except np.linalg.LinAlgError:
                jitter = max(2 * jitter, 1e-10)
                if jitter > 1e-6:
                    raise IllConditioned(
                        "kernel matrix not positive definite after jitter"
                    )
        tmp = solve_triangular(self._L, self.y, lower=True)
        self.alpha = solve_triangular(self._L.T, tmp, lower=False)
        # precompute scaled inducing inputs for fast mean evaluation
        self._Zs = self.Z / self.lengthscales

    def kernel(self, A: np.ndarray, B: np.ndarray) -> np.ndarray:
        d2 = _sq_dists(A / self.lengthscales, B / self.lengthscales)
        return self.sigma_f2 * np.exp(-0.5 * np.maximum(d2, 0.0))

    def _normalize(self, z: np.ndarray) -> np.ndarray:
        return (z - self.norm_mu) / self.norm_sd

    def mean(self, z: np.ndarray) -> float:
        zs = self._normalize(z) / self.lengthscales
        d2 = np.sum((self._Zs - zs) ** 2, axis=1)
        k = self.sigma_f2 * np.exp(-0.5 * d2)
        return float(k @ self.alpha)

    def mean_batch(self, Zq: np.ndarray) -> np.ndarray:
        Zn = (Zq - self.norm_mu) / self.norm_sd
        return self.kernel(Zn, self.Z) @ self.alpha

    def mean_grad(self, z: np.ndarray) -> np.ndarray:
        """d mean / d z in raw feature units."""
        zn = self._normalize(z)
        zs = zn / self.lengthscales
        diff = zs - self._Zs                      # (n, 3), lengthscaled
        k = self.sigma_f2 * np.exp(-0.5 * np.sum(diff**2, axis=1))
        grad_n = -(k * self.alpha) @ (diff / self.lengthscales)
        return grad_n / self.norm_sd

    def var_batch(self, Zq: np.ndarray) -> np.ndarray:
        Zn = (Zq - self.norm_mu) / self.norm_sd
        Kq = self.kernel(Zn, self.Z)
        V = solve_triangular(self._L, Kq.T, lower=True)
        return np.maximum(self.sigma_f2 - np.sum(V**2, axis=0), 0.0)

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": "gp-residual-v1",
            "inducing": self.Z.tolist(),
            "targets": self.y.tolist(),
            "sigma_f2": self.sigma_f2,
            "lengthscales": self.lengthscales.tolist(),
            "sigma_n2": self.sigma_n2,
            "norm_mu": self.norm_mu.tolist(),
            "norm_sd": self.norm_sd.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GpModel":
        if d.get("format") != "gp-residual-v1":
            raise ValueError(f"unknown GP format {d.get('format')!r}")
        return cls(
            np.array(d["inducing"]), np.array(d["targets"]), d["sigma_f2"],
            np.array(d["lengthscales"]), d["sigma_n2"],
            np.array(d["norm_mu"]), np.array(d["norm_sd"]),
        )


def log_marginal_likelihood(params_log: np.ndarray, Zn: np.ndarray,
                            y: np.ndarray, grad: bool = False):
    """LML of a zero-mean SE-ARD GP; params are log [sf2, l1..ld, sn2]."""
    n, dim = Zn.shape
    sf2 = math.exp(params_log[0])
    ls = np.exp(params_log[1:1 + dim])
    sn2 = math.exp(params_log[-1])
    Zs = Zn / ls
    d2 = _sq_dists(Zs, Zs)
    Kf = sf2 * np.exp(-0.5 * np.maximum(d2, 0.0))
    K = Kf + sn2 * np.eye(n)
    try:
        L = np.linalg.cholesky(K)
    except np.linalg.LinAlgError:
        if grad:
            return -np.inf, np.zeros_like(params_log)
        return -np.inf
    alpha = cho_solve((L, True), y)
    lml = -0.5 * y @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * n * math.log(2 * math.pi)
    if not grad:
        return float(lml)
    Kinv = cho_solve((L, True), np.eye(n))
    W = np.outer(alpha, alpha) - Kinv
    g = np.empty_like(params_log)
    g[0] = 0.5 * np.sum(W * Kf)                      # d/d log sf2
    for d in range(dim):
        diff2 = _sq_dists(Zn[:, [d]] / ls[d], Zn[:, [d]] / ls[d])
        dK = Kf * diff2                               # d/d log l_d
        g[1 + d] = 0.5 * np.sum(W * dK)
    g[-1] = 0.5 * sn2 * np.trace(W)                   # d/d log sn2
    return float(lml), g


def fit_gp(features: np.ndarray, targets: np.ndarray, seed: int = 0,
           restarts: int = 5, max_opt_iter: int = 200) -> GpModel:
    """Fit hyperparameters by multi-start gradient ascent of the LML.

    Bounds (normalized units): lengthscales in [1e-2, 1e2], noise
    variance in [1e-8, 1] relative to the target variance scale.
    """
    X = np.asarray(features, dtype=float)
    y = np.asarray(targets, dtype=float)
    if len(X) < 2:
        raise ValueError("need at least 2 samples")
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd < 1e-12] = 1.0
    Zn = (X - mu) / sd

    y_scale = max(float(np.std(y)), 1e-12)
    dim = X.shape[1]
    lo = np.log(np.concatenate([[1e-6 * y_scale**2], np.full(dim, 1e-2), [1e-8 * y_scale**2]]))
    hi = np.log(np.concatenate([[1e4 * y_scale**2], np.full(dim, 1e2), [1.0 * y_scale**2]]))
    bounds = list(zip(lo, hi))

    rng = np.random.default_rng(seed)
    best = None
    for r in range(restarts):
        if r == 0:
            p0 = np.log(np.concatenate([[y_scale**2], np.ones(dim), [1e-2 * y_scale**2]]))
        else:
            p0 = rng.uniform(lo, hi)
        p0 = np.clip(p0, lo, hi)
        f0 = log_marginal_likelihood(p0, Zn, y)

        def neg(p):
            v, g = log_marginal_likelihood(p, Zn, y, grad=True)
            return -v, -g

        res = minimize(neg, p0, jac=True, method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": max_opt_iter})
        lml = -res.fun if np.isfinite(res.fun) else -np.inf
        if lml < f0:      # never accept worse than the start
            lml, params = f0, p0
        else:
            params = res.x
        if best is None or lml > best[0]:
            best = (lml, params)

    _, p = best
    sf2 = math.exp(p[0])
    ls = np.exp(p[1:1 + dim])
    sn2 = math.exp(p[-1])
    return GpModel(Zn, y, sf2, ls, sn2, mu, sd)


def select_subset(features: np.ndarray, targets: np.ndarray, m: int,
                  seed: int = 0, sigma_n2: float = 1e-2) -> np.ndarray:
    """Greedy uncertainty sampling with cluster round-robin coverage.

    Features are clustered into ~sqrt(m) k-means groups; points are added
    one at a time by maximal GP posterior variance under the current
    subset, cycling through clusters so every region stays covered.
    Returns indices into the input arrays.
    """
    X = np.asarray(features, dtype=float)
    n = len(X)
    if m >= n:
        return np.arange(n)
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd < 1e-12] = 1.0
    Zn = (X - mu) / sd

    n_clusters = max(1, int(round(math.sqrt(m))))
    _, labels = kmeans2(Zn, n_clusters, minit="++", seed=seed)

    # unit prior kernel on normalized inputs
    k0 = 1.0
    var = np.full(n, k0)
    V = np.zeros((m, n))          # rows: L^{-1} k(S, .)
    L = np.zeros((m, m))
    chosen: list[int] = []
    chosen_mask = np.zeros(n, dtype=bool)

    def kvec(idx):
        d2 = np.sum((Zn - Zn[idx]) ** 2, axis=1)
        return np.exp(-0.5 * d2)

    cluster_order = np.argsort(-np.bincount(labels, minlength=n_clusters))
    ci = 0
    while len(chosen) < m:
        for _ in range(n_clusters):
            c = cluster_order[ci % n_clusters]
            ci += 1
            cand = np.flatnonzero((labels == c) & ~chosen_mask)
            if len(cand):
                break
        else:
            cand = np.flatnonzero(~chosen_mask)
        j = int(cand[np.argmax(var[cand])])
        t = len(chosen)
        kj = kvec(j)
        d = math.sqrt(max(k0 + sigma_n2 - np.sum(V[:t, j] ** 2), 1e-12))
        L[t, :t] = V[:t, j]
        L[t, t] = d
        V[t] = (kj - V[:t].T @ V[:t, j]) / d
        var = np.maximum(var - V[t] ** 2, 0.0)
        chosen.append(j)
        chosen_mask[j] = True
    return np.array(chosen, dtype=int)
