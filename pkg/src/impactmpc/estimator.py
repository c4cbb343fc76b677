"""EKF state estimation, impact detection, and reference management.

The filter runs on the GP-augmented discrete model (same prediction model
as the MPC).  Measurements are the two angle channels on the 1 ms grid.
Impacts are detected from finite-differenced hammer-angle measurements,
gated to a window around the expected impact angle; each detection
updates the terminal reference and the anvil-advance estimate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from impactmpc.dynamics import MechConstants, jacobians, step_euler
from impactmpc.mpc import ImpactReference

H_MEAS = np.array([[1.0, 0.0, 0.0, 0.0],
                   [0.0, 1.0, 0.0, 0.0]])  # hammer angle row first


@dataclass
class EkfBelief:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.cov = 0.5 * (self.cov + self.cov.T)


@dataclass(frozen=True)
class EkfConfig:
    q_diag: tuple = (1e-8, 1e-8, 10.0, 10.0)
    r_diag: tuple = (1e-6, 1e-6)
    jump_threshold: float = 80.0      # [rad/s] per tick
    gate_angle: float = 0.3           # [rad] around the expected impact angle
    cov_inflation: float = 100.0      # on the omega_h entry after an impact
    phi_ap_ema: float = 0.3
    phi_ap_init: float = 0.075        # prior mean of the advance distribution
    tick_dt: float = 1e-3


def ekf_step(belief: EkfBelief, u_applied: float, measurement: np.ndarray,
             theta: np.ndarray, mech: MechConstants, cfg: EkfConfig,
             gp=None) -> EkfBelief:
    """One predict/update cycle on the 1 ms grid.

    measurement = [hammer angle, spindle angle].  Joseph-form covariance
    update keeps P symmetric positive semidefinite.
    """
    Q = np.diag(cfg.q_diag)
    R = np.diag(cfg.r_diag)

    A, _ = jacobians(belief.mean, u_applied, theta, mech, cfg.tick_dt, gp=gp)
    x_pred = step_euler(belief.mean, u_applied, theta, mech, cfg.tick_dt, gp=gp)
    P_pred = A @ belief.cov @ A.T + Q

    y = np.asarray(measurement) - H_MEAS @ x_pred
    S = H_MEAS @ P_pred @ H_MEAS.T + R
    K = P_pred @ H_MEAS.T @ np.linalg.solve(S, np.eye(2))
    x_new = x_pred + K @ y
    IKH = np.eye(4) - K @ H_MEAS
    P_new = IKH @ P_pred @ IKH.T + K @ R @ K.T
    return EkfBelief(x_new, P_new)


@dataclass(frozen=True)
class ImpactDetection:
    tick: int
    hammer_angle: float    # crossing-interpolated impact angle estimate
    velocity_jump: float


@dataclass
class ImpactMonitor:
    """Detects hammer-anvil impacts from measured hammer angles."""

    cfg: EkfConfig
    _angles: list = field(default_factory=list)
    _tick: int = 0

    def update(self, hammer_angle_meas: float, phi_h_ref: float):
        """Feed one measurement; returns an ImpactDetection or None."""
        self._angles.append(float(hammer_angle_meas))
        self._tick += 1
        if len(self._angles) < 3:
            return None
        a = self._angles
        dt = self.cfg.tick_dt
        v_prev = (a[-2] - a[-3]) / dt
        v_now = (a[-1] - a[-2]) / dt
        jump = v_now - v_prev
        reversed_sign = v_prev < 0.0 < v_now
        if not (reversed_sign or abs(jump) > self.cfg.jump_threshold):
            return None
        if abs(a[-2] - phi_h_ref) > self.cfg.gate_angle:
            return None
        # the crossing lies between the last two ticks; intersect the
        # pre- and post-impact linear segments for the impact angle
        denom = v_prev - v_now
        if abs(denom) > 1e-9:
            tau = (a[-1] - a[-2] - v_now * dt) / denom
            tau = min(max(tau, 0.0), dt)
        else:
            tau = 0.0
        angle = a[-2] + v_prev * tau
        det = ImpactDetection(self._tick - 1, angle, jump)
        self._angles = self._angles[-2:]
        return det


def inflate_after_impact(belief: EkfBelief, cfg: EkfConfig,
                         nominal_cor: float = 0.3) -> EkfBelief:
    """Hammer velocity is reset by an unknown restitution; re-seed the
    estimate with a nominal flip and widen that covariance entry."""
    mean = belief.mean.copy()
    if mean[2] < 0:
        mean[2] = -nominal_cor * mean[2]
    P = belief.cov.copy()
    P[2, 2] *= cfg.cov_inflation
    return EkfBelief(mean, P)


@dataclass
class ReferenceManager:
    """Tracks the terminal reference and the anvil-advance EMA."""

    cfg: EkfConfig
    spring_at_impact: float = 0.2
    phi_ap_est: float = None
    reference: ImpactReference = None

    def __post_init__(self):
        if self.phi_ap_est is None:
            self.phi_ap_est = self.cfg.phi_ap_init

    def start(self, phi_h_impact: float) -> ImpactReference:
        self.reference = ImpactReference.from_impact(
            phi_h_impact, self.phi_ap_est, self.spring_at_impact
        )
        return self.reference

    def update(self, detected_angle: float) -> ImpactReference:
        """EMA on the observed advancement, then advance the reference."""
        if self.reference is not None:
            observed = detected_angle - (
                self.reference.phi_h_prev_impact - math.pi
            )
            w = self.cfg.phi_ap_ema
            # a pass-over cycle leaves the detected angle ~pi below the
            # anchor; fold it back before updating the advance estimate
            while observed < -math.pi / 2:
                observed += math.pi
            self.phi_ap_est = (1.0 - w) * self.phi_ap_est + w * observed
        return self.start(detected_angle)

    def advance_on_miss(self) -> ImpactReference:
        """The hammer passed the reference without engaging (lug rode
        over); the next engagement chance is the opposite lug, half a
        turn further on."""
        self.reference = ImpactReference.from_impact(
            self.reference.phi_h_prev_impact - math.pi,
            self.phi_ap_est,
            self.spring_at_impact,
        )
        return self.reference
