"""Nominal rigid-body model of the hammer/spindle pair.

State convention: x = [phi_h, phi_s, omega_h, omega_s] (rad, rad/s).
The spindle drives the hammer through a ball-and-cam coupling: the spring
angle phi = phi_h - phi_s lifts the hammer axially by cam_lead * |phi|,
compressing the preloaded spring.  The resulting relative torque is
cam_lead * k_f * (x0 + cam_lead*|phi|), with the sign discontinuity of
|phi| smoothed as tanh(phi/eps_sign) so the model stays differentiable
for the solver and the EKF.

Accelerations are linear in theta = [lambda, k_f*x0, k_f, 1]; the fourth
channel switches per-row constant biases (d_h, d_s) on, which keeps the
regressor form exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# state vector indices
PHI_H, PHI_S, OMEGA_H, OMEGA_S = 0, 1, 2, 3


@dataclass(frozen=True)
class MechConstants:
    """Fixed geometry and inertia of the mechanism.

    cam_lead is tied to the groove geometry: the angular bound phi_b maps
    onto the maximal axial hammer travel x_ham_max, so
    cam_lead = x_ham_max / phi_b.
    """

    j_h: float = 2e-4           # hammer inertia [kg m^2]
    j_s: float = 1e-4           # spindle-side inertia [kg m^2]
    phi_b: float = 2.11         # spring-angle bound [rad]
    x_ham_max: float = 0.012    # max hammer axial travel [m]
    eps_sign: float = 0.05      # sign-smoothing width [rad]
    d_h: float = 0.0            # hammer bias channel [rad/s^2]
    d_s: float = 0.0            # spindle bias channel [rad/s^2]

    def __post_init__(self):
        if self.eps_sign <= 0:
            raise ValueError("eps_sign must be positive")
        if self.j_h <= 0 or self.j_s <= 0:
            raise ValueError("inertias must be positive")

    @property
    def cam_lead(self) -> float:
        """Axial travel per relative radian [m/rad]."""
        return self.x_ham_max / self.phi_b


@dataclass(frozen=True)
class ThetaParams:
    """Parameter vector theta = [lambda, k_f*x0, k_f, 1].

    The fourth entry is pinned to 1 by convention; it only gates the
    constant bias channel of the regressor.
    """

    lambda_gain: float          # input torque gain [-]
    spring_preload: float       # k_f * x0 [N]
    spring_stiffness: float     # k_f [N/m]
    bias_unit: float = 1.0

    def __post_init__(self):
        if self.bias_unit != 1.0:
            raise ValueError("bias_unit is fixed at 1")
        if min(self.lambda_gain, self.spring_preload, self.spring_stiffness) <= 0:
            raise ValueError("free parameters must be positive")

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.lambda_gain, self.spring_preload, self.spring_stiffness, 1.0]
        )

    @classmethod
    def from_array(cls, theta: np.ndarray) -> "ThetaParams":
        return cls(float(theta[0]), float(theta[1]), float(theta[2]))


@dataclass(frozen=True)
class PlantState:
    """Typed view of the 4-state vector used at module boundaries."""

    phi_h: float
    phi_s: float
    omega_h: float
    omega_s: float

    def as_array(self) -> np.ndarray:
        return np.array([self.phi_h, self.phi_s, self.omega_h, self.omega_s])

    @classmethod
    def from_array(cls, x: np.ndarray) -> "PlantState":
        return cls(float(x[0]), float(x[1]), float(x[2]), float(x[3]))

    @property
    def phi_spring(self) -> float:
        return self.phi_h - self.phi_s


def spring_angle(x: np.ndarray) -> float:
    return float(x[PHI_H] - x[PHI_S])


def feature_vector(x: np.ndarray, u: float) -> np.ndarray:
    """Residual-model features z = [phi_spring, dphi_spring, u]."""
    return np.array([x[PHI_H] - x[PHI_S], x[OMEGA_H] - x[OMEGA_S], u])


def regressor(x: np.ndarray, u: float, mech: MechConstants) -> np.ndarray:
    """Regressor Phi(x,u), shape (4, 2), with [wdot_h, wdot_s] = Phi^T theta.

    Rows are the parameter channels [lambda, k_f*x0, k_f, 1]; columns are
    the hammer and spindle acceleration equations.
    """
    c = mech.cam_lead
    phi = x[PHI_H] - x[PHI_S]
    s = math.tanh(phi / mech.eps_sign)
    return np.array(
        [
            [0.0, u / mech.j_s],
            [-(c / mech.j_h) * s, (c / mech.j_s) * s],
            [-(c * c / mech.j_h) * phi, (c * c / mech.j_s) * phi],
            [mech.d_h, mech.d_s],
        ]
    )


def accelerations(x: np.ndarray, u: float, theta: np.ndarray, mech: MechConstants) -> np.ndarray:
    """[wdot_h, wdot_s] for the nominal model (no residual)."""
    return regressor(x, u, mech).T @ theta


def f_continuous(x: np.ndarray, u: float, theta: np.ndarray, mech: MechConstants) -> np.ndarray:
    """Nominal continuous-time derivative [w_h, w_s, wdot_h, wdot_s]."""
    acc = accelerations(x, u, theta, mech)
    return np.array([x[OMEGA_H], x[OMEGA_S], acc[0], acc[1]])


def step_euler(
    x: np.ndarray,
    u: float,
    theta: np.ndarray,
    mech: MechConstants,
    t_s: float,
    gp=None,
) -> np.ndarray:
    """One forward-Euler step x + t_s * (f(x,u) + g(z)).

    The residual g applies the GP mean to the omega_s row only; gp=None
    means g == 0.  `gp` is any object with a scalar `mean(z)` method.
    """
    dx = f_continuous(x, u, theta, mech)
    if gp is not None:
        dx = dx.copy()
        dx[OMEGA_S] += gp.mean(feature_vector(x, u))
    return x + t_s * dx


def jacobians(
    x: np.ndarray,
    u: float,
    theta: np.ndarray,
    mech: MechConstants,
    t_s: float,
    gp=None,
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic Jacobians (A, B) of step_euler w.r.t. state and input.

    A is 4x4, B is 4x1.  The GP mean enters through its analytic gradient
    in feature space (z = [phi_spring, dphi_spring, u]), mapped back
    through dz/dx and dz/du.
    """
    c = mech.cam_lead
    phi = x[PHI_H] - x[PHI_S]
    th = math.tanh(phi / mech.eps_sign)
    ds = (1.0 - th * th) / mech.eps_sign  # d tanh(phi/eps) / d phi

    # d wdot_h / d phi and d wdot_s / d phi (phi = phi_h - phi_s)
    dwh_dphi = -(c / mech.j_h) * (ds * theta[1] + c * theta[2])
    dws_dphi = (c / mech.j_s) * (ds * theta[1] + c * theta[2])

    dfdx = np.zeros((4, 4))
    dfdx[PHI_H, OMEGA_H] = 1.0
    dfdx[PHI_S, OMEGA_S] = 1.0
    dfdx[OMEGA_H, PHI_H] = dwh_dphi
    dfdx[OMEGA_H, PHI_S] = -dwh_dphi
    dfdx[OMEGA_S, PHI_H] = dws_dphi
    dfdx[OMEGA_S, PHI_S] = -dws_dphi

    dfdu = np.zeros(4)
    dfdu[OMEGA_S] = theta[0] / mech.j_s

    if gp is not None:
        g = gp.mean_grad(feature_vector(x, u))  # d mu / d [phi, dphi, u]
        dfdx[OMEGA_S, PHI_H] += g[0]
        dfdx[OMEGA_S, PHI_S] -= g[0]
        dfdx[OMEGA_S, OMEGA_H] += g[1]
        dfdx[OMEGA_S, OMEGA_S] -= g[1]
        dfdu[OMEGA_S] += g[2]

    A = np.eye(4) + t_s * dfdx
    B = (t_s * dfdu).reshape(4, 1)
    return A, B


def spring_potential(phi: float, theta: np.ndarray, mech: MechConstants) -> float:
    """Stored spring energy 0.5 * k_f * (x0 + cam_lead*|phi|)^2 [J].

    Uses the physical |phi| compression, not the tanh smoothing; away from
    the smoothing layer (|phi| >> eps_sign) the two agree up to a constant.
    """
    k_f = theta[2]
    x0 = theta[1] / k_f
    stretch = x0 + mech.cam_lead * abs(phi)
    return 0.5 * k_f * stretch * stretch


def total_energy(x: np.ndarray, theta: np.ndarray, mech: MechConstants) -> float:
    """Kinetic plus spring potential energy of the model state."""
    kin = 0.5 * mech.j_h * x[OMEGA_H] ** 2 + 0.5 * mech.j_s * x[OMEGA_S] ** 2
    return kin + spring_potential(x[PHI_H] - x[PHI_S], theta, mech)
