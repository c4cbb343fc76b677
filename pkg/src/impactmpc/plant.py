"""Ground-truth hybrid simulator for the impact-wrench plant.

Continuous dynamics (nominal model + injected unmodeled residual on the
spindle) are integrated with RK4 at a 0.05 ms inner sub-step between
1 ms control ticks; the controller-side model stays forward Euler, so
plant truth is independent of the controller discretization.

Hammer-anvil engagement is a hybrid event: when the hammer angle crosses
the anvil-lug angle while rotating in the operating (negative) direction,
the event time is localized by bisection, the hammer velocity is reset
through a coefficient of restitution, and the anvil advances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from impactmpc.dynamics import MechConstants, f_continuous

TICK_DT = 1e-3


class TimeoutNoImpact(RuntimeError):
    """No hammer-anvil engagement within the configured horizon."""


@dataclass(frozen=True)
class ResidualSpec:
    """Injected unmodeled spindle effects (the plant-model mismatch)."""

    viscous_s: float = 1.25e-4   # [N m s/rad]
    coulomb_s: float = 0.01     # [N m]
    torque_sag: float = 0.06    # [1/(N m)] quadratic input nonlinearity

    def __post_init__(self):
        if min(self.viscous_s, self.coulomb_s, self.torque_sag) < 0:
            raise ValueError("residual coefficients must be nonnegative")

    @classmethod
    def none(cls) -> "ResidualSpec":
        return cls(0.0, 0.0, 0.0)


@dataclass(frozen=True)
class ImpactEvent:
    time: float
    hammer_angle_at_impact: float
    pre_impact_omega_h: float
    post_impact_omega_h: float
    cor: float
    anvil_advance: float

    def __post_init__(self):
        if not 0.0 <= self.cor <= 1.0:
            raise ValueError("restitution coefficient outside [0, 1]")
        if self.anvil_advance < 0.0:
            raise ValueError("anvil advance must be nonnegative")


@dataclass(frozen=True)
class SensorSample:
    t: float
    motor_angle_meas: float    # spindle angle through the (unit) gear ratio
    hammer_angle_meas: float
    u: float


def inject_residual(x: np.ndarray, u: float, spec: ResidualSpec,
                    mech: MechConstants) -> float:
    """Extra spindle acceleration from friction and input sag [rad/s^2]."""
    w_s = x[3]
    torque = (
        spec.viscous_s * w_s
        + spec.coulomb_s * math.tanh(w_s / 0.1)
        + spec.torque_sag * u * abs(u)
    )
    return -torque / mech.j_s


TRAJECTORY_COLUMNS = (
    "t", "phi_h", "phi_s", "omega_h", "omega_s", "u",
    "phi_spring", "x_ham", "impact_flag",
)


@dataclass
class Trajectory:
    """Dense (inner sub-step) trace of one simulation run."""

    data: np.ndarray  # (n, 9), columns TRAJECTORY_COLUMNS
    breaches: list = field(default_factory=list)  # times with |phi_spring| > phi_b

    def column(self, name: str) -> np.ndarray:
        return self.data[:, TRAJECTORY_COLUMNS.index(name)]

    def to_csv(self, path):
        header = ",".join(TRAJECTORY_COLUMNS)
        np.savetxt(path, self.data, delimiter=",", header=header, comments="")


@dataclass(frozen=True)
class PlantConfig:
    mech: MechConstants = MechConstants()
    theta: np.ndarray = None            # true parameters [lam, kf*x0, kf, 1]
    residual: ResidualSpec = ResidualSpec()
    cor_mode: str = "uniform"           # "uniform" | "constant"
    cor_value: float = 0.5
    cor_low: float = 0.3
    cor_high: float = 0.8
    phi_ap_mode: str = "uniform"        # "uniform" | "constant"
    phi_ap_value: float = 0.1
    phi_ap_low: float = 0.0
    phi_ap_high: float = 0.15
    noise_std: float = 1e-3             # [rad], both angle channels
    inner_dt: float = 5e-5
    timeout: float = 0.1
    engage_angle: float = 0.35          # [rad]; above this lift the lug passes over

    def __post_init__(self):
        if self.theta is None:
            object.__setattr__(
                self, "theta", np.array([24.0, 60.0, 9.0e4, 1.0])
            )


class PlantSimulator:
    """Owns one trajectory; independent instances are seedable and parallel-safe."""

    def __init__(self, cfg: PlantConfig, x0: np.ndarray, seed: int = 0,
                 phi_ap_first: float | None = None):
        self.cfg = cfg
        self.x = np.asarray(x0, dtype=float).copy()
        self.t = 0.0
        self.rng = np.random.default_rng(seed)
        # treat x0 as sitting right after an impact at phi_h(0)
        adv = self._draw_phi_ap() if phi_ap_first is None else phi_ap_first
        self.anvil_angle = self.x[0] - math.pi + adv
        self.events: list[ImpactEvent] = []
        self.impact_states: list[np.ndarray] = []  # pre-reset state per event
        self.breaches: list[float] = []
        self.passes: list[float] = []  # lug pass-overs (no engagement)

    # -- random draws -------------------------------------------------------

    def _draw_cor(self) -> float:
        if self.cfg.cor_mode == "constant":
            return self.cfg.cor_value
        return float(self.rng.uniform(self.cfg.cor_low, self.cfg.cor_high))

    def _draw_phi_ap(self) -> float:
        if self.cfg.phi_ap_mode == "constant":
            return self.cfg.phi_ap_value
        return float(self.rng.uniform(self.cfg.phi_ap_low, self.cfg.phi_ap_high))

    # -- continuous dynamics --------------------------------------------------

    def _rhs(self, x: np.ndarray, u: float) -> np.ndarray:
        dx = f_continuous(x, u, self.cfg.theta, self.cfg.mech)
        dx[3] += inject_residual(x, u, self.cfg.residual, self.cfg.mech)
        return dx

    def _rk4(self, x: np.ndarray, u: float, dt: float) -> np.ndarray:
        k1 = self._rhs(x, u)
        k2 = self._rhs(x + 0.5 * dt * k1, u)
        k3 = self._rhs(x + 0.5 * dt * k2, u)
        k4 = self._rhs(x + dt * k3, u)
        return x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)

    # -- hybrid stepping -----------------------------------------------------

    def _locate_impact(self, x_pre: np.ndarray, u: float, dt: float) -> float:
        """Bisect the crossing time of phi_h through the anvil angle."""
        lo, hi = 0.0, dt
        for _ in range(40):
            if hi - lo <= 1e-7:
                break
            mid = 0.5 * (lo + hi)
            if self._rk4(x_pre, u, mid)[0] - self.anvil_angle > 0.0:
                lo = mid
            else:
                hi = mid
        return hi

    def tick(self, u: float) -> np.ndarray:
        """Advance one control tick; returns dense rows (inner resolution)."""
        cfg = self.cfg
        n_sub = int(round(TICK_DT / cfg.inner_dt))
        rows = np.empty((n_sub, len(TRAJECTORY_COLUMNS)))
        for k in range(n_sub):
            x_pre = self.x
            x_post = self._rk4(x_pre, u, cfg.inner_dt)
            impact = 0.0
            crossed = (
                x_pre[0] - self.anvil_angle > 0.0
                and x_post[0] - self.anvil_angle <= 0.0
                and x_post[0] < x_pre[0]
            )
            if crossed:
                tau = self._locate_impact(x_pre, u, cfg.inner_dt)
                x_imp = self._rk4(x_pre, u, tau)
                if abs(x_imp[0] - x_imp[1]) > cfg.engage_angle:
                    # hammer is riding high on the cam: the lug clears the
                    # anvil; next engagement chance is the opposite lug
                    self.anvil_angle -= math.pi
                    self.passes.append(self.t + tau)
                else:
                    e = self._draw_cor()
                    adv = self._draw_phi_ap()
                    event = ImpactEvent(
                        time=self.t + tau,
                        hammer_angle_at_impact=float(x_imp[0]),
                        pre_impact_omega_h=float(x_imp[2]),
                        post_impact_omega_h=float(-e * x_imp[2]),
                        cor=e,
                        anvil_advance=adv,
                    )
                    self.events.append(event)
                    self.impact_states.append(x_imp.copy())
                    x_imp[2] = -e * x_imp[2]        # reset touches only omega_h
                    self.anvil_angle = x_imp[0] - math.pi + adv
                    x_post = self._rk4(x_imp, u, cfg.inner_dt - tau)
                    impact = 1.0
            self.x = x_post
            self.t += cfg.inner_dt
            phi = self.x[0] - self.x[1]
            if abs(phi) > cfg.mech.phi_b and (
                not self.breaches or self.t - self.breaches[-1] > cfg.inner_dt * 1.5
            ):
                self.breaches.append(self.t)
            rows[k] = (
                self.t, self.x[0], self.x[1], self.x[2], self.x[3], u,
                phi, cfg.mech.cam_lead * abs(phi), impact,
            )
        return rows

    def sensor_sample(self, u: float) -> SensorSample:
        noise = self.rng.normal(0.0, self.cfg.noise_std, 2)
        return SensorSample(
            t=self.t,
            motor_angle_meas=float(self.x[1] + noise[0]),
            hammer_angle_meas=float(self.x[0] + noise[1]),
            u=u,
        )


def simulate_cycle(x0: np.ndarray, controller, cfg: PlantConfig, seed: int = 0,
                   phi_ap_first: float | None = None):
    """Run until the first hammer-anvil impact.

    `controller` maps a SensorSample to a torque once per 1 ms tick.
    Returns (Trajectory, ImpactEvent); raises TimeoutNoImpact after
    cfg.timeout seconds without engagement.
    """
    sim = PlantSimulator(cfg, x0, seed=seed, phi_ap_first=phi_ap_first)
    chunks = []
    u = 0.0
    n_ticks = int(round(cfg.timeout / TICK_DT))
    for _ in range(n_ticks):
        u = float(np.clip(controller(sim.sensor_sample(u)), -0.5, 0.0))
        chunks.append(sim.tick(u))
        if sim.events:
            traj = Trajectory(np.vstack(chunks), breaches=list(sim.breaches))
            return traj, sim.events[0]
    raise TimeoutNoImpact(f"no impact within {cfg.timeout * 1e3:.0f} ms")


class BaselineSpeedController:
    """PID on spindle speed with clamped (anti-windup) integration.

    Speed is estimated by differencing the motor angle measurement; the
    output is clamped to the actuator range [u_min, u_max].
    """

    def __init__(self, target_omega_s: float = -120.0, kp: float = 0.02,
                 ki: float = 0.4, kd: float = 0.0,
                 u_min: float = -0.5, u_max: float = 0.0, dt: float = TICK_DT):
        self.target = target_omega_s
        self.kp, self.ki, self.kd = kp, ki, kd
        self.u_min, self.u_max = u_min, u_max
        self.dt = dt
        self.integral = 0.0
        self._prev_angle = None
        self._prev_err = None

    def speed_estimate(self, sample: SensorSample) -> float:
        if self._prev_angle is None:
            self._prev_angle = sample.motor_angle_meas
            return self.target  # no estimate yet; assume on target
        speed = (sample.motor_angle_meas - self._prev_angle) / self.dt
        self._prev_angle = sample.motor_angle_meas
        return speed

    def __call__(self, sample: SensorSample) -> float:
        err = self.target - self.speed_estimate(sample)
        d_err = 0.0 if self._prev_err is None else (err - self._prev_err) / self.dt
        self._prev_err = err
        unclamped = self.kp * err + self.ki * (self.integral + err * self.dt) \
            + self.kd * d_err
        u = float(np.clip(unclamped, self.u_min, self.u_max))
        saturated = unclamped != u
        pushing_out = (unclamped > self.u_max and err > 0) or (
            unclamped < self.u_min and err < 0
        )
        if not (saturated and pushing_out):
            self.integral += err * self.dt
        return u
