"""Learning-augmented predictive torque control for an impact-wrench mechanism.

Subpackages cover the nominal rigid-body model, the ground-truth hybrid
simulator, offline identification (least squares + GP residual), the
free-final-time MPC, the EKF/reference estimator, neural-network policy
distillation, and statistical closed-loop validation.
"""

from impactmpc.dynamics import MechConstants, PlantState, ThetaParams

__all__ = ["MechConstants", "PlantState", "ThetaParams"]
__version__ = "0.1.0"
