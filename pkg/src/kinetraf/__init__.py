"""Multi-population discrete-velocity kinetic traffic model."""

from .model import (
    AssumptionViolation,
    ConstraintViolation,
    CustomLaw,
    GammaLaw,
    Mixture,
    ModelError,
    PiecewiseLaw,
    VehicleClass,
    VelocityGrid,
    build_grid,
    build_grids,
    eval_probability,
    occupied_fraction,
    piecewise_coefficients,
)
from .kinetics import (
    KineticState,
    build_cross_matrices,
    build_interaction_matrices,
    build_self_matrices,
    collision_rhs,
    collision_rhs_direct,
)

__version__ = "0.1.0"
