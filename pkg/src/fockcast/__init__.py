"""fockcast: spectral forecasting of ergodic flows.

Approximate Koopman eigenfrequencies and eigenfunctions are computed from
trajectory data through kernel-smoothed, physics-informed generalized
eigenproblems, then amplified by a weighted symmetric Fock-space
polynomial predictor evaluated on spectral tori.
"""

__version__ = "0.1.0"

from .dynamics import (
    FlowSystem,
    TrajectoryDataset,
    integrate_flow,
    sample_grid_stepanoff,
    sample_trajectory_l63,
)
from .errors import FockcastError, NumericalError, ValidationError

__all__ = [
    "FlowSystem",
    "TrajectoryDataset",
    "integrate_flow",
    "sample_grid_stepanoff",
    "sample_trajectory_l63",
    "FockcastError",
    "NumericalError",
    "ValidationError",
    "__version__",
]
