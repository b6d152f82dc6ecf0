"""Diffusion-map gain approximation for the feedback particle filter."""

__version__ = "0.1.0"

from .diffusion_map import DiffusionMapOperator, Ensemble, build_operator  # noqa: E402
from .errors import (  # noqa: E402
    DegenerateEnsembleError,
    DegenerateWeightsError,
    FpfGainError,
    GainSolverError,
    InvalidInputError,
    InvalidParameterError,
    QuadratureError,
)
from .gain import (  # noqa: E402
    ConstantGain,
    DiffusionMapGain,
    GainField,
    PoissonSolution,
    constant_gain,
    diffusion_map_gain,
    gain_at_particles,
    gain_at_point,
    median_bandwidth,
    solve_fixed_point,
)

__all__ = [
    "ConstantGain",
    "DegenerateEnsembleError",
    "DegenerateWeightsError",
    "DiffusionMapGain",
    "DiffusionMapOperator",
    "Ensemble",
    "FpfGainError",
    "GainField",
    "GainSolverError",
    "InvalidInputError",
    "InvalidParameterError",
    "PoissonSolution",
    "QuadratureError",
    "build_operator",
    "constant_gain",
    "diffusion_map_gain",
    "gain_at_particles",
    "gain_at_point",
    "median_bandwidth",
    "solve_fixed_point",
]
