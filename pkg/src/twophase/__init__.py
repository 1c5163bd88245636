"""Two-phase (design x model) inference: populations, designs, estimators,
estimating equations, exact enumeration and Monte Carlo experiments."""

from .designs import (
    SRSWOR,
    SRSWR,
    SampleSeq,
    StratPPSWR,
    StratTwoStagePPSWR,
    design_pmf,
    draw_sample,
    enumerate_samples,
)
from .errors import (
    ConfigError,
    ConvergenceError,
    EnumerationCapError,
    SingularJacobianError,
    TwoPhaseError,
    UnsupportedError,
)
from .population import FinitePopulation, ModelSpec, StratumModel, model_moments, realize_population
from .rng import Seed

__version__ = "0.1.0"

__all__ = [
    "SRSWOR",
    "SRSWR",
    "ConfigError",
    "ConvergenceError",
    "EnumerationCapError",
    "FinitePopulation",
    "ModelSpec",
    "SampleSeq",
    "Seed",
    "SingularJacobianError",
    "StratPPSWR",
    "StratTwoStagePPSWR",
    "StratumModel",
    "TwoPhaseError",
    "UnsupportedError",
    "design_pmf",
    "draw_sample",
    "enumerate_samples",
    "model_moments",
    "realize_population",
]
