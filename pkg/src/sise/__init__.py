"""Minimum-variance unbiased simultaneous state and input estimation
for linear time-varying continuous-time systems."""

from .errors import (
    SiseError, ConfigError, NumericsError, InvalidInput, InvalidNoise,
    UnknownScenario, DivergedIntegration, DivergedSimulation, RankDeficiency,
    NoStabilizingSolution, UnidentifiableInput, IllConditionedInnovation,
    NeedWarmup, FeedbackLoopIllPosed, Unresolvable, NoFiniteBound,
)
from .asvd import StructuredSvd, AsvdRates, structured_svd, asvd_rates, propagate_factors
from .sysmodel import (
    SystemSchedule, WhiteNoiseSpec, GaussMarkovSpec, AuxMeasurementModel,
    DecoupledSystem, decouple, simulate_plant,
)
from .elise import EliseFilter, FilterRun, compute_gains, estimate_input
from .alise import AliseFilter, LagBuffer
from .control import ControllerSpec, lqr_gain, rejection_gains, resolve_feedback
from .analysis import (
    strong_observability, pbh_tests, gramian_bounds, bias_bounds,
    consistency_metrics, steady_state_covariance,
)
from . import scenarios, harness

__all__ = [
    "SiseError", "ConfigError", "NumericsError", "InvalidInput",
    "InvalidNoise", "UnknownScenario", "DivergedIntegration",
    "DivergedSimulation", "RankDeficiency", "NoStabilizingSolution",
    "UnidentifiableInput", "IllConditionedInnovation", "NeedWarmup",
    "FeedbackLoopIllPosed", "Unresolvable", "NoFiniteBound",
    "StructuredSvd", "AsvdRates", "structured_svd", "asvd_rates",
    "propagate_factors", "SystemSchedule", "WhiteNoiseSpec",
    "GaussMarkovSpec", "AuxMeasurementModel", "DecoupledSystem", "decouple",
    "simulate_plant", "EliseFilter", "FilterRun", "compute_gains",
    "estimate_input", "AliseFilter", "LagBuffer", "ControllerSpec",
    "lqr_gain", "rejection_gains", "resolve_feedback",
    "strong_observability", "pbh_tests", "gramian_bounds", "bias_bounds",
    "consistency_metrics", "steady_state_covariance", "scenarios", "harness",
]

__version__ = "0.1.0"
