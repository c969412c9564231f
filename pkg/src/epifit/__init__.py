"""Endemic-epidemic models for count time series stratified by age group and region."""

__version__ = "0.1.0"

from .contact_matrix import (ContactMatrix, SurveyRecords, aggregate_contact_matrix,
                             estimate_contact_matrix, matrix_power, row_normalize)
from .data import DataError, StratifiedCounts, scale_counts
from .inference import (FitOptions, FitResult, ProfileResult, compare_models, fit, log_likelihood,
                        profile_kappa, score, wald_ci)
from .model import (ContactSpec, EndemicSpec, EpidemicSpec, ModelSpec, WeightConfig, compute_means,
                    epidemic_coefficient_matrix, parameter_count, seasonal_peak_week)
from .simulation import (SimulationConfig, epidemic_proportion, mean_decomposition, simulate)
from .spatial import RegionGraph, adjacency_orders, joint_normalize, power_law_weights

__all__ = [
    "ContactMatrix", "SurveyRecords", "aggregate_contact_matrix", "estimate_contact_matrix",
    "matrix_power", "row_normalize", "DataError", "StratifiedCounts", "scale_counts",
    "FitOptions", "FitResult", "ProfileResult", "compare_models", "fit", "log_likelihood",
    "profile_kappa", "score", "wald_ci", "ContactSpec", "EndemicSpec", "EpidemicSpec",
    "ModelSpec", "WeightConfig", "compute_means", "epidemic_coefficient_matrix",
    "parameter_count", "seasonal_peak_week", "SimulationConfig", "epidemic_proportion",
    "mean_decomposition", "simulate", "RegionGraph", "adjacency_orders", "joint_normalize",
    "power_law_weights",
]
