"""Random-effect restricted mean survival time models."""

from .analysis import AnalysisReport, analyze
from .dataio import emit_forest_data, parse_dataset_csv, write_dataset_csv
from .errors import NumericalError, RMSTError, ValidationError
from .gee import GeeFit, GeeOptions, marginal_mean, solve_gee
from .ipcw import ipcw_fit_all, ipcw_fit_cluster
from .pooling import estimate_sigma_v, ipcw_method_pooling, pv_method_pooling, shrink_cluster
from .pseudo import cluster_pseudo_values, pseudo_complete_dataset, pseudo_values
from .simulation import SimConfig, calibrate_true_beta, run_monte_carlo
from .survival import Dataset, SubjectRecord, kaplan_meier, rmst

__all__ = [
    "AnalysisReport", "Dataset", "GeeFit", "GeeOptions", "NumericalError", "RMSTError",
    "SimConfig", "SubjectRecord", "ValidationError", "analyze", "calibrate_true_beta",
    "cluster_pseudo_values", "emit_forest_data", "estimate_sigma_v", "ipcw_fit_all",
    "ipcw_fit_cluster", "ipcw_method_pooling", "kaplan_meier", "marginal_mean",
    "parse_dataset_csv", "pseudo_complete_dataset", "pseudo_values", "pv_method_pooling",
    "rmst", "run_monte_carlo", "shrink_cluster", "solve_gee", "write_dataset_csv",
]
