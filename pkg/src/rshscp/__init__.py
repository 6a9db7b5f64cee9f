"""Site-robust hierarchical sparse connectivity patterns.

Factorises multi-subject correlation matrices into sparse shared components
and per-subject weights, optionally with adversarial training and joint
site-effect modelling.
"""

from .baselines import combat_hscp_fit, harmonize_features
from .estimator import HierarchicalSCP, check_matrices
from .evaluation import (
    component_accuracy,
    grid_search,
    leave_one_site_out,
    level_accuracies,
    model_accuracy,
    site_prediction_cv,
    split_sample_reproducibility,
)
from .exceptions import HSCPError, NumericalError, ValidationError
from .io import (
    RunConfig,
    load_dataset,
    load_model,
    save_dataset,
    save_model,
)
from .model import FactorModel, GroundTruth, Hyperparams, MultiSiteDataset
from .objective import reconstruction_error
from .optimizer import METHODS, FitReport, fit
from .simulation import SimSpec, generate

__version__ = "0.1.0"

__all__ = [
    "METHODS",
    "FactorModel",
    "FitReport",
    "GroundTruth",
    "HSCPError",
    "HierarchicalSCP",
    "Hyperparams",
    "MultiSiteDataset",
    "NumericalError",
    "RunConfig",
    "SimSpec",
    "ValidationError",
    "check_matrices",
    "combat_hscp_fit",
    "component_accuracy",
    "fit",
    "generate",
    "grid_search",
    "harmonize_features",
    "leave_one_site_out",
    "level_accuracies",
    "load_dataset",
    "load_model",
    "model_accuracy",
    "reconstruction_error",
    "save_dataset",
    "save_model",
    "site_prediction_cv",
    "split_sample_reproducibility",
]
