"""Joint models of a longitudinal outcome with subject-specific within-subject
variance and competing-risks survival."""

__version__ = "0.1.0"

from .em import fit, observed_loglik
from .errors import (DegenerateDensity, EmptyGroup, EmptyHistory, InputError,
                     InsufficientRiskSet, JMHError, LandmarkBeyondData,
                     LostPositiveDefiniteness, NonFiniteLoglik, NotPositiveDefinite,
                     SingularGram, SingularInformation, UnsortedCohort, ZeroDenominator)
from .inference import se_table, standard_errors
from .model import (HETEROGENEOUS, HOMOGENEOUS, BaselineHazard, Dataset, FitResult,
                    LongitudinalRow, ModelSpec, Params, SurvivalRecord, build_dataset,
                    param_names, validate_dataset)
from .prediction import PredictionRequest, conditional_cif, requests_from_dataset
from .simulation import (SimDesign, empirical_cif, mape_cv, monte_carlo_study,
                         simulate_cohort)

__all__ = [
    "BaselineHazard", "Dataset", "DegenerateDensity", "EmptyGroup", "EmptyHistory",
    "FitResult", "HETEROGENEOUS", "HOMOGENEOUS", "InputError", "InsufficientRiskSet",
    "JMHError", "LandmarkBeyondData", "LongitudinalRow", "LostPositiveDefiniteness",
    "ModelSpec", "NonFiniteLoglik", "NotPositiveDefinite", "Params", "PredictionRequest",
    "SimDesign", "SingularGram", "SingularInformation", "SurvivalRecord", "UnsortedCohort",
    "ZeroDenominator", "build_dataset", "conditional_cif", "empirical_cif", "fit",
    "mape_cv", "monte_carlo_study", "observed_loglik", "param_names",
    "requests_from_dataset", "se_table", "simulate_cohort", "standard_errors",
    "validate_dataset",
]
