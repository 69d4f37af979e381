"""Covariance-outcome regression with high-dimensional covariates.

Penalized estimation of projection directions and log-linear coefficients,
split-and-smooth inference, and a Monte-Carlo simulation harness.
"""

from .data import (DataValidationError, Dataset, DimensionMismatchError, MissingFileError,
                   MissingInterceptError, NonFiniteValueError, SubjectData, from_arrays, load_dataset,
                   pooled_matrix, projected_responses, sample_covariance, standardize_covariates,
                   write_dataset)
from .estimate import (AllRestartsFailedError, BetaStepConvergenceError, ComponentSet, CVConfig,
                       FitConfig, ModelFit, ObjectiveOverflowError, PenaltySpec,
                       SingularPooledMatrixError, SolverError, beta_step, cross_validate_lambda, dfd,
                       fit, fit_cv, gamma_step, objective, select_components)
from .infer import (IJVariance, SmoothedInference, SplitFailedError, SplitPlan, SplitResult,
                    VarianceTruncationWarning, infer, intervals_and_pvalues, ij_variance, low_dim_refit,
                    multi_split, select_support, split_sample)
from .kernels import BACKEND
from .sim import (ScenarioSpec, SimReport, generate_dataset, generate_subject, load_scenario,
                  run_replicates, sweep)

__version__ = "0.1.0"
