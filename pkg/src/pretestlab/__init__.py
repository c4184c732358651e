"""Simulation laboratory for two-stage confidence intervals in
random-intercept panel models: coverage probability and scaled expected
length of the interval chosen by a Hausman pretest, with exact conditional
laws, control-variate Monte Carlo and common random numbers.
"""

__version__ = "0.1.0"

from .config import EstimatorPair, ExperimentConfig
from .dgp import (PanelSample, assemble_responses, build_covariate_panel,
                  build_panel, sample_random_intercepts)
from .estimators import (PanelStats, VarianceEstimates, WeightQuantities,
                         between_ols, conditional_variances, estimate_variances,
                         gls_slope, panel_stats, pooled_ols_residuals, q_of,
                         variances_hsiao_ml, variances_unbiased,
                         variances_wooldridge, weight_quantities, within_ols)
from .exact_law import (ConditionalLaw, accept_prob_given_x, bvn_rect,
                        conditional_coverage_known, conditional_moments,
                        norm_cdf, p_factor, std_bvn_cdf, var_xbar)
from .exceptions import (ConfigError, DegenerateSampleError, NumericalError,
                         ParameterError)
from .intervals import (Branch, Interval, PretestOutcome, decide,
                        hausman_statistic, interval_I, interval_Jc, pretest,
                        two_stage)
from .mc import (CoverageResult, GridRow, McEstimate, Scenario, SelComponents,
                 efficiency, grid_sweep, ljk_expectation, run_coverage,
                 run_sel)
from .calibration import (CalibrationResult, SelExtremes, coverage_Jc,
                          minimize_coverage, sel_extremes, solve_c_star)
from .rng import NoiseStreams, standard_normals

__all__ = [name for name in dir() if not name.startswith("_")]
