"""Doubly robust adaptive-LASSO discovery of treatment effect modifiers.

The package estimates a linear marginal model for the conditional average
treatment effect: nuisance models (parametric or highly adaptive LASSO) feed
a doubly robust pseudo-outcome, an adaptive LASSO selects the effect
modifiers, and truncated-Gaussian selective inference yields confidence
intervals valid after selection.  A simulation laboratory reproduces the
reference Monte Carlo behavior at desk scale.
"""

from .drpseudo import NuisanceEstimates, PseudoOutcome, pseudo_outcome, truncate_propensity
from .emselect import (EmFit, HalModel, PipelineOptions, PipelineResult,
                       adaptive_weights, estimate_cate, pilot_ols,
                       run_pipeline, select_effect_modifiers)
from .hal import HalBasis, HalFit, build_hal_basis, fit_hal, hal_predict
from .lassocd import (CvResult, LassoProblem, LassoSolution, cv_select_lambda,
                      lambda_grid, soft_threshold, solve_logistic_lasso,
                      solve_weighted_lasso)
from .linmod import (LinearFit, LogisticFit, fit_logistic, fit_ols,
                     predict_linear, predict_probability)
from .selinf import (Polyhedron, SelectiveInterval, selection_polyhedron,
                     selective_ci, selective_intervals, selective_pvalue,
                     truncation_interval, truncnorm_cdf)
from .simlab import (ScenarioConfig, SimulationReport, generate_scenario,
                     implementation_specs, run_replications)
from .tabular import (EmCandidateSet, ModelSpec, ObservationTable, Term,
                      build_design, load_csv, parse_formula)

__version__ = "0.1.0"
