"""Dynamic multiplicative factor models for multivariate event sequences.

Fits intensity models of the form
``lambda_j(t) = Y_j(t) exp(beta0_j + beta_j . x_j(t) + theta . A_j^T z_j(t))``
with Gaussian latent factors ``theta`` by penalized maximum likelihood
(stochastic EM with a Metropolis E-step and SCAD coordinate descent),
selects the penalty tunings by BIC over a grid, computes standard
errors from the approximate observed Fisher information, and simulates
event logs from the same model family.
"""

__version__ = "0.1.0"

from .covariates import (
    CovariatePanel,
    CovariateRule,
    CovariateSpec,
    PiecewiseConstantPath,
    build_panel,
    const,
    last,
    lasttwo,
    path_value,
    refine_breakpoints,
    since,
)
from .events import (
    Dataset,
    EventCatalog,
    EventRecord,
    EventSequence,
    parse_event_log,
    read_catalog,
    serialize_event_log,
    validate_dataset,
)
from .lik import (
    QuadratureConfig,
    SubjectWork,
    compile_dataset,
    compile_subject,
    complete_loglik,
    complete_score,
    cumulative_integral,
    marginal_loglik,
)
from .model import (
    ConstraintMask,
    Mask,
    ModelParams,
    PenaltyConfig,
    apply_mask,
    log_intensity,
    scad_derivative,
    soft_threshold,
)
from .sampler import ChainState, adapt, metropolis_step
from .mstep import PsiCache, psi_partials, sweep, update_intercept, update_penalized, update_sigma
from .stem import FitConfig, FitResult, fit
from .select import GridSpec, SupportMask, bic, grid_search, refit_constrained, support_of
from .inference import InfoMatrix, observed_info, standard_errors
from .simulator import SimConfig, TrueModel, simulate_dataset, simulate_subject
from .evalsuite import ReplicationRecord, estimation_metrics, selection_metrics
from .designs import browsing_design
