"""Power, sample size and model fitting for stepped-wedge cluster randomized
trials with multiple continuous co-primary endpoints."""

from __future__ import annotations

from .correlation import (
    CLOSED_COHORT,
    CROSS_SECTIONAL,
    IccSet,
    VarianceComponents,
    apply_cac,
    eigen_summary,
    icc_to_variance_components,
    variance_components_to_icc,
)
from .design import DesignConstants, DesignSchedule, build_standard_schedule, design_constants, read_schedule_csv
from .errors import (
    DegenerateLimitError,
    IdentifiabilityError,
    InfeasibleError,
    SingularMatrixError,
    SwpowerError,
    ValidationError,
)
from .mlmm import FitControls, FitResult, ModelParams, TrialDataset, fit_em, marginal_loglik, posterior_moments
from .mvt import RectProbSpec, mvt_rect_prob, noncentral_t_cdf, t_quantile
from .oracle import brute_force_covariance
from .power import (
    PowerQuery,
    PowerResult,
    critical_values,
    power_common_effect,
    power_iu,
    power_omnibus,
    sample_size_search,
    sensitivity_sweep,
)
from .simulate import SimReport, SimScenario, generate_dataset, run_power_study, run_type1_study
from .variance import EffectCovariance, effect_covariance, limiting_covariance, variance_common_effect

__version__ = "0.1.0"
