"""Stratified Monte Carlo sampling for product-form quasi-probability decompositions."""

from .allocate import (
    AllocationPlan,
    hamilton_apportion,
    neyman_allocate,
    neyman_quotas,
    residual_hamilton_allocate,
    truncation_bias_bound,
    variance_certificate,
)
from .circuits import (
    CircuitOutcomeEvaluator,
    DegenerateGridError,
    DensityMatrix,
    Depolarising,
    PauliConjugation,
    QpdCircuit,
    Rotation,
    attach_pai,
    attach_pec,
    build_instance,
    build_tfim_trotter,
    evaluate_configuration,
    make_outcome_evaluator,
    pai_coefficients,
    pec_local_coefficients,
)
from .engine import (
    EstimateReport,
    Oracle,
    RatioEstimate,
    Shots,
    bootstrap_variance_ci,
    normalized_absolute_variance,
    parse_model,
    run_naive,
    run_stratified,
    variance_ratio,
)
from .oracle import (
    EnumerationResult,
    StratumMoments,
    VarianceHierarchy,
    counts_statistic,
    enumerate_means,
    exact_design_variance,
    exact_implemented_variance,
    exact_stratum_moments,
    explained_variance,
    full_statistic,
    hierarchy_check,
    parity_statistic,
)
from .qpd import (
    InvalidCoefficientsError,
    LocalQpd,
    ProductQpd,
    ZeroMassConfigurationError,
    build_local_qpd,
    config_weight,
    pad_and_assemble,
    qpd_from_json,
    qpd_to_json,
    sample_naive,
)
from .strata import (
    ConcentrationProfile,
    EmptyStratumError,
    ParityTable,
    ResourceLimitError,
    StratumTable,
    concentration_profile,
    conditional_pmf,
    conditional_sample,
    conditional_sample_parity,
    counts_of,
    cumulative_state_count,
    forward_dp,
    merge_counts_to_parity,
    parity_dp,
    stratum_count,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
