"""U-statistic bias estimators and tests for doubly robust functionals,
universal confidence intervals, and a reproducible Monte Carlo engine."""

__version__ = "0.1.0"

from .basis import BasisDict, check_basis_regularity, eval_basis, make_basis
from .bias_test import TestOutcome, surrogate_bias_test
from .condvar import SubcubePlan, optimal_k_bins, subcube_variance
from .data import Dataset, SplitData
from .gram import GramOperator, apply_inverse, empirical_gram, exact_gram
from .hoif import (
    FittedDirection,
    NuisancePair,
    UStatResult,
    aggregate_diagnostics,
    aggregate_gram,
    drml_psi1,
    fit_fhat,
    if22,
    if22_aggregate,
    if33_empirical,
    psi1_from_residuals,
)
from .simlab import (
    OracleBias,
    SeriesFunction,
    TruthSpec,
    fit_nuisance,
    gen_data,
    gen_truth,
    oracle_bias,
    oracle_nuisance,
)
from .universal import (
    Ellipsoid,
    QuadraticFunctional,
    SieveModel,
    confidence_set,
    hoif_wald_interval,
    kl_projection_oracle,
    length_lower_bound,
    plugin_interval,
    profile_interval,
    psi_value,
    split_mle,
    squared_functional,
)

__all__ = [name for name in dir() if not name.startswith("_")]
