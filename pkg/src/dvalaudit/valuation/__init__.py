"""Data valuation techniques and their exact oracles."""

from .exact import (
    MAX_EXACT_N,
    banzhaf_from_table,
    class_conditional_utility,
    exact_cs_shapley,
    exact_shapley_bruteforce,
    shapley_from_table,
    utility_table,
)
from .knn import (
    FAIRSHAP_VARIANTS,
    TestContributionMatrix,
    fairshap_aggregate,
    knn_shapley_matrix,
    knn_soft_utility,
    value_fairshap,
)
from .montecarlo import (
    g_shapley_marginals,
    msr_estimate,
    tmc_marginals,
    value_banzhaf,
    value_cs_shapley,
    value_g_shapley,
    value_loo,
    value_tmc_shapley,
)
from .utility import Utility
from .values import TECHNIQUES, ValuationConfig, ValueVector, config_digest

__all__ = [
    "FAIRSHAP_VARIANTS",
    "MAX_EXACT_N",
    "TECHNIQUES",
    "TestContributionMatrix",
    "Utility",
    "ValuationConfig",
    "ValueVector",
    "banzhaf_from_table",
    "class_conditional_utility",
    "config_digest",
    "exact_cs_shapley",
    "exact_shapley_bruteforce",
    "fairshap_aggregate",
    "g_shapley_marginals",
    "knn_shapley_matrix",
    "knn_soft_utility",
    "msr_estimate",
    "shapley_from_table",
    "tmc_marginals",
    "utility_table",
    "value_banzhaf",
    "value_cs_shapley",
    "value_fairshap",
    "value_g_shapley",
    "value_loo",
    "value_tmc_shapley",
]
