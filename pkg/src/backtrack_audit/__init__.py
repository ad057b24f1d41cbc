"""Backtracking-counterfactual fairness auditing over structural causal models."""

from .backtracking import (
    BacktrackingConditional,
    CounterfactualTable,
    InsufficientRowsError,
    Rule,
    cf,
    condition,
    fact,
    factual_table,
    noninformative,
    project,
    sample_joint,
    verify_table,
    where,
)
from .criteria import Auditor, CriterionResult, GroupSpec, group
from .divergence import energy_mmd, energy_test, permutation_threshold, point_cost
from .language import ModelSyntaxError, dump, parse
from .predictors import Predictor, binarize, fit_logistic, fit_ols, make_icf_fair, make_random, splice
from .scm_core import (
    AbductionError,
    CausalModel,
    CycleError,
    ModelError,
    abduce,
    build_model,
    forward,
    intervene,
    sample_exogenous,
)

__version__ = "0.1.0"
