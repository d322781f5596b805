"""Consistent losses, identification functions, semiparametric DGPs and M-/Z-estimators,
with grid-based auditors for the implications between them."""

__version__ = "0.1.0"

from .checkers import (
    AuditGrids,
    ImplicationReport,
    Status,
    Verdict,
    Witness,
    check_conditional_identification,
    check_conditional_mc,
    check_consistency,
    check_identification,
    check_unconditional_identification,
    check_unconditional_mc,
    construct_counterexample_dgp,
    theorem1_audit,
)
from .dgp import ConditionalDGP, DGPClass, ParametricModel, close_under_reweighting, make_dgp, reweight, sample
from .distributions import (
    DiscreteDistribution,
    Expectile,
    Functional,
    Mean,
    Quantile,
    VarEs,
    eval_functional,
    make_discrete,
    parse_functional,
)
from .estimators import EstimatorSpec, OptimizerConfig, m_estimate, monte_carlo, normal_equations, z_estimate
from .identification import (
    InstrumentMatrix,
    canonical_identification,
    compose_instrument,
    compose_model,
    parse_instrument,
    rank_condition_s2,
)
from .losses import BregmanLoss, ExpectileLoss, GPLLoss, Loss, VarEsLoss, parse_loss
