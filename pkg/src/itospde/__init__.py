"""Finite-difference Gelfand triples, resolvent lifts and Ito-formula ledgers for linear SPDEs."""

from .errors import (
    AssumptionViolated,
    ConfigError,
    EmptyInterior,
    GridMismatch,
    ItoSpdeError,
    OrderTooHigh,
    SolverDivergence,
)
from .grid_spaces import (
    Grid,
    GridFunction,
    LatticeFunction,
    backward_diff,
    build_grid,
    diff_alpha,
    forward_diff,
    inner_H,
    inner_V,
    norm_H,
    norm_V,
)
from .ito_verify import (
    FunctionalR,
    ItoLedger,
    energy_identity_ledger,
    general_ito_ledger,
    gronwall_check,
    lifting_convergence,
    max_principle_experiment,
    mollified_positive_square,
    phi_grad,
    phi_hess_dir,
    phi_value,
    positive_part_chain_rule_check,
    positive_square,
    square,
)
from .resolvent import (
    GramOperator,
    Resolvent,
    ResolventSolver,
    apply_lift,
    apply_resolvent,
    verify_resolvent_properties,
)
from .spde import SPDECoefficients, SPDEProblem, Trajectory, simulate, step
from .stochastic import NoiseDriver, accumulate_ito, martingale_moment_check, sample_increments

__version__ = "0.1.0"
