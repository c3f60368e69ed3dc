"""Monte Carlo pricing and projected replication hedging for multi-asset
diffusions whose volatility matrix may be singular.

The replicating strategy solves sigma^T theta = P E_Q[...] with the
orthogonal projection P onto range(sigma^T) making the solution unique;
conditional expectations come from least-squares Monte Carlo.
"""

from .backtest import BacktestReport, PriceResult, price, replicate
from .engine import (
    PathBundle,
    TimeGrid,
    first_variation,
    grid_projectors,
    iter_path_blocks,
    resolve_grid,
    simulate_paths,
)
from .errors import (
    ArbitrageDetected,
    DegenHedgeError,
    DimensionMismatch,
    GridMismatch,
    IllConditioned,
    NonFinite,
    SchemaError,
    SeedReuseError,
    UnsupportedFamily,
    UnsupportedJacobian,
)
from .hedging import HedgePlan, RegressionSpec, clark_ocone_rhs, correction_integral, solve_hedge
from .linalg import Projection, min_norm_solve, pseudoinverse, range_projection
from .measure import girsanov_density, market_price_of_risk, q_increments
from .model import (
    MarketModel,
    ModelValidationReport,
    evaluate_coefficients,
    parse_model,
    parse_model_dict,
    validate_no_arbitrage,
)
from .payoffs import Payoff, evaluate, malliavin_derivative, parse_payoff

__version__ = "0.1.0"

__all__ = [
    "ArbitrageDetected",
    "BacktestReport",
    "DegenHedgeError",
    "DimensionMismatch",
    "GridMismatch",
    "HedgePlan",
    "IllConditioned",
    "MarketModel",
    "ModelValidationReport",
    "NonFinite",
    "PathBundle",
    "Payoff",
    "PriceResult",
    "Projection",
    "RegressionSpec",
    "SchemaError",
    "SeedReuseError",
    "TimeGrid",
    "UnsupportedFamily",
    "UnsupportedJacobian",
    "clark_ocone_rhs",
    "correction_integral",
    "evaluate",
    "evaluate_coefficients",
    "first_variation",
    "girsanov_density",
    "grid_projectors",
    "iter_path_blocks",
    "malliavin_derivative",
    "market_price_of_risk",
    "min_norm_solve",
    "parse_model",
    "parse_model_dict",
    "parse_payoff",
    "price",
    "pseudoinverse",
    "q_increments",
    "range_projection",
    "replicate",
    "resolve_grid",
    "simulate_paths",
    "solve_hedge",
    "validate_no_arbitrage",
]
