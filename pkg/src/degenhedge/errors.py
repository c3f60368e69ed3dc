"""Exception hierarchy and the CLI exit-code mapping."""


class DegenHedgeError(Exception):
    """Base class for all engine errors."""


class SchemaError(DegenHedgeError):
    """Config file is malformed: missing, unknown or wrongly-typed key."""


class DimensionMismatch(SchemaError):
    """Coefficient/parameter shapes are inconsistent with (n, d)."""


class UnsupportedFamily(SchemaError):
    """Coefficient family name is not whitelisted."""


class NonFinite(DegenHedgeError):
    """NaN/Inf encountered (bad input matrix, path explosion, overflow)."""


class ArbitrageDetected(DegenHedgeError):
    """The market-price-of-risk equation has no solution at some state."""


class IllConditioned(DegenHedgeError):
    """Regression design matrix condition number exceeds the limit."""


class UnsupportedJacobian(DegenHedgeError):
    """Model family has no analytic Jacobian for the projected risk price."""


class GridMismatch(DegenHedgeError):
    """Hedge plan grid differs from the simulation grid."""


class SeedReuseError(DegenHedgeError):
    """Backtest seed equals the plan's training seed (in-sample forbidden)."""


# CLI exit codes; 0 = success, 1 = validation failure (arbitrage at probe).
EXIT_OK = 0
EXIT_VALIDATION_FAILED = 1
EXIT_SCHEMA = 2
EXIT_ARBITRAGE = 3
EXIT_NUMERIC = 4
EXIT_ILL_CONDITIONED = 5


def exit_code_for(exc: Exception) -> int:
    if isinstance(exc, (SchemaError, SeedReuseError, GridMismatch)):
        return EXIT_SCHEMA
    if isinstance(exc, ArbitrageDetected):
        return EXIT_ARBITRAGE
    if isinstance(exc, IllConditioned):
        return EXIT_ILL_CONDITIONED
    if isinstance(exc, DegenHedgeError):
        return EXIT_NUMERIC
    return EXIT_NUMERIC
