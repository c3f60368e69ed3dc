import numpy as np
import pytest

from degenhedge.model import parse_model_dict


def bs_model_dict(mu=0.08, sigma=0.2, r=0.03, x0=100.0, horizon=1.0):
    return {
        "model": {"n": 1, "d": 1, "horizon": horizon, "x0": [x0]},
        "rate": {"table": [{"t_start": 0.0, "value": r}]},
        "drift": {"family": "linear-in-state", "params": {"rates": [mu]}},
        "vol": {"family": "linear-in-state", "params": {"matrix": [[sigma]]}},
    }


def embedding_model_dict(mu=0.08, sigma=0.2, r=0.03, x0=100.0):
    """2-asset embedding of the 1-D lognormal model: a zero volatility
    row and a second asset growing at the riskless rate."""
    return {
        "model": {"n": 2, "d": 2, "horizon": 1.0, "x0": [x0, 1.0]},
        "rate": {"table": [{"t_start": 0.0, "value": r}]},
        "drift": {"family": "linear-in-state", "params": {"rates": [mu, r]}},
        "vol": {"family": "linear-in-state", "params": {"matrix": [[sigma, 0.0], [0.0, 0.0]]}},
    }


def margrabe_model_dict(s1=0.2, s2=0.3, rho=0.5, r=0.03):
    row2 = [s2 * rho, s2 * np.sqrt(1 - rho * rho)]
    return {
        "model": {"n": 2, "d": 2, "horizon": 1.0, "x0": [100.0, 100.0]},
        "rate": {"table": [{"t_start": 0.0, "value": r}]},
        "drift": {"family": "linear-in-state", "params": {"rates": [0.08, 0.05]}},
        "vol": {"family": "linear-in-state", "params": {"matrix": [[s1, 0.0], row2]}},
    }


def rank1_model_dict(r=0.03):
    """Degenerate 2-asset market driven by one effective noise: the
    second volatility row is 0.6 times the first, and the excess drifts
    are proportional with the same factor (no arbitrage)."""
    return {
        "model": {"n": 2, "d": 2, "horizon": 1.0, "x0": [100.0, 100.0]},
        "rate": {"table": [{"t_start": 0.0, "value": r}]},
        "drift": {"family": "linear-in-state", "params": {"rates": [0.07, r + 0.6 * (0.07 - r)]}},
        "vol": {"family": "linear-in-state", "params": {"matrix": [[0.2, 0.1], [0.12, 0.06]]}},
    }


def smooth_model_dict():
    """Smooth full-rank 2-D model from the expression family."""
    return {
        "model": {"n": 2, "d": 2, "horizon": 1.0, "x0": [1.0, 1.0]},
        "rate": {"table": [{"t_start": 0.0, "value": 0.0}]},
        "drift": {"family": "expression", "params": {"exprs": ["0.05*x1 + 0.02*tanh(x2)", "0.04*x2"]}},
        "vol": {
            "family": "expression",
            "params": {
                "exprs": [
                    ["0.2 + 0.05*tanh(x1)", "0.02*x2"],
                    ["0.03*tanh(x1)", "0.3 + 0.04*tanh(x2)"],
                ]
            },
        },
    }


@pytest.fixture
def bs_model():
    return parse_model_dict(bs_model_dict())


@pytest.fixture
def embedding_model():
    return parse_model_dict(embedding_model_dict())


@pytest.fixture
def margrabe_model():
    return parse_model_dict(margrabe_model_dict())


@pytest.fixture
def rank1_model():
    return parse_model_dict(rank1_model_dict())


@pytest.fixture
def smooth_model():
    return parse_model_dict(smooth_model_dict())
