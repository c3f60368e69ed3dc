"""Payoff catalogue: evaluation and pathwise Malliavin derivatives.

Conventions (matching the SDE discretization): time averages are
left-endpoint Riemann sums, the running maximum is the grid maximum
with ties broken by the earliest grid time, and derivatives are the
kink-indicator times the inner derivative (the boundary event has
measure zero under the diffusion law).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import FirstVariation, TimeGrid
from .errors import SchemaError
from .model import MarketModel

KINDS = ("european_call", "asian_floating_call", "exchange", "lookback_floating")


@dataclass(frozen=True)
class Payoff:
    kind: str
    strike: float = 0.0
    assets: tuple[int, ...] = (0,)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "strike": self.strike, "assets": list(self.assets)}


@dataclass
class PayoffDerivative:
    base_time_index: int
    value: np.ndarray  # (d,)
    indicator_active: bool


def parse_payoff(sec: dict, n: int) -> Payoff:
    if not isinstance(sec, dict):
        raise SchemaError("payoff section must be a mapping")
    allowed = {"kind", "strike", "assets"}
    unknown = set(sec) - allowed
    if unknown:
        raise SchemaError(f"unknown keys in payoff: {sorted(unknown)}")
    kind = sec.get("kind")
    if kind not in KINDS:
        raise SchemaError(f"payoff.kind must be one of {KINDS}, got {kind!r}")
    n_assets = 1 if kind == "european_call" else 2
    assets = tuple(sec.get("assets", list(range(n_assets))))
    if len(assets) != n_assets or any((not isinstance(a, int)) or a < 0 or a >= n for a in assets):
        raise SchemaError(f"payoff.assets must be {n_assets} asset indices < {n}")
    strike = sec.get("strike", 0.0)
    if isinstance(strike, bool) or not isinstance(strike, (int, float)) or not np.isfinite(strike) or strike < 0:
        raise SchemaError("payoff.strike must be a finite number >= 0")
    if kind == "exchange" and "strike" in sec:
        raise SchemaError("exchange payoff takes no strike")
    return Payoff(kind=kind, strike=float(strike), assets=assets)


def _inner(payoff: Payoff, states: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """Inner (pre-positive-part) value, vectorized over paths (N, M+1, n)."""
    k = payoff.kind
    a = payoff.assets
    if k == "european_call":
        return states[:, -1, a[0]] - payoff.strike
    if k == "exchange":
        return states[:, -1, a[0]] - states[:, -1, a[1]]
    if k == "asian_floating_call":
        dts = grid.dts
        avg = np.sum(states[:, :-1, a[0]] * dts[None, :], axis=1) / grid.times[-1]
        return avg - payoff.strike * states[:, -1, a[1]]
    if k == "lookback_floating":
        running_max = np.max(states[:, :, a[0]], axis=1)
        return running_max - payoff.strike * states[:, -1, a[1]]
    raise SchemaError(f"unknown payoff kind {k!r}")


def evaluate(payoff: Payoff, states: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """G(X) per path; accepts (M+1, n) or (N, M+1, n)."""
    states = np.asarray(states, dtype=float)
    single = states.ndim == 2
    if single:
        states = states[None]
    out = np.maximum(_inner(payoff, states, grid), 0.0)
    return out[0] if single else out


def indicator(payoff: Payoff, states: np.ndarray, grid: TimeGrid) -> np.ndarray:
    states = np.asarray(states, dtype=float)
    single = states.ndim == 2
    if single:
        states = states[None]
    out = _inner(payoff, states, grid) > 0.0
    return out[0] if single else out


def argmax_index(payoff: Payoff, states: np.ndarray) -> np.ndarray:
    """First grid index attaining the running maximum of the lookback asset."""
    states = np.asarray(states, dtype=float)
    single = states.ndim == 2
    if single:
        states = states[None]
    idx = np.argmax(states[:, :, payoff.assets[0]], axis=1)
    return idx[0] if single else idx


def malliavin_derivative(payoff: Payoff, path_states: np.ndarray, grid: TimeGrid, fv: FirstVariation) -> PayoffDerivative:
    """D_{t_k} G along one path from the first-variation matrices at base k."""
    k = fv.base_time_index
    mats = fv.matrices  # (M - k + 1, n, d)
    a = payoff.assets
    active = bool(indicator(payoff, path_states, grid))
    d = mats.shape[2]
    if not active:
        return PayoffDerivative(base_time_index=k, value=np.zeros(d), indicator_active=False)
    if payoff.kind == "european_call":
        value = mats[-1, a[0], :]
    elif payoff.kind == "exchange":
        value = mats[-1, a[0], :] - mats[-1, a[1], :]
    elif payoff.kind == "asian_floating_call":
        m = grid.n_steps
        dts = grid.dts[k:m]
        avg_term = np.einsum("s,sd->d", dts, mats[: m - k, a[0], :]) / grid.times[-1]
        value = avg_term - payoff.strike * mats[-1, a[1], :]
    elif payoff.kind == "lookback_floating":
        tau = int(argmax_index(payoff, path_states))
        max_term = mats[tau - k, a[0], :] if tau >= k else np.zeros(d)
        value = max_term - payoff.strike * mats[-1, a[1], :]
    else:
        raise SchemaError(f"unknown payoff kind {payoff.kind!r}")
    return PayoffDerivative(base_time_index=k, value=value, indicator_active=True)


def discounted_payoff(payoff: Payoff, states: np.ndarray, model: MarketModel, grid: TimeGrid) -> np.ndarray:
    """e^{-int_0^T r ds} G(X); the rate integral is exact on the table."""
    disc = np.exp(-model.rate_integral(0.0, grid.times[-1]))
    return disc * evaluate(payoff, states, grid)
