"""Market price of risk, Girsanov density and the Q-Brownian increments.

All stochastic integrals use left-endpoint (Ito) sums on the path grid.
A useful discrete fact exploited by the tests: with Z built from the
same increments, reweighting P-paths by Z_T reproduces the Q-Euler law
exactly (the per-step density of shifting a N(0, dt) increment is the
per-step Girsanov factor), so the two routes to Q differ only by Monte
Carlo noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import PathBundle
from .errors import ArbitrageDetected, NonFinite
from .linalg import batch_min_norm_solve, min_norm_solve, range_projection
from .model import MarketModel


@dataclass
class MarketPriceOfRisk:
    u: np.ndarray  # minimal-norm solution, length d
    projected: np.ndarray  # P(x) u, equal to u for the minimal-norm solution
    residual: float  # ||sigma u - (b - r x)||


@dataclass
class GirsanovPath:
    z_values: np.ndarray  # (N, M+1), Z at grid times, Z_0 = 1
    log_z: np.ndarray  # (N, M+1)
    integrability_stats: np.ndarray  # (N,), int_0^T |Pu|^2 ds per path


def market_price_of_risk(model: MarketModel, t: float, x: np.ndarray) -> MarketPriceOfRisk:
    """Minimal-norm solution u of sigma(x) u = b(x) - r_t x.

    The minimal-norm solution lies in range(sigma^T), so it coincides
    with its own projection. Raises ArbitrageDetected when the system
    is (relatively) inconsistent beyond the model tolerance.
    """
    x = np.asarray(x, dtype=float)
    b = model.drift(t, x[None])[0]
    sig = model.vol(t, x[None])[0]
    rhs = b - model.rate(t) * x
    u, residual = min_norm_solve(sig, rhs)
    scale = max(1.0, float(np.linalg.norm(rhs)))
    if residual / scale > model.arbitrage_tol:
        raise ArbitrageDetected(
            f"sigma u = b - r x unsolvable at t={t}: relative residual {residual / scale:.3e}"
        )
    proj = range_projection(sig).matrix
    return MarketPriceOfRisk(u=u, projected=proj @ u, residual=residual)


def projected_risk_price_paths(model: MarketModel, bundle: PathBundle) -> np.ndarray:
    """P(X_{t_j}) u(X_{t_j}) along every path, shape (N, M, d)."""
    grid = bundle.grid
    m = grid.n_steps
    n_paths = bundle.n_paths
    out = np.empty((n_paths, m, model.d))
    if model.pu_state_independent:
        for j in range(m):
            out[:, j, :] = model.pu_deterministic(grid.times[j])
        return out
    for j in range(m):
        t = grid.times[j]
        x = bundle.states[:, j, :]
        sig = model.vol(t, x)
        rhs = model.drift(t, x) - model.rate(t) * x
        u = batch_min_norm_solve(sig, rhs)
        res = np.linalg.norm(np.einsum("pil,pl->pi", sig, u) - rhs, axis=1)
        scale = np.maximum(1.0, np.linalg.norm(rhs, axis=1))
        worst = int(np.argmax(res / scale))
        if res[worst] / scale[worst] > model.arbitrage_tol:
            raise ArbitrageDetected(
                f"market price of risk unsolvable on path {worst} at t={t}"
            )
        out[:, j, :] = u
    return out


def girsanov_density(model: MarketModel, bundle: PathBundle) -> GirsanovPath:
    """Z_t = exp(-int Pu . dW - 1/2 int |Pu|^2 ds) along P-measure paths."""
    if bundle.measure != "P":
        raise ValueError("girsanov_density expects a bundle simulated under P")
    pu = projected_risk_price_paths(model, bundle)
    dts = bundle.grid.dts
    incr = -np.einsum("pjd,pjd->pj", pu, bundle.increments) - 0.5 * np.einsum(
        "pjd,pjd->pj", pu, pu
    ) * dts[None, :]
    log_z = np.concatenate([np.zeros((bundle.n_paths, 1)), np.cumsum(incr, axis=1)], axis=1)
    z = np.exp(log_z)
    if not np.all(np.isfinite(z)):
        raise NonFinite("Girsanov density overflow")
    stats = np.einsum("pjd,pjd->p", pu, pu * dts[None, :, None])
    return GirsanovPath(z_values=z, log_z=log_z, integrability_stats=stats)


def q_increments(model: MarketModel, bundle: PathBundle) -> np.ndarray:
    """Q-Brownian increments dW~_j = dW_j + P(X_j) u(X_j) dt_j."""
    if bundle.measure != "P":
        raise ValueError("q_increments expects a bundle simulated under P")
    pu = projected_risk_price_paths(model, bundle)
    return bundle.increments + pu * bundle.grid.dts[None, :, None]
