"""Out-of-sample pricing and hedge replication.

The backtester replays a fitted hedge plan on fresh Q-measure paths
and compares the terminal self-financing wealth with the payoff. It
refuses to run on the training seed (in-sample replay silently
overstates quality) and on a model whose configuration hash differs
from the one the plan was trained on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import RNG_BLOCK, TimeGrid, grid_projectors, iter_path_blocks
from .errors import GridMismatch, NonFinite, SeedReuseError
from .hedging import HedgePlan, path_extras
from .model import MarketModel
from .payoffs import Payoff, evaluate


@dataclass
class PriceResult:
    value: float
    std_error: float
    n_paths: int
    seed: int


@dataclass
class BacktestReport:
    n_paths: int
    seed: int
    v0: float
    rmse: float
    relative_rmse: float  # rmse / price
    mean_error: float  # E[V_T - G]; ~0 for a good hedge (martingale check)
    worst_abs_error: float
    error_quantiles: dict  # {"q50": ..., "q90": ..., "q99": ...} of |V_T - G|
    payoff_mean: float
    per_path_errors: np.ndarray | None = None  # V_T - G; not serialized

    def to_dict(self) -> dict:
        return {
            "n_paths": self.n_paths,
            "seed": self.seed,
            "v0": self.v0,
            "rmse": self.rmse,
            "relative_rmse": self.relative_rmse,
            "mean_error": self.mean_error,
            "worst_abs_error": self.worst_abs_error,
            "error_quantiles": self.error_quantiles,
            "payoff_mean": self.payoff_mean,
        }


def price(model: MarketModel, payoff: Payoff, grid: TimeGrid, n_paths: int, seed: int) -> PriceResult:
    """Monte Carlo price E_Q[e^{-int r} G], streamed in RNG blocks."""
    disc = float(np.exp(-model.rate_integral(0.0, grid.times[-1])))
    total = 0.0
    total_sq = 0.0
    count = 0
    for bundle in iter_path_blocks(model, grid, n_paths, seed, measure="Q"):
        g = disc * evaluate(payoff, bundle.states, grid)
        total += float(g.sum())
        total_sq += float(np.sum(g * g))
        count += g.size
    mean = total / count
    var = max(total_sq / count - mean * mean, 0.0) * count / max(count - 1, 1)
    return PriceResult(value=mean, std_error=float(np.sqrt(var / count)), n_paths=count, seed=seed)


def replicate(
    model: MarketModel,
    payoff: Payoff,
    plan: HedgePlan,
    n_paths: int,
    seed: int,
    block: int = RNG_BLOCK,
) -> BacktestReport:
    """Replay the hedge on fresh Q paths and report the replication error.

    Discounted wealth recursion: U_0 = v0,
    dU = e^{-int_0^t r} theta_t . sigma(X_t) dW~_t, and the terminal
    wealth V_T = e^{int_0^T r} U_T is compared against G(X).
    """
    if seed == plan.train_seed:
        raise SeedReuseError("backtest seed equals the training seed; use fresh paths")
    if plan.model_hash != model.config_hash():
        raise GridMismatch("hedge plan was trained on a different model configuration")
    grid = plan.grid
    m = grid.n_steps
    needed = set(range(m))
    have = set(int(k) for k in plan.hedge_times)
    if not needed <= have:
        raise GridMismatch("hedge plan does not cover every rebalancing time of its grid")
    projs = grid_projectors(model, grid)
    grow = float(np.exp(model.rate_integral(0.0, grid.times[-1])))
    disc0 = np.exp(-np.array([model.rate_integral(0.0, grid.times[j]) for j in range(m)]))

    errs = np.empty(n_paths)
    g_all = np.empty(n_paths)
    pos = 0
    for bundle in iter_path_blocks(model, grid, n_paths, seed, measure="Q", block=block):
        extras = path_extras(payoff, bundle)
        wealth = np.full(bundle.n_paths, plan.v0)  # discounted; U_0 = V_0
        for j in range(m):
            x = bundle.states[:, j, :]
            extras_j = {name: arr[:, j] for name, arr in extras.items()}
            pj = projs[j] if projs is not None else None
            theta = plan.theta_at(model, j, x, extras_j, projector=pj)
            sig = model.vol(grid.times[j], x)
            gain = np.einsum("pn,pnd,pd->p", theta, sig, bundle.increments[:, j, :])
            wealth += disc0[j] * gain
        v_t = grow * wealth
        if not np.all(np.isfinite(v_t)):
            raise NonFinite("hedge wealth overflow during backtest")
        g = evaluate(payoff, bundle.states, grid)
        errs[pos : pos + bundle.n_paths] = v_t - g
        g_all[pos : pos + bundle.n_paths] = g
        pos += bundle.n_paths

    abs_err = np.abs(errs)
    rmse = float(np.sqrt(np.mean(errs**2)))
    return BacktestReport(
        n_paths=n_paths,
        seed=seed,
        v0=plan.v0,
        rmse=rmse,
        relative_rmse=rmse / abs(plan.v0) if plan.v0 != 0 else float("inf"),
        mean_error=float(errs.mean()),
        worst_abs_error=float(abs_err.max()),
        error_quantiles={
            "q50": float(np.quantile(abs_err, 0.5)),
            "q90": float(np.quantile(abs_err, 0.9)),
            "q99": float(np.quantile(abs_err, 0.99)),
        },
        payoff_mean=float(g_all.mean()),
        per_path_errors=errs,
    )
