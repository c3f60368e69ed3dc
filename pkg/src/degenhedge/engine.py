"""Path simulation and first-variation (pathwise Malliavin) processes.

Brownian increments come from counter-based Philox streams keyed by
(seed, block index) over fixed-size path blocks, so results are
bit-identical regardless of how many workers consume the blocks or how
callers chunk the paths.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import kernels
from ._backend import use_numba
from .errors import NonFinite
from .linalg import range_projection
from .model import MarketModel

RNG_BLOCK = 4096  # paths per Philox stream; fixed engine constant


@dataclass(frozen=True)
class TimeGrid:
    times: np.ndarray  # strictly increasing, times[0] = 0

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or t.size < 2 or t[0] != 0.0 or np.any(np.diff(t) <= 0):
            raise ValueError("grid must be strictly increasing from 0")
        if not np.all(np.isfinite(t)):
            raise NonFinite("grid times not finite")
        object.__setattr__(self, "times", t)

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    @property
    def dts(self) -> np.ndarray:
        return np.diff(self.times)

    def __eq__(self, other) -> bool:
        return isinstance(other, TimeGrid) and np.array_equal(self.times, other.times)


def resolve_grid(model: MarketModel, steps: int) -> TimeGrid:
    if steps < 1:
        raise ValueError("steps must be >= 1")
    return TimeGrid(np.linspace(0.0, model.horizon, steps + 1))


@dataclass
class PathBundle:
    measure: str  # 'P' or 'Q'
    grid: TimeGrid
    n_paths: int
    states: np.ndarray  # (N, M+1, n)
    increments: np.ndarray  # (N, M, d); dW under P, dW~ under Q
    seed: int
    rank_log: list  # [(time, rank)] changes of rank(sigma) along the grid


def brownian_increments(seed: int, path_start: int, n_paths: int, n_steps: int, d: int, dts: np.ndarray) -> np.ndarray:
    """Increments for paths [path_start, path_start + n_paths).

    Path p draws from the Philox stream keyed (seed, p // RNG_BLOCK) at
    a fixed offset, so any chunking reproduces the same numbers.
    """
    out = np.empty((n_paths, n_steps, d))
    p = path_start
    end = path_start + n_paths
    while p < end:
        block = p // RNG_BLOCK
        block_lo = block * RNG_BLOCK
        take_hi = min(block_lo + RNG_BLOCK, end)
        lo = p - block_lo
        hi = take_hi - block_lo
        rng = np.random.Generator(np.random.Philox(key=[seed, block]))
        # draws fill in C order, so a shorter leading axis is a prefix
        z = rng.standard_normal((hi, n_steps, d))
        out[p - path_start : take_hi - path_start] = z[lo:hi]
        p = take_hi
    out *= np.sqrt(dts)[None, :, None]
    return out


def _euler_numpy(model: MarketModel, grid: TimeGrid, dW: np.ndarray, measure: str) -> np.ndarray:
    n_paths = dW.shape[0]
    m = grid.n_steps
    states = np.empty((n_paths, m + 1, model.n))
    states[:, 0, :] = model.x0
    dts = grid.dts
    bad = -1
    for j in range(m):
        t = grid.times[j]
        x = states[:, j, :]
        if not np.all(np.isfinite(x)) or np.any(np.abs(x) > kernels.EXPLOSION_LIMIT):
            finite = np.all(np.isfinite(x), axis=1) & np.all(np.abs(x) <= kernels.EXPLOSION_LIMIT, axis=1)
            bad = int(np.argmin(finite))
            raise NonFinite(f"path {bad} exploded before step {j}")
        if measure == "Q":
            b = model.rate(t) * x
        else:
            b = model.drift(t, x)
        sig = model.vol(t, x)
        states[:, j + 1, :] = x + b * dts[j] + np.einsum("pil,pl->pi", sig, dW[:, j, :])
    return states


def _euler_affine_tables(model: MarketModel, grid: TimeGrid, measure: str):
    m = grid.n_steps
    n, d = model.n, model.d
    A = np.empty((m, n, n))
    c = np.empty((m, n))
    S0 = np.empty((m, n, d))
    G = np.empty((m, n, d, n))
    eye = np.eye(n)
    for j in range(m):
        t = grid.times[j]
        if measure == "Q":
            A[j] = model.rate(t) * eye
            c[j] = 0.0
        else:
            aj, cj = model.drift_affine(t)
            A[j], c[j] = aj, cj
        s0, g = model.vol_affine(t)
        S0[j], G[j] = s0, g
    return A, c, S0, G


def _simulate_states(model: MarketModel, grid: TimeGrid, dW: np.ndarray, measure: str) -> np.ndarray:
    if use_numba() and model.is_affine_parameterizable:
        A, c, S0, G = _euler_affine_tables(model, grid, measure)
        states = np.empty((dW.shape[0], grid.n_steps + 1, model.n))
        bad = kernels.euler_affine_paths(model.x0, A, c, S0, G, dW, grid.dts, states)
        if bad >= 0:
            raise NonFinite(f"path {bad} exploded")
        return states
    return _euler_numpy(model, grid, dW, measure)


def _rank_log(model: MarketModel, grid: TimeGrid, states: np.ndarray) -> list:
    """Rank changes of sigma along the grid.

    For models whose sigma-row-space is state independent the rank is a
    function of t only; otherwise probe a small path subsample."""
    log = []
    last = None
    if model.vol_state_independent_range:
        probe = states[:1]
    else:
        probe = states[: min(8, states.shape[0])]
    for j, t in enumerate(grid.times):
        ranks = {range_projection(model.vol(t, probe[:, j, :])[i]).rank for i in range(probe.shape[0])}
        r = max(ranks)
        if r != last:
            log.append((float(t), int(r)))
            last = r
    return log


def simulate_paths(
    model: MarketModel,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    measure: str = "Q",
    path_start: int = 0,
) -> PathBundle:
    """Euler-Maruyama paths under P (true drift) or Q (drift r_t x).

    Deterministic given (seed, grid, n_paths, measure); independent of
    worker count or chunking by construction of the RNG streams.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    if measure not in ("P", "Q"):
        raise ValueError("measure must be 'P' or 'Q'")
    dW = brownian_increments(seed, path_start, n_paths, grid.n_steps, model.d, grid.dts)
    states = _simulate_states(model, grid, dW, measure)
    if not np.all(np.isfinite(states)):
        bad = int(np.argmin(np.all(np.isfinite(states.reshape(n_paths, -1)), axis=1)))
        raise NonFinite(f"path {bad} exploded")
    return PathBundle(
        measure=measure,
        grid=grid,
        n_paths=n_paths,
        states=states,
        increments=dW,
        seed=seed,
        rank_log=_rank_log(model, grid, states),
    )


def iter_path_blocks(
    model: MarketModel, grid: TimeGrid, n_paths: int, seed: int, measure: str = "Q", block: int = RNG_BLOCK
) -> Iterator[PathBundle]:
    """Stream the same paths simulate_paths(n_paths) would produce, in
    chunks, to bound memory on large runs."""
    start = 0
    while start < n_paths:
        take = min(block, n_paths - start)
        yield simulate_paths(model, grid, take, seed, measure, path_start=start)
        start += take


# ---------------------------------------------------------------------------
# projectors along the grid
# ---------------------------------------------------------------------------


def grid_projectors(model: MarketModel, grid: TimeGrid) -> np.ndarray | None:
    """Per-step projector P(t_j) for models with state-independent
    sigma-row-space; None when P depends on the state."""
    if not model.vol_state_independent_range:
        return None
    out = np.empty((grid.n_steps, model.d, model.d))
    ref = np.where(model.x0 != 0.0, model.x0, 1.0)
    for j in range(grid.n_steps):
        sig = model.vol(grid.times[j], ref[None])[0]
        if model.vol_spec.family in ("linear-in-state", "time-dependent-linear"):
            # row space of diag(x) Sigma equals the row space of Sigma
            sig = sig / ref[:, None]
        out[j] = range_projection(sig).matrix
    return out


def projected_increments(model: MarketModel, bundle: PathBundle) -> np.ndarray:
    """P(X_{t_j}) dW_j for every path and step."""
    proj = grid_projectors(model, bundle.grid)
    if proj is not None:
        return np.einsum("jde,pje->pjd", proj, bundle.increments)
    out = np.empty_like(bundle.increments)
    for j in range(bundle.grid.n_steps):
        sig = model.vol(bundle.grid.times[j], bundle.states[:, j, :])
        for p in range(bundle.n_paths):
            out[p, j] = range_projection(sig[p]).matrix @ bundle.increments[p, j]
    return out


# ---------------------------------------------------------------------------
# first variation
# ---------------------------------------------------------------------------


@dataclass
class FirstVariation:
    base_time_index: int
    matrices: np.ndarray  # (M - k + 1, n, d); matrices[j] = D_{t_k} X_{t_{k+j}}


def first_variation(
    model: MarketModel,
    path_states: np.ndarray,
    increments: np.ndarray,
    grid: TimeGrid,
    k: int,
    measure: str = "Q",
) -> FirstVariation:
    """Euler discretization of the variational SDE along one path.

    D_{t_k} X_{t_k} = sigma(t_k, X_k); the noise term uses the projected
    increments P(X_s) dW_s with the same draws that built the path. The
    drift Jacobian must match the measure the path was simulated under
    (r_t * I for the Q dynamics).
    """
    m = grid.n_steps
    if not (0 <= k <= m):
        raise ValueError("base index outside grid")
    n, d = model.n, model.d
    mats = np.empty((m - k + 1, n, d))
    t_init = grid.times[k] if k < m else grid.times[m - 1]
    mats[0] = model.vol(t_init, path_states[k][None])[0]
    for s in range(k, m):
        t = grid.times[s]
        x = path_states[s][None]
        proj = range_projection(model.vol(t, x)[0]).matrix
        pdw = proj @ increments[s]
        if measure == "Q":
            jb = model.rate(t) * np.eye(n)
        else:
            jb = model.drift_jac(t, x)[0]
        jsig = model.vol_jac(t, x)[0]  # (n, d, n)
        h = np.einsum("iqm,q->im", jsig, pdw)
        step = np.eye(n) + grid.dts[s] * jb + h
        mats[s - k + 1] = step @ mats[s - k]
        if not np.all(np.isfinite(mats[s - k + 1])):
            raise NonFinite(f"first variation exploded at step {s}")
    return FirstVariation(base_time_index=k, matrices=mats)


# ---------------------------------------------------------------------------
# batch first-variation reductions (hedging hot path)
# ---------------------------------------------------------------------------


@dataclass
class FvReductions:
    """Per-path, per-base-time reductions of the first variation.

    term1 / term2 : rows (asset indices) of D_{t_k} X_T, shape (N, M+1, d)
    avg1          : (dt / T) * sum over left endpoints of row1, or None
    tau1          : row1 of D_{t_k} X_{tau} (0 when tau < t_k), or None
    """

    term1: np.ndarray
    term2: np.ndarray | None
    avg1: np.ndarray | None
    tau1: np.ndarray | None


def _linear_family_row_scale(model: MarketModel, grid: TimeGrid) -> np.ndarray:
    """Sigma(t_k) tables for the linear families, shape (M+1, n, d)."""
    m = grid.n_steps
    out = np.empty((m + 1, model.n, model.d))
    for k in range(m + 1):
        t = grid.times[k] if k < m else grid.times[m - 1]
        if model.vol_spec.family == "linear-in-state":
            out[k] = np.asarray(model.vol_spec.params["matrix"], dtype=float)
        else:
            out[k] = np.asarray(model._vol_table.at(t), dtype=float)
    return out


def fv_reductions(
    model: MarketModel,
    bundle: PathBundle,
    row1: int,
    row2: int | None = None,
    want_avg: bool = False,
    tau_idx: np.ndarray | None = None,
) -> FvReductions:
    """Reductions of D_{t_k} X over all base times k for every path.

    For the multiplicative (linear) families each row of the variational
    matrix satisfies the same per-step recursion as the corresponding
    asset, so D_{t_k} X_s = Sigma_i(t_k) X^i_s row-wise and everything
    collapses to suffix sums over the stored states. Other families run
    the full Euler sweep (numba kernel or numpy fallback).
    """
    linear = model.vol_spec.family in ("linear-in-state", "time-dependent-linear") and model.drift_spec.family in (
        "linear-in-state",
        "time-dependent-linear",
    )
    if linear:
        return _fv_reductions_linear(model, bundle, row1, row2, want_avg, tau_idx)
    return _fv_reductions_sweep(model, bundle, row1, row2, want_avg, tau_idx)


def _fv_reductions_linear(model, bundle, row1, row2, want_avg, tau_idx) -> FvReductions:
    grid = bundle.grid
    m = grid.n_steps
    sig_tab = _linear_family_row_scale(model, grid)  # (M+1, n, d)
    states = bundle.states

    def row_terms(row):
        # D_{t_k} X_T row = Sigma_row(t_k) * X^row_T
        return sig_tab[None, :, row, :] * states[:, -1, row, None, None]

    term1 = row_terms(row1)
    term2 = row_terms(row2) if row2 is not None else None
    avg1 = None
    if want_avg:
        # (dt/T) sum_{s=k}^{M-1} D_{t_k} X_s row1 = Sigma_row1(t_k) * suffix
        w = np.zeros((bundle.n_paths, m + 1))
        xs = states[:, :m, row1] * grid.dts[None, :]
        w[:, :m] = np.cumsum(xs[:, ::-1], axis=1)[:, ::-1]
        avg1 = sig_tab[None, :, row1, :] * (w / model.horizon)[:, :, None]
    tau1 = None
    if tau_idx is not None:
        x_tau = np.take_along_axis(states[:, :, row1], tau_idx[:, None], axis=1)  # (N, 1)
        tau1 = sig_tab[None, :, row1, :] * x_tau[:, :, None]
        mask = np.arange(m + 1)[None, :] <= tau_idx[:, None]
        tau1 = tau1 * mask[:, :, None]
    return FvReductions(term1=term1, term2=term2, avg1=avg1, tau1=tau1)


def _fv_reductions_sweep(model, bundle, row1, row2, want_avg, tau_idx) -> FvReductions:
    grid = bundle.grid
    m = grid.n_steps
    n_paths = bundle.n_paths
    d = model.d
    pdW = projected_increments(model, bundle)
    want_tau = tau_idx is not None
    taus = tau_idx if want_tau else np.zeros(n_paths, dtype=np.int64)
    out_t1 = np.zeros((n_paths, m + 1, d))
    out_t2 = np.zeros((n_paths, m + 1, d))
    out_avg = np.zeros((n_paths, m + 1, d))
    out_tau = np.zeros((n_paths, m + 1, d))
    r2 = row2 if row2 is not None else row1

    if use_numba() and model.is_affine_parameterizable:
        A, _, S0, G = _euler_affine_tables(model, grid, bundle.measure)
        kernels.fv_sweep_affine(
            bundle.states,
            pdW,
            A,
            S0,
            G,
            grid.dts,
            row1,
            r2,
            np.asarray(taus, dtype=np.int64),
            True,
            want_avg,
            want_tau,
            model.horizon,
            out_t1,
            out_t2,
            out_avg,
            out_tau,
        )
    else:
        for k in range(m + 1):
            jc = k if k < m else m - 1
            dmat = model.vol(grid.times[jc], bundle.states[:, k, :])  # (N, n, d)
            if want_tau:
                hit = taus == k
                out_tau[hit, k, :] = dmat[hit, row1, :]
            for s in range(k, m):
                if want_avg:
                    out_avg[:, k, :] += dmat[:, row1, :] * (grid.dts[s] / model.horizon)
                x = bundle.states[:, s, :]
                if bundle.measure == "Q":
                    jb = np.broadcast_to(
                        model.rate(grid.times[s]) * np.eye(model.n), (x.shape[0], model.n, model.n)
                    )
                else:
                    jb = model.drift_jac(grid.times[s], x)
                jsig = model.vol_jac(grid.times[s], x)
                h = np.einsum("piqm,pq->pim", jsig, pdW[:, s, :])
                step = np.eye(model.n)[None] + grid.dts[s] * jb + h
                dmat = np.einsum("pim,pml->pil", step, dmat)
                if want_tau:
                    hit = taus == s + 1
                    out_tau[hit, k, :] = dmat[hit, row1, :]
            out_t1[:, k, :] = dmat[:, row1, :]
            out_t2[:, k, :] = dmat[:, r2, :]
    return FvReductions(
        term1=out_t1,
        term2=out_t2 if row2 is not None else None,
        avg1=out_avg if want_avg else None,
        tau1=out_tau if want_tau else None,
    )


def dump_paths_csv(bundle: PathBundle, states_path, increments_path) -> None:
    """CSV dump: (path_id, time, X_1..X_n) plus a companion increments file."""
    n = bundle.states.shape[2]
    d = bundle.increments.shape[2]
    with open(states_path, "w") as fh:
        fh.write("path_id,time," + ",".join(f"X_{i + 1}" for i in range(n)) + "\n")
        for p in range(bundle.n_paths):
            for j, t in enumerate(bundle.grid.times):
                row = ",".join(repr(v) for v in bundle.states[p, j])
                fh.write(f"{p},{t!r},{row}\n")
    with open(increments_path, "w") as fh:
        fh.write("path_id,step," + ",".join(f"dW_{i + 1}" for i in range(d)) + "\n")
        for p in range(bundle.n_paths):
            for j in range(bundle.grid.n_steps):
                row = ",".join(repr(v) for v in bundle.increments[p, j])
                fh.write(f"{p},{j},{row}\n")
