"""Hedging engine: Clark-Ocone integrand, LSMC regression, hedge solve.

The replicating portfolio at each grid time solves

    sigma^T(X_t) theta = e^{-int_t^T r} P(X_t) E_Q[ D_t G
        - G int_t^T P(X_s) D_t(P(X_s) u(X_s)) . dW~_s | F_t(X) ]

with the minimal-norm theta (unique projected solution). Conditional
expectations are estimated by ridge-regularized least-squares Monte
Carlo on features of the path up to t (state plus running average /
running maximum for the path-dependent payoffs).
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .engine import (
    FirstVariation,
    PathBundle,
    TimeGrid,
    first_variation,
    fv_reductions,
    grid_projectors,
)
from .errors import IllConditioned, SchemaError, UnsupportedJacobian
from .linalg import batch_min_norm_solve, range_projection
from .model import MarketModel
from .payoffs import Payoff, argmax_index, evaluate, indicator

MAX_CONDITION = 1e10
BASES = ("polynomial", "payoff-aware")


@dataclass(frozen=True)
class RegressionSpec:
    basis: str = "payoff-aware"
    degree: int = 2
    ridge: float = 1e-8

    def __post_init__(self):
        if self.basis not in BASES:
            raise SchemaError(f"regression basis must be one of {BASES}")
        if not (1 <= self.degree <= 6):
            raise SchemaError("regression degree must be in 1..6")
        if self.ridge < 0:
            raise SchemaError("ridge must be >= 0")

    def to_dict(self) -> dict:
        return {"basis": self.basis, "degree": self.degree, "ridge": self.ridge}


@dataclass
class IntegrandSamples:
    """Batch of Clark-Ocone integrand samples at one base time."""

    time_index: int
    dhat_g: np.ndarray  # (N, d)
    correction: np.ndarray  # (N, d)
    g: np.ndarray  # (N,)
    discount: float

    @property
    def values(self) -> np.ndarray:
        return self.discount * (self.dhat_g - self.g[:, None] * self.correction)


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------


def _monomial_exponents(n_vars: int, degree: int, caps: tuple[int, ...] | None = None) -> list[tuple[int, ...]]:
    """Exponent tuples with total degree <= degree, each variable's power
    capped (binary variables like the exercise indicator cap at 1, since
    higher powers are exact duplicates)."""
    out = []
    for total in range(degree + 1):
        for combo in itertools.combinations_with_replacement(range(n_vars), total):
            e = [0] * n_vars
            for c in combo:
                e[c] += 1
            if caps is not None and any(p > caps[v] for v, p in enumerate(e)):
                continue
            out.append(tuple(e))
    return out


def path_extras(payoff: Payoff, bundle: PathBundle) -> dict[str, np.ndarray]:
    """Running path features per grid time: average and maximum of the
    primary payoff asset, shapes (N, M+1)."""
    states = bundle.states
    grid = bundle.grid
    a = payoff.assets[0]
    xs = states[:, :, a]
    run_max = np.maximum.accumulate(xs, axis=1)
    csum = np.concatenate(
        [np.zeros((states.shape[0], 1)), np.cumsum(xs[:, :-1] * grid.dts[None, :], axis=1)], axis=1
    )
    with np.errstate(invalid="ignore", divide="ignore"):
        run_avg = np.where(grid.times[None, :] > 0.0, csum / np.where(grid.times > 0, grid.times, 1.0), xs)
    return {"running_avg": run_avg, "running_max": run_max}


def assemble_variables(
    payoff: Payoff, spec: RegressionSpec, states_k: np.ndarray, extras_k: dict[str, np.ndarray] | None = None
) -> tuple[np.ndarray, tuple[int, ...]]:
    """Regression variables at one time, with per-variable power caps.

    The payoff-aware basis augments the state components with the
    running average (Asian) or running maximum (lookback) and with the
    exercise indicator evaluated at the current variables. The indicator
    lets the piecewise-polynomial fit track the payoff kink near expiry;
    its power is capped at 1 (it is binary)."""
    cols = [states_k[:, i] for i in range(states_k.shape[1])]
    caps = [spec.degree] * states_k.shape[1]
    if spec.basis == "payoff-aware":
        a = payoff.assets
        if payoff.kind == "asian_floating_call":
            if extras_k is not None:
                cols.append(extras_k["running_avg"])
                caps.append(spec.degree)
                inner = extras_k["running_avg"] - payoff.strike * states_k[:, a[1]]
            else:
                inner = None
        elif payoff.kind == "lookback_floating":
            if extras_k is not None:
                cols.append(extras_k["running_max"])
                caps.append(spec.degree)
                inner = extras_k["running_max"] - payoff.strike * states_k[:, a[1]]
            else:
                inner = None
        elif payoff.kind == "exchange":
            inner = states_k[:, a[0]] - states_k[:, a[1]]
        else:  # european_call
            inner = states_k[:, a[0]] - payoff.strike
        if inner is not None:
            cols.append((inner > 0.0).astype(float))
            caps.append(1)
    return np.column_stack(cols), tuple(caps)


def _monomials(z: np.ndarray, exps: list[tuple[int, ...]]) -> np.ndarray:
    max_pow = [max(e[v] for e in exps) for v in range(z.shape[1])]
    pows = []  # pows[v][p] = z_v ** p
    for v in range(z.shape[1]):
        table = [np.ones(z.shape[0]), z[:, v]]
        for p in range(2, max_pow[v] + 1):
            table.append(table[-1] * z[:, v])
        pows.append(table)
    feats = np.empty((z.shape[0], len(exps)))
    for j, e in enumerate(exps):
        col = None
        for v, p in enumerate(e):
            if p:
                col = pows[v][p] if col is None else col * pows[v][p]
        feats[:, j] = 1.0 if col is None else col
    return feats  # column 0 is the intercept


# ---------------------------------------------------------------------------
# regression
# ---------------------------------------------------------------------------


@dataclass
class RegressionFit:
    degree: int
    caps: tuple[int, ...]  # per-variable power caps
    var_mean: np.ndarray  # (v,) variable standardization from training
    var_std: np.ndarray  # (v,)
    mean: np.ndarray  # (p,) column standardization of the monomials
    std: np.ndarray  # (p,)
    kept: np.ndarray  # (p,) bool; column 0 (intercept) never kept here
    beta: np.ndarray  # (p + 1, n_out); row 0 = intercept
    r2: np.ndarray  # (n_out,)

    def features(self, variables: np.ndarray) -> np.ndarray:
        z = (variables - self.var_mean) / self.var_std
        return _monomials(z, _monomial_exponents(z.shape[1], self.degree, self.caps))

    def predict(self, variables: np.ndarray) -> np.ndarray:
        feats = self.features(variables)
        xs = (feats[:, self.kept] - self.mean[self.kept]) / self.std[self.kept]
        out = self.beta[0][None, :] + xs @ self.beta[1:][self.kept]
        return out


def regress_conditional(
    samples: np.ndarray, variables: np.ndarray, spec: RegressionSpec, caps: tuple[int, ...] | None = None
) -> RegressionFit:
    """Ridge least squares of the samples on polynomial features.

    Variables are standardized before taking powers (monomials of
    z-scores stay well conditioned up to degree 6), then the columns are
    standardized again. Zero-variance columns are dropped (at t = 0
    everything degenerates to the sample mean). R^2 is per output
    component, with the convention R^2 = 1 when the samples are constant.
    """
    y = np.asarray(samples, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if caps is None:
        caps = (spec.degree,) * variables.shape[1]
    var_mean = variables.mean(axis=0)
    var_std = variables.std(axis=0)
    # near-constant variables (e.g. a deterministic state component whose
    # spread is pure roundoff) would standardize into unit-variance noise;
    # freeze them to their mean instead
    const = var_std <= 1e-10 * np.maximum(1.0, np.abs(var_mean))
    var_std = np.where(const, np.inf, var_std)
    z = (variables - var_mean) / var_std
    feats = _monomials(z, _monomial_exponents(z.shape[1], spec.degree, caps))
    n, p = feats.shape
    mean = feats.mean(axis=0)
    std = feats.std(axis=0)
    kept = std > 1e-12 * np.maximum(1.0, np.abs(mean))
    kept[0] = False  # intercept column handled separately
    n_basis = int(np.count_nonzero(kept)) + 1
    if n < 10 * n_basis:
        raise ValueError(f"need >= {10 * n_basis} samples for {n_basis} basis functions, got {n}")
    xs = (feats[:, kept] - mean[kept]) / std[kept]
    design = np.column_stack([np.ones(n), xs])
    sv = np.linalg.svd(design, compute_uv=False)
    if sv[-1] == 0.0 or sv[0] / sv[-1] > MAX_CONDITION:
        raise IllConditioned(f"design matrix condition number exceeds {MAX_CONDITION:.0e}")
    lam = spec.ridge * n
    if lam > 0 and n_basis > 1:
        pen = np.sqrt(lam) * np.eye(design.shape[1])
        pen[0, 0] = 0.0  # intercept unpenalized
        a = np.vstack([design, pen])
        b = np.vstack([y, np.zeros((design.shape[1], y.shape[1]))])
    else:
        a, b = design, y
    coef, *_ = np.linalg.lstsq(a, b, rcond=None)
    resid = y - design @ coef
    ss_res = np.sum(resid**2, axis=0)
    ss_tot = np.sum((y - y.mean(axis=0)) ** 2, axis=0)
    r2 = np.where(ss_tot > 0, 1.0 - ss_res / np.where(ss_tot > 0, ss_tot, 1.0), 1.0)
    beta = np.zeros((p + 1, y.shape[1]))
    beta[0] = coef[0]
    beta[1:][kept] = coef[1:]
    return RegressionFit(
        degree=spec.degree,
        caps=caps,
        var_mean=var_mean,
        var_std=var_std,
        mean=mean,
        std=std,
        kept=kept,
        beta=beta,
        r2=r2,
    )


# ---------------------------------------------------------------------------
# Clark-Ocone integrand
# ---------------------------------------------------------------------------


def correction_integral(
    model: MarketModel,
    path_states: np.ndarray,
    increments: np.ndarray,
    grid: TimeGrid,
    fv: FirstVariation,
) -> np.ndarray:
    """int_t^T P(X_s) D_t(P(X_s) u(X_s)) . dW~_s for one Q path.

    Exactly the zero vector when Pu is state independent (its Malliavin
    derivative vanishes); otherwise a left-endpoint Ito sum using the
    analytic Jacobian of x -> P(x) u(x).
    """
    d = model.d
    if model.pu_state_independent:
        return np.zeros(d)
    k = fv.base_time_index
    out = np.zeros(d)
    for s in range(k, grid.n_steps):
        t = grid.times[s]
        x = path_states[s][None]
        jf = model.pu_jacobian(t, x)[0]  # (d, n)
        proj = range_projection(model.vol(t, x)[0]).matrix
        tmat = proj @ jf @ fv.matrices[s - k]  # (d, d); column = base direction
        out += tmat.T @ increments[s]
    return out


def _corrections_batch(model: MarketModel, bundle: PathBundle, hedge_times: list[int]) -> np.ndarray:
    """Correction vectors for every path at the requested base times."""
    if model.pu_state_independent:
        return np.zeros((bundle.n_paths, len(hedge_times), model.d))
    # force the Jacobian check before the expensive loop
    model.pu_jacobian(0.0, bundle.states[:1, 0, :])
    out = np.empty((bundle.n_paths, len(hedge_times), model.d))
    for p in range(bundle.n_paths):
        for i, k in enumerate(hedge_times):
            fv = first_variation(model, bundle.states[p], bundle.increments[p], bundle.grid, k)
            out[p, i] = correction_integral(model, bundle.states[p], bundle.increments[p], bundle.grid, fv)
    return out


def _dhat_g_batch(payoff: Payoff, red, ind: np.ndarray, k: int, strike: float) -> np.ndarray:
    if payoff.kind == "european_call":
        val = red.term1[:, k, :]
    elif payoff.kind == "exchange":
        val = red.term1[:, k, :] - red.term2[:, k, :]
    elif payoff.kind == "asian_floating_call":
        val = red.avg1[:, k, :] - strike * red.term2[:, k, :]
    else:  # lookback_floating
        val = red.tau1[:, k, :] - strike * red.term2[:, k, :]
    return val * ind[:, None]


def clark_ocone_rhs(model: MarketModel, payoff: Payoff, bundle: PathBundle, k: int) -> IntegrandSamples:
    """Per-path integrand samples e^{-int_t^T r}(D_t G - G * correction)."""
    if bundle.measure != "Q":
        raise ValueError("clark_ocone_rhs expects a Q-measure bundle")
    grid = bundle.grid
    a = payoff.assets
    tau_idx = argmax_index(payoff, bundle.states) if payoff.kind == "lookback_floating" else None
    red = fv_reductions(
        model,
        bundle,
        row1=a[0],
        row2=a[1] if len(a) > 1 else None,
        want_avg=payoff.kind == "asian_floating_call",
        tau_idx=tau_idx,
    )
    ind = indicator(payoff, bundle.states, grid).astype(float)
    g = evaluate(payoff, bundle.states, grid)
    corr = _corrections_batch(model, bundle, [k])[:, 0, :]
    disc = float(np.exp(-model.rate_integral(grid.times[k], grid.times[-1])))
    return IntegrandSamples(
        time_index=k, dhat_g=_dhat_g_batch(payoff, red, ind, k, payoff.strike), correction=corr, g=g, discount=disc
    )


# ---------------------------------------------------------------------------
# hedge plan
# ---------------------------------------------------------------------------


@dataclass
class HedgePlan:
    grid: TimeGrid
    hedge_times: np.ndarray  # indices k with a fitted regression
    fits: list[RegressionFit]
    payoff: Payoff
    spec: RegressionSpec
    v0: float
    v0_se: float
    train_seed: int
    n_train: int
    model_hash: str
    admissibility: float
    diagnostics: dict = field(default_factory=dict)
    theta_samples: dict = field(default_factory=dict)

    def fit_at(self, k: int) -> RegressionFit:
        pos = int(np.searchsorted(self.hedge_times, k))
        if pos >= len(self.hedge_times) or self.hedge_times[pos] != k:
            raise KeyError(f"no regression fitted at time index {k}")
        return self.fits[pos]

    def rhs_at(
        self,
        model: MarketModel,
        k: int,
        states_k: np.ndarray,
        extras_k: dict[str, np.ndarray] | None,
        projector: np.ndarray | None = None,
    ) -> np.ndarray:
        """Projected right-hand side P(x) * fitted conditional expectation.

        The discount e^{-int_t^T r} is already inside the regressed
        samples, so this is directly the RHS of the hedging system."""
        variables, _ = assemble_variables(self.payoff, self.spec, states_k, extras_k)
        pred = self.fit_at(k).predict(variables)
        if projector is not None:
            return pred @ projector.T
        sig = model.vol(self.grid.times[min(k, self.grid.n_steps - 1)], states_k)
        out = np.empty_like(pred)
        for p in range(states_k.shape[0]):
            out[p] = range_projection(sig[p]).matrix @ pred[p]
        return out

    def theta_at(
        self,
        model: MarketModel,
        k: int,
        states_k: np.ndarray,
        extras_k: dict[str, np.ndarray] | None = None,
        projector: np.ndarray | None = None,
    ) -> np.ndarray:
        """Minimal-norm hedge ratios at arbitrary states, shape (N, n)."""
        t = self.grid.times[min(k, self.grid.n_steps - 1)]
        rhs = self.rhs_at(model, k, states_k, extras_k, projector)
        sig_t = np.swapaxes(model.vol(t, states_k), 1, 2)  # (N, d, n)
        return batch_min_norm_solve(sig_t, rhs)

    # -- persistence ----------------------------------------------------

    def save(self, json_path, npz_path) -> None:
        p = self.fits[0].mean.shape[0]
        n_k = len(self.fits)
        n_out = self.fits[0].beta.shape[1]
        mean = np.stack([f.mean for f in self.fits])
        std = np.stack([f.std for f in self.fits])
        kept = np.stack([f.kept for f in self.fits])
        beta = np.stack([f.beta for f in self.fits])
        r2 = np.stack([f.r2 for f in self.fits])
        var_mean = np.stack([f.var_mean for f in self.fits])
        var_std = np.stack([f.var_std for f in self.fits])
        np.savez_compressed(
            npz_path,
            grid_times=self.grid.times,
            hedge_times=np.asarray(self.hedge_times, dtype=np.int64),
            mean=mean,
            std=std,
            kept=kept,
            beta=beta,
            r2=r2,
            var_mean=var_mean,
            var_std=var_std,
            caps=np.asarray(self.fits[0].caps, dtype=np.int64),
        )
        payload = {
            "v0": self.v0,
            "v0_se": self.v0_se,
            "train_seed": self.train_seed,
            "n_train": self.n_train,
            "model_hash": self.model_hash,
            "admissibility": self.admissibility,
            "payoff": self.payoff.to_dict(),
            "regression": self.spec.to_dict(),
            "n_features": p,
            "n_outputs": n_out,
            "n_hedge_times": n_k,
            "diagnostics": self.diagnostics,
        }
        with open(json_path, "w") as fh:
            json.dump({"payload": payload}, fh, sort_keys=True, indent=2)

    @classmethod
    def load(cls, json_path, npz_path) -> "HedgePlan":
        with open(json_path) as fh:
            payload = json.load(fh)["payload"]
        data = np.load(npz_path)
        spec = RegressionSpec(**payload["regression"])
        caps = tuple(int(c) for c in data["caps"])
        fits = [
            RegressionFit(
                degree=spec.degree,
                caps=caps,
                var_mean=data["var_mean"][i],
                var_std=data["var_std"][i],
                mean=data["mean"][i],
                std=data["std"][i],
                kept=data["kept"][i],
                beta=data["beta"][i],
                r2=data["r2"][i],
            )
            for i in range(data["mean"].shape[0])
        ]
        pay = payload["payoff"]
        return cls(
            grid=TimeGrid(data["grid_times"]),
            hedge_times=data["hedge_times"],
            fits=fits,
            payoff=Payoff(kind=pay["kind"], strike=pay["strike"], assets=tuple(pay["assets"])),
            spec=spec,
            v0=payload["v0"],
            v0_se=payload["v0_se"],
            train_seed=payload["train_seed"],
            n_train=payload["n_train"],
            model_hash=payload["model_hash"],
            admissibility=payload["admissibility"],
            diagnostics=payload["diagnostics"],
        )


def solve_hedge(
    model: MarketModel,
    payoff: Payoff,
    bundle: PathBundle,
    spec: RegressionSpec,
    hedge_times: list[int] | None = None,
    diag_paths: int = 512,
) -> HedgePlan:
    """Fit the full hedge plan on a Q-measure training bundle.

    hedge_times restricts the fitted grid indices (default: all). The
    diagnostics (theta samples, residuals, admissibility estimate) are
    computed on a path subsample of size diag_paths.
    """
    if bundle.measure != "Q":
        raise ValueError("solve_hedge expects a Q-measure training bundle")
    grid = bundle.grid
    m = grid.n_steps
    ks = list(range(m + 1)) if hedge_times is None else sorted(set(hedge_times))
    if any(k < 0 or k > m for k in ks):
        raise ValueError("hedge time index outside grid")

    g = evaluate(payoff, bundle.states, grid)
    ind = indicator(payoff, bundle.states, grid).astype(float)
    disc_t = float(np.exp(-model.rate_integral(0.0, grid.times[-1])))
    dg_paths = disc_t * g
    v0 = float(dg_paths.mean())
    v0_se = float(dg_paths.std(ddof=1) / np.sqrt(bundle.n_paths))

    a = payoff.assets
    tau_idx = argmax_index(payoff, bundle.states) if payoff.kind == "lookback_floating" else None
    red = fv_reductions(
        model,
        bundle,
        row1=a[0],
        row2=a[1] if len(a) > 1 else None,
        want_avg=payoff.kind == "asian_floating_call",
        tau_idx=tau_idx,
    )
    corr = _corrections_batch(model, bundle, ks)
    extras = path_extras(payoff, bundle)
    projs = grid_projectors(model, grid)

    sub = slice(0, min(diag_paths, bundle.n_paths))
    fits: list[RegressionFit] = []
    r2_all = []
    resid_all = []
    theta_rows = []
    adm = 0.0
    second_moments = []
    for i, k in enumerate(ks):
        disc_k = float(np.exp(-model.rate_integral(grid.times[k], grid.times[-1])))
        dg = _dhat_g_batch(payoff, red, ind, k, payoff.strike)
        samples = disc_k * (dg - g[:, None] * corr[:, i, :])
        extras_k = {name: arr[:, k] for name, arr in extras.items()}
        variables, caps = assemble_variables(payoff, spec, bundle.states[:, k, :], extras_k)
        fit = regress_conditional(samples, variables, spec, caps)
        fits.append(fit)
        r2_all.append(fit.r2.tolist())
        second_moments.append(float(np.mean(np.sum(samples**2, axis=1))))

        # diagnostics on the subsample
        t_k = grid.times[min(k, m - 1)]
        x_sub = bundle.states[sub, k, :]
        pred = fit.predict(variables[sub])
        if projs is not None:
            pk = projs[min(k, m - 1)]
            rhs = pred @ pk.T
        else:
            sig_sub = model.vol(t_k, x_sub)
            rhs = np.empty_like(pred)
            for p in range(x_sub.shape[0]):
                rhs[p] = range_projection(sig_sub[p]).matrix @ pred[p]
        sig_t = np.swapaxes(model.vol(t_k, x_sub), 1, 2)
        theta = batch_min_norm_solve(sig_t, rhs)
        lin_res = np.linalg.norm(np.einsum("pdn,pn->pd", sig_t, theta) - rhs, axis=1)
        resid_all.append(float(lin_res.max()))
        sig_theta = np.einsum("pdn,pn->pd", sig_t, theta)
        if k < m:
            adm += float(np.mean(np.sum(sig_theta**2, axis=1))) * grid.dts[k]
        theta_rows.append((k, x_sub.copy(), theta, rhs, fit.r2.copy(), float(lin_res.max())))

    plan = HedgePlan(
        grid=grid,
        hedge_times=np.asarray(ks, dtype=np.int64),
        fits=fits,
        payoff=payoff,
        spec=spec,
        v0=v0,
        v0_se=v0_se,
        train_seed=bundle.seed,
        n_train=bundle.n_paths,
        model_hash=model.config_hash(),
        admissibility=adm,
        diagnostics={
            "r2": r2_all,
            "max_linear_residual": resid_all,
            "integrand_second_moment": second_moments,
        },
        theta_samples={"rows": theta_rows},
    )
    return plan


def export_plan_csv(plan: HedgePlan, path) -> None:
    """Diagnostic CSV: one row per (time, sample state)."""
    rows = plan.theta_samples.get("rows", [])
    if not rows:
        return
    n = rows[0][1].shape[1]
    d = rows[0][3].shape[1]
    header = (
        ["time"]
        + [f"X_{i + 1}" for i in range(n)]
        + [f"theta_{i + 1}" for i in range(n)]
        + [f"projected_rhs_{i + 1}" for i in range(d)]
        + [f"r2_{i + 1}" for i in range(d)]
        + ["residual"]
    )
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for k, xs, theta, rhs, r2, res in rows:
            t = plan.grid.times[k]
            for p in range(xs.shape[0]):
                vals = (
                    [t]
                    + list(xs[p])
                    + list(theta[p])
                    + list(rhs[p])
                    + list(r2)
                    + [res]
                )
                fh.write(",".join(repr(float(v)) for v in vals) + "\n")
