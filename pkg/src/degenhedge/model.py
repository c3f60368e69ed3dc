"""Market model: coefficient families, config parsing, no-arbitrage probe.

The drift/vol coefficient families are whitelisted so that the Lipschitz
and linear-growth assumptions behind the SDE hold by construction:

  constant                b(x) = b0                  sigma(x) = S
  affine                  b(x) = A x + c             sigma(x)[i,l] = S[i,l] + G[i,l,:] . x
  linear-in-state         b_i(x) = mu_i x_i          sigma(x)[i,l] = S[i,l] x_i
  time-dependent-linear   as above with piecewise-constant tables in t
  expression              closed grammar (+, *, constants, x1..xn, tanh)

The riskless rate is a deterministic piecewise-constant table.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np
import sympy as sp

from .errors import (
    DimensionMismatch,
    NonFinite,
    SchemaError,
    UnsupportedFamily,
    UnsupportedJacobian,
)
from .linalg import min_norm_solve, range_projection

FAMILIES = ("constant", "affine", "linear-in-state", "time-dependent-linear", "expression")

DEFAULT_ARBITRAGE_TOL = 1e-8


# ---------------------------------------------------------------------------
# schema helpers
# ---------------------------------------------------------------------------


def _as_section(cfg: dict, key: str, allowed: set[str], required: set[str]) -> dict:
    if key not in cfg:
        raise SchemaError(f"missing section '{key}'")
    sec = cfg[key]
    if not isinstance(sec, dict):
        raise SchemaError(f"section '{key}' must be a mapping")
    unknown = set(sec) - allowed
    if unknown:
        raise SchemaError(f"unknown keys in '{key}': {sorted(unknown)}")
    missing = required - set(sec)
    if missing:
        raise SchemaError(f"missing keys in '{key}': {sorted(missing)}")
    return sec


def _number(sec: dict, key: str, ctx: str) -> float:
    v = sec[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise SchemaError(f"{ctx}.{key} must be a number, got {type(v).__name__}")
    return float(v)


def _count(sec: dict, key: str, ctx: str) -> int:
    v = sec[key]
    if isinstance(v, bool) or not isinstance(v, int):
        raise SchemaError(f"{ctx}.{key} must be an integer")
    return v


def _float_array(value: Any, shape: tuple[int, ...], ctx: str) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"{ctx} must be a numeric array") from exc
    if arr.shape != shape:
        raise DimensionMismatch(f"{ctx} must have shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise SchemaError(f"{ctx} contains non-finite values")
    return arr


# ---------------------------------------------------------------------------
# expression grammar
# ---------------------------------------------------------------------------


def _parse_expression(text: str, symbols: list[sp.Symbol]) -> sp.Expr:
    """Parse one expression of the closed grammar: +, -, *, numeric
    constants, state variables x1..xn and tanh."""
    if not isinstance(text, str):
        raise SchemaError("expression entries must be strings")
    local = {str(s): s for s in symbols}
    local["tanh"] = sp.tanh
    try:
        expr = sp.sympify(text, locals=local, rational=False)
    except (sp.SympifyError, SyntaxError, TypeError) as exc:
        raise SchemaError(f"cannot parse expression {text!r}") from exc
    allowed_syms = set(symbols)
    for node in sp.preorder_traversal(expr):
        if isinstance(node, (sp.Add, sp.Mul, sp.Number)):
            continue
        if isinstance(node, sp.Symbol):
            if node not in allowed_syms:
                raise SchemaError(f"unknown symbol {node} in expression {text!r}")
            continue
        if isinstance(node, sp.Pow):
            if not (node.exp.is_Integer and node.exp > 0):
                raise SchemaError(f"only positive integer powers allowed: {text!r}")
            continue
        if node.func is sp.tanh:
            continue
        raise SchemaError(f"disallowed operation {node.func} in expression {text!r}")
    return expr


def _lambdify_vec(exprs: np.ndarray, symbols: list[sp.Symbol]) -> Callable:
    """Lambdify an object array of sympy expressions into a function
    mapping states (N, n) -> values (N, *exprs.shape)."""
    flat = [sp.lambdify(symbols, e, modules="numpy") for e in exprs.ravel()]
    shape = exprs.shape

    def evaluate(x: np.ndarray) -> np.ndarray:
        cols = [np.asarray(x[:, i], dtype=float) for i in range(x.shape[1])]
        out = np.empty((x.shape[0],) + shape)
        flat_out = out.reshape(x.shape[0], -1)
        for j, f in enumerate(flat):
            flat_out[:, j] = f(*cols)
        return out

    return evaluate


# ---------------------------------------------------------------------------
# piecewise tables
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PiecewiseTable:
    """Piecewise-constant-in-time values; segment i applies on
    [t_start[i], t_start[i+1])."""

    t_starts: np.ndarray  # (m,), strictly increasing, starts at 0
    values: np.ndarray  # (m, ...) per-segment payload

    def segment(self, t: float) -> int:
        idx = int(np.searchsorted(self.t_starts, t, side="right") - 1)
        return max(idx, 0)

    def at(self, t: float) -> np.ndarray:
        return self.values[self.segment(t)]

    def integral(self, t0: float, t1: float) -> float:
        """Exact integral of a scalar table over [t0, t1]."""
        if t1 < t0:
            raise ValueError("t1 < t0")
        edges = np.concatenate([self.t_starts, [np.inf]])
        total = 0.0
        for i in range(len(self.t_starts)):
            lo = max(t0, edges[i])
            hi = min(t1, edges[i + 1])
            if hi > lo:
                total += float(self.values[i]) * (hi - lo)
        return total


def _parse_table(entries: Any, payload_key: str, payload_shape: tuple[int, ...], ctx: str) -> PiecewiseTable:
    if not isinstance(entries, list) or not entries:
        raise SchemaError(f"{ctx} must be a non-empty list of segments")
    t_starts = []
    values = []
    for seg in entries:
        if not isinstance(seg, dict) or set(seg) != {"t_start", payload_key}:
            raise SchemaError(f"{ctx} segments must have keys t_start, {payload_key}")
        t_starts.append(_number(seg, "t_start", ctx))
        values.append(_float_array(seg[payload_key], payload_shape, f"{ctx}.{payload_key}"))
    ts = np.asarray(t_starts)
    if ts[0] != 0.0 or np.any(np.diff(ts) <= 0):
        raise SchemaError(f"{ctx} t_start values must be strictly increasing from 0")
    return PiecewiseTable(ts, np.asarray(values))


# ---------------------------------------------------------------------------
# coefficient specs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CoefficientSpec:
    family: str
    params: dict = field(repr=False)
    role: str = "drift"  # 'drift' or 'vol'

    def to_dict(self) -> dict:
        return {"family": self.family, "params": self.params}


def _validate_coeff(sec: dict, role: str, n: int, d: int) -> CoefficientSpec:
    if set(sec) != {"family", "params"}:
        raise SchemaError(f"{role} section must have exactly keys family, params")
    family = sec["family"]
    if family not in FAMILIES:
        raise UnsupportedFamily(f"{role}.family {family!r} not in {FAMILIES}")
    params = sec["params"]
    if not isinstance(params, dict):
        raise SchemaError(f"{role}.params must be a mapping")
    ctx = f"{role}.params"
    if family == "constant":
        if role == "drift":
            _require_keys(params, {"values"}, ctx)
            _float_array(params["values"], (n,), f"{ctx}.values")
        else:
            _require_keys(params, {"matrix"}, ctx)
            _float_array(params["matrix"], (n, d), f"{ctx}.matrix")
    elif family == "affine":
        if role == "drift":
            _require_keys(params, {"matrix", "offset"}, ctx)
            _float_array(params["matrix"], (n, n), f"{ctx}.matrix")
            _float_array(params["offset"], (n,), f"{ctx}.offset")
        else:
            _require_keys(params, {"matrix", "slope"}, ctx)
            _float_array(params["matrix"], (n, d), f"{ctx}.matrix")
            _float_array(params["slope"], (n, d, n), f"{ctx}.slope")
    elif family == "linear-in-state":
        if role == "drift":
            _require_keys(params, {"rates"}, ctx)
            _float_array(params["rates"], (n,), f"{ctx}.rates")
        else:
            _require_keys(params, {"matrix"}, ctx)
            _float_array(params["matrix"], (n, d), f"{ctx}.matrix")
    elif family == "time-dependent-linear":
        _require_keys(params, {"table"}, ctx)
        if role == "drift":
            _parse_table(params["table"], "rates", (n,), f"{ctx}.table")
        else:
            _parse_table(params["table"], "matrix", (n, d), f"{ctx}.table")
    elif family == "expression":
        _require_keys(params, {"exprs"}, ctx)
        shape = (n,) if role == "drift" else (n, d)
        arr = np.asarray(params["exprs"], dtype=object)
        if arr.shape != shape:
            raise DimensionMismatch(f"{ctx}.exprs must have shape {shape}")
        symbols = [sp.Symbol(f"x{i + 1}") for i in range(n)]
        for text in arr.ravel():
            _parse_expression(text, symbols)
    return CoefficientSpec(family=family, params=params, role=role)


def _require_keys(d: dict, keys: set[str], ctx: str) -> None:
    if set(d) != keys:
        raise SchemaError(f"{ctx} must have exactly keys {sorted(keys)}, got {sorted(d)}")


# ---------------------------------------------------------------------------
# MarketModel
# ---------------------------------------------------------------------------


class MarketModel:
    """Immutable market specification plus compiled coefficient evaluators.

    All evaluators are vectorized over a batch of states X with shape
    (N, n); time enters as a scalar.
    """

    def __init__(
        self,
        n: int,
        d: int,
        horizon: float,
        x0: np.ndarray,
        rate_table: PiecewiseTable,
        drift: CoefficientSpec,
        vol: CoefficientSpec,
        arbitrage_tol: float = DEFAULT_ARBITRAGE_TOL,
    ):
        self.n = n
        self.d = d
        self.horizon = horizon
        self.x0 = np.asarray(x0, dtype=float)
        self.rate_table = rate_table
        self.drift_spec = drift
        self.vol_spec = vol
        self.arbitrage_tol = arbitrage_tol
        self._compile()

    # -- construction -------------------------------------------------

    def _compile(self) -> None:
        n, d = self.n, self.d
        self._symbols = [sp.Symbol(f"x{i + 1}") for i in range(n)]
        dp, vp = self.drift_spec.params, self.vol_spec.params

        if self.drift_spec.family == "expression":
            exprs = np.empty(n, dtype=object)
            for i, text in enumerate(np.asarray(dp["exprs"], dtype=object)):
                exprs[i] = _parse_expression(text, self._symbols)
            jac = np.asarray(
                [[sp.diff(exprs[i], s) for s in self._symbols] for i in range(n)], dtype=object
            )
            self._drift_fn = _lambdify_vec(exprs, self._symbols)
            self._drift_jac_fn = _lambdify_vec(jac, self._symbols)
        if self.vol_spec.family == "expression":
            exprs = np.empty((n, d), dtype=object)
            raw = np.asarray(vp["exprs"], dtype=object)
            for i in range(n):
                for l in range(d):
                    exprs[i, l] = _parse_expression(raw[i, l], self._symbols)
            jac = np.empty((n, d, n), dtype=object)
            for i in range(n):
                for l in range(d):
                    for k in range(n):
                        jac[i, l, k] = sp.diff(exprs[i, l], self._symbols[k])
            self._vol_fn = _lambdify_vec(exprs, self._symbols)
            self._vol_jac_fn = _lambdify_vec(jac, self._symbols)

        if self.drift_spec.family == "time-dependent-linear":
            self._drift_table = _parse_table(dp["table"], "rates", (n,), "drift.table")
        if self.vol_spec.family == "time-dependent-linear":
            self._vol_table = _parse_table(vp["table"], "matrix", (n, d), "vol.table")

    # -- affine step parameterization ----------------------------------

    def drift_affine(self, t: float) -> tuple[np.ndarray, np.ndarray] | None:
        """Return (A, c) with b(t, x) = A x + c, or None for expression."""
        n = self.n
        f, p = self.drift_spec.family, self.drift_spec.params
        if f == "constant":
            return np.zeros((n, n)), np.asarray(p["values"], dtype=float)
        if f == "affine":
            return np.asarray(p["matrix"], dtype=float), np.asarray(p["offset"], dtype=float)
        if f == "linear-in-state":
            return np.diag(np.asarray(p["rates"], dtype=float)), np.zeros(n)
        if f == "time-dependent-linear":
            return np.diag(np.asarray(self._drift_table.at(t), dtype=float)), np.zeros(n)
        return None

    def vol_affine(self, t: float) -> tuple[np.ndarray, np.ndarray] | None:
        """Return (S0, G) with sigma(t, x)[i,l] = S0[i,l] + G[i,l,:] . x,
        or None for expression."""
        n, d = self.n, self.d
        f, p = self.vol_spec.family, self.vol_spec.params
        if f == "constant":
            return np.asarray(p["matrix"], dtype=float), np.zeros((n, d, n))
        if f == "affine":
            return np.asarray(p["matrix"], dtype=float), np.asarray(p["slope"], dtype=float)
        if f in ("linear-in-state", "time-dependent-linear"):
            mat = (
                np.asarray(p["matrix"], dtype=float)
                if f == "linear-in-state"
                else np.asarray(self._vol_table.at(t), dtype=float)
            )
            g = np.zeros((n, d, n))
            for i in range(n):
                g[i, :, i] = mat[i]
            return np.zeros((n, d)), g
        return None

    @property
    def is_affine_parameterizable(self) -> bool:
        return self.drift_spec.family != "expression" and self.vol_spec.family != "expression"

    # -- vectorized evaluators -----------------------------------------

    def drift(self, t: float, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        aff = self.drift_affine(t)
        if aff is not None:
            a, c = aff
            return x @ a.T + c
        out = self._drift_fn(x)
        if not np.all(np.isfinite(out)):
            raise NonFinite("drift expression overflow")
        return out

    def vol(self, t: float, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        aff = self.vol_affine(t)
        if aff is not None:
            s0, g = aff
            return s0[None] + np.einsum("ilk,pk->pil", g, x)
        out = self._vol_fn(x)
        if not np.all(np.isfinite(out)):
            raise NonFinite("vol expression overflow")
        return out

    def drift_jac(self, t: float, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        aff = self.drift_affine(t)
        if aff is not None:
            a, _ = aff
            return np.broadcast_to(a, (x.shape[0],) + a.shape).copy()
        return self._drift_jac_fn(x)

    def vol_jac(self, t: float, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        aff = self.vol_affine(t)
        if aff is not None:
            _, g = aff
            return np.broadcast_to(g, (x.shape[0],) + g.shape).copy()
        return self._vol_jac_fn(x)

    def rate(self, t: float) -> float:
        return float(self.rate_table.at(t))

    def rate_integral(self, t0: float, t1: float) -> float:
        return self.rate_table.integral(t0, t1)

    # -- structure flags -----------------------------------------------

    @property
    def vol_state_independent_range(self) -> bool:
        """True when range(sigma^T(t, x)) does not depend on x.

        Holds for constant vol, affine vol with zero slope, and the
        linear families (diag(x) rescaling preserves the row space for
        componentwise-nonzero x)."""
        f = self.vol_spec.family
        if f == "constant":
            return True
        if f == "affine":
            return not np.any(np.asarray(self.vol_spec.params["slope"], dtype=float))
        return f in ("linear-in-state", "time-dependent-linear")

    @property
    def pu_state_independent(self) -> bool:
        """True when the projected market price of risk P(x)u(x) does not
        depend on the state (so its Malliavin derivative vanishes)."""
        linear = ("linear-in-state", "time-dependent-linear")
        f = self.vol_spec.family
        if f in linear:
            return self.drift_spec.family in linear
        if self.vol_state_independent_range and self.drift_spec.family == "constant":
            return bool(np.all(self.rate_table.values == 0.0))
        return False

    def pu_deterministic(self, t: float) -> np.ndarray:
        """Projected market price of risk for state-independent-Pu models."""
        if not self.pu_state_independent:
            raise UnsupportedJacobian("Pu is state dependent for this model")
        r = self.rate(t)
        f = self.vol_spec.family
        if f in ("linear-in-state", "time-dependent-linear"):
            mat = (
                np.asarray(self.vol_spec.params["matrix"], dtype=float)
                if f == "linear-in-state"
                else np.asarray(self._vol_table.at(t), dtype=float)
            )
            if self.drift_spec.family == "linear-in-state":
                mu = np.asarray(self.drift_spec.params["rates"], dtype=float)
            elif self.drift_spec.family == "time-dependent-linear":
                mu = np.asarray(self._drift_table.at(t), dtype=float)
            else:
                raise UnsupportedJacobian("Pu is state dependent for this model")
            u, _ = min_norm_solve(mat, mu - r)
            return u
        # constant drift, x-independent vol, r = 0
        sig = self.vol(t, self.x0[None])[0]
        b = self.drift(t, self.x0[None])[0]
        u, _ = min_norm_solve(sig, b)
        return u

    def pu_jacobian(self, t: float, x: np.ndarray) -> np.ndarray:
        """Jacobian J_f of x -> P(x)u(x), shape (N, d, n).

        Zero for state-independent Pu; for x-independent vol it is
        sigma^+ (J_b(x) - r I); otherwise unsupported."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.pu_state_independent:
            return np.zeros((x.shape[0], self.d, self.n))
        if self.vol_state_independent_range and self.vol_spec.family in ("constant", "affine"):
            aff = self.vol_affine(t)
            if aff is not None and not np.any(aff[1]):
                from .linalg import pseudoinverse

                sig_pinv = pseudoinverse(aff[0])
                jb = self.drift_jac(t, x)
                r = self.rate(t)
                jb = jb - r * np.eye(self.n)[None]
                return np.einsum("dk,pkn->pdn", sig_pinv, jb)
        raise UnsupportedJacobian(
            f"no analytic Jacobian of P(x)u(x) for vol family {self.vol_spec.family!r}"
        )

    # -- serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "model": {
                "n": self.n,
                "d": self.d,
                "horizon": self.horizon,
                "x0": self.x0.tolist(),
                "arbitrage_tol": self.arbitrage_tol,
            },
            "rate": {
                "table": [
                    {"t_start": float(t), "value": float(v)}
                    for t, v in zip(self.rate_table.t_starts, self.rate_table.values)
                ]
            },
            "drift": self.drift_spec.to_dict(),
            "vol": self.vol_spec.to_dict(),
        }

    def config_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# parsing and validation
# ---------------------------------------------------------------------------

MODEL_SECTIONS = {"model", "rate", "drift", "vol"}


def parse_model_dict(cfg: dict) -> MarketModel:
    if not isinstance(cfg, dict):
        raise SchemaError("model config must be a mapping")
    extra = set(cfg) - MODEL_SECTIONS
    if extra:
        raise SchemaError(f"unknown model config sections: {sorted(extra)}")
    msec = _as_section(cfg, "model", {"n", "d", "horizon", "x0", "arbitrage_tol"}, {"n", "d", "horizon", "x0"})
    n = _count(msec, "n", "model")
    d = _count(msec, "d", "model")
    if n < 1 or d < 1:
        raise SchemaError("model.n and model.d must be >= 1")
    horizon = _number(msec, "horizon", "model")
    if horizon <= 0:
        raise SchemaError("model.horizon must be positive")
    x0 = _float_array(msec["x0"], (n,), "model.x0")
    arb_tol = float(msec.get("arbitrage_tol", DEFAULT_ARBITRAGE_TOL))

    rsec = _as_section(cfg, "rate", {"table"}, {"table"})
    rate_table = _parse_table(rsec["table"], "value", (), "rate.table")

    dsec = _as_section(cfg, "drift", {"family", "params"}, {"family", "params"})
    vsec = _as_section(cfg, "vol", {"family", "params"}, {"family", "params"})
    drift = _validate_coeff(dsec, "drift", n, d)
    vol = _validate_coeff(vsec, "vol", n, d)
    return MarketModel(n, d, horizon, x0, rate_table, drift, vol, arbitrage_tol=arb_tol)


def parse_model(config_text: str) -> MarketModel:
    """Parse a YAML model config (sections model/rate/drift/vol)."""
    import yaml

    try:
        cfg = yaml.safe_load(config_text)
    except yaml.YAMLError as exc:
        raise SchemaError(f"invalid YAML: {exc}") from exc
    return parse_model_dict(cfg)


def evaluate_coefficients(model: MarketModel, t: float, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Single-state coefficient evaluation: (b (n,), sigma (n, d), r)."""
    x = np.asarray(x, dtype=float)
    if x.shape != (model.n,):
        raise DimensionMismatch(f"state must have shape ({model.n},)")
    if not (0.0 <= t <= model.horizon):
        raise ValueError("t outside [0, horizon]")
    b = model.drift(t, x[None])[0]
    sig = model.vol(t, x[None])[0]
    return b, sig, model.rate(t)


@dataclass
class ModelValidationReport:
    arbitrage_ok: bool
    max_residual: float
    rank_profile: dict[int, int]
    warnings: list[str]

    def to_dict(self) -> dict:
        return {
            "arbitrage_ok": self.arbitrage_ok,
            "max_residual": self.max_residual,
            "rank_profile": {str(k): v for k, v in sorted(self.rank_profile.items())},
            "warnings": self.warnings,
        }


def validate_no_arbitrage(model: MarketModel, probes: int = 64, seed: int = 0) -> ModelValidationReport:
    """Probe solvability of sigma(x) u = b(x) - r x at states drawn from a
    short-horizon simulation, and report the rank profile of sigma."""
    if probes < 1:
        raise ValueError("probes must be >= 1")
    from .engine import resolve_grid, simulate_paths

    grid = resolve_grid(model, steps=8)
    bundle = simulate_paths(model, grid, n_paths=probes, seed=seed, measure="P")
    # probe at x0 and at the states of the final three grid times
    states = [model.x0[None]]
    for j in (grid.n_steps // 2, grid.n_steps):
        states.append(bundle.states[:, j, :])
    times = [0.0, grid.times[grid.n_steps // 2], grid.times[-1]]

    max_residual = 0.0
    rank_profile: dict[int, int] = {}
    warnings: list[str] = []
    for t, xs in zip(times, states):
        for x in xs:
            b, sig, r = evaluate_coefficients(model, t, x)
            proj = range_projection(sig)
            rank_profile[proj.rank] = rank_profile.get(proj.rank, 0) + 1
            rhs = b - r * x
            _, res = min_norm_solve(sig, rhs)
            scale = max(1.0, float(np.linalg.norm(rhs)))
            max_residual = max(max_residual, res / scale)
    ok = max_residual <= model.arbitrage_tol
    if not ok:
        warnings.append(
            f"drift minus r*x leaves range(sigma): relative residual {max_residual:.3e}"
        )
    if len(rank_profile) > 1:
        warnings.append(f"sigma rank varies over probe states: {sorted(rank_profile)}")
    return ModelValidationReport(ok, max_residual, rank_profile, warnings)
