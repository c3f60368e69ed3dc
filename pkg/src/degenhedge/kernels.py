"""Hot numeric kernels (numba-compiled when available).

Coefficients are passed in the per-step affine parameterization

    b(t_j, x)      = A[j] @ x + c[j]
    sigma(t_j, x)[i, l] = S0[j, i, l] + G[j, i, l, :] @ x

which covers every whitelisted family except `expression` (the numpy
path in `engine` handles that one via callables).

The pure-numpy fallbacks for these kernels live in `engine`; backend
choice is via DEGENHEDGE_BACKEND (see `_backend`).
"""

from __future__ import annotations

import numpy as np

from ._backend import HAVE_NUMBA

if HAVE_NUMBA:
    from numba import njit
else:  # pragma: no cover

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        if args and callable(args[0]):
            return args[0]
        return wrap


EXPLOSION_LIMIT = 1e12


@njit(cache=True)
def euler_affine_paths(x0, A, c, S0, G, dW, dts, states):
    """Euler-Maruyama for a block of paths; returns first exploding
    path index, or -1 if all paths stayed bounded."""
    n_paths = dW.shape[0]
    n_steps = dts.shape[0]
    n = x0.shape[0]
    d = dW.shape[2]
    bad = -1
    for p in range(n_paths):
        for i in range(n):
            states[p, 0, i] = x0[i]
        for j in range(n_steps):
            dt = dts[j]
            ok = True
            for i in range(n):
                x_i = states[p, j, i]
                if not np.isfinite(x_i) or abs(x_i) > EXPLOSION_LIMIT:
                    ok = False
            if not ok:
                if bad < 0:
                    bad = p
                for i in range(n):
                    states[p, j + 1, i] = states[p, j, i]
                continue
            for i in range(n):
                b_i = c[j, i]
                for k in range(n):
                    b_i += A[j, i, k] * states[p, j, k]
                noise = 0.0
                for l in range(d):
                    s_il = S0[j, i, l]
                    for k in range(n):
                        s_il += G[j, i, l, k] * states[p, j, k]
                    noise += s_il * dW[p, j, l]
                states[p, j + 1, i] = states[p, j, i] + b_i * dt + noise
    return bad


@njit(cache=True)
def fv_sweep_affine(
    states,
    pdW,
    A,
    S0,
    G,
    dts,
    row1,
    row2,
    tau_idx,
    want_term,
    want_avg,
    want_tau,
    horizon,
    out_t1,
    out_t2,
    out_avg,
    out_tau,
):
    """First-variation sweep over all base times.

    For each path p and each base index k, propagates the variational
    matrix D (n x d) from s = k to the final step with the projected
    increments pdW, accumulating only the reductions the payoffs need:

      out_t1[p, k] / out_t2[p, k] : rows `row1` / `row2` of D at T
      out_avg[p, k]               : (dt / horizon) * sum over left
                                    endpoints s in [k, M-1] of row1 of D
      out_tau[p, k]               : row1 of D at s = tau_idx[p]
                                    (zero when tau_idx[p] < k)
    """
    n_paths = states.shape[0]
    n_steps = dts.shape[0]
    n = states.shape[2]
    d = pdW.shape[2]
    D = np.empty((n, d))
    D_next = np.empty((n, d))
    for p in range(n_paths):
        tau = tau_idx[p]
        for k in range(n_steps + 1):
            # initial condition sigma(t_k, X_k); at k = M use the final
            # grid point (limit convention for the t = T row)
            jc = k if k < n_steps else n_steps - 1
            for i in range(n):
                for l in range(d):
                    s_il = S0[jc, i, l]
                    for m in range(n):
                        s_il += G[jc, i, l, m] * states[p, k, m]
                    D[i, l] = s_il
            if want_avg:
                for l in range(d):
                    out_avg[p, k, l] = 0.0
            if want_tau and tau == k:
                for l in range(d):
                    out_tau[p, k, l] = D[row1, l]
            for s in range(k, n_steps):
                if want_avg:
                    for l in range(d):
                        out_avg[p, k, l] += D[row1, l] * dts[s] / horizon
                # step matrix (I + dt*A[s] + H) with
                # H[i, m] = sum_l G[s, i, l, m] * pdW[p, s, l]
                for i in range(n):
                    for l in range(d):
                        acc = D[i, l]
                        for m in range(n):
                            h_im = 0.0
                            for q in range(d):
                                h_im += G[s, i, q, m] * pdW[p, s, q]
                            acc += (dts[s] * A[s, i, m] + h_im) * D[m, l]
                        D_next[i, l] = acc
                for i in range(n):
                    for l in range(d):
                        D[i, l] = D_next[i, l]
                if want_tau and tau == s + 1:
                    for l in range(d):
                        out_tau[p, k, l] = D[row1, l]
            if want_term:
                for l in range(d):
                    out_t1[p, k, l] = D[row1, l]
                    out_t2[p, k, l] = D[row2, l]
    return 0
