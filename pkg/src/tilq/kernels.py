"""Hot Monte Carlo stepping kernels: numba-jitted with a numpy fallback.

Backend selection: numba is used when importable unless the environment
variable ``TILQ_NUMBA`` is set to ``0`` (any other value, or unset, prefers
numba).  Both implementations perform the same arithmetic in the same order
per path element, so they agree to floating-point round-off; the benchmark
in ``bench/bench_kernels.py`` compares their throughput.

All kernels consume pre-drawn Brownian increments, so random number
generation stays in numpy and results are bit-reproducible per backend for
a fixed seed.  The state recursion applies the exact exponential factor to
the linear drift and Euler treatment to control and noise terms:

    X_{i+1} = expA_i X_i + dt_i (B_i'u_i + b_i) + (C_i X_i + D_i u_i + s_i)' dW_i.

Spike windows [i0, i1) add the constant direction v to the control; in
replay mode the control values are taken from a pre-recorded array (the
open-loop reading of the perturbation), in feedback mode from alpha X + beta
on the path's own state.
"""

from __future__ import annotations

import os

import numpy as np

_env = os.environ.get("TILQ_NUMBA", "1")
if _env == "0":
    HAVE_NUMBA = False
else:
    try:
        import numba

        HAVE_NUMBA = True
    except ImportError:  # pragma: no cover - numba is a hard dep, but be safe
        HAVE_NUMBA = False


def backend_name() -> str:
    return "numba" if HAVE_NUMBA else "numpy"


def set_threads(n: int) -> None:
    """Cap the JIT backend's worker count (no-op on the numpy backend)."""
    if HAVE_NUMBA and n >= 1:
        numba.set_num_threads(int(n))


# ---------------------------------------------------------------------------
# Reference numpy implementations (vectorised across paths, loop over steps).
# ---------------------------------------------------------------------------

def lq_paths_numpy(xinit, expA, dt, B, bpath, C, D, sig,
                   alpha, beta, u_replay, use_replay, i0, i1, v, dW):
    npaths, nsteps, d = dW.shape
    l = B.shape[1]
    X = np.empty((npaths, nsteps + 1))
    U = np.empty((npaths, nsteps, l))
    X[:, 0] = xinit
    for i in range(nsteps):
        x = X[:, i]
        if use_replay:
            u = u_replay[:, i, :].copy()
        else:
            u = x[:, None] * alpha[i][None, :] + beta[i][None, :]
        if i0 <= i < i1:
            u = u + v[None, :]
        drift = u @ B[i] + bpath[i]
        load = x[:, None] * C[i][None, :] + u @ D[i].T + sig[i][None, :]
        X[:, i + 1] = expA[i] * x + dt[i] * drift + np.sum(load * dW[:, i, :], axis=1)
        U[:, i, :] = u
    return X, U


def mv_paths_numpy(xinit, expR, dt, theta, alpha, beta,
                   u_replay, use_replay, i0, i1, v, dW):
    npaths, nsteps, d = dW.shape
    X = np.empty((npaths, nsteps + 1))
    U = np.empty((npaths, nsteps, d))
    X[:, 0] = xinit
    th_per_path = theta.shape[0] > 1
    ab_per_path = alpha.shape[0] > 1
    for i in range(nsteps):
        x = X[:, i]
        th = theta[:, i, :] if th_per_path else theta[0, i, :][None, :]
        if use_replay:
            u = u_replay[:, i, :].copy()
        else:
            a = alpha[:, i, :] if ab_per_path else alpha[0, i, :][None, :]
            bb = beta[:, i, :] if ab_per_path else beta[0, i, :][None, :]
            u = x[:, None] * a + bb
        if i0 <= i < i1:
            u = u + v[None, :]
        X[:, i + 1] = (expR[i] * x + dt[i] * np.sum(th * u, axis=1)
                       + np.sum(u * dW[:, i, :], axis=1))
        U[:, i, :] = u
    return X, U


def ou_paths_numpy(y0, ecoef, mean, sdcoef, z):
    npaths, nsteps = z.shape
    Y = np.empty((npaths, nsteps + 1))
    Y[:, 0] = y0
    for i in range(nsteps):
        Y[:, i + 1] = mean + (Y[:, i] - mean) * ecoef[i] + sdcoef[i] * z[:, i]
    return Y


# ---------------------------------------------------------------------------
# Numba kernels (same arithmetic, explicit loops).
# ---------------------------------------------------------------------------

if HAVE_NUMBA:
    from numba import njit, prange

    @njit(cache=True, parallel=True)
    def _lq_paths_nb(xinit, expA, dt, B, bpath, C, D, sig,
                     alpha, beta, u_replay, use_replay, i0, i1, v, dW):
        npaths, nsteps, d = dW.shape
        l = B.shape[1]
        X = np.empty((npaths, nsteps + 1))
        U = np.empty((npaths, nsteps, l))
        for p in prange(npaths):
            x = xinit[p]
            X[p, 0] = x
            for i in range(nsteps):
                for k in range(l):
                    if use_replay:
                        uk = u_replay[p, i, k]
                    else:
                        uk = x * alpha[i, k] + beta[i, k]
                    if i0 <= i < i1:
                        uk += v[k]
                    U[p, i, k] = uk
                drift = bpath[i]
                for k in range(l):
                    drift += B[i, k] * U[p, i, k]
                noise = 0.0
                for j in range(d):
                    load = C[i, j] * x + sig[i, j]
                    for k in range(l):
                        load += D[i, j, k] * U[p, i, k]
                    noise += load * dW[p, i, j]
                x = expA[i] * x + dt[i] * drift + noise
                X[p, i + 1] = x
        return X, U

    @njit(cache=True, parallel=True)
    def _mv_paths_nb(xinit, expR, dt, theta, alpha, beta,
                     u_replay, use_replay, i0, i1, v, dW):
        npaths, nsteps, d = dW.shape
        X = np.empty((npaths, nsteps + 1))
        U = np.empty((npaths, nsteps, d))
        th_mult = 1 if theta.shape[0] > 1 else 0
        ab_mult = 1 if alpha.shape[0] > 1 else 0
        for p in prange(npaths):
            x = xinit[p]
            X[p, 0] = x
            tp = p * th_mult
            ap = p * ab_mult
            for i in range(nsteps):
                drift = 0.0
                noise = 0.0
                for j in range(d):
                    if use_replay:
                        uj = u_replay[p, i, j]
                    else:
                        uj = x * alpha[ap, i, j] + beta[ap, i, j]
                    if i0 <= i < i1:
                        uj += v[j]
                    U[p, i, j] = uj
                    drift += theta[tp, i, j] * uj
                    noise += uj * dW[p, i, j]
                x = expR[i] * x + dt[i] * drift + noise
                X[p, i + 1] = x
        return X, U

    @njit(cache=True, parallel=True)
    def _ou_paths_nb(y0, ecoef, mean, sdcoef, z):
        npaths, nsteps = z.shape
        Y = np.empty((npaths, nsteps + 1))
        for p in prange(npaths):
            y = y0[p]
            Y[p, 0] = y
            for i in range(nsteps):
                y = mean + (y - mean) * ecoef[i] + sdcoef[i] * z[p, i]
                Y[p, i + 1] = y
        return Y


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def lq_paths(xinit, expA, dt, B, bpath, C, D, sig, alpha, beta,
             u_replay=None, i0=0, i1=0, v=None, dW=None):
    """LQ forward paths; returns (X[np, n+1], U[np, n, l])."""
    use_replay = u_replay is not None
    l = B.shape[1]
    if v is None:
        v = np.zeros(l)
    if u_replay is None:
        u_replay = np.zeros((1, 1, l))
    args = (_c(xinit), _c(expA), _c(dt), _c(B), _c(bpath), _c(C), _c(D), _c(sig),
            _c(alpha), _c(beta), _c(u_replay), use_replay, int(i0), int(i1),
            _c(v), _c(dW))
    if HAVE_NUMBA:
        return _lq_paths_nb(*args)
    return lq_paths_numpy(*args)


def mv_paths(xinit, expR, dt, theta, alpha, beta,
             u_replay=None, i0=0, i1=0, v=None, dW=None):
    """Mean-variance wealth paths; returns (X[np, n+1], U[np, n, d]).

    ``theta``, ``alpha``, ``beta`` have shape (1|np, n, d): a leading 1
    broadcasts the deterministic case, np gives per-path (factor-dependent)
    values.
    """
    d = theta.shape[2]
    use_replay = u_replay is not None
    if v is None:
        v = np.zeros(d)
    if u_replay is None:
        u_replay = np.zeros((1, 1, d))
    args = (_c(xinit), _c(expR), _c(dt), _c(theta), _c(alpha), _c(beta),
            _c(u_replay), use_replay, int(i0), int(i1), _c(v), _c(dW))
    if HAVE_NUMBA:
        return _mv_paths_nb(*args)
    return mv_paths_numpy(*args)


def ou_paths(y0, ecoef, mean, sdcoef, z):
    """Scalar factor recursion Y_{i+1} = m + (Y_i - m) e_i + sd_i z_i."""
    args = (_c(y0), _c(ecoef), float(mean), _c(sdcoef), _c(z))
    if HAVE_NUMBA:
        return _ou_paths_nb(*args)
    return ou_paths_numpy(*args)
