"""Compiled FISTA loop for group-penalized quadratics.

Mirrors :func:`elearn.solver.apg_minimize` step for step; the Python version
remains the reference for generic smooth objectives.
"""

import math

import numpy as np
from numba import njit

STATUS_OK = 0
STATUS_MAXITER = 1
STATUS_NONFINITE = 2
STATUS_UNDERFLOW = 3


@njit(cache=True)
def _value_grad(v, H, q, const, J, r, factored, g):
    if factored:
        res = J @ v - r
        g[:] = J.T @ res
        return 0.5 * np.dot(res, res)
    Hv = H @ v
    g[:] = Hv - q
    return 0.5 * np.dot(v, Hv) - np.dot(q, v) + const


@njit(cache=True)
def _penalty(v, nrows, ncols, mask):
    total = 0.0
    for j in range(nrows):
        if mask[j]:
            s = 0.0
            for k in range(ncols):
                s += v[k * nrows + j] ** 2
            total += math.sqrt(s)
    return total


@njit(cache=True)
def _prox(u, thr, nrows, ncols, mask, out):
    out[:] = u
    if thr == 0.0:
        return
    for j in range(nrows):
        if mask[j]:
            s = 0.0
            for k in range(ncols):
                s += u[k * nrows + j] ** 2
            nrm = math.sqrt(s)
            shrink = 1.0 - thr / nrm if nrm > thr else 0.0
            for k in range(ncols):
                out[k * nrows + j] = shrink * u[k * nrows + j]


@njit(cache=True)
def apg_quadratic(H, q, const, J, r, factored, nrows, ncols, mask, lam, x0, step,
                  max_iter, tol, backtrack, restart):
    D = x0.shape[0]
    x = x0.copy()
    gx = np.empty(D)
    fx = _value_grad(x, H, q, const, J, r, factored, gx)
    Fx = fx + lam * _penalty(x, nrows, ncols, mask)
    if not np.isfinite(Fx):
        return x, Fx, 0, False, step, STATUS_NONFINITE
    y = x.copy()
    fy = fx
    gy = gx.copy()
    z = np.empty(D)
    gz = np.empty(D)
    t = 1.0
    it = 0
    converged = False
    restarted = False
    while it < max_iter:
        it += 1
        while True:
            _prox(y - step * gy, step * lam, nrows, ncols, mask, z)
            fz = _value_grad(z, H, q, const, J, r, factored, gz)
            d = z - y
            bound = fy + np.dot(gy, d) + np.dot(d, d) / (2.0 * step)
            if fz <= bound + 1e-12 * abs(fy):
                break
            step *= backtrack
            if step < 1e-300:
                return x, Fx, it, False, step, STATUS_UNDERFLOW
        Fz = fz + lam * _penalty(z, nrows, ncols, mask)
        if not np.isfinite(Fz):
            return x, Fx, it, False, step, STATUS_NONFINITE
        if restart and Fz > Fx:
            if restarted:
                converged = True
                break
            t = 1.0
            y[:] = x
            fy = fx
            gy[:] = gx
            restarted = True
            continue
        restarted = False
        t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        beta = (t - 1.0) / t_new
        change = abs(Fx - Fz)
        scale = max(abs(Fx), 1e-300)
        moved = math.sqrt(np.dot(z - x, z - x))
        size = max(1.0, math.sqrt(np.dot(z, z)))
        x_prev = x.copy()
        x[:] = z
        fx = fz
        gx[:] = gz
        Fx = Fz
        t = t_new
        if change <= tol * scale and moved <= tol * size:
            converged = True
            break
        if beta == 0.0:
            y[:] = x
            fy = fx
            gy[:] = gx
        else:
            y = x + beta * (x - x_prev)
            fy = _value_grad(y, H, q, const, J, r, factored, gy)
    return x, Fx, it, converged, step, STATUS_OK if converged else STATUS_MAXITER
