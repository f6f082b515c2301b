"""Compiled inner loops for the coordinate-wise detectors.

Each kernel sweeps the coordinates in ``order[start:]`` and mutates the
working arrays in place.  They return ``(position, max_step, delta_obj)``
where ``position == len(order)`` on success, otherwise the index in
``order`` at which a Sherman-Morrison denominator fell below ``floor``
(no state was changed for that coordinate).
"""

import numpy as np
from numba import njit


@njit(cache=True)
def ml_sweep(at, sigma_inv, sigma_hat, gamma, order, start, upper, has_upper, floor, step_log):
    n_lines = at.shape[1]
    q = np.empty(n_lines, dtype=np.complex128)
    max_step = 0.0
    delta_obj = 0.0
    log_steps = step_log.shape[0] > 0
    for pos in range(start, order.shape[0]):
        k = order[pos]
        a = at[k]
        q[:] = sigma_inv @ a
        s = sigma_hat @ q
        beta = 0.0
        alpha = 0.0
        for i in range(n_lines):
            beta += (a[i].conjugate() * q[i]).real
            alpha += (q[i].conjugate() * s[i]).real
        d = (alpha - beta) / (beta * beta)
        if d < -gamma[k]:
            d = -gamma[k]
        if has_upper and d > upper[k] - gamma[k]:
            d = upper[k] - gamma[k]
        if log_steps:
            step_log[pos] = d
        if d == 0.0:
            continue
        denom = 1.0 + d * beta
        if denom <= floor:
            return pos, max_step, delta_obj
        delta_obj += np.log(denom) - alpha * d / denom
        c = d / denom
        for i in range(n_lines):
            ci = c * q[i]
            for j in range(n_lines):
                sigma_inv[i, j] -= ci * q[j].conjugate()
        gamma[k] += d
        if abs(d) > max_step:
            max_step = abs(d)
    return order.shape[0], max_step, delta_obj


@njit(cache=True)
def nnls_sweep(at, resid, norm4, gamma, order, start, upper, has_upper, step_log):
    # resid holds sigma_hat - Sigma(gamma) and is kept in sync with gamma.
    n_lines = at.shape[1]
    max_step = 0.0
    delta_obj = 0.0
    log_steps = step_log.shape[0] > 0
    for pos in range(start, order.shape[0]):
        k = order[pos]
        a = at[k]
        r = resid @ a
        num = 0.0
        for i in range(n_lines):
            num += (a[i].conjugate() * r[i]).real
        d = num / norm4[k]
        if d < -gamma[k]:
            d = -gamma[k]
        if has_upper and d > upper[k] - gamma[k]:
            d = upper[k] - gamma[k]
        if log_steps:
            step_log[pos] = d
        if d == 0.0:
            continue
        delta_obj += d * d * norm4[k] - 2.0 * d * num
        for i in range(n_lines):
            di = d * a[i]
            for j in range(n_lines):
                resid[i, j] -= di * a[j].conjugate()
        gamma[k] += d
        if abs(d) > max_step:
            max_step = abs(d)
    return order.shape[0], max_step, delta_obj
