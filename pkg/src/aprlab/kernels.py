"""Compiled per-triplet SGD kernels.

All right-hand sides of a step read the rows as they were before the step
(the three rows are copied first), so a step is exactly
``theta - eta * grad`` for the loss evaluated at the pre-step parameters.
Kernels report non-finite results through their return value instead of
raising, which numba cannot do with context.
"""

import math

import numpy as np
from numba import njit

JOINT = 0
PER_ROW = 1


@njit(cache=True)
def omega(x):
    """1 - sigmoid(x), evaluated without overflow."""
    if x >= 0.0:
        e = math.exp(-x)
        return e / (1.0 + e)
    return 1.0 / (1.0 + math.exp(x))


@njit(cache=True)
def _diff(pu, qi, qj):
    s = 0.0
    for k in range(pu.shape[0]):
        s += pu[k] * (qi[k] - qj[k])
    return s


@njit(cache=True)
def _finite_rows(P, Q, u, i, j):
    for k in range(P.shape[1]):
        if not (math.isfinite(P[u, k]) and math.isfinite(Q[i, k]) and math.isfinite(Q[j, k])):
            return False
    return True


@njit(cache=True)
def bpr_step(P, Q, u, i, j, eta, l2):
    """One BPR ascent step on (u, i, j); returns omega or NaN on overflow."""
    pu = P[u].copy()
    qi = Q[i].copy()
    qj = Q[j].copy()
    w = omega(_diff(pu, qi, qj))
    for k in range(pu.shape[0]):
        P[u, k] = pu[k] + eta * (w * (qi[k] - qj[k]) - l2 * pu[k])
        Q[i, k] = qi[k] + eta * (w * pu[k] - l2 * qi[k])
        Q[j, k] = qj[k] + eta * (-w * pu[k] - l2 * qj[k])
    if not _finite_rows(P, Q, u, i, j):
        return np.nan
    return w


@njit(cache=True)
def fgsm(pu, qi, qj, eps, mode, d_pu, d_qi, d_qj):
    """Fill the perturbation blocks in place; returns omega at the clean point.

    The loss gradient blocks are -w(qi - qj), -w pu and +w pu.  They are
    scaled to norm ``eps`` jointly (``mode == JOINT``) or row by row.
    """
    w = omega(_diff(pu, qi, qj))
    f = pu.shape[0]
    for k in range(f):
        d_pu[k] = -w * (qi[k] - qj[k])
        d_qi[k] = -w * pu[k]
        d_qj[k] = w * pu[k]
    if mode == JOINT:
        s = 0.0
        for k in range(f):
            s += d_pu[k] * d_pu[k] + d_qi[k] * d_qi[k] + d_qj[k] * d_qj[k]
        norm = math.sqrt(s)
        scale = eps / norm if norm > 0.0 else 0.0
        for k in range(f):
            d_pu[k] *= scale
            d_qi[k] *= scale
            d_qj[k] *= scale
    else:
        for blk in (d_pu, d_qi, d_qj):
            s = 0.0
            for k in range(f):
                s += blk[k] * blk[k]
            norm = math.sqrt(s)
            scale = eps / norm if norm > 0.0 else 0.0
            for k in range(f):
                blk[k] *= scale
    return w


@njit(cache=True)
def apr_step(P, Q, u, i, j, eta, eps, alpha, l2, mode, d_pu, d_qi, d_qj):
    """One APR step; returns (omega, omega_adv).  omega is NaN on overflow."""
    pu = P[u].copy()
    qi = Q[i].copy()
    qj = Q[j].copy()
    w = fgsm(pu, qi, qj, eps, mode, d_pu, d_qi, d_qj)
    s_adv = 0.0
    for k in range(pu.shape[0]):
        s_adv += (pu[k] + d_pu[k]) * ((qi[k] + d_qi[k]) - (qj[k] + d_qj[k]))
    wa = omega(s_adv)
    for k in range(pu.shape[0]):
        pa = pu[k] + d_pu[k]
        P[u, k] = pu[k] + eta * (w * (qi[k] - qj[k]) + alpha * wa * ((qi[k] + d_qi[k]) - (qj[k] + d_qj[k])) - l2 * pu[k])
        Q[i, k] = qi[k] + eta * (w * pu[k] + alpha * wa * pa - l2 * qi[k])
        Q[j, k] = qj[k] + eta * (-w * pu[k] - alpha * wa * pa - l2 * qj[k])
    if not _finite_rows(P, Q, u, i, j):
        return np.nan, wa
    return w, wa


@njit(cache=True)
def run_epoch(P, Q, us, pos, neg, eta, l2, adversarial, eps, alpha, mode, w_out, wa_out):
    """Apply one step per triplet in order.

    Magnitudes go to ``w_out``/``wa_out`` (``wa_out`` untouched in BPR mode).
    Returns the position of the first non-finite step, or -1.
    """
    f = P.shape[1]
    d_pu = np.empty(f)
    d_qi = np.empty(f)
    d_qj = np.empty(f)
    for n in range(us.shape[0]):
        if adversarial:
            w, wa = apr_step(P, Q, us[n], pos[n], neg[n], eta, eps, alpha, l2, mode, d_pu, d_qi, d_qj)
            wa_out[n] = wa
        else:
            w = bpr_step(P, Q, us[n], pos[n], neg[n], eta, l2)
        w_out[n] = w
        if math.isnan(w):
            return n
    return -1
