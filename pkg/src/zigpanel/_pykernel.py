"""Pure-numpy fallback for the compiled per-cell kernels in ``_ckernel``."""
import math

import numpy as np

DUST = 1e-300


def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _expit(x):
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def loglik_grad(y, a_mu, f_mu, a_pi, g_pi, k, log_norm, dk_const,
                row_mu, col_mu, row_pi, col_pi, want_grad=True):
    pos = y >= DUST
    h = a_pi[:, None] + g_pi[None, :]
    e = a_mu[:, None] + f_mu[None, :]
    ypos = np.where(pos, y, 1.0)
    logy = np.log(ypos)
    r = ypos * np.exp(-e)
    ell = np.where(
        pos,
        -_softplus(h) + log_norm + (k - 1.0) * logy - k * e - k * r,
        -_softplus(-h),
    )
    ll = math.fsum(ell.ravel())
    if not want_grad:
        return ll, 0.0
    p = _expit(h)
    wmu = np.where(pos, r - 1.0, 0.0)
    wpi = np.where(pos, 0.0, 1.0) - p
    row_mu[:] = wmu.sum(axis=1)
    col_mu[:] = wmu.sum(axis=0)
    row_pi[:] = wpi.sum(axis=1)
    col_pi[:] = wpi.sum(axis=0)
    dk = np.where(pos, dk_const + logy - e - r, 0.0)
    return ll, math.fsum(dk.ravel())


def cell_weights(y, a_mu, f_mu, a_pi, g_pi, ratio, pq):
    pos = y >= DUST
    e = a_mu[:, None] + f_mu[None, :]
    ratio[:] = np.where(pos, np.where(pos, y, 0.0) * np.exp(-e), 0.0)
    p = _expit(a_pi[:, None] + g_pi[None, :])
    pq[:] = p * (1.0 - p)
