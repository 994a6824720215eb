# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled per-cell kernels for the zero-inflated Gamma likelihood.

The pure-numpy twin lives in ``_pykernel``; both expose the same functions
with the same argument order and must agree to rounding.
"""
from libc.math cimport exp, log, log1p

cdef double DUST = 1e-300


cdef inline double _softplus(double x) noexcept nogil:
    if x > 0.0:
        return x + log1p(exp(-x))
    return log1p(exp(x))


cdef inline double _expit(double x) noexcept nogil:
    cdef double z
    if x >= 0.0:
        z = exp(-x)
        return 1.0 / (1.0 + z)
    z = exp(x)
    return z / (1.0 + z)


def loglik_grad(const double[:, ::1] y,
                const double[::1] a_mu, const double[::1] f_mu,
                const double[::1] a_pi, const double[::1] g_pi,
                double k, double log_norm, double dk_const,
                double[::1] row_mu, double[::1] col_mu,
                double[::1] row_pi, double[::1] col_pi,
                bint want_grad=True):
    """Accumulate the log-likelihood and the gradient building blocks.

    ``log_norm`` is ``k*log(k) - lgamma(k)`` and ``dk_const`` is
    ``log(k) + 1 - digamma(k)``; both are scalar so they are computed by the
    caller. When ``want_grad`` is set, the four output vectors are
    overwritten with row/column sums of ``y/mu - 1`` (positive cells) and of
    ``1{y == 0} - pi``.

    Returns ``(loglik, dk_sum)`` where ``dk_sum`` is the sum over positive
    cells of ``dk_const + log y - eta_mu - y/mu``.
    """
    cdef Py_ssize_t m = y.shape[0], n = y.shape[1], i, t
    cdef double yy, e, h, ell, r, p, w, inv_mu
    cdef double s = 0.0, c = 0.0, tmp
    cdef double ds = 0.0, dc = 0.0
    cdef double rmu, rpi
    cdef double km1 = k - 1.0

    if want_grad:
        for t in range(n):
            col_mu[t] = 0.0
            col_pi[t] = 0.0

    with nogil:
        for i in range(m):
            rmu = 0.0
            rpi = 0.0
            for t in range(n):
                yy = y[i, t]
                h = a_pi[i] + g_pi[t]
                if yy >= DUST:
                    e = a_mu[i] + f_mu[t]
                    inv_mu = exp(-e)
                    r = yy * inv_mu
                    ell = -_softplus(h) + log_norm + km1 * log(yy) - k * e - k * r
                    if want_grad:
                        p = _expit(h)
                        rmu = rmu + (r - 1.0)
                        col_mu[t] += r - 1.0
                        w = -p
                        rpi = rpi + w
                        col_pi[t] += w
                        w = dk_const + log(yy) - e - r
                        tmp = ds + w
                        if (ds if ds >= 0 else -ds) >= (w if w >= 0 else -w):
                            dc = dc + ((ds - tmp) + w)
                        else:
                            dc = dc + ((w - tmp) + ds)
                        ds = tmp
                else:
                    ell = -_softplus(-h)
                    if want_grad:
                        w = 1.0 - _expit(h)
                        rpi = rpi + w
                        col_pi[t] += w
                # Neumaier compensated sum of the cell contributions
                tmp = s + ell
                if (s if s >= 0 else -s) >= (ell if ell >= 0 else -ell):
                    c = c + ((s - tmp) + ell)
                else:
                    c = c + ((ell - tmp) + s)
                s = tmp
            if want_grad:
                row_mu[i] = rmu
                row_pi[i] = rpi
    return s + c, ds + dc


def cell_weights(const double[:, ::1] y,
                 const double[::1] a_mu, const double[::1] f_mu,
                 const double[::1] a_pi, const double[::1] g_pi,
                 double[:, ::1] ratio, double[:, ::1] pq):
    """Fill ``ratio`` with ``y/mu`` (0 on zero cells) and ``pq`` with ``pi*(1-pi)``.

    These are the curvature weights of the mean and zero parts.
    """
    cdef Py_ssize_t m = y.shape[0], n = y.shape[1], i, t
    cdef double yy, p
    with nogil:
        for i in range(m):
            for t in range(n):
                yy = y[i, t]
                if yy >= DUST:
                    ratio[i, t] = yy * exp(-(a_mu[i] + f_mu[t]))
                else:
                    ratio[i, t] = 0.0
                p = _expit(a_pi[i] + g_pi[t])
                pq[i, t] = p * (1.0 - p)
