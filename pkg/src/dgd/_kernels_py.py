"""Pure numpy implementations of the hot kernels.

These mirror ``dgd._kernels`` (Cython) function for function and are used
whenever the compiled module is unavailable or ``DGD_PURE_PYTHON=1``.
"""

import numpy as np
from scipy.special import digamma, gammaln

LOG_2PI = float(np.log(2.0 * np.pi))


def nb_logpmf(x, mu, r):
    """Negative binomial log-pmf for counts ``x`` [B, G], means ``mu`` [B, G]
    and per-gene dispersions ``r`` [G]."""
    x = np.asarray(x, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    rb = np.broadcast_to(r, mu.shape)
    out = gammaln(x + rb) - gammaln(rb) - gammaln(x + 1.0)
    out = out - rb * np.log1p(mu / rb)
    out = out + x * (np.log(mu) - np.log(rb + mu))
    return out


def nb_logpmf_backward(x, mu, r, g):
    """Return (d/dmu weighted by ``g``, d/dr weighted by ``g`` summed over rows)."""
    x = np.asarray(x, dtype=np.float64)
    rb = np.broadcast_to(r, mu.shape)
    denom = rb + mu
    dmu = g * (x / mu - (x + rb) / denom)
    dr = g * (digamma(x + rb) - digamma(rb) - np.log1p(mu / rb) + (mu - x) / denom)
    return dmu, dr.sum(axis=0)


def gauss_logdens(z, means, neg_log_var):
    """Per-component diagonal Gaussian log-density, shape [B, K]."""
    prec = np.exp(neg_log_var)
    diff = z[:, None, :] - means[None, :, :]
    quad = np.sum(diff * diff * prec[None, :, :], axis=2)
    const = 0.5 * np.sum(neg_log_var, axis=1) - 0.5 * z.shape[1] * LOG_2PI
    return const[None, :] - 0.5 * quad


def gauss_logdens_backward(z, means, neg_log_var, g):
    prec = np.exp(neg_log_var)
    diff = z[:, None, :] - means[None, :, :]
    wdiff = g[:, :, None] * diff * prec[None, :, :]
    dz = -wdiff.sum(axis=1)
    dmeans = wdiff.sum(axis=0)
    dnlv = 0.5 * g.sum(axis=0)[:, None] - 0.5 * np.sum(
        g[:, :, None] * diff * diff, axis=0) * prec
    return dz, dmeans, dnlv
