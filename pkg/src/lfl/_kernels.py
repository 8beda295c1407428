"""Compiled inner loops for the single-site Gibbs samplers."""

from __future__ import annotations

import numpy as np
from numba import njit

BETA_BERNOULLI = 0
IBP = 1


@njit(cache=True)
def z_sweep(R, W, X, Z, m, sigma2, sigma2_x, prior, a, u, g):
    """Collapsed update of every (k, n) indicator, x_kn integrated out.

    ``R`` is the full residual Y - W(X*Z) and is kept current in place, as are
    ``X``, ``Z`` and the counts ``m``. ``prior`` picks the predictive: finite
    Beta(a, 1)-Bernoulli, or IBP (features with no other owner are skipped and
    left to the new-feature move). ``u`` and ``g`` hold pre-drawn uniforms and
    standard normals, both K x N.
    """
    D, K = W.shape
    N = R.shape[1]
    wsq = np.zeros(K)
    for k in range(K):
        s = 0.0
        for d in range(D):
            s += W[d, k] * W[d, k]
        wsq[k] = s
    flips = 0
    for n in range(N):
        for k in range(K):
            old = Z[k, n]
            m_minus = m[k] - old
            if prior == IBP and m_minus == 0:
                continue
            xo = X[k, n] * old
            b = 0.0
            for d in range(D):
                b += W[d, k] * (R[d, n] + W[d, k] * xo)
            if prior == IBP:
                lp1 = np.log(m_minus / N)
                lp0 = np.log((N - m_minus) / N) if m_minus < N else -np.inf
            else:
                lp1 = np.log((m_minus + a) / (N + a))
                lp0 = np.log((N - m_minus) / (N + a))
            denom = sigma2 + sigma2_x * wsq[k]
            llr = -0.5 * np.log(denom / sigma2) + sigma2_x * b * b / (2.0 * sigma2 * denom)
            t = lp1 + llr - lp0
            if t > 0:
                p1 = 1.0 / (1.0 + np.exp(-t))
            else:
                e = np.exp(t)
                p1 = e / (1.0 + e)
            new = 1 if u[k, n] < p1 else 0
            if new == 1:
                xn = sigma2_x * b / denom + np.sqrt(sigma2 * sigma2_x / denom) * g[k, n]
            else:
                xn = np.sqrt(sigma2_x) * g[k, n]
            delta = xo - xn * new
            if delta != 0.0:
                for d in range(D):
                    R[d, n] += W[d, k] * delta
            X[k, n] = xn
            Z[k, n] = new
            if new != old:
                m[k] += new - old
                flips += 1
    return flips
