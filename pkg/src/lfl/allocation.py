"""Feature-allocation priors over binary ``K x N`` matrices."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import betaln, gammaln

from lfl.core import LOG_ZERO


@dataclass(frozen=True)
class FeatureCounts:
    m: np.ndarray
    N: int
    H_N: float

    @classmethod
    def from_Z(cls, Z) -> "FeatureCounts":
        Z = np.asarray(Z)
        N = Z.shape[1]
        return cls(Z.sum(axis=1).astype(int), N, harmonic(N))


def harmonic(N: int) -> float:
    return float(np.sum(1.0 / np.arange(1, N + 1))) if N > 0 else 0.0


def log_comb(K: int, L: int) -> float:
    return float(gammaln(K + 1) - gammaln(L + 1) - gammaln(K - L + 1))


def hypergeom_log_pmf(z, L: int) -> float:
    z = np.asarray(z)
    K = z.shape[0]
    if not 1 <= L <= K:
        raise ValueError(f"need 1 <= L <= K, got L={L}, K={K}")
    if int(z.sum()) != L:
        return LOG_ZERO
    return -log_comb(K, L)


def hypergeom_sample(K: int, L: int, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Uniform binary vector(s) with exactly ``L`` ones out of ``K``.

    With ``size`` given, returns a ``K x size`` matrix of independent columns.
    """
    if not 1 <= L <= K:
        raise ValueError(f"need 1 <= L <= K, got L={L}, K={K}")
    n = 1 if size is None else size
    keys = rng.random((K, n))
    order = np.argsort(keys, axis=0)[:L]
    Z = np.zeros((K, n), dtype=np.int8)
    np.put_along_axis(Z, order, 1, axis=0)
    return Z[:, 0] if size is None else Z


def ibp_log_pmf(Z, alpha: float) -> float:
    """Unnormalised IBP log-probability of a matrix of represented features.

    The left-ordering normalising constant is omitted, so the value is only
    meaningful in ratios over the same ``N``.
    """
    Z = np.atleast_2d(np.asarray(Z))
    K, N = Z.shape
    m = Z.sum(axis=1)
    if K and np.any(m == 0):
        raise ValueError("unrepresented feature: every row of Z needs at least one active entry")
    out = -alpha * harmonic(N) + K * np.log(alpha)
    out += float(np.sum(gammaln(m) + gammaln(N - m + 1) - gammaln(N + 1)))
    return float(out)


def ibp_sample(N: int, alpha: float, K_max: int | None, rng: np.random.Generator, return_rejected: bool = False):
    """Sequential buffet draw; dishes beyond ``K_max`` are dropped and counted."""
    if K_max is not None and K_max < 1:
        raise ValueError("K_max must be >= 1")
    rows: list[np.ndarray] = []
    m = np.zeros(0)
    rejected = 0
    for n in range(1, N + 1):
        take = rng.random(m.shape[0]) < m / n
        for k in np.flatnonzero(take):
            rows[k][n - 1] = 1
        m = m + take
        new = rng.poisson(alpha / n)
        if K_max is not None:
            room = max(0, K_max - len(rows))
            rejected += max(0, new - room)
            new = min(new, room)
        for _ in range(new):
            r = np.zeros(N, dtype=np.int8)
            r[n - 1] = 1
            rows.append(r)
        m = np.concatenate([m, np.ones(new)])
    Z = np.array(rows, dtype=np.int8).reshape(len(rows), N)
    return (Z, rejected) if return_rejected else Z


def bb_predictive(m_minus: int, N: int, alpha: float, K: int) -> float:
    """Collapsed P(z_kn = 1 | other N-1 entries) with pi_k ~ Beta(alpha/K, 1)."""
    if not 0 <= m_minus <= N - 1:
        raise ValueError(f"need 0 <= m_minus <= N-1, got {m_minus} with N={N}")
    a = alpha / K
    return (m_minus + a) / (N + a)


def bb_log_pmf(Z, alpha: float) -> float:
    """Marginal log-probability of ``Z`` under the finite Beta(alpha/K, 1)-Bernoulli prior."""
    Z = np.atleast_2d(np.asarray(Z))
    K, N = Z.shape
    a = alpha / K
    m = Z.sum(axis=1)
    return float(np.sum(betaln(a + m, N - m + 1) - betaln(a, 1.0)))


def popularity_histogram(Z) -> np.ndarray:
    Z = np.atleast_2d(np.asarray(Z))
    if Z.shape[1] == 0:
        return np.zeros(Z.shape[0])
    return np.sort(Z.sum(axis=1) / Z.shape[1])[::-1]
