"""Reference models: PCA, maximum-likelihood PPCA, vanilla FA, and finite/infinite sparse FA samplers."""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import subspace_angles

from lfl import _kernels, allocation
from lfl.afa import AfaConfig, fit_afa, pca_init, sample_sigma2, sample_w_fa, sample_x_fa
from lfl.core import (
    Dataset,
    DimensionError,
    FitReport,
    Hyperpriors,
    LatentState,
    PriorSpec,
    center,
    joint_log_likelihood,
    mae,
    model_Y,
    rmse_per_row,
)
from lfl.subspace import AppcaConfig, fit_appca, update_alpha

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# closed forms


def _sorted_eigh(S):
    evals, evecs = np.linalg.eigh(S)
    return evals[::-1], evecs[:, ::-1]


def pca_fit(dataset: Dataset, K: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-K eigenvectors (D x K, orthonormal) and eigenvalues of the centred sample covariance."""
    Y = center(dataset).Y
    D, N = Y.shape
    if not 1 <= K <= min(D, N):
        raise ValueError(f"need 1 <= K <= min(D, N) = {min(D, N)}, got K={K}")
    if D <= N:
        evals, evecs = _sorted_eigh(Y @ Y.T / N)
        return evecs[:, :K], np.maximum(evals[:K], 0.0)
    # Gram path: eigenvectors of Y^T Y / N mapped back through Y
    evals, V = _sorted_eigh(Y.T @ Y / N)
    evals = np.maximum(evals[:K], 0.0)
    U = Y @ V[:, :K]
    U /= np.maximum(np.linalg.norm(U, axis=0), 1e-300)
    return U, evals


def ppca_ml(dataset: Dataset, K: int) -> tuple[np.ndarray, float]:
    """W = U_K (Lambda_K - sigma2 I)^{1/2} with sigma2 the mean discarded eigenvalue."""
    Y = center(dataset).Y
    D, N = Y.shape
    if not 1 <= K < D:
        raise ValueError(f"need 1 <= K < D={D}, got K={K}")
    evals, evecs = _sorted_eigh(Y @ Y.T / N)
    sigma2 = float(evals[K:].mean())
    gap = evals[:K] - sigma2
    if np.any(gap < 0):
        warnings.warn("eigenvalue below the noise estimate; clamping its loading scale to 0", stacklevel=2)
    return evecs[:, :K] * np.sqrt(np.maximum(gap, 0.0)), sigma2


@dataclass(frozen=True)
class MarginalSpec:
    rho: np.ndarray
    W: np.ndarray
    sigma2: float

    def __post_init__(self):
        rho = np.asarray(self.rho, float).reshape(-1)
        W = np.atleast_2d(np.asarray(self.W, float))
        if W.shape[1] != rho.shape[0]:
            raise DimensionError(f"rho has length {rho.shape[0]} but W has {W.shape[1]} columns")
        if np.any((rho < 0) | (rho > 1)):
            raise ValueError("rho entries must lie in [0, 1]")
        if self.sigma2 < 0:
            raise ValueError("sigma2 must be non-negative")
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "W", W)

    @classmethod
    def hypergeometric(cls, W, L: int, sigma2: float) -> "MarginalSpec":
        K = np.shape(W)[1]
        return cls(np.full(K, L / K), W, sigma2)

    @classmethod
    def from_Z(cls, W, Z, sigma2: float) -> "MarginalSpec":
        return cls(np.asarray(Z).mean(axis=1), W, sigma2)


def marginal_covariance(spec: MarginalSpec) -> np.ndarray:
    """Model covariance W diag(rho) W^T + sigma2 I."""
    C = (spec.W * spec.rho) @ spec.W.T + spec.sigma2 * np.eye(spec.W.shape[0])
    return 0.5 * (C + C.T)


def sva_equivalence_check(dataset: Dataset, K: int, sigma2: float = 1e-6, iters: int = 100,
                          seed: int = 0, rel_gap: float = 1e-8) -> float:
    """Largest principal angle (radians) between aPPCA(L=K) loadings and the top-K eigenvectors.

    aPPCA runs with all features active, a small fixed noise variance and a
    random orthonormal start. Returns nan (with a warning) when eigenvalues K
    and K+1 coincide, since the target subspace is then not unique.
    """
    Y = center(dataset).Y
    D, N = Y.shape
    if not 1 <= K <= D:
        raise ValueError(f"need 1 <= K <= D={D}, got K={K}")
    evals, evecs = _sorted_eigh(Y @ Y.T / N)
    if K < D and evals[K - 1] - evals[K] <= rel_gap * max(abs(evals[0]), 1e-300):
        warnings.warn("eigenvalues K and K+1 coincide; subspace check skipped", stacklevel=2)
        return float("nan")
    cfg = AppcaConfig(K=K, L=K, iters=iters, seed=seed, init="random", sigma2=sigma2,
                      update_sigma2=False, center=True)
    state, _ = fit_appca(dataset, cfg)
    if K == D:
        return 0.0
    return float(np.max(subspace_angles(state.W, evecs[:, :K])))


def fit_vanilla_fa(dataset: Dataset, K: int, iters: int = 100, seed: int = 0, **kwargs):
    """FA by EM: every feature active for every point."""
    return fit_afa(dataset, AfaConfig(K=K, prior="all_ones", iters=iters, seed=seed, **kwargs))


# ---------------------------------------------------------------------------
# finite (Beta-Bernoulli) and infinite (IBP) sparse FA


@dataclass
class SparseFaConfig:
    K: int  # fixed K (finite) or initial K (IBP)
    prior: str = "beta_bernoulli"  # or "ibp"
    alpha: float = 1.0
    iters: int = 200
    hyperpriors: Hyperpriors = field(default_factory=Hyperpriors)
    seed: int = 0
    sigma2_w: float = 1.0
    K_max: Optional[int] = None  # IBP truncation; defaults to 3K
    update_alpha: bool = True  # IBP only
    center: bool = False
    init_rate: float = 0.5


def _log_gauss_lowrank(r, V, sigma2, sigma2_x):
    """log N(r | 0, sigma2 I + sigma2_x V V^T)."""
    D, k = V.shape
    rr = float(r @ r)
    out = -0.5 * D * np.log(2 * np.pi * sigma2)
    if k == 0:
        return out - 0.5 * rr / sigma2
    P = V.T @ V + (sigma2 / sigma2_x) * np.eye(k)
    C = np.linalg.cholesky(P)
    v = np.linalg.solve(C, V.T @ r)
    logdet = 2.0 * np.sum(np.log(np.diag(C))) - k * np.log(sigma2 / sigma2_x)
    return out - 0.5 * logdet - 0.5 * (rr - float(v @ v)) / sigma2


def _ibp_new_features(R, W, X, Z, m, sigma2, sigma2_x, sigma2_w, alpha, K_max, rng):
    """Metropolis-Hastings swap of each point's singleton features for Poisson(alpha/N) fresh ones.

    Proposals are drawn from the prior, so acceptance is the collapsed
    likelihood ratio. Returns updated (R, W, X, Z, m) and the accepted count.
    """
    D, N = R.shape
    kappas = rng.poisson(alpha / N, size=N)
    single = (Z == 1) & (m[:, None] == 1)
    todo = np.flatnonzero((kappas > 0) | single.any(axis=0))
    accepted = 0
    for n in todo:
        S = np.flatnonzero((Z[:, n] == 1) & (m == 1))
        kappa = int(kappas[n])
        if W.shape[1] - S.size + kappa > K_max:
            continue
        r = R[:, n] + W[:, S] @ X[S, n]
        V = np.sqrt(sigma2_w) * rng.standard_normal((D, kappa))
        log_a = _log_gauss_lowrank(r, V, sigma2, sigma2_x) - _log_gauss_lowrank(r, W[:, S], sigma2, sigma2_x)
        if np.log(rng.random()) >= log_a:
            continue
        Z[S, n] = 0
        m[S] = 0
        if kappa:
            P = V.T @ V / sigma2 + np.eye(kappa) / sigma2_x
            cov = np.linalg.inv(P)
            mean = cov @ (V.T @ r) / sigma2
            x = mean + np.linalg.cholesky(0.5 * (cov + cov.T)) @ rng.standard_normal(kappa)
            Xn = np.sqrt(sigma2_x) * rng.standard_normal((kappa, N))
            Xn[:, n] = x
            Zn = np.zeros((kappa, N), np.int8)
            Zn[:, n] = 1
            W = np.hstack([W, V])
            X = np.vstack([X, Xn])
            Z = np.vstack([Z, Zn])
            m = np.concatenate([m, np.ones(kappa)])
            r = r - V @ x
        R[:, n] = r
        accepted += 1
    return R, W, X, Z, m, accepted


def _drop_empty(W, X, Z, m):
    keep = m > 0
    return W[:, keep], X[keep], Z[keep], m[keep]


def fit_sparse_fa(dataset: Dataset, config: SparseFaConfig, callback=None) -> tuple[LatentState, FitReport]:
    """Gibbs sampler for sparse FA with a Beta-Bernoulli (fsFA) or IBP (isFA) allocation prior."""
    if config.prior not in ("beta_bernoulli", "ibp"):
        raise ValueError(f"unknown prior {config.prior!r}")
    if config.K < 1 or config.iters < 1:
        raise ValueError("K and iters must be >= 1")
    ibp = config.prior == "ibp"
    K_max = config.K_max if config.K_max is not None else 3 * config.K
    rng = np.random.default_rng(config.seed)
    t0 = time.perf_counter()
    data = center(dataset) if config.center else dataset
    Y = model_Y(data)
    D, N = Y.shape
    W, X, s2 = pca_init(Y, config.K, rng)
    Z = (rng.random((config.K, N)) < config.init_rate).astype(np.int8)
    m = Z.sum(axis=1).astype(float)
    sx2, alpha = 1.0, config.alpha
    kind = _kernels.IBP if ibp else _kernels.BETA_BERNOULLI
    report = FitReport()
    best, best_ll, best_it = None, -np.inf, 0
    k_trace = []
    for it in range(1, config.iters + 1):
        R = Y - W @ (X * Z)
        if ibp:
            W, X, Z, m = _drop_empty(W, X, Z, m)
        K = W.shape[1]
        a = alpha / max(K, 1)
        _kernels.z_sweep(R, W, X, Z, m, s2, sx2, kind, a, rng.random((K, N)), rng.standard_normal((K, N)))
        if ibp:
            R, W, X, Z, m, _ = _ibp_new_features(R, W, X, Z, m, s2, sx2, config.sigma2_w, alpha, K_max, rng)
            W, X, Z, m = _drop_empty(W, X, Z, m)
        X = sample_x_fa(Y, W, X, Z, s2, sx2, rng)
        W = sample_w_fa(Y, W, X, Z, s2, config.sigma2_w, rng)
        R = Y - W @ (X * Z)
        s2 = sample_sigma2(float(np.sum(R * R)), R.size, config.hyperpriors, rng)
        state = LatentState(W, X.copy(), Z.copy(), s2, sx2, alpha)  # the kernel mutates X, Z in place
        if ibp and config.update_alpha:
            alpha = update_alpha(state, config.hyperpriors, rng)
            state = state.replace(alpha=alpha)
        prior = PriorSpec.ibp(alpha, K_max) if ibp else PriorSpec.beta_bernoulli(alpha, max(W.shape[1], 1))
        ll = joint_log_likelihood(state, data, prior, "gaussian", config.sigma2_w)["total"]
        report.loglik_trace.append(ll)
        k_trace.append(W.shape[1])
        if ll > best_ll:
            best, best_ll, best_it = state, ll, it
        if callback is not None:
            callback(it, state)
    report.iterations = config.iters
    report.map_state = best
    Yhat = W @ (X * Z)
    report.mae = mae(Y, Yhat)
    report.rmse_mean, report.rmse_std = rmse_per_row(Y, Yhat)
    report.popularity = allocation.popularity_histogram(Z).tolist()
    report.wall_seconds = time.perf_counter() - t0
    report.extra.update(engine="isfa-gibbs" if ibp else "fsfa-gibbs", map_sweep=best_it, sigma2=s2,
                        alpha=alpha, K_trace=k_trace, mu=data.mu.tolist())
    return state, report


def fit_fsfa(dataset: Dataset, K: int, iters: int = 200, seed: int = 0, **kwargs):
    return fit_sparse_fa(dataset, SparseFaConfig(K=K, prior="beta_bernoulli", iters=iters, seed=seed, **kwargs))


def fit_isfa(dataset: Dataset, K: int, iters: int = 200, seed: int = 0, **kwargs):
    return fit_sparse_fa(dataset, SparseFaConfig(K=K, prior="ibp", iters=iters, seed=seed, **kwargs))
