"""Adaptive PPCA and nonparametric sparse PPCA: Gibbs samplers with orthonormal loadings."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from lfl import allocation
from lfl.afa import SCORES, projection_log_scores, resample_allocations
from lfl.core import (
    Dataset,
    FitReport,
    Hyperpriors,
    LatentState,
    PriorSpec,
    center,
    floor_sigma2,
    joint_log_likelihood,
    mae,
    model_Y,
    rmse_per_row,
)
from lfl.stiefel import StiefelProblem, maximize_trace, orth_error

log = logging.getLogger(__name__)

ORTH_TOL = 1e-8


@dataclass(frozen=True)
class SubspaceState(LatentState):
    kappa_counter: int = 0
    K_max: Optional[int] = None

    def __post_init__(self):
        super().__post_init__()
        if self.K and orth_error(self.W) >= ORTH_TOL:
            raise ValueError(f"loadings are not orthonormal (error {orth_error(self.W):.2e})")
        if self.K_max is not None and not self.K <= self.K_max <= self.D:
            raise ValueError(f"need K <= K_max <= D, got K={self.K}, K_max={self.K_max}, D={self.D}")


@dataclass
class AppcaConfig:
    K: int
    L: int
    iters: int = 200
    hyperpriors: Hyperpriors = field(default_factory=Hyperpriors)
    seed: int = 0
    score: str = "projection"  # "tempered" divides by 2 s2 (s2 + 1)
    init: str = "pca"  # or "random"
    sigma2: Optional[float] = None  # initial noise variance; PCA residual when None
    update_sigma2: bool = True
    center: bool = False
    w_max_iters: int = 200


@dataclass
class BnpConfig:
    K_max: int
    alpha0: float = 1.0
    iters: int = 200
    hyperpriors: Hyperpriors = field(default_factory=Hyperpriors)
    seed: int = 0
    squared: bool = True  # exponent (y^T w)^2; False uses the unsquared printed form
    sigma2: Optional[float] = None
    update_sigma2: bool = True
    update_alpha: bool = True
    center: bool = False
    init_rate: float = 0.5
    w_max_iters: int = 200


# ---------------------------------------------------------------------------
# single-site updates


def appca_x_update(state: LatentState, dataset: Dataset, n: int, k: int, rng) -> float:
    if state.Z[k, n] != 1:
        raise ValueError(f"z[{k},{n}] is inactive")
    proj = float(model_Y(dataset)[:, n] @ state.W[:, k])
    s2 = state.sigma2
    return proj / (s2 + 1.0) + np.sqrt(s2 / (s2 + 1.0)) * rng.standard_normal()


def sample_x(Y, W, Z, sigma2, rng) -> np.ndarray:
    """All latent coordinates at once; inactive entries are drawn from the N(0, 1) prior."""
    P = W.T @ Y
    post = P / (sigma2 + 1.0) + np.sqrt(sigma2 / (sigma2 + 1.0)) * rng.standard_normal(P.shape)
    return np.where(Z == 1, post, rng.standard_normal(P.shape))


def appca_z_update(state: LatentState, dataset: Dataset, n: int, rng, score: str = "projection") -> np.ndarray:
    y = model_Y(dataset)[:, [n]]
    L = state.L if state.L is not None else int(state.Z[:, n].sum())
    s = projection_log_scores(y, state.W, state.sigma2, score)
    return resample_allocations(state.Z[:, [n]], L, "sample", rng, log_scores=s)[:, 0]


def log_evidence_ratio(proj, sigma2: float, squared: bool = True):
    """log p(y | z=1) - log p(y | z=0) with the latent coordinate integrated out."""
    proj = np.asarray(proj, float)
    e = proj * proj if squared else proj
    return 0.5 * np.log(sigma2 / (sigma2 + 1.0)) + e / (2.0 * sigma2 * (sigma2 + 1.0))


def existing_feature_prob(m_minus, N: int, proj, sigma2: float, squared: bool = True):
    """Bernoulli success probability for an existing feature; zero when m_minus is 0."""
    m_minus = np.asarray(m_minus, float)
    lr = log_evidence_ratio(proj, sigma2, squared)
    with np.errstate(divide="ignore"):
        a = np.log(m_minus / N) + lr
    # a / (a + 1) in log space
    return np.where(m_minus > 0, np.exp(-np.logaddexp(0.0, -a)), 0.0)


def bnp_existing_z(state: LatentState, dataset: Dataset, n: int, k: int, rng, squared: bool = True) -> int:
    m_minus = int(state.Z[k].sum()) - int(state.Z[k, n])
    proj = float(model_Y(dataset)[:, n] @ state.W[:, k])
    p = existing_feature_prob(m_minus, dataset.N, proj, state.sigma2, squared)
    return int(rng.random() < p)


def complement_directions(W: np.ndarray, kappa: int, rng) -> np.ndarray:
    """``kappa`` orthonormal directions orthogonal to the columns of ``W``."""
    D = W.shape[0]
    G = rng.standard_normal((D, kappa))
    if W.shape[1]:
        G -= W @ (W.T @ G)
        G -= W @ (W.T @ G)
    Q, _ = np.linalg.qr(G)
    return Q


def new_feature_prob(proj_new, sigma2: float) -> float:
    lr = float(np.sum(log_evidence_ratio(proj_new, sigma2, True)))
    return float(np.exp(-np.logaddexp(0.0, -lr)))


def _propose(W, y, alpha, N, K_cap, sigma2, rng):
    """Draw kappa, directions and acceptance; returns (V, x) on acceptance, else None."""
    kappa = int(rng.poisson(alpha / N))
    if kappa == 0 or W.shape[1] + kappa > K_cap:
        return None
    V = complement_directions(W, kappa, rng)
    proj = V.T @ y
    if rng.random() >= new_feature_prob(proj, sigma2):
        return None
    x = proj / (sigma2 + 1.0) + np.sqrt(sigma2 / (sigma2 + 1.0)) * rng.standard_normal(kappa)
    return V, x


def _extend(W, X, Z, n, V, x, rng):
    kappa = V.shape[1]
    Xnew = rng.standard_normal((kappa, X.shape[1]))
    Xnew[:, n] = x
    Znew = np.zeros((kappa, Z.shape[1]), np.int8)
    Znew[:, n] = 1
    return np.hstack([W, V]), np.vstack([X, Xnew]), np.vstack([Z, Znew])


def bnp_new_features(state: SubspaceState, dataset: Dataset, n: int, rng) -> tuple[SubspaceState, int]:
    """Propose Poisson(alpha/N) new features for point ``n``; returns the state and the accepted count.

    Proposals that would push K past K_max (or D) are rejected outright.
    """
    K_cap = min(state.K_max if state.K_max is not None else dataset.D, dataset.D)
    out = _propose(state.W, model_Y(dataset)[:, n], state.alpha, dataset.N, K_cap, state.sigma2, rng)
    if out is None:
        return state, 0
    W, X, Z = _extend(state.W, state.X, state.Z, n, *out, rng)
    kappa = out[0].shape[1]
    return state.replace(W=W, X=X, Z=Z, kappa_counter=state.kappa_counter + kappa), kappa


def appca_w_update(state: LatentState, dataset: Dataset, max_iters: int = 200, restarts: int = 0,
                   rng=None, return_result: bool = False):
    """Maximise tr(A W) on the Stiefel manifold, A = (X*Z) Y^T / (2 sigma2), warm-started at ``state.W``."""
    if state.K == 0:
        return (state.W, None) if return_result else state.W
    A = (state.X * state.Z) @ model_Y(dataset).T / (2.0 * state.sigma2)
    res = maximize_trace(StiefelProblem(A, max_iters=max_iters), state.W, restarts=restarts, rng=rng)
    if not res.converged:
        log.debug("Stiefel update stopped after %d iterations without meeting tolerance", res.iterations)
    return (res.W, res) if return_result else res.W


def update_sigma2(state: LatentState, dataset: Dataset, hyperpriors: Hyperpriors, rng) -> float:
    R = model_Y(dataset) - state.W @ (state.X * state.Z)
    shape = hyperpriors.gamma + 0.5 * R.size
    scale = hyperpriors.vartheta + 0.5 * float(np.sum(R * R))
    return floor_sigma2(scale / rng.gamma(shape))


def update_alpha(state: LatentState, hyperpriors: Hyperpriors, rng) -> float:
    K, N = state.Z.shape
    shape = hyperpriors.lam + K
    rate = allocation.harmonic(N) + hyperpriors.mu_alpha
    return float(rng.gamma(shape, 1.0 / rate))


# ---------------------------------------------------------------------------
# drivers


def _init_w(Y: np.ndarray, K: int, how: str, rng) -> tuple[np.ndarray, float]:
    D, N = Y.shape
    if how == "random":
        W = np.linalg.qr(rng.standard_normal((D, K)))[0]
    elif how == "pca":
        evals, evecs = np.linalg.eigh(Y @ Y.T / N)
        W = evecs[:, ::-1][:, :K]
    else:
        raise ValueError(f"unknown init {how!r}")
    evals = np.sort(np.linalg.eigvalsh(Y @ Y.T / N))[::-1]
    s2 = float(evals[K:].mean()) if K < D else 1e-2 * float(evals.mean())
    return W, floor_sigma2(s2)


def _finish(report: FitReport, state: LatentState, data: Dataset, t0: float) -> FitReport:
    Yhat = state.W @ (state.X * state.Z)
    Y = model_Y(data)
    report.mae = mae(Y, Yhat)
    report.rmse_mean, report.rmse_std = rmse_per_row(Y, Yhat)
    report.popularity = allocation.popularity_histogram(state.Z).tolist()
    report.wall_seconds = time.perf_counter() - t0
    report.extra["mu"] = data.mu.tolist()
    return report


def fit_appca(dataset: Dataset, config: AppcaConfig, callback=None) -> tuple[SubspaceState, FitReport]:
    """Gibbs sampler for aPPCA; ``callback(sweep, state)`` runs after every sweep."""
    K, L = config.K, config.L
    if not 1 <= L <= K:
        raise ValueError(f"need 1 <= L <= K, got L={L}, K={K}")
    if K > dataset.D:
        raise ValueError(f"K={K} exceeds D={dataset.D}; orthonormal loadings need K <= D")
    if config.score not in SCORES[:2]:
        raise ValueError(f"aPPCA supports scores {SCORES[:2]}, not {config.score!r}")
    rng = np.random.default_rng(config.seed)
    t0 = time.perf_counter()
    data = center(dataset) if config.center else dataset
    Y = model_Y(data)
    W, s2 = _init_w(Y, K, config.init, rng)
    if config.sigma2 is not None:
        s2 = floor_sigma2(config.sigma2)
    Z = allocation.hypergeom_sample(K, L, rng, size=data.N)
    state = SubspaceState(W, sample_x(Y, W, Z, s2, rng), Z, s2, 1.0, L=L)
    prior = PriorSpec.hypergeometric(K, L)
    report = FitReport()
    best, best_ll, best_it, unconverged = state, -np.inf, 0, 0
    for it in range(1, config.iters + 1):
        s = projection_log_scores(Y, state.W, state.sigma2, config.score)
        Z = resample_allocations(state.Z, L, "sample", rng, log_scores=s)
        X = sample_x(Y, state.W, Z, state.sigma2, rng)
        state = state.replace(X=X, Z=Z)
        W, res = appca_w_update(state, data, config.w_max_iters, return_result=True)
        unconverged += not res.converged
        state = state.replace(W=W)
        if config.update_sigma2:
            state = state.replace(sigma2=update_sigma2(state, data, config.hyperpriors, rng))
        ll = joint_log_likelihood(state, data, prior, "stiefel")["total"]
        report.loglik_trace.append(ll)
        if callback is not None:
            callback(it, state)
        if ll > best_ll:
            best, best_ll, best_it = state, ll, it
    report.iterations = config.iters
    report.map_state = best
    report.extra.update(engine="appca-gibbs", map_sweep=best_it, sigma2=state.sigma2,
                        stiefel_unconverged=unconverged)
    return state, _finish(report, state, data, t0)


def _bnp_cleanup(state: SubspaceState) -> SubspaceState:
    m = state.Z.sum(axis=1)
    keep = np.flatnonzero(m > 0)
    keep = keep[np.argsort(-m[keep], kind="stable")]
    return state.replace(W=state.W[:, keep], X=state.X[keep], Z=state.Z[keep])


def bnp_sweep_z(state: SubspaceState, data: Dataset, rng, squared: bool = True) -> tuple[SubspaceState, int]:
    """One pass over points: existing features, then new-feature proposals. Returns (state, accepted)."""
    Y = model_Y(data)
    N = data.N
    W, X, Z = state.W, state.X, state.Z.copy()
    K_cap = min(state.K_max if state.K_max is not None else data.D, data.D)
    P = W.T @ Y
    m = Z.sum(axis=1).astype(float)
    accepted = 0
    for n in range(N):
        if Z.shape[0]:
            m_minus = m - Z[:, n]
            p = existing_feature_prob(m_minus, N, P[:, n], state.sigma2, squared)
            znew = (rng.random(p.shape[0]) < p).astype(np.int8)
            m += znew - Z[:, n]
            Z[:, n] = znew
        out = _propose(W, Y[:, n], state.alpha, N, K_cap, state.sigma2, rng)
        if out is not None:
            kappa = out[0].shape[1]
            W, X, Z = _extend(W, X, Z, n, *out, rng)
            P = np.vstack([P, out[0].T @ Y])
            m = np.concatenate([m, np.ones(kappa)])
            accepted += kappa
    state = state.replace(W=W, X=X, Z=Z, kappa_counter=state.kappa_counter + accepted)
    return state, accepted


def fit_bnp_ppca(dataset: Dataset, config: BnpConfig, callback=None) -> tuple[SubspaceState, FitReport]:
    if config.K_max < 1:
        raise ValueError("K_max must be >= 1")
    if config.K_max > dataset.D:
        raise ValueError(f"K_max={config.K_max} exceeds D={dataset.D}")
    rng = np.random.default_rng(config.seed)
    t0 = time.perf_counter()
    data = center(dataset) if config.center else dataset
    Y = model_Y(data)
    K = config.K_max
    W, s2 = _init_w(Y, K, "pca", rng)
    if config.sigma2 is not None:
        s2 = floor_sigma2(config.sigma2)
    Z = (rng.random((K, data.N)) < config.init_rate).astype(np.int8)
    state = SubspaceState(W, sample_x(Y, W, Z, s2, rng), Z, s2, 1.0, alpha=config.alpha0, K_max=K)
    state = _bnp_cleanup(state)
    report = FitReport()
    best, best_ll, best_it = state, -np.inf, 0
    k_trace = []
    for it in range(1, config.iters + 1):
        state, _ = bnp_sweep_z(state, data, rng, config.squared)
        state = _bnp_cleanup(state)
        state = state.replace(X=sample_x(Y, state.W, state.Z, state.sigma2, rng))
        state = state.replace(W=appca_w_update(state, data, config.w_max_iters))
        if config.update_sigma2:
            state = state.replace(sigma2=update_sigma2(state, data, config.hyperpriors, rng))
        if config.update_alpha:
            state = state.replace(alpha=update_alpha(state, config.hyperpriors, rng))
        k_trace.append(state.K)
        ll = joint_log_likelihood(state, data, PriorSpec.ibp(state.alpha, config.K_max), "stiefel")["total"]
        report.loglik_trace.append(ll)
        if callback is not None:
            callback(it, state)
        if ll > best_ll:
            best, best_ll, best_it = state, ll, it
    report.iterations = config.iters
    report.map_state = best
    report.extra.update(engine="bnp-ppca-gibbs", map_sweep=best_it, sigma2=state.sigma2, alpha=state.alpha,
                        K_trace=k_trace, kappa_accepted=state.kappa_counter)
    return state, _finish(report, state, data, t0)
