"""Adaptive factor analysis: hypergeometric feature allocation with EM/ICM and Gibbs inference."""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from lfl import allocation
from lfl.core import (
    SIGMA2_FLOOR,
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

log = logging.getLogger(__name__)

SCORES = ("projection", "tempered", "marginal")


@dataclass
class EmStats:
    ex: np.ndarray  # K x N posterior means
    psi: np.ndarray  # N x K x K second moments (Cov + E[x]E[x]^T)

    @property
    def cov(self) -> np.ndarray:
        return self.psi - np.einsum("kn,jn->nkj", self.ex, self.ex)


@dataclass
class AfaConfig:
    K: int
    L: Optional[int] = None
    prior: str = "hypergeometric"  # or "all_ones"
    hyperpriors: Hyperpriors = field(default_factory=Hyperpriors)
    iters: int = 100
    mode: str = "em"  # or "gibbs"
    z_mode: str = "icm"  # z-updates inside EM: "icm" or "sample"
    score: str = "projection"
    seed: int = 0
    sigma2_w: float = 1.0
    tol: float = 1e-6
    update_sigma2: bool = True
    center: bool = False  # subtract the sample mean first; off fits the dataset's own offset (zero for raw data)

    def prior_spec(self) -> PriorSpec:
        if self.prior == "all_ones":
            return PriorSpec.all_ones(self.K)
        if self.prior != "hypergeometric":
            raise ValueError(f"aFA supports hypergeometric or all_ones priors, not {self.prior!r}")
        return PriorSpec.hypergeometric(self.K, self.L if self.L is not None else self.K)


# ---------------------------------------------------------------------------
# collapsed marginals and slot-wise allocation updates


def active_sets(Z: np.ndarray, L: int) -> np.ndarray:
    """Indices of the active features of each column, ascending; shape (N, L)."""
    return np.argsort(-np.asarray(Z), axis=0, kind="stable")[:L].T


def set_log_marginal(G, B, yy, S, sigma2, sigma2_x, D):
    """log N(y_n | 0, sigma2 I + sigma2_x W_S W_S^T) for index sets ``S``.

    ``G = W^T W``, ``B = W^T Y`` and ``yy`` holds the squared column norms.
    ``S`` has shape (N, ..., L) with the observation index leading.
    """
    S = np.asarray(S)
    N = S.shape[0]
    L = S.shape[-1]
    const = -0.5 * D * np.log(2 * np.pi * sigma2)
    yy = yy.reshape((N,) + (1,) * (S.ndim - 2))
    if L == 0:
        return const - 0.5 * yy / sigma2 + np.zeros(S.shape[:-1])
    Gs = G[S[..., :, None], S[..., None, :]]
    nidx = np.arange(N).reshape((N,) + (1,) * (S.ndim - 1))
    bs = B[S, nidx]
    r = sigma2 / sigma2_x
    P = Gs + r * np.eye(L)
    C = np.linalg.cholesky(P)
    logdetP = 2.0 * np.sum(np.log(np.diagonal(C, axis1=-2, axis2=-1)), axis=-1)
    v = np.linalg.solve(C, bs[..., None])[..., 0]
    quad = (yy - np.sum(v * v, axis=-1)) / sigma2
    logdet_ratio = logdetP - L * np.log(r)
    return const - 0.5 * logdet_ratio - 0.5 * quad


def swap_log_marginals(G, B, yy, rest, sigma2, sigma2_x, D) -> np.ndarray:
    """``set_log_marginal`` of ``rest[n] + {k}`` for every feature k at once; shape (N, K).

    The retained set is factored once and each candidate enters through a
    Schur complement. Entries for k already in ``rest`` are meaningless.
    """
    rest = np.asarray(rest)
    N, m = rest.shape
    K = G.shape[0]
    r = sigma2 / sigma2_x
    Bt = B.T  # N x K
    schur = np.broadcast_to(np.diag(G) + r, (N, K)).copy()
    proj = Bt.copy()
    logdet = np.zeros((N, 1))
    vv = np.zeros((N, 1))
    if m:
        nidx = np.arange(N)[:, None]
        C = np.linalg.cholesky(G[rest[:, :, None], rest[:, None, :]] + r * np.eye(m))
        U = np.linalg.solve(C, G[rest])  # N x m x K
        v0 = np.linalg.solve(C, Bt[nidx, rest][..., None])[..., 0]
        schur -= np.sum(U * U, axis=1)
        proj -= np.einsum("nmk,nm->nk", U, v0)
        logdet = 2.0 * np.sum(np.log(np.diagonal(C, axis1=1, axis2=2)), axis=1, keepdims=True)
        vv = np.sum(v0 * v0, axis=1, keepdims=True)
    logdet = logdet + np.log(schur) - (m + 1) * np.log(r)
    quad = (yy[:, None] - vv - proj * proj / schur) / sigma2
    return -0.5 * D * np.log(2 * np.pi * sigma2) - 0.5 * logdet - 0.5 * quad


def projection_log_scores(Y, W, sigma2: float, score: str = "projection") -> np.ndarray:
    """Log of the categorical weights exp((y^T w_k)^2), optionally tempered by 1/(2 s2 (s2+1))."""
    P = (W.T @ Y) ** 2
    if score == "tempered":
        P = P / (2.0 * sigma2 * (sigma2 + 1.0))
    return P


def slot_probabilities(log_scores, z) -> np.ndarray:
    """Categorical probabilities over inactive features of one column."""
    log_scores = np.asarray(log_scores, float)
    mask = np.asarray(z) == 0
    out = np.zeros_like(log_scores)
    if not mask.any():
        return out
    s = log_scores[mask]
    p = np.exp(s - s.max())
    out[mask] = p / p.sum()
    return out


def _choose(logits: np.ndarray, mode: str, rng) -> np.ndarray:
    """Pick one index per row of ``logits`` (-inf marks excluded entries)."""
    if mode == "icm":
        return np.argmax(logits, axis=-1)
    m = logits.max(axis=-1, keepdims=True)
    p = np.exp(logits - m)
    c = np.cumsum(p, axis=-1)
    u = rng.random(logits.shape[0])[:, None] * c[:, -1:]
    idx = np.sum(c <= u, axis=-1)
    return np.minimum(idx, logits.shape[-1] - 1)


def resample_allocations(
    Z: np.ndarray,
    L: int,
    mode: str,
    rng: Optional[np.random.Generator],
    log_scores: Optional[np.ndarray] = None,
    marginal: Optional[tuple] = None,
    guard: Optional[tuple] = None,
) -> np.ndarray:
    """Slot-wise resampling of every column of ``Z`` (each with ``L`` active).

    For each of the column's active slots in turn the slot is switched off and a
    replacement chosen among the now-inactive features, either from fixed
    per-feature ``log_scores`` or, with ``marginal=(G, B, yy, sigma2,
    sigma2_x, D)``, from the collapsed marginal likelihood of each candidate
    set. ``guard`` (same tuple as ``marginal``) reverts any icm move that lowers
    the collapsed marginal likelihood.
    """
    Z = np.array(Z, dtype=np.int8, copy=True)
    K, N = Z.shape
    if L >= K:
        return Z
    cols = np.arange(N)
    sets = active_sets(Z, L)  # N x L, current members by slot
    if mode != "icm":
        # visiting slots in sorted order biases the chain towards low indices
        sets = rng.permuted(sets, axis=1)
    for l in range(L):
        Z[sets[:, l], cols] = 0
        inactive = Z.T == 0  # N x K, includes the freed slot
        if marginal is not None:
            rest = np.delete(sets, l, axis=1)
            logits = np.where(inactive, swap_log_marginals(*marginal[:3], rest, *marginal[3:]), -np.inf)
            pick = _choose(logits, mode, rng)
        else:
            logits = np.where(inactive, log_scores.T, -np.inf)
            pick = _choose(logits, mode, rng)
        if guard is not None:
            G, B, yy, s2, sx2, D = guard
            before = set_log_marginal(G, B, yy, sets, s2, sx2, D)
            trial = sets.copy()
            trial[:, l] = pick
            after = set_log_marginal(G, B, yy, trial, s2, sx2, D)
            pick = np.where(after >= before, pick, sets[:, l])
        Z[pick, cols] = 1
        sets[:, l] = pick
    return Z


def afa_z_update(state: LatentState, dataset: Dataset, n: int, mode: str = "icm", rng=None,
                 score: str = "projection") -> np.ndarray:
    """Resample column ``n`` of ``Z``; returns the new column."""
    Yc = model_Y(dataset)
    L = state.L if state.L is not None else int(state.Z[:, n].sum())
    y = Yc[:, [n]]
    if score == "marginal":
        G = state.W.T @ state.W
        marg = (G, state.W.T @ y, np.sum(y * y, axis=0), state.sigma2, state.sigma2_x, dataset.D)
        z = resample_allocations(state.Z[:, [n]], L, mode, rng, marginal=marg)
    else:
        s = projection_log_scores(y, state.W, state.sigma2, score)
        z = resample_allocations(state.Z[:, [n]], L, mode, rng, log_scores=s)
    return z[:, 0]


# ---------------------------------------------------------------------------
# EM


def afa_e_step(state: LatentState, dataset: Dataset) -> EmStats:
    Y = model_Y(dataset)
    W, Z = state.W, state.Z.astype(float)
    K = W.shape[1]
    G = W.T @ W
    B = W.T @ Y
    zz = np.einsum("kn,jn->nkj", Z, Z)
    P = G[None] * zz / state.sigma2 + np.eye(K)[None] / state.sigma2_x
    cov = np.linalg.inv(P)
    cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
    rhs = (Z * B / state.sigma2).T[..., None]
    ex = (cov @ rhs)[..., 0].T
    psi = cov + np.einsum("kn,jn->nkj", ex, ex)
    return EmStats(ex, psi)


def afa_m_step(dataset: Dataset, Z: np.ndarray, stats: EmStats):
    """Closed-form maximisers (W, sigma2, sigma2_x); also reports whether a ridge was needed."""
    W, s2, sx2, _ = _m_step(model_Y(dataset), Z, stats)
    return W, s2, sx2


def _m_step(Y, Z, stats: EmStats):
    Z = np.asarray(Z, float)
    D, N = Y.shape
    K = Z.shape[0]
    AX = stats.ex * Z
    lhs = Y @ AX.T
    M = np.einsum("nkj,kn,jn->kj", stats.psi, Z, Z)
    ridged = False
    if np.linalg.cond(M) > 1e12:
        M = M + 1e-8 * np.eye(K)
        ridged = True
    W = np.linalg.solve(M.T, lhs.T).T
    G = W.T @ W
    s2 = (np.sum(Y * Y) - 2.0 * np.sum(AX * (W.T @ Y)) + np.sum(G * M)) / (N * D)
    sx2 = np.trace(stats.psi, axis1=1, axis2=2).sum() / (N * K)
    return W, floor_sigma2(s2), float(sx2), ridged


def afa_objective(Y, W, Z, sigma2, sigma2_x, prior: PriorSpec) -> float:
    """Collapsed log-likelihood sum_n log N(y_n | 0, s2 I + sx2 W A_n W^T) plus log p(Z)."""
    L = int(Z[:, 0].sum()) if Z.shape[1] else 0
    S = active_sets(Z, L)
    G, B = W.T @ W, W.T @ Y
    ll = float(np.sum(set_log_marginal(G, B, np.sum(Y * Y, axis=0), S, sigma2, sigma2_x, Y.shape[0])))
    if prior.kind == "hypergeometric":
        ll += -Z.shape[1] * allocation.log_comb(prior.K, prior.L)
    return ll


# ---------------------------------------------------------------------------
# Gibbs


def sample_x_fa(Y, W, X, Z, sigma2, sigma2_x, rng) -> np.ndarray:
    """Gaussian full conditional of each x_kn; inactive entries are drawn from the prior."""
    X = X.copy()
    K, N = X.shape
    R = Y - W @ (X * Z)
    for k in range(K):
        w = W[:, k]
        z = Z[k].astype(bool)
        R += np.outer(w, X[k] * z)
        a = float(w @ w)
        denom = sigma2 + sigma2_x * a
        mean = sigma2_x * (w @ R) / denom
        sd = np.sqrt(sigma2 * sigma2_x / denom)
        xk = np.where(z, mean + sd * rng.standard_normal(N), np.sqrt(sigma2_x) * rng.standard_normal(N))
        X[k] = xk
        R -= np.outer(w, xk * z)
    return X


def sample_w_fa(Y, W, X, Z, sigma2, sigma2_w, rng) -> np.ndarray:
    """Column-wise Gaussian full conditional of the loadings."""
    W = W.copy()
    D, K = W.shape
    XZ = X * Z
    R = Y - W @ XZ
    for k in range(K):
        xk = XZ[k]
        R += np.outer(W[:, k], xk)
        prec = float(xk @ xk) / sigma2 + 1.0 / sigma2_w
        mean = (R @ xk) / sigma2 / prec
        W[:, k] = mean + rng.standard_normal(D) / np.sqrt(prec)
        R -= np.outer(W[:, k], xk)
    return W


def sample_sigma2(residual_ss: float, n_entries: int, hyper: Hyperpriors, rng) -> float:
    shape = hyper.gamma + 0.5 * n_entries
    scale = hyper.vartheta + 0.5 * residual_ss
    return floor_sigma2(scale / rng.gamma(shape))


def afa_gibbs_step(state: LatentState, dataset: Dataset, rng, hyperpriors: Hyperpriors = Hyperpriors(),
                   score: str = "projection", sigma2_w: float = 1.0, update_sigma2: bool = True) -> LatentState:
    Y = model_Y(dataset)
    W, X, Z = state.W, state.X, state.Z
    L = state.L if state.L is not None else int(Z[:, 0].sum())
    if score == "marginal":
        marg = (W.T @ W, W.T @ Y, np.sum(Y * Y, axis=0), state.sigma2, state.sigma2_x, dataset.D)
        Z = resample_allocations(Z, L, "sample", rng, marginal=marg)
    else:
        Z = resample_allocations(Z, L, "sample", rng, log_scores=projection_log_scores(Y, W, state.sigma2, score))
    X = sample_x_fa(Y, W, X, Z, state.sigma2, state.sigma2_x, rng)
    W = sample_w_fa(Y, W, X, Z, state.sigma2, sigma2_w, rng)
    s2 = state.sigma2
    if update_sigma2:
        R = Y - W @ (X * Z)
        s2 = sample_sigma2(float(np.sum(R * R)), R.size, hyperpriors, rng)
    return state.replace(W=W, X=X, Z=Z, sigma2=s2)


# ---------------------------------------------------------------------------
# drivers


def pca_init(Y: np.ndarray, K: int, rng) -> tuple[np.ndarray, np.ndarray, float]:
    """Loadings scaled by sqrt(eigenvalue), unit-variance scores, and residual variance."""
    D, N = Y.shape
    evals, evecs = np.linalg.eigh(Y @ Y.T / N)
    order = np.argsort(evals)[::-1]
    evals, evecs = np.clip(evals[order], 0.0, None), evecs[:, order]
    k = min(K, D)
    scale = np.sqrt(np.maximum(evals[:k], 1e-12))
    W = evecs[:, :k] * scale
    if K > D:
        extra = rng.standard_normal((D, K - D)) * np.sqrt(evals.mean() + 1e-12)
        W = np.hstack([W, extra])
    X = np.linalg.lstsq(W, Y, rcond=None)[0]
    sigma2 = float(evals[k:].mean()) if k < D else 1e-2 * float(evals.mean() + 1e-12)
    return W, X, floor_sigma2(sigma2)


def _finish_report(report: FitReport, state: LatentState, dataset: Dataset, t0: float) -> FitReport:
    Yhat = state.W @ (state.X * state.Z)
    Ytrue = model_Y(dataset)
    report.mae = mae(Ytrue, Yhat)
    report.rmse_mean, report.rmse_std = rmse_per_row(Ytrue, Yhat)
    report.popularity = allocation.popularity_histogram(state.Z).tolist()
    report.wall_seconds = time.perf_counter() - t0
    return report


def fit_afa(dataset: Dataset, config: AfaConfig) -> tuple[LatentState, FitReport]:
    """Fit aFA (or vanilla FA with ``prior="all_ones"``) by EM/ICM or Gibbs sampling.

    The returned state explains ``model_Y`` of the working dataset (centred when
    ``config.center``); ``report.extra["mu"]`` holds the offset to add back.
    Centering is off by default: with sparse allocations the sample-mean shift
    is generally not in the span of a point's active features.
    """
    if config.iters < 1:
        raise ValueError("iters must be >= 1")
    if config.score not in SCORES:
        raise ValueError(f"unknown score {config.score!r}")
    prior = config.prior_spec()
    K, L = prior.K, prior.L
    data = center(dataset) if config.center else dataset
    Y = model_Y(data)
    D, N = Y.shape
    if K > D:
        warnings.warn(f"K={K} exceeds D={D}; loadings are not identifiable", stacklevel=2)
    rng = np.random.default_rng(config.seed)
    t0 = time.perf_counter()

    W, _, sigma2 = pca_init(Y, K, rng)
    Z = np.ones((K, N), np.int8) if prior.kind == "all_ones" else allocation.hypergeom_sample(K, L, rng, size=N)
    state = LatentState(W, np.zeros((K, N)), Z, sigma2, 1.0, L=L)
    state = state.replace(X=afa_e_step(state, data).ex)
    report = FitReport()

    if config.mode == "em":
        state = _run_em(state, data, prior, config, rng, report)
    elif config.mode == "gibbs":
        state = _run_gibbs(state, data, prior, config, rng, report)
    else:
        raise ValueError(f"unknown mode {config.mode!r}")
    report.extra["mu"] = data.mu.tolist()
    return state, _finish_report(report, state, data, t0)


def _run_em(state, data, prior, config, rng, report):
    Y = model_Y(data)
    W, Z, s2, sx2 = state.W, state.Z, state.sigma2, state.sigma2_x
    L = prior.L
    yy = np.sum(Y * Y, axis=0)
    prev = None
    ridged = 0
    stats = None
    it = 0
    for it in range(1, config.iters + 1):
        if prior.kind == "hypergeometric" and L < prior.K:
            marg = (W.T @ W, W.T @ Y, yy, s2, sx2, data.D)
            if config.score == "marginal":
                Z = resample_allocations(Z, L, config.z_mode, rng, marginal=marg)
            else:
                guard = marg if config.z_mode == "icm" else None
                Z = resample_allocations(Z, L, config.z_mode, rng,
                                         log_scores=projection_log_scores(Y, W, s2, config.score), guard=guard)
        stats = afa_e_step(LatentState(W, np.zeros_like(state.X), Z, s2, sx2, L=L), data)
        W, s2, sx2, r = _m_step(Y, Z, stats)
        ridged += r
        obj = afa_objective(Y, W, Z, s2, sx2, prior)
        report.loglik_trace.append(obj)
        if prev is not None and abs(obj - prev) < config.tol * abs(obj):
            break
        prev = obj
    stats = afa_e_step(LatentState(W, np.zeros_like(state.X), Z, s2, sx2, L=L), data)
    report.iterations = it
    report.extra.update(engine="em", ridge_fallbacks=ridged, sigma2_x=sx2, sigma2=s2)
    return LatentState(W, stats.ex, Z, s2, sx2, L=L)


def _run_gibbs(state, data, prior, config, rng, report):
    best, best_ll, best_it = state, -np.inf, 0
    for it in range(1, config.iters + 1):
        state = afa_gibbs_step(state, data, rng, config.hyperpriors, config.score, config.sigma2_w,
                               config.update_sigma2)
        ll = joint_log_likelihood(state, data, prior, "gaussian", config.sigma2_w)["total"]
        report.loglik_trace.append(ll)
        if ll > best_ll:
            best, best_ll, best_it = state, ll, it
    report.iterations = config.iters
    report.map_state = best
    report.extra.update(engine="gibbs", map_sweep=best_it, sigma2=state.sigma2)
    return state
