"""Shared types, likelihood evaluation and error metrics.

Matrices follow the column convention used throughout the package: ``Y`` is
``D x N`` (one observation per column), ``W`` is ``D x K`` and both ``X`` and
``Z`` are ``K x N``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

LOG_ZERO = -np.inf
SIGMA2_FLOOR = 1e-10


class DimensionError(ValueError):
    """Raised when array shapes disagree; the message names the axes."""


class LikelihoodError(ArithmeticError):
    """A likelihood term evaluated to a non-finite value."""

    def __init__(self, term: str, value: float):
        super().__init__(f"non-finite {term}: {value}")
        self.term = term
        self.value = value


def floor_sigma2(sigma2: float) -> float:
    return max(float(sigma2), SIGMA2_FLOOR)


@dataclass(frozen=True)
class Dataset:
    Y: np.ndarray
    mu: np.ndarray
    centered: bool = False

    def __post_init__(self):
        Y = np.atleast_2d(np.asarray(self.Y, dtype=float))
        mu = np.asarray(self.mu, dtype=float).reshape(-1)
        if Y.shape[0] < 1 or Y.shape[1] < 1:
            raise DimensionError(f"empty data matrix with shape {Y.shape}")
        if mu.shape[0] != Y.shape[0]:
            raise DimensionError(f"mu has length {mu.shape[0]} but Y has D={Y.shape[0]} rows")
        if not np.all(np.isfinite(Y)):
            raise ValueError("data matrix contains non-finite entries")
        if self.centered and np.any(np.abs(Y.sum(axis=1)) > 1e-9 * Y.shape[1] * max(1.0, np.abs(Y).max())):
            raise ValueError("dataset flagged as centred but its rows do not sum to zero")
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "mu", mu)

    @classmethod
    def from_matrix(cls, Y) -> "Dataset":
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        return cls(Y, np.zeros(Y.shape[0]), False)

    @classmethod
    def from_rows(cls, rows) -> "Dataset":
        """Build from an ``N x D`` table with one observation per row."""
        return cls.from_matrix(np.asarray(rows, dtype=float).T)

    @property
    def D(self) -> int:
        return self.Y.shape[0]

    @property
    def N(self) -> int:
        return self.Y.shape[1]


@dataclass(frozen=True)
class LatentState:
    W: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    sigma2: float
    sigma2_x: float = 1.0
    alpha: float = 1.0
    L: Optional[int] = None

    def __post_init__(self):
        W = np.atleast_2d(np.asarray(self.W, dtype=float))
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        Z = np.atleast_2d(np.asarray(self.Z)).astype(np.int8)
        if W.shape[1] != X.shape[0] or X.shape != Z.shape:
            raise DimensionError(
                f"inconsistent latent shapes: W {W.shape}, X {X.shape}, Z {Z.shape} "
                "(need W columns == X rows and X.shape == Z.shape)"
            )
        if np.any((Z != 0) & (Z != 1)):
            raise ValueError("Z must be binary")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "sigma2", floor_sigma2(self.sigma2))

    @property
    def K(self) -> int:
        return self.W.shape[1]

    @property
    def D(self) -> int:
        return self.W.shape[0]

    @property
    def N(self) -> int:
        return self.X.shape[1]

    def replace(self, **changes) -> "LatentState":
        return dataclasses.replace(self, **changes)

    def orthonormality_error(self) -> float:
        return float(np.max(np.abs(self.W.T @ self.W - np.eye(self.K)))) if self.K else 0.0


@dataclass(frozen=True)
class PriorSpec:
    """Which allocation prior governs ``Z``.

    kind is one of ``hypergeometric``, ``ibp``, ``beta_bernoulli``, ``all_ones``.
    """

    kind: str
    K: int
    L: Optional[int] = None
    alpha: Optional[float] = None

    KINDS = ("hypergeometric", "ibp", "beta_bernoulli", "all_ones")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown prior kind {self.kind!r}")
        if self.K < 1:
            raise ValueError("K must be positive")
        if self.kind == "hypergeometric":
            if self.L is None or not 1 <= self.L <= self.K:
                raise ValueError(f"hypergeometric prior needs 1 <= L <= K, got L={self.L}, K={self.K}")
        if self.kind in ("ibp", "beta_bernoulli") and not (self.alpha and self.alpha > 0):
            raise ValueError(f"{self.kind} prior needs alpha > 0")

    @classmethod
    def hypergeometric(cls, K: int, L: int) -> "PriorSpec":
        return cls("hypergeometric", K, L=L)

    @classmethod
    def ibp(cls, alpha: float, K_max: int) -> "PriorSpec":
        return cls("ibp", K_max, alpha=alpha)

    @classmethod
    def beta_bernoulli(cls, alpha: float, K: int) -> "PriorSpec":
        return cls("beta_bernoulli", K, alpha=alpha)

    @classmethod
    def all_ones(cls, K: int) -> "PriorSpec":
        return cls("all_ones", K, L=K)


@dataclass(frozen=True)
class Hyperpriors:
    """Inverse-Gamma(gamma, vartheta) on sigma2 and Gamma(lam, rate mu_alpha) on alpha."""

    gamma: float = 1e-3
    vartheta: float = 1e-3
    lam: float = 1.0
    mu_alpha: float = 1.0

    def __post_init__(self):
        for name in ("gamma", "vartheta", "lam", "mu_alpha"):
            if not getattr(self, name) > 0:
                raise ValueError(f"hyperprior {name} must be positive")


@dataclass
class FitReport:
    loglik_trace: list = field(default_factory=list)
    mae: float = float("nan")
    rmse_mean: float = float("nan")
    rmse_std: float = float("nan")
    popularity: list = field(default_factory=list)
    iterations: int = 0
    wall_seconds: float = 0.0
    extra: dict = field(default_factory=dict)
    map_state: Optional["LatentState"] = field(default=None, repr=False)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "map_state"}
        d["loglik_trace"] = [float(v) for v in self.loglik_trace]
        d["popularity"] = [float(v) for v in self.popularity]
        return d


def _check_dims(state: LatentState, dataset: Dataset) -> None:
    if state.D != dataset.D:
        raise DimensionError(f"D mismatch: W has {state.D} rows, data has {dataset.D}")
    if state.N != dataset.N:
        raise DimensionError(f"N mismatch: X has {state.N} columns, data has {dataset.N}")


def reconstruct(state: LatentState, dataset: Dataset) -> np.ndarray:
    _check_dims(state, dataset)
    Yhat = state.W @ (state.X * state.Z)
    if not dataset.centered:
        Yhat = Yhat + dataset.mu[:, None]
    return Yhat


def center(dataset: Dataset) -> Dataset:
    if dataset.centered:
        return dataset
    mu = dataset.Y.mean(axis=1)
    return Dataset(dataset.Y - mu[:, None], dataset.mu + mu, True)


def mae(Y, Yhat) -> float:
    Y, Yhat = np.asarray(Y, float), np.asarray(Yhat, float)
    if Y.shape != Yhat.shape:
        raise DimensionError(f"shape mismatch {Y.shape} vs {Yhat.shape}")
    return float(np.mean(np.abs(Y - Yhat)))


def rmse_per_row(Y, Yhat) -> tuple[float, float]:
    """Mean and population standard deviation of the per-row RMSE."""
    Y, Yhat = np.asarray(Y, float), np.asarray(Yhat, float)
    if Y.shape != Yhat.shape:
        raise DimensionError(f"shape mismatch {Y.shape} vs {Yhat.shape}")
    r = np.sqrt(np.mean((Y - Yhat) ** 2, axis=1))
    return float(r.mean()), float(r.std())


def model_Y(dataset: Dataset) -> np.ndarray:
    """The matrix the latent model explains: ``Y`` minus the dataset's offset."""
    return dataset.Y if dataset.centered else dataset.Y - dataset.mu[:, None]


def joint_log_likelihood(
    state: LatentState,
    dataset: Dataset,
    prior: PriorSpec,
    w_prior: str = "gaussian",
    sigma2_w: float = 1.0,
) -> dict:
    """Log of the joint density p(Y, W, X, Z) broken into its factors.

    ``w_prior`` is ``"gaussian"`` (FA family, columns ~ N(0, sigma2_w I)) or
    ``"stiefel"`` (uniform on orthonormal frames, contributes 0).
    The latent prior uses ``state.sigma2_x`` for the FA family and unit
    variance for the Stiefel family.
    """
    _check_dims(state, dataset)
    D, N = dataset.D, dataset.N
    R = model_Y(dataset) - state.W @ (state.X * state.Z)
    s2 = state.sigma2
    data_term = -0.5 * N * D * np.log(2 * np.pi * s2) - 0.5 * float(np.sum(R * R)) / s2

    sx2 = state.sigma2_x if w_prior == "gaussian" else 1.0
    nx = state.X.size
    x_term = -0.5 * nx * np.log(2 * np.pi * sx2) - 0.5 * float(np.sum(state.X**2)) / sx2

    z_term = z_log_prior(state.Z, prior, L=state.L)

    if w_prior == "gaussian":
        w_term = -0.5 * state.W.size * np.log(2 * np.pi * sigma2_w) - 0.5 * float(np.sum(state.W**2)) / sigma2_w
    elif w_prior == "stiefel":
        w_term = 0.0
    else:
        raise ValueError(f"unknown w_prior {w_prior!r}")

    terms = {"data_term": data_term, "x_prior_term": x_term, "z_prior_term": z_term, "w_prior_term": w_term}
    for name, v in terms.items():
        if name == "z_prior_term" and v == LOG_ZERO:
            continue
        if not np.isfinite(v):
            raise LikelihoodError(name, v)
    terms["total"] = LOG_ZERO if z_term == LOG_ZERO else float(sum(terms.values()))
    return terms


def z_log_prior(Z: np.ndarray, prior: PriorSpec, L: Optional[int] = None) -> float:
    from lfl import allocation

    Z = np.asarray(Z)
    if prior.kind == "hypergeometric":
        L = prior.L if L is None else L
        return float(sum(allocation.hypergeom_log_pmf(Z[:, n], L) for n in range(Z.shape[1])))
    if prior.kind == "ibp":
        used = Z[Z.sum(axis=1) > 0]
        return allocation.ibp_log_pmf(used, prior.alpha)
    if prior.kind == "beta_bernoulli":
        return allocation.bb_log_pmf(Z, prior.alpha)
    return 0.0 if np.all(Z == 1) else LOG_ZERO


def trace_stabilized(trace, n_std: float = 2.0) -> bool:
    """Crude convergence check on a log-likelihood trace.

    Passes when the mean of the final quarter lies within ``n_std`` standard
    deviations (of the third quarter) of the third quarter's mean.
    """
    t = np.asarray(trace, float)
    if t.size < 8 or not np.all(np.isfinite(t)):
        return False
    q = t.size // 4
    third, last = t[2 * q : 3 * q], t[3 * q :]
    spread = max(third.std(), 1e-12 * max(1.0, abs(third.mean())))
    return bool(abs(last.mean() - third.mean()) <= n_std * spread)
