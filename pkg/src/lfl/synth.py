"""Synthetic latent-feature datasets: the five allocation regimes and a three-plane scene."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from lfl import allocation
from lfl.core import Dataset

PATTERNS = ("sparse", "dense", "subspace_clustering", "balanced", "single_state")


@dataclass(frozen=True)
class GenConfig:
    pattern: str = "balanced"
    N: int = 1000
    D: int = 50
    K: int = 10
    L: Optional[int] = None
    sigma: float = 0.1
    sigma_W: float = 1.0
    seed: int = 0
    alpha: Optional[float] = None  # sparse pattern; defaults to K / H_N
    dense_rate: float = 0.8
    n_blocks: int = 3
    single_state: str = "row"  # "row": one feature on for all; "shared": one L-subset for all

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise ValueError(f"unknown pattern {self.pattern!r}; expected one of {PATTERNS}")
        if min(self.N, self.D, self.K) < 1:
            raise ValueError("N, D and K must be positive")
        if self.sigma < 0 or self.sigma_W <= 0:
            raise ValueError("noise scales must be non-negative (sigma_W positive)")
        if self.L is not None and not 1 <= self.L <= self.K:
            raise ValueError(f"need 1 <= L <= K, got L={self.L}")
        if self.single_state not in ("row", "shared"):
            raise ValueError("single_state must be 'row' or 'shared'")

    @property
    def resolved_L(self) -> int:
        return self.L if self.L is not None else max(1, round(0.3 * self.K))

    @property
    def resolved_alpha(self) -> float:
        return self.alpha if self.alpha is not None else self.K / allocation.harmonic(self.N)

    def resolved(self) -> dict:
        d = asdict(self)
        d["L"] = self.resolved_L
        d["alpha"] = self.resolved_alpha
        return d


@dataclass(frozen=True)
class GroundTruth:
    W: np.ndarray
    X: np.ndarray
    Z: np.ndarray

    @property
    def signal(self) -> np.ndarray:
        return self.W @ (self.X * self.Z)


def generate_z(config: GenConfig, rng: np.random.Generator) -> np.ndarray:
    K, N, L = config.K, config.N, config.resolved_L
    p = config.pattern
    if p == "sparse":
        Z = allocation.ibp_sample(N, config.resolved_alpha, K, rng)
        Z = np.vstack([Z, np.zeros((K - Z.shape[0], N), np.int8)])
    elif p == "dense":
        Z = (rng.random((K, N)) < config.dense_rate).astype(np.int8)
    elif p == "subspace_clustering":
        Z = np.zeros((K, N), np.int8)
        blocks = np.array_split(np.arange(N), config.n_blocks)
        for idx in blocks:
            Z[:, idx] = allocation.hypergeom_sample(K, L, rng)[:, None]
    elif p == "balanced":
        Z = allocation.hypergeom_sample(K, L, rng, size=N)
    else:
        Z = np.zeros((K, N), np.int8)
        if config.single_state == "row":
            Z[0] = 1
        else:
            Z[:] = allocation.hypergeom_sample(K, L, rng)[:, None]
    return Z


def generate_dataset(config: GenConfig, rng: Optional[np.random.Generator] = None) -> tuple[Dataset, GroundTruth]:
    rng = np.random.default_rng(config.seed) if rng is None else rng
    Z = generate_z(config, rng)
    W = config.sigma_W * rng.standard_normal((config.D, config.K))
    X = rng.standard_normal((config.K, config.N))
    E = config.sigma * rng.standard_normal((config.D, config.N))
    Y = W @ (X * Z) + E
    return Dataset.from_matrix(Y), GroundTruth(W, X, Z)


@dataclass(frozen=True)
class SceneTruth:
    directions: np.ndarray  # 3 x 3, orthonormal columns
    labels: np.ndarray  # plane index per point
    Z: np.ndarray  # 3 x N, which two directions each point uses
    X: np.ndarray  # 3 x N in-plane coefficients (zero off the plane)
    planes: tuple = ((0, 1), (1, 2), (0, 2))


def generate_three_subspace_scene(N: int, rng: np.random.Generator, sigma: float = 0.02,
                                  scale: float = 1.0) -> tuple[Dataset, SceneTruth]:
    """Points scattered over three planes, each spanned by a pair of three orthogonal directions."""
    if N % 3:
        raise ValueError("N must be divisible by 3")
    Q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    planes = ((0, 1), (1, 2), (0, 2))
    labels = np.repeat(np.arange(3), N // 3)
    Z = np.zeros((3, N), np.int8)
    for g, (a, b) in enumerate(planes):
        Z[np.ix_([a, b], labels == g)] = 1
    coef = scale * rng.standard_normal((3, N)) * Z
    Y = Q @ coef + sigma * rng.standard_normal((3, N))
    return Dataset.from_matrix(Y), SceneTruth(Q, labels, Z, coef, planes)
