"""Riemannian gradient ascent of tr(A W) over matrices with orthonormal columns."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class StiefelProblem:
    A: np.ndarray  # K x D
    tol_grad: float = 1e-6
    max_iters: int = 200
    step0: float = 1.0

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, float))
        if A.shape[0] > A.shape[1]:
            raise ValueError(f"need K <= D, got A of shape {A.shape}")
        if not self.tol_grad > 0:
            raise ValueError("tol_grad must be positive")
        object.__setattr__(self, "A", A)


@dataclass
class StiefelResult:
    W: np.ndarray
    objective: float
    converged: bool
    iterations: int
    objective_trace: list
    max_orth_error: float


def _qf(M: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    Q, R = np.linalg.qr(M)
    d = np.diag(R)
    s = np.where(d < 0, -1.0, 1.0)
    return Q * s, np.abs(d)


def retract(W: np.ndarray, tangent: np.ndarray) -> np.ndarray:
    """QR retraction with the positive-diagonal convention on R."""
    M = W + tangent
    Q, d = _qf(M)
    if d.size and d.min() <= 1e-12 * max(1.0, d.max()):
        Q, _ = _qf(M + 1e-12 * np.random.default_rng(0).standard_normal(M.shape))
    return Q


def riemannian_grad(W: np.ndarray, A: np.ndarray) -> np.ndarray:
    G = A.T
    WtG = W.T @ G
    return G - W @ (0.5 * (WtG + WtG.T))


def orth_error(W: np.ndarray) -> float:
    return float(np.max(np.abs(W.T @ W - np.eye(W.shape[1])))) if W.shape[1] else 0.0


def _ascend(A, W, tol, max_iters, step0, armijo_c=1e-4, shrink=0.5):
    # Armijo backtracking from a Barzilai-Borwein trial step (step0 on the first iteration).
    f = float(np.sum(A * W.T))
    trace = [f]
    worst = orth_error(W)
    converged = False
    g = riemannian_grad(W, A)
    t0 = step0
    it = 0
    for it in range(1, max_iters + 1):
        gn2 = float(np.sum(g * g))
        if np.sqrt(gn2) < tol:
            converged = True
            it -= 1
            break
        t = t0
        while True:
            Wn = retract(W, t * g)
            fn = float(np.sum(A * Wn.T))
            if not np.isfinite(fn):
                return W, f, False, it, trace, worst
            if fn >= f + armijo_c * t * gn2:
                break
            t *= shrink
            if t < 1e-20:
                return W, f, False, it, trace, worst
        gn = riemannian_grad(Wn, A)
        s, y = Wn - W, g - gn
        sy = float(np.sum(s * y))
        t0 = float(np.clip(np.sum(s * s) / sy, 1e-3, 1e3)) if sy > 0 else step0
        W, f, g = Wn, fn, gn
        worst = max(worst, orth_error(W))
        trace.append(f)
    else:
        converged = bool(np.linalg.norm(g) < tol)
    return W, f, converged, it, trace, worst


def maximize_trace(problem: StiefelProblem, W0: np.ndarray, restarts: int = 0, rng=None) -> StiefelResult:
    """Maximise tr(A W) from ``W0``.

    A is rescaled by its spectral norm internally, so ``tol_grad`` and ``step0``
    refer to the unit-scale problem. ``restarts`` extra starts are tried: the
    first flips the sign of the last column of ``W0`` (reaching the other
    component when K == D), the rest are random frames. The best run wins.
    """
    A = problem.A
    K, D = A.shape
    W0 = np.asarray(W0, float)
    if W0.shape != (D, K):
        raise ValueError(f"W0 has shape {W0.shape}, expected {(D, K)}")
    scale = float(np.linalg.norm(A, 2))
    if scale == 0.0:
        return StiefelResult(W0.copy(), 0.0, True, 0, [0.0], orth_error(W0))

    starts = [W0]
    if restarts > 0:
        rng = np.random.default_rng(0) if rng is None else rng
        flipped = W0.copy()
        flipped[:, -1] *= -1
        starts.append(flipped)
        starts.extend(_qf(rng.standard_normal((D, K)))[0] for _ in range(restarts - 1))

    best = None
    for S in starts:
        W, f, conv, it, trace, worst = _ascend(A / scale, S, problem.tol_grad, problem.max_iters, problem.step0)
        res = StiefelResult(W, f * scale, conv, it, [v * scale for v in trace], worst)
        if best is None or res.objective > best.objective + 1e-12:
            best = res
    return best


def procrustes_optimum(A: np.ndarray) -> tuple[np.ndarray, float]:
    """Closed-form maximiser V U^T (A = U S V^T) and its value sum(S)."""
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    return Vt.T @ U.T, float(s.sum())
