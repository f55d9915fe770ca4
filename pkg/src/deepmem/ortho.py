"""Orthogonal hidden-to-hidden parameterizations.

Two schemes: the scaled Cayley map (additive steps on a skew-symmetric
parameter, scoRNN style) and the multiplicative Stiefel-manifold step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg


@dataclass
class SkewParam:
    """Skew-symmetric ``A`` (stored as its strict upper triangle) and ±1 diagonal ``D``."""

    upper: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        self.upper = np.asarray(self.upper, dtype=np.float64)
        self.D = np.asarray(self.D, dtype=np.float64)
        R = self.D.shape[0]
        if self.upper.shape != (R * (R - 1) // 2,):
            raise ValueError(f"upper triangle of length {self.upper.shape} for R={R}")
        if not np.all(np.isin(self.D, (-1.0, 1.0))):
            raise ValueError("D entries must be +1 or -1")

    @property
    def R(self) -> int:
        return self.D.shape[0]

    @property
    def rho(self) -> int:
        return int(np.sum(self.D < 0))

    @property
    def A(self) -> np.ndarray:
        a = np.zeros((self.R, self.R))
        a[np.triu_indices(self.R, 1)] = self.upper
        return a - a.T

    @classmethod
    def from_matrix(cls, A: np.ndarray, D: np.ndarray) -> "SkewParam":
        A = np.asarray(A, dtype=np.float64)
        return cls(A[np.triu_indices(A.shape[0], 1)], D)

    def to_dict(self) -> dict:
        return {"R": self.R, "upper": self.upper.tolist(), "D": self.D.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "SkewParam":
        return cls(doc["upper"], doc["D"])


def cayley(p: SkewParam) -> np.ndarray:
    """``W = (I + A)^-1 (I - A) diag(D)``."""
    eye = np.eye(p.R)
    A = p.A
    return scipy.linalg.solve(eye + A, eye - A) * p.D[None, :]


def inverse_cayley(W: np.ndarray, D: np.ndarray) -> np.ndarray:
    """Skew ``A`` with ``cayley(A, D) == W``; fails if ``W D`` has eigenvalue -1."""
    W = np.asarray(W, dtype=np.float64)
    D = np.asarray(D, dtype=np.float64)
    eye = np.eye(W.shape[0])
    U = W * D[None, :]  # W diag(D)^-1, D is its own inverse
    lhs = eye + U
    if np.linalg.cond(lhs) > 1e12:
        raise np.linalg.LinAlgError("W diag(D) has an eigenvalue -1")
    A = scipy.linalg.solve(lhs, eye - U)
    return (A - A.T) / 2


def scornn_grad(dl_dW: np.ndarray, W: np.ndarray, p: SkewParam) -> np.ndarray:
    """Loss gradient w.r.t. ``A``: ``V.T - V`` with ``V = (I+A)^-T dl/dW (D + W.T)``.

    Entry ``(i, j)`` for ``i < j`` is the derivative w.r.t. the free parameter
    ``A[i, j]`` (with ``A[j, i] = -A[i, j]`` tied).
    """
    dl_dW = np.asarray(dl_dW, dtype=np.float64)
    if dl_dW.shape != (p.R, p.R) or W.shape != (p.R, p.R):
        raise ValueError("gradient and weight shapes must be R x R")
    eye = np.eye(p.R)
    V = scipy.linalg.solve((eye + p.A).T, dl_dW @ (np.diag(p.D) + W.T))
    return V.T - V


def scornn_step(p: SkewParam, dl_dA: np.ndarray, eta: float) -> tuple[SkewParam, np.ndarray]:
    dl_dA = np.asarray(dl_dA, dtype=np.float64)
    if np.max(np.abs(dl_dA + dl_dA.T), initial=0.0) > 1e-12:
        raise ValueError("gradient is not skew-symmetric")
    iu = np.triu_indices(p.R, 1)
    new = SkewParam(p.upper - eta * dl_dA[iu], p.D.copy())
    return new, cayley(new)


def stiefel_step(W: np.ndarray, G: np.ndarray, eta: float) -> np.ndarray:
    """Multiplicative update ``(I + eta/2 A)^-1 (I - eta/2 A) W``, ``A = G.T W - W.T G``."""
    W = np.asarray(W, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    if orthogonality_deviation(W) > 1e-6:
        raise ValueError("W is not orthogonal")
    eye = np.eye(W.shape[0])
    A = G.T @ W - W.T @ G
    lhs = eye + eta / 2 * A
    if np.linalg.cond(lhs) > 1e12:
        raise np.linalg.LinAlgError("step size too large: singular update")
    return scipy.linalg.solve(lhs, (eye - eta / 2 * A) @ W)


def modrelu(z, b) -> np.ndarray:
    """``sign(z) * max(|z| + b, 0)``; zero where ``z == 0``."""
    z = np.asarray(z, dtype=np.float64)
    mag = np.abs(z) + b
    return np.where(mag > 0, mag * np.sign(z), 0.0)


def orthogonality_deviation(W: np.ndarray) -> float:
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise ValueError("deviation needs a square matrix")
    return float(np.linalg.norm(W @ W.T - np.eye(W.shape[0])))


def sample_skew_init(R: int, rho: int | None = None, rng: np.random.Generator | None = None) -> SkewParam:
    """Upper triangle ~ U(-1/sqrt(R), 1/sqrt(R)); the first ``rho`` entries of D are -1."""
    rho = R // 2 if rho is None else rho
    if not 0 <= rho <= R:
        raise ValueError("rho must lie in [0, R]")
    rng = rng or np.random.default_rng()
    bound = 1.0 / np.sqrt(R)
    upper = rng.uniform(-bound, bound, size=R * (R - 1) // 2)
    D = np.ones(R)
    D[:rho] = -1.0
    return SkewParam(upper, D)
