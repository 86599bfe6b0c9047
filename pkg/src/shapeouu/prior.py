"""Discrete Gaussian random field N(0, C) on the reference mesh.

The covariance is the squared inverse of the elliptic operator
A = delta*M + gamma*K_Theta in the mass-weighted convention
C = A^{-1} M A^{-1}.  Sampling draws m = A^{-1} L xi with L the sparse
Cholesky factor of the mass matrix and xi standard normal, so one
factorization of A and one of M serve all samples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve_triangular

from . import fem
from .fem import Factorization, Mesh


def anisotropy_matrix(theta1: float, theta2: float, angle: float = np.pi / 4) -> np.ndarray:
    """SPD 2x2 matrix with eigenvalues (theta1, theta2).

    theta1 acts along (cos a, sin a) and theta2 along the orthogonal
    direction (-sin a, cos a).
    """
    v1 = np.array([np.cos(angle), np.sin(angle)])
    v2 = np.array([-np.sin(angle), np.cos(angle)])
    return theta1 * np.outer(v1, v1) + theta2 * np.outer(v2, v2)


@dataclass(frozen=True)
class BiLaplacianPrior:
    """Frozen prior state: operators, factorizations, and the noise factor."""

    mesh: Mesh
    gamma: float
    delta: float
    theta: np.ndarray
    A: sp.csr_matrix
    M: sp.csr_matrix
    fact_A: Factorization
    fact_M: Factorization
    chol_M: sp.csr_matrix

    @property
    def dim(self) -> int:
        return self.A.shape[0]

    def describe(self) -> dict:
        return {
            "gamma": self.gamma,
            "delta": self.delta,
            "theta": np.asarray(self.theta).tolist(),
        }


def build_prior(mesh: Mesh, gamma: float, delta: float, theta: np.ndarray) -> BiLaplacianPrior:
    """Assemble and factorize A = delta*M + gamma*K_Theta once."""
    if gamma <= 0 or delta <= 0:
        raise ValueError(f"coefficients must be positive, got gamma={gamma}, delta={delta}")
    M = fem.assemble_mass(mesh)
    K = fem.assemble_stiffness(mesh, theta)
    A = (delta * M + gamma * K).tocsr()
    return BiLaplacianPrior(
        mesh=mesh,
        gamma=float(gamma),
        delta=float(delta),
        theta=np.asarray(theta, dtype=float),
        A=A,
        M=M,
        fact_A=fem.factorize(A),
        fact_M=fem.factorize(M),
        chol_M=fem.sparse_cholesky(M),
    )


def sample_prior(prior: BiLaplacianPrior, rng: np.random.Generator) -> np.ndarray:
    """Draw one nodal field; deterministic given the generator state."""
    xi = rng.standard_normal(prior.dim)
    return prior.fact_A.solve(prior.chol_M @ xi)


def sample_prior_batch(prior: BiLaplacianPrior, rng: np.random.Generator, n: int) -> np.ndarray:
    """Draw n fields as rows; row i equals the i-th sequential draw."""
    xi = rng.standard_normal((n, prior.dim))
    out = prior.fact_A.solve(prior.chol_M @ xi.T)
    return out.T


def apply_precision(prior: BiLaplacianPrior, m: np.ndarray) -> np.ndarray:
    """Action of the inverse covariance: A M^{-1} A m.  Accepts (n,) or (n, k)."""
    return prior.A @ prior.fact_M.solve(prior.A @ np.asarray(m, dtype=float))


def apply_covariance(prior: BiLaplacianPrior, v: np.ndarray) -> np.ndarray:
    """Action of the covariance: A^{-1} M A^{-1} v.  Accepts (n,) or (n, k)."""
    return prior.fact_A.solve(prior.M @ prior.fact_A.solve(np.asarray(v, dtype=float)))


def whiten(prior: BiLaplacianPrior, m: np.ndarray) -> np.ndarray:
    """Map a sample back to its standard-normal coordinates, L^{-1} A m."""
    y = prior.A @ np.asarray(m, dtype=float)
    return spsolve_triangular(prior.chol_M.tocsr(), y, lower=True)
