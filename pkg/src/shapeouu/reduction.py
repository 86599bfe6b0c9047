"""Sample-based reduced bases: POD for the state, active subspace for m.

POD diagonalizes the mass-weighted empirical covariance of centered
snapshots via the method of snapshots.  The parameter subspace solves the
generalized eigenproblem H psi = lambda C^{-1} psi, where H averages the
output-encoded parameter Jacobians and C is the prior covariance; the
computation whitens with the covariance square root so encoded prior
samples come out standard normal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp

from . import prior as prior_mod
from .prior import BiLaplacianPrior


def _fix_signs(basis: np.ndarray) -> np.ndarray:
    """Make each column's largest-magnitude entry positive (deterministic)."""
    if basis.size == 0:
        return basis
    idx = np.argmax(np.abs(basis), axis=0)
    signs = np.sign(basis[idx, np.arange(basis.shape[1])])
    signs[signs == 0] = 1.0
    return basis * signs


@dataclass(frozen=True)
class PodBasis:
    """Affine state reduction u ~ mean + basis @ coords, mass-orthonormal."""

    mean: np.ndarray
    basis: np.ndarray       # (d_u, r_u)
    eigenvalues: np.ndarray  # full computed spectrum, descending
    mass: sp.csr_matrix

    @property
    def rank(self) -> int:
        return self.basis.shape[1]


def compute_pod(snapshots: np.ndarray, mass: sp.csr_matrix, r_u: int) -> PodBasis:
    """POD of the unbiased mass-weighted covariance of the snapshot rows.

    Columns for (numerically) zero eigenvalues are left as zero vectors, so
    orthonormality holds on the positive part of the spectrum.
    """
    snapshots = np.asarray(snapshots, dtype=float)
    n = snapshots.shape[0]
    if n < 2:
        raise ValueError("POD needs at least 2 snapshots")
    if r_u > min(n - 1, snapshots.shape[1]):
        raise ValueError(
            f"rank {r_u} exceeds min(n-1, dofs) = {min(n - 1, snapshots.shape[1])}"
        )
    mean = snapshots.mean(axis=0)
    centered = snapshots - mean
    gram = centered @ (mass @ centered.T) / (n - 1)
    gram = 0.5 * (gram + gram.T)
    evals, evecs = la.eigh(gram)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]

    tol = max(evals[0], 1.0) * 1e-14 if evals.size else 0.0
    basis = np.zeros((snapshots.shape[1], r_u))
    for i in range(r_u):
        if evals[i] > tol:
            basis[:, i] = centered.T @ evecs[:, i] / np.sqrt((n - 1) * evals[i])
    return PodBasis(mean=mean, basis=_fix_signs(basis), eigenvalues=evals, mass=mass)


def encode_state(pod: PodBasis, u: np.ndarray) -> np.ndarray:
    """Mass-weighted coordinates of u - mean; accepts (d,) or (k, d)."""
    u = np.asarray(u, dtype=float)
    return (pod.mass @ (u - pod.mean).T).T @ pod.basis


def decode_state(pod: PodBasis, coords: np.ndarray) -> np.ndarray:
    coords = np.asarray(coords, dtype=float)
    return pod.mean + coords @ pod.basis.T


@dataclass(frozen=True)
class AsBasis:
    """Parameter reduction, orthonormal in the prior precision inner product."""

    mean: np.ndarray
    basis: np.ndarray        # (d_m, r_m)
    eigenvalues: np.ndarray  # full computed spectrum, descending
    prior: BiLaplacianPrior

    @property
    def rank(self) -> int:
        return self.basis.shape[1]


def compute_active_subspace(jacobian_rows: np.ndarray, prior: BiLaplacianPrior,
                            r_m: int) -> AsBasis:
    """Dominant generalized eigenpairs of the derivative covariance.

    ``jacobian_rows`` has shape (n, r_u, d_m): per-sample output-encoded
    parameter Jacobians.  Whitening with the covariance square root reduces
    the pencil to a dense symmetric eigenproblem at desk scale.
    """
    rows = np.asarray(jacobian_rows, dtype=float)
    if rows.ndim != 3:
        raise ValueError("jacobian_rows must have shape (n, r_u, d_m)")
    n, _, d_m = rows.shape
    if n < 1:
        raise ValueError("need at least one Jacobian sample")
    if r_m > d_m:
        raise ValueError(f"rank {r_m} exceeds parameter dimension {d_m}")

    flat = rows.reshape(-1, d_m)
    H = (flat.T @ flat) / n
    # B = L^T A^{-1} H A^{-1} L, the pencil whitened by the covariance root.
    W = prior.fact_A.solve(H)
    V = prior.fact_A.solve(W.T)
    B = prior.chol_M.T @ (V @ prior.chol_M.toarray())
    B = 0.5 * (B + B.T)
    evals, evecs = la.eigh(B)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    psi = prior.fact_A.solve(prior.chol_M @ evecs[:, :r_m])
    return AsBasis(
        mean=np.zeros(d_m),
        basis=_fix_signs(psi),
        eigenvalues=evals,
        prior=prior,
    )


def encode_param(as_basis: AsBasis, m: np.ndarray) -> np.ndarray:
    """Precision-weighted coordinates of m - mean; accepts (d,) or (k, d)."""
    m = np.asarray(m, dtype=float)
    w = prior_mod.apply_precision(as_basis.prior, (m - as_basis.mean).T)
    return w.T @ as_basis.basis


def decode_param(as_basis: AsBasis, coords: np.ndarray) -> np.ndarray:
    coords = np.asarray(coords, dtype=float)
    return as_basis.mean + coords @ as_basis.basis.T
