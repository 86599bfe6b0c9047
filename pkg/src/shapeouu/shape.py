"""Displacement-basis parameterizations of reference-domain deformations.

A deformation maps a reference point X to x = X + sum_i z_i d_i(X) where the
d_i are analytic displacement fields (vertical Fourier modes or tensor-product
Bernstein bumps).  All evaluators are closed-form, including gradients, so
deformation gradients carry no interpolation error.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import comb
from typing import Callable

import numpy as np

from .fem import Mesh

#: Deformations whose minimum Jacobian determinant falls at or below this
#: value are treated as inadmissible by data generation and optimization.
DETF_THRESHOLD = 0.05


class DegenerateDeformation(RuntimeError):
    """Deformation gradient lost positivity of its determinant."""

    def __init__(self, point: np.ndarray, detf: float):
        self.point = np.asarray(point, dtype=float)
        self.detf = float(detf)
        super().__init__(f"det F = {detf:.6g} <= 0 at X = {self.point.tolist()}")


@dataclass(frozen=True)
class SpatialFunction:
    """Analytic scalar function of physical coordinates with its gradient."""

    value: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]


def sine_source(amplitude: float = 0.1) -> SpatialFunction:
    """The oscillatory volumetric source a*sin(x1)*cos(x2)."""

    def value(x):
        x = np.asarray(x, dtype=float)
        return amplitude * np.sin(x[..., 0]) * np.cos(x[..., 1])

    def grad(x):
        x = np.asarray(x, dtype=float)
        g = np.empty(x.shape)
        g[..., 0] = amplitude * np.cos(x[..., 0]) * np.cos(x[..., 1])
        g[..., 1] = -amplitude * np.sin(x[..., 0]) * np.sin(x[..., 1])
        return g

    return SpatialFunction(value, grad)


def zero_source() -> SpatialFunction:
    def value(x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1])

    def grad(x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape)

    return SpatialFunction(value, grad)


class FourierBasis:
    """Vertical displacements X2*cos(k*pi*X1), X2*sin(k*pi*X1) for k <= n_z.

    Coefficients are ordered [a0, a1, b1, ..., a_{n_z}, b_{n_z}] with a_k the
    cosine amplitudes and b_k the sine amplitudes.  Displacements vanish on
    the bottom (X2 = 0) and have no horizontal component, so the bottom edge
    is pointwise fixed and the side edges slide along themselves.
    """

    kind = "fourier"

    def __init__(self, n_z: int, lx: float):
        if n_z < 0:
            raise ValueError(f"n_z must be nonnegative, got {n_z}")
        self.n_z = int(n_z)
        self.lx = float(lx)
        terms = [("cos", 0)]
        for k in range(1, self.n_z + 1):
            terms.append(("cos", k))
            terms.append(("sin", k))
        self._terms = tuple(terms)

    @property
    def dim(self) -> int:
        return 2 * self.n_z + 1

    def displacement(self, X: np.ndarray) -> np.ndarray:
        """d_i(X) for all i; shape (..., dim, 2)."""
        X = np.asarray(X, dtype=float)
        out = np.zeros(X.shape[:-1] + (self.dim, 2))
        x1, x2 = X[..., 0], X[..., 1]
        for i, (trig, k) in enumerate(self._terms):
            w = np.cos(k * np.pi * x1) if trig == "cos" else np.sin(k * np.pi * x1)
            out[..., i, 1] = x2 * w
        return out

    def gradient(self, X: np.ndarray) -> np.ndarray:
        """grad d_i(X) with entry (p, q) = d(d_i)_p / dX_q; shape (..., dim, 2, 2)."""
        X = np.asarray(X, dtype=float)
        out = np.zeros(X.shape[:-1] + (self.dim, 2, 2))
        x1, x2 = X[..., 0], X[..., 1]
        for i, (trig, k) in enumerate(self._terms):
            kp = k * np.pi
            if trig == "cos":
                out[..., i, 1, 0] = -kp * x2 * np.sin(kp * x1)
                out[..., i, 1, 1] = np.cos(kp * x1)
            else:
                out[..., i, 1, 0] = kp * x2 * np.cos(kp * x1)
                out[..., i, 1, 1] = np.sin(kp * x1)
        return out

    def describe(self) -> dict:
        return {"kind": self.kind, "n_z": self.n_z, "lx": self.lx}


def fourier_basis(n_z: int, lx: float) -> FourierBasis:
    return FourierBasis(n_z, lx)


def bernstein_values(n: int, t: np.ndarray) -> np.ndarray:
    """All Bernstein polynomials of degree n at t; shape t.shape + (n+1,)."""
    t = np.asarray(t, dtype=float)
    out = np.empty(t.shape + (n + 1,))
    for j in range(n + 1):
        out[..., j] = comb(n, j) * t**j * (1.0 - t) ** (n - j)
    return out


def bernstein_derivatives(n: int, t: np.ndarray) -> np.ndarray:
    """First derivatives of the degree-n Bernstein polynomials at t."""
    t = np.asarray(t, dtype=float)
    lower = bernstein_values(n - 1, t) if n >= 1 else None
    out = np.zeros(t.shape + (n + 1,))
    if n == 0:
        return out
    out[..., 0] = -n * lower[..., 0]
    for j in range(1, n):
        out[..., j] = n * (lower[..., j - 1] - lower[..., j])
    out[..., n] = n * lower[..., n - 1]
    return out


class BernsteinFfdBasis:
    """Tensor-product Bernstein displacements on interior control points.

    Control points form a (K+1) x (L+1) lattice over the control box; only
    interior points move, each in both in-plane directions, giving
    2*(K-1)*(L-1) coefficients.  Displacements extend by zero outside the
    box, and interior Bernstein factors vanish on all box faces.
    Ordering: lattice (k, l) row-major with the two directions adjacent.
    """

    kind = "bernstein_ffd"

    def __init__(self, K: int, L: int, box: tuple[float, float, float, float]):
        if K < 2 or L < 2:
            raise ValueError(f"lattice sizes must be >= 2, got K={K}, L={L}")
        x0, y0, x1, y1 = (float(v) for v in box)
        if not (x1 > x0 and y1 > y0):
            raise ValueError(f"degenerate control box {box}")
        self.K, self.L = int(K), int(L)
        self.box = (x0, y0, x1, y1)
        self._points = tuple(
            (k, l) for k in range(1, self.K) for l in range(1, self.L)
        )

    @property
    def dim(self) -> int:
        return 2 * (self.K - 1) * (self.L - 1)

    def _local(self, X):
        x0, y0, x1, y1 = self.box
        X = np.asarray(X, dtype=float)
        t1 = (X[..., 0] - x0) / (x1 - x0)
        t2 = (X[..., 1] - y0) / (y1 - y0)
        inside = (t1 >= 0) & (t1 <= 1) & (t2 >= 0) & (t2 <= 1)
        return t1, t2, inside

    def displacement(self, X: np.ndarray) -> np.ndarray:
        t1, t2, inside = self._local(X)
        b1 = bernstein_values(self.K, np.clip(t1, 0.0, 1.0))
        b2 = bernstein_values(self.L, np.clip(t2, 0.0, 1.0))
        out = np.zeros(np.asarray(X).shape[:-1] + (self.dim, 2))
        for p, (k, l) in enumerate(self._points):
            w = b1[..., k] * b2[..., l] * inside
            out[..., 2 * p, 0] = w
            out[..., 2 * p + 1, 1] = w
        return out

    def gradient(self, X: np.ndarray) -> np.ndarray:
        x0, y0, x1, y1 = self.box
        t1, t2, inside = self._local(X)
        t1c, t2c = np.clip(t1, 0.0, 1.0), np.clip(t2, 0.0, 1.0)
        b1, b2 = bernstein_values(self.K, t1c), bernstein_values(self.L, t2c)
        db1 = bernstein_derivatives(self.K, t1c) / (x1 - x0)
        db2 = bernstein_derivatives(self.L, t2c) / (y1 - y0)
        out = np.zeros(np.asarray(X).shape[:-1] + (self.dim, 2, 2))
        for p, (k, l) in enumerate(self._points):
            g1 = db1[..., k] * b2[..., l] * inside
            g2 = b1[..., k] * db2[..., l] * inside
            out[..., 2 * p, 0, 0] = g1
            out[..., 2 * p, 0, 1] = g2
            out[..., 2 * p + 1, 1, 0] = g1
            out[..., 2 * p + 1, 1, 1] = g2
        return out

    def describe(self) -> dict:
        return {"kind": self.kind, "K": self.K, "L": self.L, "box": list(self.box)}


def bernstein_ffd_basis(K: int, L: int, box: tuple[float, float, float, float]) -> BernsteinFfdBasis:
    return BernsteinFfdBasis(K, L, box)


@dataclass(frozen=True)
class ShapeParams:
    """Shape coefficients with their admissible box."""

    z: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "z", np.asarray(self.z, dtype=float))
        object.__setattr__(self, "lower", np.asarray(self.lower, dtype=float))
        object.__setattr__(self, "upper", np.asarray(self.upper, dtype=float))
        if self.z.shape != self.lower.shape or self.z.shape != self.upper.shape:
            raise ValueError("coefficient and bound shapes disagree")
        if not np.all(np.isfinite(self.lower)) or not np.all(np.isfinite(self.upper)):
            raise ValueError("box bounds must be finite")
        if not np.all(self.lower < self.upper):
            raise ValueError("box bounds must satisfy lower < upper")


def uniform_box_params(z: np.ndarray, half_width: float = 0.2) -> ShapeParams:
    z = np.asarray(z, dtype=float)
    return ShapeParams(z, -half_width * np.ones_like(z), half_width * np.ones_like(z))


def _coeffs(basis, z) -> np.ndarray:
    vec = np.asarray(z.z if isinstance(z, ShapeParams) else z, dtype=float)
    if vec.shape != (basis.dim,):
        raise ValueError(f"expected {basis.dim} coefficients, got shape {vec.shape}")
    return vec


@dataclass(frozen=True)
class DeformationEval:
    """Deformed point with the deformation gradient and its invariants."""

    chi: np.ndarray
    F: np.ndarray
    detF: float
    Finv: np.ndarray


def deformation_fields(basis, z, X: np.ndarray):
    """Vectorized (chi, F, detF) over points X of shape (..., 2).

    Raises DegenerateDeformation if any determinant is nonpositive.
    """
    vec = _coeffs(basis, z)
    X = np.asarray(X, dtype=float)
    chi = X + np.einsum("i,...id->...d", vec, basis.displacement(X))
    F = np.einsum("i,...ipq->...pq", vec, basis.gradient(X))
    F[..., 0, 0] += 1.0
    F[..., 1, 1] += 1.0
    detF = F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0]
    if np.any(detF <= 0):
        flat = np.argmin(detF)
        bad = np.unravel_index(flat, detF.shape)
        raise DegenerateDeformation(X[bad], detF[bad])
    return chi, F, detF


def invert_2x2(F: np.ndarray, detF: np.ndarray) -> np.ndarray:
    inv = np.empty_like(F)
    inv[..., 0, 0] = F[..., 1, 1]
    inv[..., 1, 1] = F[..., 0, 0]
    inv[..., 0, 1] = -F[..., 0, 1]
    inv[..., 1, 0] = -F[..., 1, 0]
    return inv / detF[..., None, None]


def deform(basis, z, X: np.ndarray) -> DeformationEval:
    """Evaluate the deformation at a single reference point."""
    chi, F, detF = deformation_fields(basis, z, np.asarray(X, dtype=float))
    return DeformationEval(chi=chi, F=F, detF=float(detF), Finv=invert_2x2(F, detF))


def min_quadrature_detf(mesh: Mesh, basis, z) -> float:
    """Minimum det F over all volume quadrature points (diagnostic value)."""
    vec = _coeffs(basis, z)
    G = basis.gradient(mesh.quad_points)  # (nt, nq, dim, 2, 2)
    F = np.einsum("i,tqiab->tqab", vec, G)
    F[..., 0, 0] += 1.0
    F[..., 1, 1] += 1.0
    det = F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0]
    return float(det.min())


def check_diffeomorphism(mesh: Mesh, basis, z) -> float:
    return min_quadrature_detf(mesh, basis, z)


def is_admissible(mesh: Mesh, basis, z, threshold: float = DETF_THRESHOLD) -> bool:
    return min_quadrature_detf(mesh, basis, z) > threshold


def pullback_scalar(f: SpatialFunction, basis, z, X: np.ndarray):
    """Value of f at chi_z(X) and its gradient with respect to z.

    The coefficient derivative is grad(f)(chi_z(X)) . d_i(X) because chi_z is
    affine in the coefficients.
    """
    X = np.asarray(X, dtype=float)
    chi, _, _ = deformation_fields(basis, z, X)
    value = f.value(chi)
    disp = basis.displacement(X)
    zgrad = np.einsum("...d,...id->...i", f.grad(chi), disp)
    return value, zgrad


def w1inf_estimate(mesh: Mesh, basis, z) -> float:
    """Quadrature-sampled estimate of the deformation's W^{1,inf} norm.

    Takes the max over quadrature points of |chi| and of the Frobenius norm
    of F (an upper bound on the operator norm); used in transport norm
    bounds.
    """
    vec = _coeffs(basis, z)
    X = mesh.quad_points
    chi, F, _ = deformation_fields(basis, vec, X)
    chi_max = np.sqrt((chi**2).sum(axis=-1)).max()
    fro = np.sqrt((F**2).sum(axis=(-2, -1)))
    return float(max(chi_max, fro.max()))
