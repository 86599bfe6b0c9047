"""Structured triangular P1 finite elements on a fixed reference rectangle.

Provides the mesh, mass/stiffness assembly, boundary bookkeeping, and sparse
direct solves with reusable factorizations.  Everything is built on a
deterministic right-diagonal split of a structured grid so node and triangle
indices are reproducible across runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

BOUNDARY_TAGS = ("bottom", "top", "left", "right")

# Mid-edge quadrature on the reference triangle: barycentric coordinates of the
# three edge midpoints, exact for quadratic integrands.
_MIDEDGE_BARY = np.array(
    [
        [0.5, 0.5, 0.0],
        [0.0, 0.5, 0.5],
        [0.5, 0.0, 0.5],
    ]
)


class SolverFailure(RuntimeError):
    """A sparse factorization or solve failed (singular / near-singular)."""


_counters = {"factorizations": 0}


def factorization_count() -> int:
    """Total number of sparse factorizations performed in this process."""
    return _counters["factorizations"]


@dataclass(frozen=True)
class Mesh:
    """Triangulation of the rectangle (0, lx) x (0, ly).

    ``vertices`` are ordered row-major (x fastest), ``triangles`` are CCW
    vertex triples, and ``boundary_edges``/``boundary_tags`` enumerate the
    tagged boundary segments together with the one triangle owning each edge.
    ``quad_points``/``quad_weights`` hold the per-triangle mid-edge rule and
    ``tri_grads`` the (constant) P1 basis gradients per triangle.
    """

    nx: int
    ny: int
    lx: float
    ly: float
    vertices: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    boundary_tags: np.ndarray
    boundary_tri: np.ndarray
    quad_points: np.ndarray
    quad_weights: np.ndarray
    tri_grads: np.ndarray
    tri_areas: np.ndarray

    def __post_init__(self):
        for arr in (
            self.vertices,
            self.triangles,
            self.boundary_edges,
            self.boundary_tri,
            self.quad_points,
            self.quad_weights,
            self.tri_grads,
            self.tri_areas,
        ):
            arr.setflags(write=False)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    @property
    def area(self) -> float:
        return self.lx * self.ly


def build_rect_mesh(nx: int, ny: int, lx: float, ly: float) -> Mesh:
    """Build the structured mesh: (nx+1)(ny+1) vertices, 2*nx*ny triangles.

    Each grid cell is split along its right diagonal; boundary edges are
    tagged by coordinate (y=0 bottom, y=ly top, x=0 left, x=lx right).
    """
    if nx < 1 or ny < 1:
        raise ValueError(f"grid dimensions must be >= 1, got nx={nx}, ny={ny}")
    if lx <= 0 or ly <= 0:
        raise ValueError(f"side lengths must be positive, got lx={lx}, ly={ly}")

    xs = np.linspace(0.0, lx, nx + 1)
    ys = np.linspace(0.0, ly, ny + 1)
    xv, yv = np.meshgrid(xs, ys)
    vertices = np.column_stack([xv.ravel(), yv.ravel()])

    def vid(i, j):
        return j * (nx + 1) + i

    tris = []
    for j in range(ny):
        for i in range(nx):
            v00, v10 = vid(i, j), vid(i + 1, j)
            v01, v11 = vid(i, j + 1), vid(i + 1, j + 1)
            tris.append((v00, v10, v11))  # lower triangle of the cell
            tris.append((v00, v11, v01))  # upper triangle
    triangles = np.array(tris, dtype=np.int64)

    edges, tags, owners = [], [], []
    for i in range(nx):
        cell = 2 * i  # lower triangle of cell (i, 0)
        edges.append((vid(i, 0), vid(i + 1, 0)))
        tags.append("bottom")
        owners.append(cell)
    for i in range(nx):
        cell = 2 * ((ny - 1) * nx + i) + 1  # upper triangle of cell (i, ny-1)
        edges.append((vid(i, ny), vid(i + 1, ny)))
        tags.append("top")
        owners.append(cell)
    for j in range(ny):
        edges.append((vid(0, j), vid(0, j + 1)))
        tags.append("left")
        owners.append(2 * (j * nx) + 1)  # upper triangle of cell (0, j)
    for j in range(ny):
        edges.append((vid(nx, j), vid(nx, j + 1)))
        tags.append("right")
        owners.append(2 * (j * nx + nx - 1))  # lower triangle of cell (nx-1, j)

    coords = vertices[triangles]  # (nt, 3, 2)
    e1 = coords[:, 1] - coords[:, 0]
    e2 = coords[:, 2] - coords[:, 0]
    areas = 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    if not (areas > 0).all():
        raise ValueError("triangle orientation error: nonpositive signed area")

    quad_points = np.einsum("qk,tkd->tqd", _MIDEDGE_BARY, coords)
    quad_weights = np.repeat(areas[:, None] / 3.0, 3, axis=1)

    # P1 gradients: grad(phi_k) is constant per triangle.
    grads = np.empty((len(triangles), 3, 2))
    det = 2.0 * areas
    grads[:, 0, 0] = (coords[:, 1, 1] - coords[:, 2, 1]) / det
    grads[:, 0, 1] = (coords[:, 2, 0] - coords[:, 1, 0]) / det
    grads[:, 1, 0] = (coords[:, 2, 1] - coords[:, 0, 1]) / det
    grads[:, 1, 1] = (coords[:, 0, 0] - coords[:, 2, 0]) / det
    grads[:, 2, 0] = (coords[:, 0, 1] - coords[:, 1, 1]) / det
    grads[:, 2, 1] = (coords[:, 1, 0] - coords[:, 0, 0]) / det

    return Mesh(
        nx=nx,
        ny=ny,
        lx=float(lx),
        ly=float(ly),
        vertices=vertices,
        triangles=triangles,
        boundary_edges=np.array(edges, dtype=np.int64),
        boundary_tags=np.array(tags),
        boundary_tri=np.array(owners, dtype=np.int64),
        quad_points=quad_points,
        quad_weights=quad_weights,
        tri_grads=grads,
        tri_areas=areas,
    )


def boundary_dofs(mesh: Mesh, tag: str) -> np.ndarray:
    """Sorted, duplicate-free vertex indices on the tagged boundary segment."""
    if tag not in BOUNDARY_TAGS:
        raise ValueError(f"unknown boundary tag {tag!r}, expected one of {BOUNDARY_TAGS}")
    edges = mesh.boundary_edges[mesh.boundary_tags == tag]
    return np.unique(edges)


def scatter_csr(rows: np.ndarray, cols: np.ndarray, vals: np.ndarray, n: int) -> sp.csr_matrix:
    """Accumulate COO triples into CSR with deterministic duplicate summation."""
    return sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()


def _symmetrize(a: sp.csr_matrix) -> sp.csr_matrix:
    # Halving is exact in binary, so this enforces A == A.T entrywise.
    return ((a + a.T) * 0.5).tocsr()


def assemble_mass(mesh: Mesh) -> sp.csr_matrix:
    """P1 mass matrix; symmetric positive definite with entry sum = |domain|."""
    phi = _MIDEDGE_BARY  # (q, k) basis values at quadrature points
    local = np.einsum("qi,qj->ij", phi, phi) / 3.0  # scaled by area below
    elem = mesh.tri_areas[:, None, None] * local[None, :, :]
    rows = np.repeat(mesh.triangles, 3, axis=1).ravel()
    cols = np.tile(mesh.triangles, (1, 3)).ravel()
    return _symmetrize(scatter_csr(rows, cols, elem.ravel(), mesh.n_vertices))


def assemble_stiffness(mesh: Mesh, theta: np.ndarray) -> sp.csr_matrix:
    """Anisotropic stiffness matrix for the bilinear form grad(u).Theta.grad(v).

    ``theta`` must be a 2x2 symmetric positive definite matrix; constant
    nodal fields lie in the kernel.
    """
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (2, 2) or abs(theta[0, 1] - theta[1, 0]) > 1e-14:
        raise ValueError("theta must be a symmetric 2x2 matrix")
    if np.trace(theta) <= 0 or np.linalg.det(theta) <= 0:
        raise ValueError("theta must be positive definite")
    g = mesh.tri_grads
    elem = np.einsum("tia,ab,tjb,t->tij", g, theta, g, mesh.tri_areas)
    rows = np.repeat(mesh.triangles, 3, axis=1).ravel()
    cols = np.tile(mesh.triangles, (1, 3)).ravel()
    return _symmetrize(scatter_csr(rows, cols, elem.ravel(), mesh.n_vertices))


class Factorization:
    """Sparse LU decomposition supporting solve and transpose-solve.

    Wraps a direct factorization with a residual check against the original
    operator; a singular matrix raises :class:`SolverFailure` with a
    condition diagnostic.
    """

    def __init__(self, matrix: sp.spmatrix):
        self.matrix = matrix.tocsr()
        try:
            self._lu = splu(matrix.tocsc())
        except RuntimeError as exc:  # SuperLU signals exact singularity this way
            raise SolverFailure(f"factorization failed: {exc}") from exc
        _counters["factorizations"] += 1

    def solve(self, rhs: np.ndarray, transpose: bool = False) -> np.ndarray:
        rhs = np.asarray(rhs, dtype=float)
        if rhs.shape[0] != self.matrix.shape[0]:
            raise ValueError(
                f"rhs dimension {rhs.shape[0]} does not match operator {self.matrix.shape[0]}"
            )
        x = self._lu.solve(rhs, trans="T" if transpose else "N")
        if not np.all(np.isfinite(x)):
            raise SolverFailure(
                "solve produced non-finite values; "
                f"1-norm condition estimate {self._condition_estimate():.3e}"
            )
        return x

    def _condition_estimate(self) -> float:
        a1 = sp.linalg.norm(self.matrix, 1)
        try:
            inv1 = sp.linalg.onenormest(
                sp.linalg.LinearOperator(
                    self.matrix.shape, matvec=lambda v: self._lu.solve(v)
                )
            )
        except Exception:
            return np.inf
        return a1 * inv1


def factorize(matrix: sp.spmatrix) -> Factorization:
    return Factorization(matrix)


def linear_solve(fact: Factorization, rhs: np.ndarray, transpose: bool = False) -> np.ndarray:
    """Solve A x = rhs (or A^T x = rhs) using a prepared factorization."""
    return fact.solve(rhs, transpose=transpose)


def sparse_cholesky(matrix: sp.spmatrix) -> sp.csr_matrix:
    """Lower Cholesky factor L with L L^T = matrix for a sparse SPD matrix.

    Uses an unpivoted LU in natural ordering; raises SolverFailure if the
    matrix is not positive definite.
    """
    try:
        lu = splu(
            matrix.tocsc(),
            permc_spec="NATURAL",
            diag_pivot_thresh=0.0,
            options={"SymmetricMode": True},
        )
    except RuntimeError as exc:
        raise SolverFailure(f"Cholesky factorization failed: {exc}") from exc
    n = matrix.shape[0]
    if not (lu.perm_r == np.arange(n)).all():
        raise SolverFailure("matrix required pivoting; not SPD in natural ordering")
    d = lu.U.diagonal()
    if not (d > 0).all():
        raise SolverFailure("matrix is not positive definite")
    return (lu.L @ sp.diags(np.sqrt(d))).tocsr()
