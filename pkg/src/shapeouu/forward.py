"""Parametric Poisson problem on the reference rectangle.

The physical problem -div(exp(m) grad u) = f with u = 0 on the bottom and
u = 1 on the top is pulled back to the fixed reference domain, where the
deformation enters the weak form through the metric (F^T F)^{-1} and det F.
This module provides the state solve, adjoint solve, Jacobian-vector and
vector-Jacobian products with respect to (m, z), reduced Jacobians against
given bases, and the bottom-boundary flux-tracking functional with its
partial derivatives.  One factorization per state serves the state solve,
the adjoint solve, and every reduced-Jacobian right-hand side.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import fem, shape
from .fem import Factorization, Mesh
from .shape import SpatialFunction

# P1 basis values at the three mid-edge quadrature points (point q, vertex k).
_PHI = fem._MIDEDGE_BARY

# 2-point Gauss rule on [0, 1] for boundary-edge integrals.
_EDGE_S = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])


class PoissonProblem:
    """Immutable problem description with cached basis evaluations.

    ``tau_target`` holds target flux values at the bottom nodes in x order;
    they are interpolated linearly to the edge quadrature points.
    """

    def __init__(self, mesh: Mesh, prior, basis, source: SpatialFunction,
                 tau_target: np.ndarray | None = None):
        self.mesh = mesh
        self.prior = prior
        self.basis = basis
        self.source = source

        self.bottom = fem.boundary_dofs(mesh, "bottom")
        self.top = fem.boundary_dofs(mesh, "top")
        self.dirichlet = np.union1d(self.bottom, self.top)
        self.free = np.setdiff1d(np.arange(mesh.n_vertices), self.dirichlet)
        self.g = np.zeros(mesh.n_vertices)
        self.g[self.top] = 1.0

        if tau_target is None:
            tau_target = np.ones(self.bottom.size)
        tau_target = np.asarray(tau_target, dtype=float)
        if tau_target.shape != (self.bottom.size,):
            raise ValueError(
                f"tau_target must hold {self.bottom.size} bottom-node values"
            )
        self.tau_target = tau_target

        self.M = fem.assemble_mass(mesh)
        self.tris = mesh.triangles
        self.quad_w = mesh.quad_weights

        # Shape-basis evaluations at volume quadrature points are independent
        # of z; cache them once.
        self.disp_q = basis.displacement(mesh.quad_points)
        self.grad_q = basis.gradient(mesh.quad_points)

        self._init_bottom_edges()
        self.counters = {"state_solves": 0, "adjoint_solves": 0, "factorizations": 0}

    def _init_bottom_edges(self):
        mesh = self.mesh
        sel = np.flatnonzero(mesh.boundary_tags == "bottom")
        self.edge_verts = mesh.boundary_edges[sel]  # (ne, 2), x-ordered
        self.edge_tri = mesh.boundary_tri[sel]
        p0 = mesh.vertices[self.edge_verts[:, 0]]
        p1 = mesh.vertices[self.edge_verts[:, 1]]
        h = np.linalg.norm(p1 - p0, axis=1)
        self.edge_points = (
            p0[:, None, :] * (1.0 - _EDGE_S)[None, :, None]
            + p1[:, None, :] * _EDGE_S[None, :, None]
        )  # (ne, 2, 2)
        self.edge_w = np.repeat(h[:, None] / 2.0, 2, axis=1)

        # Barycentric coordinates of edge quadrature points in the owner
        # triangle, for interpolating nodal fields to the boundary trace.
        tri_pts = mesh.vertices[mesh.triangles[self.edge_tri]]  # (ne, 3, 2)
        lam = np.empty((len(sel), 2, 3))
        v0 = tri_pts[:, 0]
        T = np.stack([tri_pts[:, 1] - v0, tri_pts[:, 2] - v0], axis=-1)  # (ne,2,2)
        det = T[:, 0, 0] * T[:, 1, 1] - T[:, 0, 1] * T[:, 1, 0]
        rel = self.edge_points - v0[:, None, :]
        lam[:, :, 1] = (T[:, None, 1, 1] * rel[..., 0] - T[:, None, 0, 1] * rel[..., 1]) / det[:, None]
        lam[:, :, 2] = (-T[:, None, 1, 0] * rel[..., 0] + T[:, None, 0, 0] * rel[..., 1]) / det[:, None]
        lam[:, :, 0] = 1.0 - lam[:, :, 1] - lam[:, :, 2]
        self.edge_lam = lam

        # Linear interpolation weights of tau along each edge.
        node_pos = {v: i for i, v in enumerate(self.bottom)}
        self.edge_tau_idx = np.array(
            [[node_pos[v0_], node_pos[v1_]] for v0_, v1_ in self.edge_verts]
        )
        self.disp_e = self.basis.displacement(self.edge_points)
        self.grad_e = self.basis.gradient(self.edge_points)

    def edge_tau(self) -> np.ndarray:
        t0 = self.tau_target[self.edge_tau_idx[:, 0]]
        t1 = self.tau_target[self.edge_tau_idx[:, 1]]
        return t0[:, None] * (1.0 - _EDGE_S)[None, :] + t1[:, None] * _EDGE_S[None, :]

    def m_cache(self, m: np.ndarray) -> dict:
        """Per-sample quantities reused across z iterations."""
        m = np.asarray(m, dtype=float)
        m_q = np.einsum("qk,tk->tq", _PHI, m[self.tris])
        return {"m": m, "m_q": m_q, "expm_q": np.exp(m_q)}


def make_problem(mesh, prior, basis, source=None, tau_target=None) -> PoissonProblem:
    if source is None:
        source = shape.sine_source()
    return PoissonProblem(mesh, prior, basis, source, tau_target)


@dataclass
class Geometry:
    """Per-z geometric factors at the volume and edge quadrature points.

    The z-sensitivity tensors (metric derivative and source columns) are
    sample-independent, so they are computed lazily once per z and shared
    by every state solved at that design.
    """

    z: np.ndarray
    F: np.ndarray          # (nt, nq, 2, 2)
    detF: np.ndarray       # (nt, nq)
    Finv: np.ndarray
    C: np.ndarray          # Finv @ Finv^T
    chi: np.ndarray        # deformed quadrature points
    fval: np.ndarray       # source at chi
    F_e: np.ndarray        # edge-point versions
    detF_e: np.ndarray
    Finv_e: np.ndarray
    _metric_cols: np.ndarray | None = field(default=None, repr=False)
    _source_cols: np.ndarray | None = field(default=None, repr=False)


def _deformation_from_cache(zv, points, disp, grads):
    chi = points + np.einsum("j,...jd->...d", zv, disp)
    F = np.einsum("j,...jab->...ab", zv, grads)
    F[..., 0, 0] += 1.0
    F[..., 1, 1] += 1.0
    detF = F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0]
    if np.any(detF <= 0):
        bad = np.unravel_index(np.argmin(detF), detF.shape)
        raise shape.DegenerateDeformation(points[bad], detF[bad])
    return chi, F, detF


def geometry(problem: PoissonProblem, z) -> Geometry:
    """Geometric factors for one z; reusable across all m samples."""
    zv = np.asarray(z.z if isinstance(z, shape.ShapeParams) else z, dtype=float)
    chi, F, detF = _deformation_from_cache(
        zv, problem.mesh.quad_points, problem.disp_q, problem.grad_q
    )
    Finv = shape.invert_2x2(F, detF)
    C = np.einsum("tqab,tqcb->tqac", Finv, Finv)
    fval = problem.source.value(chi)
    _, F_e, detF_e = _deformation_from_cache(
        zv, problem.edge_points, problem.disp_e, problem.grad_e
    )
    Finv_e = shape.invert_2x2(F_e, detF_e)
    return Geometry(zv, F, detF, Finv, C, chi, fval, F_e, detF_e, Finv_e)


def _assemble_system(problem: PoissonProblem, geo: Geometry, mc: dict):
    mesh = problem.mesh
    coef = problem.quad_w * mc["expm_q"] * geo.detF
    g = mesh.tri_grads
    elem = np.einsum("tia,tqab,tjb,tq->tij", g, geo.C, g, coef, optimize=True)
    rows = np.repeat(problem.tris, 3, axis=1).ravel()
    cols = np.tile(problem.tris, (1, 3)).ravel()
    A = fem.scatter_csr(rows, cols, elem.ravel(), mesh.n_vertices)
    A = ((A + A.T) * 0.5).tocsr()

    src = problem.quad_w * geo.detF * geo.fval
    bvec = np.einsum("tq,qi->ti", src, _PHI)
    b = np.zeros(mesh.n_vertices)
    np.add.at(b, problem.tris.ravel(), bvec.ravel())
    return A, b


@dataclass
class StateSolution:
    """State field with the retained factorization and quadrature caches."""

    problem: PoissonProblem
    m: np.ndarray
    z: np.ndarray
    u: np.ndarray
    A: sp.csr_matrix
    fact: Factorization
    geo: Geometry
    mc: dict
    gradu: np.ndarray          # per-triangle state gradient, (nt, 2)
    _zcols: np.ndarray | None = field(default=None, repr=False)

    @property
    def free(self):
        return self.problem.free

    @property
    def dirichlet(self):
        return self.problem.dirichlet


def _finish_state(problem, m, z, geo, mc, u, A, fact) -> StateSolution:
    gradu = np.einsum("tk,tka->ta", u[problem.tris], problem.mesh.tri_grads)
    return StateSolution(
        problem=problem, m=np.asarray(m, dtype=float), z=geo.z, u=u,
        A=A, fact=fact, geo=geo, mc=mc, gradu=gradu,
    )


def solve_state(problem: PoissonProblem, m: np.ndarray, z, mc: dict | None = None,
                geo: Geometry | None = None) -> StateSolution:
    """Solve the lifted Dirichlet system and retain the factorization."""
    mc = problem.m_cache(m) if mc is None else mc
    geo = geometry(problem, z) if geo is None else geo
    A, b = _assemble_system(problem, geo, mc)
    free, dirichlet = problem.free, problem.dirichlet
    A_ff = A[free][:, free]
    rhs = b[free] - A[free][:, dirichlet] @ problem.g[dirichlet]
    fact = fem.factorize(A_ff)
    problem.counters["factorizations"] += 1
    u = problem.g.copy()
    u[free] = fact.solve(rhs)
    problem.counters["state_solves"] += 1

    res = np.linalg.norm(A[free] @ u - b[free])
    scale = max(np.linalg.norm(rhs), 1e-30)
    if res > 1e-9 * scale:
        raise fem.SolverFailure(f"state residual {res:.3e} exceeds 1e-9 relative")
    return _finish_state(problem, mc["m"], z, geo, mc, u, A, fact)


def rebuild_state(problem: PoissonProblem, m: np.ndarray, z, u: np.ndarray) -> StateSolution:
    """Reconstruct caches and factorization around an existing solution.

    Verifies that u solves the assembled system to 1e-9 relative; used when
    states are reloaded from disk for the sensitivity pass.
    """
    mc = problem.m_cache(m)
    geo = geometry(problem, z)
    A, b = _assemble_system(problem, geo, mc)
    free, dirichlet = problem.free, problem.dirichlet
    rhs = b[free] - A[free][:, dirichlet] @ problem.g[dirichlet]
    res = np.linalg.norm(A[free] @ u - b[free])
    if res > 1e-9 * max(np.linalg.norm(rhs), 1e-30):
        raise fem.SolverFailure(f"stored state residual {res:.3e} exceeds 1e-9 relative")
    fact = fem.factorize(A[free][:, free])
    problem.counters["factorizations"] += 1
    return _finish_state(problem, m, z, geo, mc, u, A, fact)


def solve_adjoint(state: StateSolution, rhs: np.ndarray) -> np.ndarray:
    """Solve the transposed linearized system with homogeneous Dirichlet rows.

    ``rhs`` is a full nodal dual vector; the result is a full nodal field
    vanishing on the Dirichlet set.
    """
    p = np.zeros_like(state.u)
    p[state.free] = state.fact.solve(np.asarray(rhs, dtype=float)[state.free], transpose=True)
    state.problem.counters["adjoint_solves"] += 1
    return p


# -- residual derivatives ----------------------------------------------------

def _dm_scaffold(state: StateSolution):
    # s[t, q, i] = grad(phi_i) . C grad(u); shared by both D_m directions.
    y = np.einsum("tqab,tb->tqa", state.geo.C, state.gradu)
    s = np.einsum("tia,tqa->tqi", state.problem.mesh.tri_grads, y)
    coef = state.problem.quad_w * state.mc["expm_q"] * state.geo.detF
    return s, coef


def apply_dm_residual(state: StateSolution, h_m: np.ndarray) -> np.ndarray:
    """D_m R applied to a nodal direction; returns a full residual vector."""
    s, coef = _dm_scaffold(state)
    h_q = np.einsum("qk,tk->tq", _PHI, np.asarray(h_m, dtype=float)[state.problem.tris])
    contrib = coef[:, :, None] * h_q[:, :, None] * s
    out = np.zeros(state.problem.mesh.n_vertices)
    np.add.at(out, state.problem.tris.ravel(), contrib.sum(axis=1).ravel())
    return out


def apply_dm_residual_t(state: StateSolution, p: np.ndarray) -> np.ndarray:
    """(D_m R)^T applied to one or more adjoint fields (n,) or (n, k)."""
    s, coef = _dm_scaffold(state)
    p = np.asarray(p, dtype=float)
    single = p.ndim == 1
    if single:
        p = p[:, None]
    pu = np.einsum("tqi,tik->tqk", s, p[state.problem.tris])
    contrib = np.einsum("tq,tqk,qj->tjk", coef, pu, _PHI, optimize=True)
    out = np.zeros((state.problem.mesh.n_vertices, p.shape[1]))
    np.add.at(out, state.problem.tris.ravel(), contrib.reshape(-1, p.shape[1]))
    return out[:, 0] if single else out


def _z_sensitivity(problem: PoissonProblem, geo: Geometry):
    """Sample-independent pieces of D_z R, cached on the geometry."""
    if geo._metric_cols is None:
        G = problem.grad_q  # (nt, nq, dz, 2, 2)
        FinvG = np.matmul(geo.Finv[:, :, None], G)
        trFG = FinvG[..., 0, 0] + FinvG[..., 1, 1]
        C_b = geo.C[:, :, None]
        dC = -(np.matmul(FinvG, C_b) + np.matmul(C_b, FinvG.swapaxes(-1, -2)))
        # d(detF * C)/dz_j split into the trace and metric-derivative parts.
        geo._metric_cols = geo.detF[..., None, None, None] * (
            trFG[..., None, None] * C_b + dC
        )
        gradf = problem.source.grad(geo.chi)
        df = np.einsum("tqd,tqjd->tqj", gradf, problem.disp_q)
        src_density = geo.detF[..., None] * df + (geo.fval * geo.detF)[..., None] * trFG
        src = np.einsum("tqj,qi,tq->tij", src_density, _PHI, problem.quad_w, optimize=True)
        src_cols = np.zeros((problem.mesh.n_vertices, problem.basis.dim))
        np.add.at(src_cols, problem.tris.ravel(), src.reshape(-1, problem.basis.dim))
        geo._source_cols = src_cols
    return geo._metric_cols, geo._source_cols


def dz_residual_columns(state: StateSolution) -> np.ndarray:
    """Columns of D_z R as a dense (n_vertices, d_z) matrix; cached per state."""
    if state._zcols is not None:
        return state._zcols
    problem, geo = state.problem, state.geo
    P, src_cols = _z_sensitivity(problem, geo)
    coef = problem.quad_w * state.mc["expm_q"]
    stiff = np.einsum("ta,tqjab,tib,tq->tij", state.gradu, P,
                      problem.mesh.tri_grads, coef, optimize=True)
    out = np.zeros((problem.mesh.n_vertices, problem.basis.dim))
    np.add.at(out, problem.tris.ravel(), stiff.reshape(-1, problem.basis.dim))
    out -= src_cols
    state._zcols = out
    return out


def jvp(state: StateSolution, h_m: np.ndarray | None, h_z: np.ndarray | None) -> np.ndarray:
    """Directional derivative of the solution map; one linear solve."""
    problem = state.problem
    rhs = np.zeros(problem.mesh.n_vertices)
    if h_m is not None:
        rhs += apply_dm_residual(state, h_m)
    if h_z is not None:
        rhs += dz_residual_columns(state) @ np.asarray(h_z, dtype=float)
    h_u = np.zeros_like(state.u)
    h_u[problem.free] = -state.fact.solve(rhs[problem.free])
    return h_u


def vjp(state: StateSolution, v: np.ndarray):
    """Rows of the solution-map Jacobian paired with v: one adjoint solve.

    Returns (m_row, z_row) such that <v, jvp(h_m, h_z)> = m_row.h_m + z_row.h_z
    in the Euclidean nodal pairing.
    """
    p = solve_adjoint(state, v)
    m_row = -apply_dm_residual_t(state, p)
    z_row = -(dz_residual_columns(state)[state.free].T @ p[state.free])
    return m_row, z_row


def reduced_jacobians(state: StateSolution, phi: np.ndarray, psi: np.ndarray | None = None):
    """Output-encoded Jacobians against the mass inner product.

    ``phi`` holds r_u mass-orthonormal output fields as columns.  Returns
    (J_m, J_z) with J_m = Phi^* D_m u (against nodal m coefficients, or
    against psi columns when given) and J_z = Phi^* D_z u.  All r_u adjoint
    solves share the state factorization.
    """
    problem = state.problem
    r_u = phi.shape[1] if phi.ndim == 2 else 0
    d_z = problem.basis.dim
    if r_u == 0:
        width = psi.shape[1] if psi is not None else problem.mesh.n_vertices
        return np.zeros((0, width)), np.zeros((0, d_z))
    V = (problem.M @ phi)[problem.free]
    P = state.fact.solve(V, transpose=True)
    problem.counters["adjoint_solves"] += r_u
    P_full = np.zeros((problem.mesh.n_vertices, r_u))
    P_full[problem.free] = P
    J_m = -apply_dm_residual_t(state, P_full).T  # (r_u, d_m)
    J_z = -(dz_residual_columns(state)[problem.free].T @ P).T  # (r_u, d_z)
    if psi is not None:
        J_m = J_m @ psi
    return J_m, J_z


# -- quantity of interest ----------------------------------------------------

def edge_inverse_gradient(problem: PoissonProblem, z) -> np.ndarray:
    """F^{-1} at the bottom-edge quadrature points for a given z."""
    zv = np.asarray(z.z if isinstance(z, shape.ShapeParams) else z, dtype=float)
    _, F_e, detF_e = _deformation_from_cache(
        zv, problem.edge_points, problem.disp_e, problem.grad_e
    )
    return shape.invert_2x2(F_e, detF_e)


def qoi_fields(problem: PoissonProblem, u: np.ndarray, m: np.ndarray, z,
               Finv_e: np.ndarray | None = None):
    """Flux-tracking functional and its partials for arbitrary nodal fields.

    The boundary flux uses the one-sided volume-gradient trace from the
    triangle owning each bottom edge; the bottom is pointwise fixed by the
    deformation, so the outward normal and surface measure are those of the
    reference edge.  Returns (value, D_u Q, D_m Q, D_z Q).
    """
    if Finv_e is None:
        Finv_e = edge_inverse_gradient(problem, z)
    tris = problem.tris[problem.edge_tri]  # (ne, 3)
    gu = np.einsum("ek,eka->ea", np.asarray(u, dtype=float)[tris],
                   problem.mesh.tri_grads[problem.edge_tri])
    m_e = np.einsum("eqk,ek->eq", problem.edge_lam, np.asarray(m, dtype=float)[tris])
    expm = np.exp(m_e)
    y = np.einsum("eqba,eb->eqa", Finv_e, gu)  # F^{-T} grad u at edge points
    flux = expm * y[..., 1]
    r = flux - problem.edge_tau()
    w = problem.edge_w
    value = 0.5 * float(np.sum(w * r * r))

    wr = w * r
    # d(flux)/du_k through the one-sided gradient trace.
    gtrace = np.einsum("eqba,ekb->eqka", Finv_e, problem.mesh.tri_grads[problem.edge_tri])
    du_contrib = np.einsum("eq,eq,eqk->ek", wr, expm, gtrace[..., 1])
    D_u = np.zeros(problem.mesh.n_vertices)
    np.add.at(D_u, tris.ravel(), du_contrib.ravel())

    dm_contrib = np.einsum("eq,eq,eqk->ek", wr, flux, problem.edge_lam)
    D_m = np.zeros(problem.mesh.n_vertices)
    np.add.at(D_m, tris.ravel(), dm_contrib.ravel())

    # d(F^{-T} grad u)/dz_j = -F^{-T} G_j^T F^{-T} grad u; take component 2.
    Gy = np.einsum("eqjab,eqa->eqjb", problem.grad_e, y)
    dflux = -expm[..., None] * np.einsum("eqb,eqjb->eqj", Finv_e[..., :, 1], Gy)
    D_z = np.einsum("eq,eqj->j", wr, dflux)
    return value, D_u, D_m, D_z


def qoi(state: StateSolution):
    """QoI and partials at a solved state (reuses cached edge geometry)."""
    return qoi_fields(state.problem, state.u, state.m, state.z, Finv_e=state.geo.Finv_e)


def qoi_total_gradient(problem: PoissonProblem, m: np.ndarray, z,
                       state: StateSolution | None = None):
    """Total z-derivative of z -> Q(u(m,z), m, z) via one adjoint solve."""
    if state is None:
        state = solve_state(problem, m, z)
    value, D_u, _, D_z = qoi(state)
    p = solve_adjoint(state, D_u)
    total = D_z - dz_residual_columns(state)[problem.free].T @ p[problem.free]
    return value, total


def flux_at_bottom_nodes(problem: PoissonProblem, u: np.ndarray, m: np.ndarray, z) -> np.ndarray:
    """One-sided flux trace sampled at the bottom nodes.

    Interior nodes average the traces of their two adjacent edges' owner
    triangles evaluated at the node position.
    """
    zv = np.asarray(z.z if isinstance(z, shape.ShapeParams) else z, dtype=float)
    verts = problem.mesh.vertices
    tris = problem.tris[problem.edge_tri]
    gu = np.einsum("ek,eka->ea", np.asarray(u, dtype=float)[tris],
                   problem.mesh.tri_grads[problem.edge_tri])
    vals = np.zeros(problem.bottom.size)
    counts = np.zeros(problem.bottom.size)
    for e in range(problem.edge_verts.shape[0]):
        for side in (0, 1):
            v = problem.edge_verts[e, side]
            X = verts[v]
            _, F, detF = shape.deformation_fields(problem.basis, zv, X[None, :])
            Finv = shape.invert_2x2(F, detF)[0]
            y = Finv.T @ gu[e]
            pos = problem.edge_tau_idx[e, side]
            vals[pos] += np.exp(m[v]) * y[1]
            counts[pos] += 1
    return vals / counts


def qoi_batch(problem: PoissonProblem, U: np.ndarray, Ms: np.ndarray, z,
              with_grad: bool = False):
    """Vectorized flux-tracking QoI over many (u, m) pairs at one z.

    Returns (values, D_u, D_z) with D_u of shape (B, n_vertices) and D_z of
    shape (B, d_z); the derivative blocks are None when ``with_grad`` is
    false.  Used by the surrogate objective, where states arrive in batches.
    """
    U = np.atleast_2d(np.asarray(U, dtype=float))
    Ms = np.atleast_2d(np.asarray(Ms, dtype=float))
    Finv_e = edge_inverse_gradient(problem, z)
    tris_e = problem.tris[problem.edge_tri]
    grads_e = problem.mesh.tri_grads[problem.edge_tri]
    gu = np.einsum("bek,eka->bea", U[:, tris_e], grads_e)
    m_e = np.einsum("eqk,bek->beq", problem.edge_lam, Ms[:, tris_e])
    expm = np.exp(m_e)
    y = np.einsum("eqca,bec->beqa", Finv_e, gu)
    flux = expm * y[..., 1]
    r = flux - problem.edge_tau()[None]
    w = problem.edge_w[None]
    values = 0.5 * np.sum(w * r * r, axis=(1, 2))
    if not with_grad:
        return values, None, None

    wr = w * r
    gtrace = np.einsum("eqca,ekc->eqka", Finv_e, grads_e)[..., 1]
    du_contrib = np.einsum("beq,beq,eqk->bek", wr, expm, gtrace)
    D_u = np.zeros((U.shape[0], problem.mesh.n_vertices))
    np.add.at(
        D_u,
        (np.arange(U.shape[0])[:, None, None], tris_e[None, :, :]),
        du_contrib,
    )
    Gy = np.einsum("eqjac,beqa->beqjc", problem.grad_e, y)
    dterm = np.einsum("eqc,beqjc->beqj", Finv_e[..., :, 1], Gy)
    D_z = -np.einsum("beq,beq,beqj->bj", wr, expm, dterm)
    return values, D_u, D_z
