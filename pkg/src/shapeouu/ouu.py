"""Risk-averse objective assembly and box-constrained quasi-Newton descent.

The objective evaluates the flux-tracking quantity on a frozen set of
parameter samples (common random numbers across iterations) through either
the PDE or the trained surrogate, composes the risk-measure chain rule, and
adds the quadratic shape penalty.  Minimization uses a projected L-BFGS
with Armijo backtracking onto the box; inadmissible deformations evaluate
to +inf so the line search backs away from them.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import forward, nets, reduction, risk as risk_mod, shape, surrogate
from .forward import PoissonProblem
from .risk import Penalty, RiskMeasure
from .surrogate import Rbno


class InadmissibleDesign(RuntimeError):
    """Design outside the diffeomorphic region at an accepted iterate."""


class PdeBackend:
    """Per-sample state and adjoint solves against the true model."""

    name = "pde"

    def __init__(self, problem: PoissonProblem, samples: np.ndarray):
        self.problem = problem
        self.samples = np.atleast_2d(np.asarray(samples, dtype=float))
        self._mcs = [problem.m_cache(m) for m in self.samples]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    def values(self, z: np.ndarray) -> np.ndarray:
        geo = forward.geometry(self.problem, z)
        out = np.empty(self.n_samples)
        for i, mc in enumerate(self._mcs):
            state = forward.solve_state(self.problem, self.samples[i], z, mc=mc, geo=geo)
            out[i] = forward.qoi(state)[0]
        return out

    def values_and_grads(self, z: np.ndarray):
        geo = forward.geometry(self.problem, z)
        vals = np.empty(self.n_samples)
        grads = np.empty((self.n_samples, self.problem.basis.dim))
        for i, mc in enumerate(self._mcs):
            state = forward.solve_state(self.problem, self.samples[i], z, mc=mc, geo=geo)
            vals[i], grads[i] = forward.qoi_total_gradient(
                self.problem, self.samples[i], z, state=state
            )
        return vals, grads


class SurrogateBackend:
    """Batched latent-network evaluations; no PDE solves."""

    name = "surrogate"

    def __init__(self, rbno: Rbno, problem: PoissonProblem, samples: np.ndarray,
                 chunk_size: int = 256):
        self.rbno = rbno
        self.problem = problem
        self.samples = np.atleast_2d(np.asarray(samples, dtype=float))
        self.m_r = reduction.encode_param(rbno.as_basis, self.samples)
        self.chunk_size = chunk_size

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    def _inputs(self, z: np.ndarray) -> np.ndarray:
        zb = np.broadcast_to(np.asarray(z, dtype=float), (self.n_samples, len(z)))
        return np.concatenate([self.m_r, zb], axis=1)

    def values(self, z: np.ndarray) -> np.ndarray:
        coords = nets.net_forward(self.rbno.net, self._inputs(z))
        U = reduction.decode_state(self.rbno.pod, coords)
        return forward.qoi_batch(self.problem, U, self.samples, z)[0]

    def values_and_grads(self, z: np.ndarray):
        X = self._inputs(z)
        r_m = self.rbno.as_basis.rank
        vals = np.empty(self.n_samples)
        grads = np.empty((self.n_samples, len(z)))
        phi = self.rbno.pod.basis
        for start in range(0, self.n_samples, self.chunk_size):
            sl = slice(start, start + self.chunk_size)
            coords, J = nets.forward_with_jacobian(self.rbno.net, X[sl])
            U = reduction.decode_state(self.rbno.pod, coords)
            v, D_u, D_z = forward.qoi_batch(
                self.problem, U, self.samples[sl], z, with_grad=True
            )
            vals[sl] = v
            latent_du = D_u @ phi  # (b, r_u)
            grads[sl] = np.einsum("br,brj->bj", latent_du, J[:, :, r_m:]) + D_z
        return vals, grads


@dataclass
class ObjectiveConfig:
    """Risk measure, penalty, backend, and box for one optimization run."""

    risk: RiskMeasure
    penalty: Penalty
    backend: object
    lower: np.ndarray
    upper: np.ndarray
    detf_threshold: float = shape.DETF_THRESHOLD

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        if self.backend.n_samples == 0:
            raise ValueError("empty SAA sample set")
        if not np.all(self.lower < self.upper):
            raise ValueError("box bounds must satisfy lower < upper")


def _admissible(config: ObjectiveConfig, z: np.ndarray) -> bool:
    problem = getattr(config.backend, "problem", None)
    if problem is None:  # synthetic backends carry no geometry
        return True
    return shape.min_quadrature_detf(problem.mesh, problem.basis, z) > config.detf_threshold


def objective_value(config: ObjectiveConfig, z: np.ndarray, t: float | None = None) -> float:
    """Objective only; +inf for inadmissible deformations (line-search barrier)."""
    if not _admissible(config, z):
        return np.inf
    try:
        q = config.backend.values(z)
    except shape.DegenerateDeformation:
        # coarse scans can miss degeneracy between quadrature points
        return np.inf
    value = risk_mod.risk_saa(q, config.risk, t)[0]
    return value + risk_mod.penalty_eval(z, config.penalty.alpha, config.penalty.area)[0]


def objective_grad(config: ObjectiveConfig, z: np.ndarray, t: float | None = None):
    """Objective with its z-gradient (and t-derivative for CVaR)."""
    z = np.asarray(z, dtype=float)
    if config.risk.needs_t and t is None:
        raise ValueError("cvar objective requires the auxiliary level t")
    if not _admissible(config, z):
        raise InadmissibleDesign(f"deformation below det F threshold at z = {z.tolist()}")
    q, dq_dz = config.backend.values_and_grads(z)
    value, drisk_dq, dt = risk_mod.risk_saa(q, config.risk, t)
    pval, pgrad = risk_mod.penalty_eval(z, config.penalty.alpha, config.penalty.area)
    grad_z = drisk_dq @ dq_dz + pgrad
    return value + pval, grad_z, dt


@dataclass
class OptResult:
    """Terminal iterate and per-iteration trace of the descent."""

    z: np.ndarray
    t: float | None
    value: float
    grad_norm: float
    n_iterations: int
    status: str
    trace: list = field(default_factory=list)


def _two_loop(g, s_list, y_list):
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(s_list), reversed(y_list)):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    if s_list:
        s, y = s_list[-1], y_list[-1]
        q *= (s @ y) / (y @ y)
    for (s, y), a in zip(zip(s_list, y_list), reversed(alphas)):
        b = (y @ q) / (y @ s)
        q += (a - b) * s
    return q


def minimize_lbfgs(value_grad, x0, lower, upper, value_only=None, memory: int = 10,
                   tol: float = 1e-8, max_iter: int = 500, c1: float = 1e-4) -> OptResult:
    """Projected limited-memory quasi-Newton descent over a box.

    ``value_grad(x) -> (f, g)`` supplies the smooth objective; ``value_only``
    may provide a cheaper evaluation for the backtracking line search.
    Iterates stay inside [lower, upper] via projection; termination is on the
    projected-gradient norm.  On line-search failure, or when several
    consecutive accepted steps improve the value by less than roundoff
    (possible for stiffly smoothed objectives), the best iterate is returned
    with a status flag.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    if value_only is None:
        value_only = lambda x: value_grad(x)[0]
    x = np.clip(np.asarray(x0, dtype=float), lower, upper)
    f, g = value_grad(x)
    s_list, y_list = [], []
    trace = []
    status = "max_iterations"
    start_time = time.perf_counter()
    it = 0
    stalled = 0
    for it in range(1, max_iter + 1):
        pg = x - np.clip(x - g, lower, upper)
        pg_norm = float(np.linalg.norm(pg))
        active = int(np.sum((x <= lower) | (x >= upper)))
        trace.append({
            "iteration": it - 1, "value": f, "proj_grad_norm": pg_norm,
            "step": 0.0 if it == 1 else trace_step, "active_bounds": active,
            "wall_time": time.perf_counter() - start_time,
        })
        if pg_norm <= tol:
            status = "converged"
            break

        d = -_two_loop(g, s_list, y_list)
        if d @ g >= 0:
            d = -g
        x_new = None
        for direction in ([d, -g] if s_list else [d]):
            alpha = 1.0
            while alpha > 1e-16:
                cand = np.clip(x + alpha * direction, lower, upper)
                step_vec = cand - x
                if np.linalg.norm(step_vec) == 0.0:
                    break
                f_cand = value_only(cand)
                if f_cand <= f + c1 * (g @ step_vec):
                    x_new = cand
                    break
                alpha *= 0.5
            if x_new is not None:
                break
        if x_new is None:
            status = "line_search_failure"
            break
        trace_step = alpha
        f_new, g_new = value_grad(x_new)
        if f - f_new <= 1e-15 * max(1.0, abs(f)):
            stalled += 1
            if stalled >= 10:
                status = "stalled"
                x, f, g = x_new, f_new, g_new
                break
        else:
            stalled = 0
        s = x_new - x
        y = g_new - g
        if s @ y > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            s_list.append(s)
            y_list.append(y)
            if len(s_list) > memory:
                s_list.pop(0)
                y_list.pop(0)
        x, f, g = x_new, f_new, g_new

    pg_norm = float(np.linalg.norm(x - np.clip(x - g, lower, upper)))
    return OptResult(z=x, t=None, value=f, grad_norm=pg_norm,
                     n_iterations=it, status=status, trace=trace)


def optimize(config: ObjectiveConfig, z0: np.ndarray, t0: float | None = None) -> OptResult:
    """Minimize the configured objective from z0 (and t0 for CVaR).

    For CVaR the auxiliary level is optimized jointly and unconstrained;
    when t0 is omitted it starts at the empirical quantile of the sample
    values at z0.  The smoothing width, when unset, is resolved from the
    interquartile range of those values.
    """
    z0 = np.asarray(z0, dtype=float)
    if not np.all((z0 >= config.lower) & (z0 <= config.upper)):
        raise ValueError("initial design outside the box")
    if not _admissible(config, z0):
        raise InadmissibleDesign("initial design is not diffeomorphic")

    rk = config.risk
    if rk.needs_t:
        q0 = config.backend.values(z0)
        if rk.eps is None:
            rk = risk_mod.cvar_risk(rk.beta, risk_mod.cvar_smoothing_width(q0))
            config = ObjectiveConfig(rk, config.penalty, config.backend,
                                     config.lower, config.upper, config.detf_threshold)
        if t0 is None:
            t0 = float(np.quantile(q0, rk.beta))
        d = z0.size
        lower = np.concatenate([config.lower, [-np.inf]])
        upper = np.concatenate([config.upper, [np.inf]])
        x0 = np.concatenate([z0, [t0]])

        def value_grad(x):
            v, gz, gt = objective_grad(config, x[:d], x[d])
            return v, np.concatenate([gz, [gt]])

        def value_only(x):
            return objective_value(config, x[:d], x[d])

        res = minimize_lbfgs(value_grad, x0, lower, upper, value_only)
        res.t = float(res.z[d])
        res.z = res.z[:d]
        return res

    def value_grad(x):
        v, gz, _ = objective_grad(config, x)
        return v, gz

    def value_only(x):
        return objective_value(config, x)

    return minimize_lbfgs(value_grad, z0, config.lower, config.upper, value_only)
