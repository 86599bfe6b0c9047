import numpy as np
import pytest
from scipy.optimize import nnls

from shapeouu import fem, forward, nets, ouu, prior, reduction, risk, shape, surrogate


class QuadraticBackend:
    """Synthetic per-sample objectives Q_i(z) = 0.5 * |z - c_i|^2 + d_i."""

    def __init__(self, centers, offsets):
        self.centers = np.atleast_2d(centers)
        self.offsets = np.asarray(offsets, dtype=float)

    @property
    def n_samples(self):
        return self.centers.shape[0]

    def values(self, z):
        diff = z[None, :] - self.centers
        return 0.5 * np.sum(diff * diff, axis=1) + self.offsets

    def values_and_grads(self, z):
        diff = z[None, :] - self.centers
        return 0.5 * np.sum(diff * diff, axis=1) + self.offsets, diff


def test_lbfgs_interior_quadratic():
    zstar = np.array([0.3, -0.2, 0.1])

    def vg(x):
        return float(np.sum((x - zstar) ** 2)), 2 * (x - zstar)

    res = ouu.minimize_lbfgs(vg, np.zeros(3), -np.ones(3), np.ones(3))
    assert res.status == "converged"
    assert res.n_iterations <= 50
    assert np.abs(res.z - zstar).max() < 1e-6


def test_lbfgs_clamps_exterior_optimum():
    zstar = np.array([2.0, -3.0, 0.5])

    def vg(x):
        return float(np.sum((x - zstar) ** 2)), 2 * (x - zstar)

    res = ouu.minimize_lbfgs(vg, np.zeros(3), -np.ones(3), np.ones(3))
    assert np.abs(res.z - np.clip(zstar, -1.0, 1.0)).max() < 1e-8
    assert res.trace[-1]["active_bounds"] >= 2


def test_theorem_bound_interior_equality(rng):
    # isotropic quadratic truth plus a linear surrogate perturbation: the
    # stationary-point error equals the gradient-error bound exactly
    d, lam = 6, 4.0
    zstar = rng.uniform(-0.3, 0.3, d)
    c = rng.standard_normal(d) * 0.2

    def vg_sur(x):
        return (0.5 * lam * np.sum((x - zstar) ** 2) + c @ x,
                lam * (x - zstar) + c)

    res = ouu.minimize_lbfgs(vg_sur, np.zeros(d), -np.ones(d), np.ones(d))
    bound = np.linalg.norm(c) / lam
    assert abs(np.linalg.norm(res.z - zstar) - bound) < 1e-8


def test_theorem_bound_boxed_cases(rng):
    for _ in range(20):
        d = int(rng.integers(2, 8))
        diag = rng.uniform(0.5, 4.0, d)
        lam = diag.min()
        zstar = rng.uniform(-1.0, 1.0, d)
        c = rng.standard_normal(d) * rng.uniform(0.05, 0.5)
        lo = rng.uniform(-0.8, -0.2, d)
        hi = rng.uniform(0.2, 0.8, d)
        # separable quadratics: both constrained minimizers are clamps
        z_true = np.clip(zstar, lo, hi)
        z_dag = np.clip(zstar - c / diag, lo, hi)
        grad_gap = np.linalg.norm(c)  # (grad J - grad J_sur)(z) = -c everywhere
        assert np.linalg.norm(z_dag - z_true) <= grad_gap / lam + 1e-12


def test_objective_grad_matches_fd_mean(small_problem, rng):
    samples = prior.sample_prior_batch(small_problem.prior, rng, 4)
    cfg = ouu.ObjectiveConfig(
        risk.mean_risk(), risk.Penalty(0.001, 4.0),
        ouu.PdeBackend(small_problem, samples),
        -0.2 * np.ones(11), 0.2 * np.ones(11),
    )
    z = rng.uniform(-0.1, 0.1, 11)
    _, grad, _ = ouu.objective_grad(cfg, z)
    eps = 1e-5
    fd = np.zeros(11)
    for j in range(11):
        e = np.zeros(11)
        e[j] = eps
        fd[j] = (ouu.objective_value(cfg, z + e) - ouu.objective_value(cfg, z - e)) / (2 * eps)
    assert np.linalg.norm(grad - fd) / np.linalg.norm(fd) < 1e-6


def test_objective_grad_matches_fd_cvar(small_problem, rng):
    samples = prior.sample_prior_batch(small_problem.prior, rng, 6)
    cfg = ouu.ObjectiveConfig(
        risk.cvar_risk(0.5, 1e-2), risk.Penalty(0.001, 4.0),
        ouu.PdeBackend(small_problem, samples),
        -0.2 * np.ones(11), 0.2 * np.ones(11),
    )
    z = rng.uniform(-0.08, 0.08, 11)
    t = float(np.median(cfg.backend.values(z)))
    _, grad_z, grad_t = ouu.objective_grad(cfg, z, t)
    eps = 1e-6
    fd_t = (ouu.objective_value(cfg, z, t + eps) - ouu.objective_value(cfg, z, t - eps)) / (2 * eps)
    assert grad_t == pytest.approx(fd_t, abs=1e-8)
    for j in (0, 4, 9):
        e = np.zeros(11)
        e[j] = 1e-5
        fd = (ouu.objective_value(cfg, z + e, t) - ouu.objective_value(cfg, z - e, t)) / 2e-5
        assert grad_z[j] == pytest.approx(fd, rel=1e-6, abs=1e-10)


def test_penalty_decomposes_additively(small_problem, rng):
    samples = prior.sample_prior_batch(small_problem.prior, rng, 2)
    z = rng.uniform(-0.08, 0.08, 11)
    base = ouu.ObjectiveConfig(risk.mean_risk(), risk.Penalty(0.0, 4.0),
                               ouu.PdeBackend(small_problem, samples),
                               -0.2 * np.ones(11), 0.2 * np.ones(11))
    with_pen = ouu.ObjectiveConfig(risk.mean_risk(), risk.Penalty(0.02, 4.0),
                                   ouu.PdeBackend(small_problem, samples),
                                   -0.2 * np.ones(11), 0.2 * np.ones(11))
    J0, g0, _ = ouu.objective_grad(base, z)
    J1, g1, _ = ouu.objective_grad(with_pen, z)
    pv, pg = risk.penalty_eval(z, 0.02, 4.0)
    assert J1 == pytest.approx(J0 + pv, rel=1e-12)
    assert np.abs(g1 - (g0 + pg)).max() < 1e-12


def test_inadmissible_design_handling(small_problem):
    samples = np.zeros((1, small_problem.mesh.n_vertices))
    cfg = ouu.ObjectiveConfig(risk.mean_risk(), risk.Penalty(0.001, 4.0),
                              ouu.PdeBackend(small_problem, samples),
                              -1.5 * np.ones(11), 1.5 * np.ones(11))
    z_bad = np.zeros(11)
    z_bad[0] = -0.99
    assert ouu.objective_value(cfg, z_bad) == np.inf
    with pytest.raises(ouu.InadmissibleDesign):
        ouu.objective_grad(cfg, z_bad)
    with pytest.raises(ouu.InadmissibleDesign):
        ouu.optimize(cfg, z_bad)


def test_optimize_mean_synthetic(rng):
    centers = rng.uniform(-0.3, 0.3, (5, 4))
    backend = QuadraticBackend(centers, np.zeros(5))
    cfg = ouu.ObjectiveConfig(risk.mean_risk(), risk.Penalty(0.0, 4.0), backend,
                              -np.ones(4), np.ones(4))
    res = ouu.optimize(cfg, np.zeros(4))
    assert res.status == "converged"
    assert np.abs(res.z - centers.mean(axis=0)).max() < 1e-7
    assert np.all(res.z >= cfg.lower - 1e-12) and np.all(res.z <= cfg.upper + 1e-12)


def test_optimize_cvar_joint(rng):
    centers = rng.uniform(-0.2, 0.2, (30, 3))
    offsets = rng.standard_normal(30)
    backend = QuadraticBackend(centers, offsets)
    cfg = ouu.ObjectiveConfig(risk.cvar_risk(0.8, 1e-3), risk.Penalty(0.001, 4.0),
                              backend, -np.ones(3), np.ones(3))
    res = ouu.optimize(cfg, np.zeros(3))
    assert res.t is not None and np.isfinite(res.t)
    # at the solution the t-derivative of the smoothed objective vanishes
    q = backend.values(res.z)
    _, _, dt = risk.risk_saa(q, risk.cvar_risk(0.8, 1e-3), res.t)
    assert abs(dt) < 1e-6
    # default t0 is the empirical quantile and eps resolution works
    cfg2 = ouu.ObjectiveConfig(risk.cvar_risk(0.8, None), risk.Penalty(0.001, 4.0),
                               backend, -np.ones(3), np.ones(3))
    res2 = ouu.optimize(cfg2, np.zeros(3))
    assert np.isfinite(res2.value)


def test_optimize_rejects_bad_start(rng):
    backend = QuadraticBackend(np.zeros((2, 3)), np.zeros(2))
    cfg = ouu.ObjectiveConfig(risk.mean_risk(), risk.Penalty(0.0, 4.0), backend,
                              -np.ones(3), np.ones(3))
    with pytest.raises(ValueError):
        ouu.optimize(cfg, 2.0 * np.ones(3))


def test_trace_records_required_columns(rng):
    backend = QuadraticBackend(rng.uniform(-0.2, 0.2, (3, 2)), np.zeros(3))
    cfg = ouu.ObjectiveConfig(risk.mean_risk(), risk.Penalty(0.0, 4.0), backend,
                              -np.ones(2), np.ones(2))
    res = ouu.optimize(cfg, np.zeros(2))
    for key in ("iteration", "value", "proj_grad_norm", "step", "active_bounds", "wall_time"):
        assert key in res.trace[0]


@pytest.fixture(scope="module")
def tiny_surrogate_setup():
    """One frozen parameter sample with a surrogate trained on the z-map.

    The free-node state space is fully spanned by the basis, so the only
    surrogate error is network training error.
    """
    mesh = fem.build_rect_mesh(8, 2, 4.0, 1.0)
    basis = shape.fourier_basis(1, 4.0)
    pr = prior.build_prior(mesh, 1.0, 25.0, prior.anisotropy_matrix(2.0, 0.5))
    problem = forward.make_problem(mesh, pr, basis)
    rng = np.random.default_rng(0)
    m0 = prior.sample_prior(pr, rng)

    n, r_u, r_m = 240, 9, 4
    zs = rng.uniform(-0.1, 0.1, (n, 3))
    us = np.empty((n, pr.dim))
    states = []
    for i in range(n):
        st = forward.solve_state(problem, m0, zs[i])
        us[i] = st.u
        states.append(st)
    pod = reduction.compute_pod(us, problem.M, r_u)
    rows = np.empty((n, r_u, pr.dim))
    jzr = np.empty((n, r_u, 3))
    for i, st in enumerate(states):
        rows[i], jzr[i] = forward.reduced_jacobians(st, pod.basis)
    asb = reduction.compute_active_subspace(rows, pr, r_m)
    m_r = reduction.encode_param(asb, np.tile(m0, (n, 1)))
    u_r = reduction.encode_state(pod, us)
    J_m = np.einsum("nij,jk->nik", rows, asb.basis)
    dataset = nets.make_dataset(m_r, zs, u_r, J_m, jzr, np.random.default_rng(1))

    def train_net(epochs, milestones):
        net = nets.init_net([r_m + 3, 64, 64, r_u], np.random.default_rng(1))
        cfg = nets.TrainConfig(epochs=epochs, learning_rate=2e-3,
                               milestones=milestones, batch_size=16,
                               alpha_d=1.0, seed=1)
        best, _ = nets.train(net, dataset, cfg, np.random.default_rng(1))
        return surrogate.Rbno(pod, asb, best)

    return problem, m0, pod, train_net


def test_backends_agree_with_well_trained_surrogate(tiny_surrogate_setup):
    problem, m0, _, train_net = tiny_surrogate_setup
    rbno = train_net(3000, (1500, 2200, 2700))
    pen = risk.Penalty(0.001, 4.0)
    lo, hi = -0.2 * np.ones(3), 0.2 * np.ones(3)
    cfg_p = ouu.ObjectiveConfig(risk.mean_risk(), pen,
                                ouu.PdeBackend(problem, m0[None]), lo, hi)
    cfg_s = ouu.ObjectiveConfig(risk.mean_risk(), pen,
                                ouu.SurrogateBackend(rbno, problem, m0[None]), lo, hi)
    for z in (np.zeros(3), np.array([0.05, -0.03, 0.05]), np.array([-0.05, 0.02, 0.01])):
        Jp, gp, _ = ouu.objective_grad(cfg_p, z)
        Js, gs, _ = ouu.objective_grad(cfg_s, z)
        assert abs(Jp - Js) <= 1e-4
        assert np.abs(gp - gs).max() <= 5e-4


def test_gradient_error_structure(tiny_surrogate_setup):
    # the backend gradient gap is controlled by first and second powers of
    # the measured output and z-derivative errors; fit the two coefficients
    # on half the instances and check the bound on the rest
    problem, m0, pod, train_net = tiny_surrogate_setup
    surrogates = [train_net(e, ms) for e, ms in
                  ((60, ()), (250, (150,)), (1200, (700, 1000)))]
    pen = risk.Penalty(0.0, 4.0)
    lo, hi = -0.2 * np.ones(3), 0.2 * np.ones(3)
    cfg_p = ouu.ObjectiveConfig(risk.mean_risk(), pen,
                                ouu.PdeBackend(problem, m0[None]), lo, hi)
    zs = [np.zeros(3), np.array([0.06, -0.02, 0.03]), np.array([-0.04, 0.05, -0.02])]
    M = problem.M

    records = []
    for rbno in surrogates:
        cfg_s = ouu.ObjectiveConfig(risk.mean_risk(), pen,
                                    ouu.SurrogateBackend(rbno, problem, m0[None]), lo, hi)
        for z in zs:
            _, gp, _ = ouu.objective_grad(cfg_p, z)
            _, gs, _ = ouu.objective_grad(cfg_s, z)
            lhs = np.linalg.norm(gp - gs)
            state = forward.solve_state(problem, m0, z)
            u_pred, dz_pred = surrogate.rbno_predict(rbno, m0, z, with_dz=True)
            du = u_pred - state.u
            e_u = np.sqrt(du @ (M @ du))
            e_dz_sq = 0.0
            for j in range(3):
                e = np.zeros(3)
                e[j] = 1.0
                col = forward.jvp(state, None, e) - dz_pred[:, j]
                e_dz_sq += col @ (M @ col)
            e_dz = np.sqrt(e_dz_sq)
            records.append((lhs, e_u + e_dz, e_u**2 + e_dz**2))

    records = np.array(records)
    fit, check = records[::2], records[1::2]
    coef, _ = nnls(fit[:, 1:], fit[:, 0])
    predicted = check[:, 1:] @ coef
    assert np.all(check[:, 0] <= 3.0 * predicted + 1e-12)
