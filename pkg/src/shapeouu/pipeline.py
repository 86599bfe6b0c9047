"""Stage implementations behind the CLI: the six-stage workflow.

Stages communicate through files in the output directory: a JSON manifest
with sha256 digests, binary arrays, and CSV traces.  Per-sample RNG streams
are derived from (master seed, stage number, sample index), so stages are
independently rerunnable and byte-deterministic; CSVs carrying wall-clock
columns are the only non-reproducible outputs.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import arrays, config as config_mod, fem, forward, nets, ouu, prior as prior_mod
from . import reduction, risk as risk_mod, shape, surrogate
from .config import RunConfig

STAGE_GENERATE, STAGE_REDUCE, STAGE_TRAIN, STAGE_OPTIMIZE, STAGE_EVALUATE, STAGE_BENCH = range(1, 7)

MANIFEST = "manifest.json"


def _stage_rng(seed: int, stage: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, stage, index])


def config_hash(rc: RunConfig) -> str:
    blob = json.dumps(asdict(rc), sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def _write_arrays(out: Path, named: dict) -> dict:
    digests = {}
    for name, arr in named.items():
        arrays.write_array(out / name, arr)
        digests[name] = arrays.sha256_of(out / name)
    return digests


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _load_manifest(out: Path) -> dict:
    path = out / MANIFEST
    if not path.exists():
        raise ValueError(f"no manifest in {out}; run 'generate' first")
    return arrays.read_manifest(path)


def _verified_array(out: Path, manifest: dict, name: str) -> np.ndarray:
    digest = manifest["files"].get(name)
    if digest is None:
        raise ValueError(f"manifest does not list {name}")
    arrays.verify_files(out, {name: digest})
    return arrays.read_array(out / name)


def sample_admissible_z(rng: np.random.Generator, problem, z_min: float, z_max: float):
    """Uniform draw over the box, rejecting non-diffeomorphic deformations."""
    rejections = 0
    while True:
        z = rng.uniform(z_min, z_max, problem.basis.dim)
        if shape.is_admissible(problem.mesh, problem.basis, z):
            return z, rejections
        rejections += 1


def _generate_sample(rng, problem, rc: RunConfig):
    """One (z, m, u) record; a deformation that degenerates between scan
    points (possible on coarse meshes) counts as a rejection too."""
    rejections = 0
    while True:
        z, rej = sample_admissible_z(rng, problem, rc.z_min, rc.z_max)
        rejections += rej
        m = prior_mod.sample_prior(problem.prior, rng)
        try:
            u = forward.solve_state(problem, m, z).u
        except shape.DegenerateDeformation:
            rejections += 1
            continue
        return z, m, u, rejections


def cmd_generate(rc: RunConfig, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    problem = config_mod.build_problem(rc)
    d = problem.mesh.n_vertices
    d_z = problem.basis.dim

    zs = np.empty((rc.n_samples, d_z))
    ms = np.empty((rc.n_samples, d))
    us = np.empty((rc.n_samples, d))
    rejections = 0
    for i in range(rc.n_samples):
        rng = _stage_rng(rc.seed, STAGE_GENERATE, i)
        zs[i], ms[i], us[i], rej = _generate_sample(rng, problem, rc)
        rejections += rej

    digests = _write_arrays(out, {"z.sdk1": zs, "m.sdk1": ms, "u.sdk1": us})
    manifest = {
        "version": 1,
        "config": asdict(rc),
        "config_hash": config_hash(rc),
        "seed": rc.seed,
        "dims": {"d_m": d, "d_u": d, "d_z": d_z},
        "counts": {"n_samples": rc.n_samples, "n_pod": rc.n_pod, "n_as": rc.n_as},
        "rejections": rejections,
        "pde_solves": problem.counters["state_solves"],
        "files": digests,
    }
    arrays.write_manifest(out / MANIFEST, manifest)
    return manifest


def cmd_reduce(rc: RunConfig, out_dir) -> dict:
    out = Path(out_dir)
    manifest = _load_manifest(out)
    zs = _verified_array(out, manifest, "z.sdk1")
    ms = _verified_array(out, manifest, "m.sdk1")
    us = _verified_array(out, manifest, "u.sdk1")
    problem = config_mod.build_problem(rc)
    n_s = zs.shape[0]
    if rc.n_pod > n_s or rc.n_as > n_s:
        raise ValueError("n_pod and n_as must not exceed the stored sample count")
    if rc.r_u > min(rc.n_pod - 1, us.shape[1]):
        raise ValueError(f"r_u = {rc.r_u} too large for n_pod = {rc.n_pod}")
    if rc.r_m > ms.shape[1]:
        raise ValueError(f"r_m = {rc.r_m} exceeds parameter dimension")

    pod = reduction.compute_pod(us[: rc.n_pod], problem.M, rc.r_u)

    # Sensitivity pass: rebuild each stored state (verifying its residual),
    # then share its factorization across all r_u adjoint solves.
    d_z = problem.basis.dim
    rows = np.empty((n_s, rc.r_u, ms.shape[1]))
    j_zr = np.empty((n_s, rc.r_u, d_z))
    for i in range(n_s):
        state = forward.rebuild_state(problem, ms[i], zs[i], us[i])
        rows[i], j_zr[i] = forward.reduced_jacobians(state, pod.basis)

    as_basis = reduction.compute_active_subspace(rows[: rc.n_as], problem.prior, rc.r_m)
    m_r = reduction.encode_param(as_basis, ms)
    u_r = reduction.encode_state(pod, us)
    j_mr = np.einsum("nij,jk->nik", rows, as_basis.basis)

    digests = _write_arrays(out, {
        "pod_mean.sdk1": pod.mean,
        "pod_basis.sdk1": pod.basis,
        "pod_eigs.sdk1": pod.eigenvalues,
        "as_basis.sdk1": as_basis.basis,
        "as_eigs.sdk1": as_basis.eigenvalues,
        "m_r.sdk1": m_r,
        "u_r.sdk1": u_r,
        "j_mr.sdk1": j_mr.reshape(n_s, -1),
        "j_zr.sdk1": j_zr.reshape(n_s, -1),
    })
    _write_csv(out / "pod_eigs.csv", ["index", "eigenvalue"],
               list(enumerate(pod.eigenvalues)))
    _write_csv(out / "as_eigs.csv", ["index", "eigenvalue"],
               list(enumerate(as_basis.eigenvalues)))

    manifest["files"].update(digests)
    manifest["ranks"] = {"r_u": rc.r_u, "r_m": rc.r_m}
    manifest["reduce_counters"] = {
        "adjoint_solves": problem.counters["adjoint_solves"],
        "factorizations": problem.counters["factorizations"],
    }
    arrays.write_manifest(out / MANIFEST, manifest)
    return manifest


def _checkpoint_names(replicate: int):
    suffix = "" if replicate == 0 else f"_r{replicate}"
    return f"checkpoint{suffix}.json", f"net_params{suffix}.sdk1", f"history{suffix}.csv"


def flatten_params(net: nets.LatentNet) -> np.ndarray:
    return np.concatenate([w.ravel() for w in net.weights]
                          + [b.ravel() for b in net.biases])


def unflatten_params(widths, flat: np.ndarray) -> nets.LatentNet:
    net = nets.zero_net(list(widths))
    pos = 0
    for w in net.weights:
        w[...] = flat[pos:pos + w.size].reshape(w.shape)
        pos += w.size
    for b in net.biases:
        b[...] = flat[pos:pos + b.size]
        pos += b.size
    if pos != flat.size:
        raise ValueError("parameter vector does not match widths")
    return net


def cmd_train(rc: RunConfig, out_dir, replicates: int = 1) -> dict:
    out = Path(out_dir)
    manifest = _load_manifest(out)
    if "ranks" not in manifest:
        raise ValueError("no reduced records; run 'reduce' first")
    r_u = manifest["ranks"]["r_u"]
    r_m = manifest["ranks"]["r_m"]
    d_z = manifest["dims"]["d_z"]
    m_r = _verified_array(out, manifest, "m_r.sdk1")
    u_r = _verified_array(out, manifest, "u_r.sdk1")
    zs = _verified_array(out, manifest, "z.sdk1")
    n_s = m_r.shape[0]
    j_mr = _verified_array(out, manifest, "j_mr.sdk1").reshape(n_s, r_u, r_m)
    j_zr = _verified_array(out, manifest, "j_zr.sdk1").reshape(n_s, r_u, d_z)

    widths = [r_m + d_z] + list(rc.widths) + [r_u]
    summary = []
    for rep in range(replicates):
        rng = _stage_rng(rc.seed, STAGE_TRAIN, rep)
        dataset = nets.make_dataset(m_r, zs, u_r, j_mr, j_zr, rng,
                                    rc.validation_fraction)
        net = nets.init_net(widths, rng)
        cfg = config_mod.train_config(rc, rc.seed)
        best, history = nets.train(net, dataset, cfg, rng)

        ck_name, params_name, hist_name = _checkpoint_names(rep)
        arrays.write_array(out / params_name, flatten_params(best))
        descriptor = {
            "widths": widths, "r_u": r_u, "r_m": r_m, "d_z": d_z,
            "alpha_d": rc.alpha_d, "seed": rc.seed, "replicate": rep,
            "config_hash": manifest["config_hash"],
            "params_file": params_name,
            "best_val_loss": min(h["val_loss"] for h in history),
            "final_train_loss": history[-1]["train_loss"],
        }
        with open(out / ck_name, "w") as fh:
            json.dump(descriptor, fh, indent=2, sort_keys=True)
            fh.write("\n")
        _write_csv(
            out / hist_name,
            ["epoch", "lr", "train_loss", "val_loss", "state_term", "jm_term", "jz_term"],
            [[h["epoch"], h["lr"], h["train_loss"], h["val_loss"],
              h["state_term"], h["jm_term"], h["jz_term"]] for h in history],
        )
        manifest["files"][params_name] = arrays.sha256_of(out / params_name)
        summary.append([rep, descriptor["best_val_loss"], descriptor["final_train_loss"]])

    if replicates > 1:
        _write_csv(out / "replicates.csv",
                   ["replicate", "best_val_loss", "final_train_loss"], summary)
    arrays.write_manifest(out / MANIFEST, manifest)
    return manifest


def load_rbno(rc: RunConfig, out_dir, problem=None, replicate: int = 0) -> surrogate.Rbno:
    out = Path(out_dir)
    manifest = _load_manifest(out)
    ck_name, _, _ = _checkpoint_names(replicate)
    with open(out / ck_name) as fh:
        descriptor = json.load(fh)
    if problem is None:
        problem = config_mod.build_problem(rc)
    pod = reduction.PodBasis(
        mean=_verified_array(out, manifest, "pod_mean.sdk1"),
        basis=_verified_array(out, manifest, "pod_basis.sdk1"),
        eigenvalues=_verified_array(out, manifest, "pod_eigs.sdk1"),
        mass=problem.M,
    )
    as_basis = reduction.AsBasis(
        mean=np.zeros(problem.mesh.n_vertices),
        basis=_verified_array(out, manifest, "as_basis.sdk1"),
        eigenvalues=_verified_array(out, manifest, "as_eigs.sdk1"),
        prior=problem.prior,
    )
    flat = _verified_array(out, manifest, descriptor["params_file"])
    net = unflatten_params(descriptor["widths"], flat)
    return surrogate.Rbno(pod=pod, as_basis=as_basis, net=net)


def _build_objective(rc: RunConfig, problem, samples, rbno=None) -> ouu.ObjectiveConfig:
    if rc.backend == "surrogate":
        backend = ouu.SurrogateBackend(rbno, problem, samples)
    else:
        backend = ouu.PdeBackend(problem, samples)
    if rc.risk_kind == "mean":
        risk = risk_mod.mean_risk()
    elif rc.risk_kind == "cvar":
        risk = risk_mod.cvar_risk(rc.risk_beta, rc.cvar_eps)
    else:
        risk = risk_mod.entropic_risk(rc.risk_beta)
    penalty = risk_mod.Penalty(rc.penalty_alpha, problem.mesh.area)
    lower, upper = config_mod.box_arrays(rc, problem.basis.dim)
    return ouu.ObjectiveConfig(risk, penalty, backend, lower, upper)


def cmd_optimize(rc: RunConfig, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    problem = config_mod.build_problem(rc)
    rbno = load_rbno(rc, out, problem) if rc.backend == "surrogate" else None
    rng = _stage_rng(rc.seed, STAGE_OPTIMIZE, 0)
    samples = prior_mod.sample_prior_batch(problem.prior, rng, rc.n_saa)
    objective = _build_objective(rc, problem, samples, rbno)
    z0 = (np.asarray(rc.z0, dtype=float) if rc.z0 is not None
          else np.zeros(problem.basis.dim))

    t_start = time.perf_counter()
    result = ouu.optimize(objective, z0)
    wall = time.perf_counter() - t_start

    payload = {
        "z": result.z.tolist(),
        "t": result.t,
        "value": result.value,
        "grad_norm": result.grad_norm,
        "n_iterations": result.n_iterations,
        "status": result.status,
        "backend": rc.backend,
        "risk": rc.risk_kind,
        "n_saa": rc.n_saa,
        "pde_solves": problem.counters["state_solves"],
        "adjoint_solves": problem.counters["adjoint_solves"],
        "wall_time": wall,
    }
    with open(out / "result.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_csv(
        out / "trace.csv",
        ["iteration", "value", "proj_grad_norm", "step", "active_bounds", "wall_time"],
        [[r["iteration"], r["value"], r["proj_grad_norm"], r["step"],
          r["active_bounds"], r["wall_time"]] for r in result.trace],
    )
    return payload


def cmd_evaluate(rc: RunConfig, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    problem = config_mod.build_problem(rc)
    if rc.eval_z is not None:
        z = np.asarray(rc.eval_z, dtype=float)
    elif rc.use_result and (out / "result.json").exists():
        with open(out / "result.json") as fh:
            z = np.asarray(json.load(fh)["z"], dtype=float)
    else:
        raise ValueError("no design to evaluate: set [evaluate] z or produce result.json")
    if not shape.is_admissible(problem.mesh, problem.basis, z):
        raise ouu.InadmissibleDesign("evaluation design is not diffeomorphic")

    rng = _stage_rng(rc.seed, STAGE_EVALUATE, 0)
    ms = prior_mod.sample_prior_batch(problem.prior, rng, rc.n_mc)
    q = np.empty(rc.n_mc)
    profiles = np.empty((rc.n_mc, problem.bottom.size))
    for i in range(rc.n_mc):
        state = forward.solve_state(problem, ms[i], z)
        q[i] = forward.qoi(state)[0]
        profiles[i] = forward.flux_at_bottom_nodes(problem, state.u, ms[i], z)

    stats = {
        "z": z.tolist(),
        "seed": rc.seed,
        "n_mc": rc.n_mc,
        "mean": float(q.mean()),
        "variance": float(q.var(ddof=1)) if rc.n_mc > 1 else 0.0,
        "empirical_cvar": risk_mod.empirical_cvar(q, rc.risk_beta),
        "cvar_beta": rc.risk_beta,
        "entropic": risk_mod.risk_saa(q, risk_mod.entropic_risk(max(rc.risk_beta, 1e-6)))[0],
        "penalty": risk_mod.penalty_eval(z, rc.penalty_alpha, problem.mesh.area)[0],
    }
    with open(out / "stats.json", "w") as fh:
        json.dump(stats, fh, indent=2, sort_keys=True)
        fh.write("\n")
    xcoords = problem.mesh.vertices[problem.bottom, 0]
    _write_csv(out / "flux_profile.csv",
               ["sample"] + [f"x={x:.6g}" for x in xcoords],
               [[i] + list(profiles[i]) for i in range(rc.n_mc)])
    return stats


def _median_time(fn, reps: int) -> float:
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def cmd_bench(rc: RunConfig, out_dir) -> dict:
    out = Path(out_dir)
    problem = config_mod.build_problem(rc)
    rbno = load_rbno(rc, out, problem)
    rng = _stage_rng(rc.seed, STAGE_BENCH, 0)
    m = prior_mod.sample_prior(problem.prior, rng)
    z, _ = sample_admissible_z(rng, problem, rc.z_min, rc.z_max)
    reps = rc.bench_reps

    state = forward.solve_state(problem, m, z)
    rhs = rng.standard_normal(problem.mesh.n_vertices)
    x_single = surrogate.latent_inputs(rbno, m, z)
    batch = 256
    ms_batch = prior_mod.sample_prior_batch(problem.prior, rng, batch)
    X_batch = surrogate.latent_inputs(rbno, ms_batch, z)

    t_state = _median_time(lambda: forward.solve_state(problem, m, z), reps)
    t_adj = _median_time(lambda: forward.solve_adjoint(state, rhs), reps)
    t_fwd = _median_time(lambda: nets.net_forward(rbno.net, x_single), reps)
    t_jac = _median_time(lambda: nets.forward_with_jacobian(rbno.net, x_single), reps)
    t_fwd_b = _median_time(lambda: nets.net_forward(rbno.net, X_batch), reps) / batch
    t_jac_b = _median_time(lambda: nets.forward_with_jacobian(rbno.net, X_batch), reps) / batch

    rows = [
        ["single", t_state, t_adj, t_fwd, t_jac, reps],
        [f"batched_{batch}", t_state, t_adj, t_fwd_b, t_jac_b, reps],
    ]
    _write_csv(out / "bench.csv",
               ["mode", "state_solve", "adjoint_solve", "surrogate_forward",
                "surrogate_jacobian", "repetitions"], rows)
    return {"rows": rows, "repetitions": reps}
