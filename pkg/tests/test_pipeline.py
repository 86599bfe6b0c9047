import csv
import json
from pathlib import Path

import numpy as np
import pytest

from shapeouu import arrays, cli, config as config_mod, nets, pipeline

TINY_CFG = """
[mesh]
nx = 6
ny = 3
lx = 4.0
ly = 1.0

[data]
n_samples = 16
n_pod = 16
n_as = 16

[reduce]
r_u = 6
r_m = 5

[train]
widths = 16, 16
learning_rate = 0.002
milestones = 40, 60
epochs = 80
batch_size = 8

[optimize]
risk = mean
alpha = 0.001
n_saa = 4
backend = pde

[evaluate]
n_mc = 8

[run]
seed = 7
"""


@pytest.fixture(scope="module")
def tiny_rc():
    return config_mod.config_from_sections(config_mod.parse_config(TINY_CFG))


@pytest.fixture(scope="module")
def run_dir(tiny_rc, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    pipeline.cmd_generate(tiny_rc, out)
    pipeline.cmd_reduce(tiny_rc, out)
    pipeline.cmd_train(tiny_rc, out)
    return out


def test_config_parser_values():
    sections = config_mod.parse_config("[a]\nx = 3\ny = 2.5\nflag = true\nname = pde\nlist = 1, 2\n")
    assert sections["a"] == {"x": 3, "y": 2.5, "flag": True, "name": "pde", "list": [1, 2]}


def test_config_parser_errors():
    with pytest.raises(ValueError):
        config_mod.parse_config("x = 1\n")  # key outside section
    with pytest.raises(ValueError):
        config_mod.parse_config("[a]\nnot a pair\n")
    with pytest.raises(ValueError):
        config_mod.config_from_sections({"bogus": {"x": 1}})
    with pytest.raises(ValueError):
        config_mod.config_from_sections({"mesh": {"bogus": 1}})


def test_paper_scale_train_config_accepted():
    sections = config_mod.parse_config(
        "[train]\nwidths = 512, 512, 512, 512\nlearning_rate = 0.0005\n"
        "milestones = 800, 1200, 1800\nepochs = 2000\n"
    )
    rc = config_mod.config_from_sections(sections)
    cfg = config_mod.train_config(rc, seed=0)
    assert cfg.milestones == (800, 1200, 1800)
    assert cfg.learning_rate == 5e-4


def test_array_roundtrip(tmp_path, rng):
    for arr in (rng.standard_normal(7), rng.standard_normal((3, 5))):
        path = tmp_path / "x.sdk1"
        arrays.write_array(path, arr)
        back = arrays.read_array(path)
        assert np.array_equal(back, arr)
    raw = (tmp_path / "x.sdk1").read_bytes()
    assert raw[:4] == b"SDK1"
    assert len(raw) == 16 + 15 * 8


def test_array_rejects_corruption(tmp_path, rng):
    path = tmp_path / "x.sdk1"
    arrays.write_array(path, rng.standard_normal((2, 2)))
    digest = arrays.sha256_of(path)
    blob = bytearray(path.read_bytes())
    blob[20] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(ValueError, match="digest"):
        arrays.verify_files(tmp_path, {"x.sdk1": digest})


def test_generate_outputs(tiny_rc, run_dir):
    manifest = arrays.read_manifest(run_dir / "manifest.json")
    assert manifest["pde_solves"] == 16
    assert manifest["rejections"] >= 0
    zs = arrays.read_array(run_dir / "z.sdk1")
    us = arrays.read_array(run_dir / "u.sdk1")
    assert zs.shape == (16, 11)
    assert us.shape == (16, 28)


def test_generate_deterministic(tiny_rc, run_dir, tmp_path):
    other = tmp_path / "again"
    pipeline.cmd_generate(tiny_rc, other)
    for name in ("z.sdk1", "m.sdk1", "u.sdk1"):
        assert (other / name).read_bytes() == (run_dir / name).read_bytes()


def test_reduce_counters_and_eigs(tiny_rc, run_dir):
    manifest = arrays.read_manifest(run_dir / "manifest.json")
    counters = manifest["reduce_counters"]
    assert counters["adjoint_solves"] == 16 * tiny_rc.r_u
    assert counters["factorizations"] == 16
    with open(run_dir / "pod_eigs.csv") as fh:
        eigs = [float(row["eigenvalue"]) for row in csv.DictReader(fh)]
    assert all(a >= b - 1e-14 for a, b in zip(eigs, eigs[1:]))


def test_reduce_rerun_idempotent(tiny_rc, run_dir, tmp_path):
    before = {name: (run_dir / name).read_bytes()
              for name in ("pod_basis.sdk1", "as_basis.sdk1", "m_r.sdk1",
                           "u_r.sdk1", "j_mr.sdk1", "j_zr.sdk1")}
    pipeline.cmd_reduce(tiny_rc, run_dir)
    for name, blob in before.items():
        assert (run_dir / name).read_bytes() == blob


def test_reduce_detects_corruption(tiny_rc, tmp_path):
    out = tmp_path / "corrupt"
    pipeline.cmd_generate(tiny_rc, out)
    blob = bytearray((out / "u.sdk1").read_bytes())
    blob[40] ^= 0x01
    (out / "u.sdk1").write_bytes(bytes(blob))
    with pytest.raises(ValueError, match="digest"):
        pipeline.cmd_reduce(tiny_rc, out)


def test_reduce_validates_ranks(tiny_rc, run_dir):
    import dataclasses
    bad = dataclasses.replace(tiny_rc, r_u=40)
    with pytest.raises(ValueError):
        pipeline.cmd_reduce(bad, run_dir)


def test_train_outputs(run_dir):
    with open(run_dir / "history.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 80
    ck = json.loads((run_dir / "checkpoint.json").read_text())
    assert ck["widths"] == [5 + 11, 16, 16, 6]
    params = arrays.read_array(run_dir / ck["params_file"])
    net = pipeline.unflatten_params(ck["widths"], params)
    assert net.n_params == params.size


def test_train_deterministic(tiny_rc, run_dir, tmp_path):
    other = tmp_path / "train_again"
    pipeline.cmd_generate(tiny_rc, other)
    pipeline.cmd_reduce(tiny_rc, other)
    pipeline.cmd_train(tiny_rc, other)
    assert (other / "net_params.sdk1").read_bytes() == (run_dir / "net_params.sdk1").read_bytes()
    assert (other / "history.csv").read_bytes() == (run_dir / "history.csv").read_bytes()


def test_train_replicates(tiny_rc, run_dir):
    pipeline.cmd_train(tiny_rc, run_dir, replicates=2)
    assert (run_dir / "checkpoint_r1.json").exists()
    with open(run_dir / "replicates.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2
    # replicate streams differ
    a = arrays.read_array(run_dir / "net_params.sdk1")
    b = arrays.read_array(run_dir / "net_params_r1.sdk1")
    assert not np.array_equal(a, b)


def test_alpha_toggle_leaves_data_alone(tiny_rc, run_dir):
    import dataclasses
    manifest_before = arrays.read_manifest(run_dir / "manifest.json")["files"]
    rc0 = dataclasses.replace(tiny_rc, alpha_d=0.0)
    pipeline.cmd_train(rc0, run_dir)
    manifest_after = arrays.read_manifest(run_dir / "manifest.json")["files"]
    for name in ("m_r.sdk1", "u_r.sdk1", "j_mr.sdk1", "j_zr.sdk1"):
        assert manifest_before[name] == manifest_after[name]
    # restore the derivative-informed checkpoint for downstream tests
    pipeline.cmd_train(tiny_rc, run_dir)


def test_optimize_pde_backend(tiny_rc, run_dir):
    result = pipeline.cmd_optimize(tiny_rc, run_dir)
    assert result["status"] in ("converged", "stalled", "max_iterations")
    assert result["pde_solves"] % tiny_rc.n_saa == 0
    assert result["pde_solves"] > 0
    z = np.asarray(result["z"])
    assert np.all(z >= tiny_rc.z_min - 1e-12) and np.all(z <= tiny_rc.z_max + 1e-12)
    with open(run_dir / "trace.csv") as fh:
        header = fh.readline().strip().split(",")
    assert header == ["iteration", "value", "proj_grad_norm", "step",
                      "active_bounds", "wall_time"]


def test_optimize_surrogate_no_pde_solves(tiny_rc, run_dir):
    import dataclasses
    rc = dataclasses.replace(tiny_rc, backend="surrogate", n_saa=64)
    result = pipeline.cmd_optimize(rc, run_dir)
    assert result["pde_solves"] == 0
    assert result["adjoint_solves"] == 0


def test_optimize_cvar_config_runs(tiny_rc, run_dir):
    import dataclasses
    rc = dataclasses.replace(tiny_rc, backend="surrogate", risk_kind="cvar",
                             risk_beta=0.95, n_saa=32)
    result = pipeline.cmd_optimize(rc, run_dir)
    assert result["t"] is not None
    assert np.isfinite(result["value"])


def test_evaluate_stats(tiny_rc, run_dir):
    pipeline.cmd_optimize(tiny_rc, run_dir)
    stats = pipeline.cmd_evaluate(tiny_rc, run_dir)
    assert stats["n_mc"] == 8
    assert stats["empirical_cvar"] >= stats["mean"] - 1e-12
    again = pipeline.cmd_evaluate(tiny_rc, run_dir)
    assert stats == again
    with open(run_dir / "flux_profile.csv") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 1 + 8
    assert len(rows[0]) == 1 + 7  # sample column + bottom nodes


def test_evaluate_near_constant_qoi(tmp_path):
    # huge reaction coefficient freezes the parameter at (almost) zero, so
    # the perfectly tracked flux has (almost) zero variance
    text = TINY_CFG + "\n[prior]\ndelta = 100000000.0\n[problem]\nsource_amplitude = 0.0\n"
    rc = config_mod.config_from_sections(config_mod.parse_config(text))
    import dataclasses
    rc = dataclasses.replace(rc, eval_z=tuple(0.0 for _ in range(11)), n_mc=6)
    out = tmp_path / "const"
    stats = pipeline.cmd_evaluate(rc, out)
    assert stats["mean"] < 1e-10
    assert stats["variance"] < 1e-12


def test_bench_csv(tiny_rc, run_dir):
    pipeline.cmd_bench(tiny_rc, run_dir)
    with open(run_dir / "bench.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2
    for col in ("state_solve", "adjoint_solve", "surrogate_forward", "surrogate_jacobian"):
        assert col in rows[0]
    assert int(rows[0]["repetitions"]) >= 30
    assert float(rows[0]["surrogate_forward"]) < float(rows[0]["state_solve"])


def test_cli_roundtrip(tiny_rc, tmp_path):
    cfg_path = tmp_path / "run.cfg"
    cfg_path.write_text(TINY_CFG)
    out = tmp_path / "cliout"
    for cmd in ("generate", "reduce", "train", "optimize", "evaluate"):
        code = cli.main([cmd, "--config", str(cfg_path), "--out", str(out)])
        assert code == 0
    code = cli.main(["export", str(out / "pod_eigs.sdk1")])
    assert code == 0
    assert (out / "pod_eigs.export.csv").exists()


def test_cli_bad_config_exit_code(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("[mesh]\nnx = -3\n")
    assert cli.main(["generate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    cfg2 = tmp_path / "bad2.cfg"
    cfg2.write_text("[bogus]\nx = 1\n")
    assert cli.main(["generate", "--config", str(cfg2), "--out", str(tmp_path / "o")]) == 2


def test_cli_inadmissible_exit_code(tmp_path):
    cfg = tmp_path / "inadmissible.cfg"
    cfg.write_text(TINY_CFG + "\n[evaluate]\nz = -0.99, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0\n")
    out = tmp_path / "o"
    assert cli.main(["evaluate", "--config", str(cfg), "--out", str(out)]) == 4


def test_cli_seed_override(tiny_rc, tmp_path):
    cfg_path = tmp_path / "run.cfg"
    cfg_path.write_text(TINY_CFG)
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert cli.main(["generate", "--config", str(cfg_path), "--out", str(out1)]) == 0
    assert cli.main(["generate", "--config", str(cfg_path), "--seed", "99",
                     "--out", str(out2)]) == 0
    assert (out1 / "z.sdk1").read_bytes() != (out2 / "z.sdk1").read_bytes()
