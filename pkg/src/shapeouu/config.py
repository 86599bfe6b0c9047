"""Flat key-value run configuration.

Grammar: lines of ``key = value`` grouped under ``[section]`` headers;
``#`` starts a comment.  Values parse as int, float, bool, or a
comma-separated list thereof; anything else stays a string.  One file
fully determines a pipeline run.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fem, forward, nets, prior as prior_mod, shape


def _parse_scalar(token: str):
    t = token.strip()
    low = t.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(t)
    except ValueError:
        pass
    try:
        return float(t)
    except ValueError:
        pass
    return t


def parse_config(text: str) -> dict:
    sections: dict[str, dict] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if not current:
                raise ValueError(f"line {lineno}: empty section name")
            sections.setdefault(current, {})
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        if current is None:
            raise ValueError(f"line {lineno}: key outside any [section]")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ValueError(f"line {lineno}: empty key")
        if "," in value:
            sections[current][key] = [_parse_scalar(v) for v in value.split(",")]
        else:
            sections[current][key] = _parse_scalar(value)
    return sections


@dataclass
class RunConfig:
    """Everything one pipeline run needs, with desk-scale defaults."""

    # mesh
    nx: int = 32
    ny: int = 8
    lx: float = 4.0
    ly: float = 1.0
    # prior
    gamma: float = 1.0
    delta: float = 25.0
    theta1: float = 2.0
    theta2: float = 0.5
    theta_angle_deg: float = 45.0
    # shape basis
    basis_kind: str = "fourier"
    n_z: int = 5
    bern_k: int = 4
    bern_l: int = 4
    bern_box: tuple = (0.0, 0.0, 1.0, 1.0)
    z_min: float = -0.2
    z_max: float = 0.2
    # problem
    source_amplitude: float = 0.1
    tau_target: float | list = 1.0
    # data generation
    n_samples: int = 64
    n_pod: int = 64
    n_as: int = 64
    # reduction
    r_u: int = 20
    r_m: int = 15
    # training
    widths: tuple = (128, 128)
    learning_rate: float = 5e-4
    milestones: tuple = ()
    decay: float = 0.5
    epochs: int = 200
    batch_size: int = 0
    alpha_d: float = 1.0
    validation_fraction: float = 0.1
    # optimization
    risk_kind: str = "mean"
    risk_beta: float = 0.95
    cvar_eps: float | None = None
    penalty_alpha: float = 0.001
    n_saa: int = 64
    backend: str = "pde"
    z0: tuple | None = None
    # evaluation
    n_mc: int = 128
    use_result: bool = True
    eval_z: tuple | None = None
    # bench
    bench_reps: int = 30
    # seeds
    seed: int = 0

    def validate(self):
        if self.basis_kind not in ("fourier", "bernstein_ffd"):
            raise ValueError(f"unknown basis kind {self.basis_kind!r}")
        if self.backend not in ("pde", "surrogate"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.risk_kind not in ("mean", "cvar", "entropic"):
            raise ValueError(f"unknown risk {self.risk_kind!r}")
        if not self.z_min < self.z_max:
            raise ValueError("shape box must satisfy z_min < z_max")
        if min(self.n_samples, self.n_pod, self.n_as, self.n_saa, self.n_mc) < 1:
            raise ValueError("sample counts must be positive")
        if self.n_pod > self.n_samples or self.n_as > self.n_samples:
            raise ValueError("n_pod and n_as must not exceed n_samples")
        if self.bench_reps < 30:
            raise ValueError("bench repetitions must be at least 30")
        return self


_SECTION_KEYS = {
    "mesh": {"nx": "nx", "ny": "ny", "lx": "lx", "ly": "ly"},
    "prior": {
        "gamma": "gamma", "delta": "delta", "theta1": "theta1",
        "theta2": "theta2", "theta_angle_deg": "theta_angle_deg",
    },
    "shape": {
        "kind": "basis_kind", "n_z": "n_z", "k": "bern_k", "l": "bern_l",
        "box": "bern_box", "z_min": "z_min", "z_max": "z_max",
    },
    "problem": {"source_amplitude": "source_amplitude", "tau_target": "tau_target"},
    "data": {"n_samples": "n_samples", "n_pod": "n_pod", "n_as": "n_as"},
    "reduce": {"r_u": "r_u", "r_m": "r_m"},
    "train": {
        "widths": "widths", "learning_rate": "learning_rate",
        "milestones": "milestones", "decay": "decay", "epochs": "epochs",
        "batch_size": "batch_size", "alpha_d": "alpha_d",
        "validation_fraction": "validation_fraction",
    },
    "optimize": {
        "risk": "risk_kind", "beta": "risk_beta", "cvar_eps": "cvar_eps",
        "alpha": "penalty_alpha", "n_saa": "n_saa", "backend": "backend",
        "z0": "z0",
    },
    "evaluate": {"n_mc": "n_mc", "use_result": "use_result", "z": "eval_z"},
    "bench": {"repetitions": "bench_reps"},
    "run": {"seed": "seed"},
}

_TUPLE_FIELDS = {"widths", "milestones", "bern_box", "z0", "eval_z", "tau_target"}


def config_from_sections(sections: dict) -> RunConfig:
    rc = RunConfig()
    for section, entries in sections.items():
        keymap = _SECTION_KEYS.get(section)
        if keymap is None:
            raise ValueError(f"unknown section [{section}]")
        for key, value in entries.items():
            attr = keymap.get(key)
            if attr is None:
                raise ValueError(f"unknown key {key!r} in section [{section}]")
            if attr in _TUPLE_FIELDS and isinstance(value, list):
                value = tuple(value)
            setattr(rc, attr, value)
    return rc.validate()


def load_config(path) -> RunConfig:
    return config_from_sections(parse_config(Path(path).read_text()))


# -- constructors ------------------------------------------------------------

def build_mesh(rc: RunConfig) -> fem.Mesh:
    return fem.build_rect_mesh(rc.nx, rc.ny, rc.lx, rc.ly)


def build_prior(rc: RunConfig, mesh: fem.Mesh):
    theta = prior_mod.anisotropy_matrix(
        rc.theta1, rc.theta2, np.deg2rad(rc.theta_angle_deg)
    )
    return prior_mod.build_prior(mesh, rc.gamma, rc.delta, theta)


def build_basis(rc: RunConfig):
    if rc.basis_kind == "fourier":
        return shape.fourier_basis(rc.n_z, rc.lx)
    return shape.bernstein_ffd_basis(rc.bern_k, rc.bern_l, tuple(rc.bern_box))


def build_problem(rc: RunConfig):
    mesh = build_mesh(rc)
    pr = build_prior(rc, mesh)
    basis = build_basis(rc)
    source = shape.sine_source(rc.source_amplitude)
    n_bottom = rc.nx + 1
    if isinstance(rc.tau_target, (int, float)):
        tau = np.full(n_bottom, float(rc.tau_target))
    else:
        tau = np.asarray(rc.tau_target, dtype=float)
    return forward.make_problem(mesh, pr, basis, source=source, tau_target=tau)


def train_config(rc: RunConfig, seed: int) -> nets.TrainConfig:
    return nets.TrainConfig(
        epochs=rc.epochs,
        learning_rate=rc.learning_rate,
        milestones=tuple(rc.milestones),
        decay=rc.decay,
        batch_size=rc.batch_size,
        alpha_d=float(rc.alpha_d),
        seed=seed,
        validation_fraction=rc.validation_fraction,
    )


def box_arrays(rc: RunConfig, d_z: int):
    return np.full(d_z, rc.z_min), np.full(d_z, rc.z_max)
