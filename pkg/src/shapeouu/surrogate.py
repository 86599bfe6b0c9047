"""Reduced-basis neural surrogate: affine encode, latent net, affine decode."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nets, reduction
from .nets import LatentNet
from .reduction import AsBasis, PodBasis


@dataclass(frozen=True)
class Rbno:
    """Trained surrogate bundling the two reduced bases and the latent net."""

    pod: PodBasis
    as_basis: AsBasis
    net: LatentNet

    def __post_init__(self):
        r_m = self.as_basis.rank
        if self.net.widths[0] <= r_m:
            raise ValueError("net input width must exceed the parameter rank")
        if self.net.widths[-1] != self.pod.rank:
            raise ValueError("net output width must equal the state rank")

    @property
    def d_z(self) -> int:
        return self.net.widths[0] - self.as_basis.rank


def latent_inputs(rbno: Rbno, m: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Concatenated latent inputs for fields m of shape (d,) or (B, d)."""
    m_r = reduction.encode_param(rbno.as_basis, m)
    z = np.asarray(z, dtype=float)
    if m_r.ndim == 1:
        return np.concatenate([m_r, z])
    return np.concatenate([m_r, np.broadcast_to(z, (m_r.shape[0], z.size))], axis=1)


def rbno_predict(rbno: Rbno, m: np.ndarray, z: np.ndarray, with_dz: bool = False):
    """Predicted state field, optionally with its shape-derivative columns.

    The prediction lies in the affine span of the state basis; the derivative
    columns are the decoded latent Jacobian block for z.
    """
    x = latent_inputs(rbno, m, z)
    if not with_dz:
        coords = nets.net_forward(rbno.net, x)
        return reduction.decode_state(rbno.pod, coords)
    coords, J = nets.forward_with_jacobian(rbno.net, x)
    u = reduction.decode_state(rbno.pod, coords)
    d2 = J[..., rbno.as_basis.rank:]
    dz_cols = rbno.pod.basis @ d2  # (d_u, d_z) or batched
    return u, dz_cols


def latent_batch(rbno: Rbno, ms: np.ndarray, z: np.ndarray, with_jacobian: bool = False):
    """Latent outputs (and optionally the z-block Jacobians) for many samples."""
    X = latent_inputs(rbno, ms, z)
    if not with_jacobian:
        return nets.net_forward(rbno.net, X), None
    coords, J = nets.forward_with_jacobian(rbno.net, X)
    return coords, J[:, :, rbno.as_basis.rank:]


def test_errors(rbno: Rbno, m: np.ndarray, z: np.ndarray, u_true: np.ndarray,
                J_m_true: np.ndarray, J_z_true: np.ndarray):
    """Mean relative errors over a test set.

    State error is full order in the mass norm against the PDE fields;
    Jacobian errors are relative Frobenius in the reduced coordinates.
    Returns (state_err, jm_err, jz_err).
    """
    m = np.asarray(m, dtype=float)
    B = m.shape[0]
    mass = rbno.pod.mass
    state_errs = np.empty(B)
    jm_errs = np.empty(B)
    jz_errs = np.empty(B)
    for i in range(B):
        x = latent_inputs(rbno, m[i], z[i])
        coords, J = nets.forward_with_jacobian(rbno.net, x)
        u_pred = reduction.decode_state(rbno.pod, coords)
        diff = u_pred - u_true[i]
        num = np.sqrt(diff @ (mass @ diff))
        den = np.sqrt(u_true[i] @ (mass @ u_true[i]))
        state_errs[i] = num / den
        r_m = rbno.as_basis.rank
        jm_errs[i] = np.linalg.norm(J[:, :r_m] - J_m_true[i]) / np.linalg.norm(J_m_true[i])
        jz_errs[i] = np.linalg.norm(J[:, r_m:] - J_z_true[i]) / np.linalg.norm(J_z_true[i])
    return float(state_errs.mean()), float(jm_errs.mean()), float(jz_errs.mean())
