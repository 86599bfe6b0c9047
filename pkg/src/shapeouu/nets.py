"""Dense GELU latent networks with exact input Jacobians and training.

The network maps concatenated latent inputs (m coordinates, shape
coefficients) to state coordinates.  Input Jacobians are propagated in
closed form layer by layer, and the training loss may penalize Jacobian
mismatch; its parameter gradient differentiates the exact Jacobian
expression (forward-over-reverse), never finite differences.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

log = logging.getLogger(__name__)

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

#: Floor applied to per-sample normalization denominators in the loss.
DENOM_FLOOR = 1e-12


def _gauss_pdf(x):
    return _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def gelu(x):
    """GELU value and first derivative, using the exact Gaussian CDF."""
    x = np.asarray(x, dtype=float)
    cdf = ndtr(x)
    return x * cdf, cdf + x * _gauss_pdf(x)


def _gelu_all(x):
    # value, first, and second derivative (needed for Jacobian backprop)
    cdf = ndtr(x)
    pdf = _gauss_pdf(x)
    return x * cdf, cdf + x * pdf, pdf * (2.0 - x * x)


@dataclass
class LatentNet:
    """Feedforward net: GELU hidden layers, affine output."""

    weights: list
    biases: list

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def n_hidden(self) -> int:
        return len(self.weights) - 1

    @property
    def n_params(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def copy(self) -> "LatentNet":
        return LatentNet([w.copy() for w in self.weights], [b.copy() for b in self.biases])


def init_net(widths: list[int], rng: np.random.Generator) -> LatentNet:
    """Uniform fan-in initialization, deterministic given the generator."""
    if len(widths) < 2:
        raise ValueError("need at least input and output widths")
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return LatentNet(weights, biases)


def zero_net(widths: list[int]) -> LatentNet:
    weights = [np.zeros((o, i)) for i, o in zip(widths[:-1], widths[1:])]
    biases = [np.zeros(o) for o in widths[1:]]
    return LatentNet(weights, biases)


def _as_batch(x):
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    return (x[None, :] if squeeze else x), squeeze


def net_forward(net: LatentNet, x: np.ndarray) -> np.ndarray:
    """Evaluate the layer recursion; accepts (n_in,) or (B, n_in)."""
    a, squeeze = _as_batch(x)
    for W, b in zip(net.weights[:-1], net.biases[:-1]):
        a = gelu(a @ W.T + b)[0]
    y = a @ net.weights[-1].T + net.biases[-1]
    return y[0] if squeeze else y


def forward_with_jacobian(net: LatentNet, x: np.ndarray):
    """Outputs and exact input Jacobians; accepts (n_in,) or (B, n_in).

    Returns (y, J) with J of shape (B, n_out, n_in).
    """
    a, squeeze = _as_batch(x)
    B, n_in = a.shape
    G = np.broadcast_to(np.eye(n_in), (B, n_in, n_in)).copy()
    for W, b in zip(net.weights[:-1], net.biases[:-1]):
        s = a @ W.T + b
        a, d1 = gelu(s)
        G = d1[:, :, None] * np.matmul(W, G)
    W_out = net.weights[-1]
    y = a @ W_out.T + net.biases[-1]
    J = np.matmul(W_out, G)
    if squeeze:
        return y[0], J[0]
    return y, J


def net_jacobian(net: LatentNet, m_r: np.ndarray, z: np.ndarray):
    """Input Jacobian split by argument block: (D1 g, D2 g)."""
    m_r = np.asarray(m_r, dtype=float)
    z = np.asarray(z, dtype=float)
    _, J = forward_with_jacobian(net, np.concatenate([m_r, z]))
    return J[:, : m_r.size], J[:, m_r.size:]


@dataclass
class TrainingDataset:
    """Latent-space training records with a train/validation split."""

    m_r: np.ndarray
    z: np.ndarray
    u_r: np.ndarray
    J_m: np.ndarray
    J_z: np.ndarray
    train_idx: np.ndarray
    val_idx: np.ndarray

    def __post_init__(self):
        n = self.m_r.shape[0]
        shapes_ok = (
            self.z.shape[0] == n and self.u_r.shape[0] == n
            and self.J_m.shape == (n, self.u_r.shape[1], self.m_r.shape[1])
            and self.J_z.shape == (n, self.u_r.shape[1], self.z.shape[1])
        )
        if not shapes_ok:
            raise ValueError("dataset arrays have inconsistent shapes")
        if np.intersect1d(self.train_idx, self.val_idx).size:
            raise ValueError("train and validation splits overlap")

    @property
    def n_samples(self) -> int:
        return self.m_r.shape[0]

    def subset(self, idx):
        return (self.m_r[idx], self.z[idx], self.u_r[idx], self.J_m[idx], self.J_z[idx])


def make_dataset(m_r, z, u_r, J_m, J_z, rng: np.random.Generator,
                 validation_fraction: float = 0.1) -> TrainingDataset:
    n = m_r.shape[0]
    perm = rng.permutation(n)
    n_val = max(1, int(round(validation_fraction * n))) if n > 1 else 0
    return TrainingDataset(
        m_r=np.asarray(m_r, dtype=float), z=np.asarray(z, dtype=float),
        u_r=np.asarray(u_r, dtype=float), J_m=np.asarray(J_m, dtype=float),
        J_z=np.asarray(J_z, dtype=float),
        train_idx=np.sort(perm[n_val:]), val_idx=np.sort(perm[:n_val]),
    )


@dataclass(frozen=True)
class TrainConfig:
    """Adam training schedule; the seed governs init, split, and batching."""

    epochs: int
    learning_rate: float
    milestones: tuple = ()
    decay: float = 0.5
    batch_size: int = 0  # 0 means full batch
    alpha_d: float = 1.0
    seed: int = 0
    validation_fraction: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    chunk_size: int = 64

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        ms = tuple(self.milestones)
        if any(m2 <= m1 for m1, m2 in zip(ms, ms[1:])) or any(
            m >= self.epochs or m < 1 for m in ms
        ):
            raise ValueError("milestones must be strictly increasing and < epochs")
        if not (0.0 < self.decay <= 1.0):
            raise ValueError("decay must lie in (0, 1]")
        if self.alpha_d not in (0.0, 1.0):
            raise ValueError("alpha_d must be 0 or 1")


def _denominators(u_r, J_m, J_z):
    d_u = np.sum(u_r * u_r, axis=1)
    d_m = np.sum(J_m * J_m, axis=(1, 2))
    d_z = np.sum(J_z * J_z, axis=(1, 2))
    for name, d in (("state", d_u), ("J_m", d_m), ("J_z", d_z)):
        if np.any(d < DENOM_FLOOR):
            log.warning("flooring %d zero-norm %s denominators at %.1e",
                        int((d < DENOM_FLOOR).sum()), name, DENOM_FLOOR)
    return (np.maximum(d_u, DENOM_FLOOR), np.maximum(d_m, DENOM_FLOOR),
            np.maximum(d_z, DENOM_FLOOR))


def _loss_grad_chunk(net: LatentNet, m_r, z, u_r, J_m, J_z, alpha_d, grads):
    """Accumulate the normalized loss and its parameter gradient for a chunk.

    Returns the three loss terms (state, J_m, J_z) summed over the chunk.
    """
    X = np.concatenate([m_r, z], axis=1)
    B = X.shape[0]
    r_m = m_r.shape[1]
    d_u, d_m, d_z = _denominators(u_r, J_m, J_z)
    need_jac = alpha_d != 0.0

    # Forward pass, retaining per-layer caches.  G_in[i] is the input
    # Jacobian entering hidden layer i (G_in[0] = identity).
    a_list, d1_list, d2_list = [X], [], []
    H_list, G_in = [], []
    a = X
    G = np.broadcast_to(np.eye(X.shape[1]), (B, X.shape[1], X.shape[1])) if need_jac else None
    for W, b in zip(net.weights[:-1], net.biases[:-1]):
        s = a @ W.T + b
        v, d1, d2 = _gelu_all(s)
        d1_list.append(d1)
        d2_list.append(d2)
        a = v
        a_list.append(a)
        if need_jac:
            G_in.append(G)
            H = np.matmul(W, G)
            H_list.append(H)
            G = d1[:, :, None] * H
    W_out, b_out = net.weights[-1], net.biases[-1]
    y = a @ W_out.T + b_out

    ry = y - u_r
    term_u = float(np.sum(np.sum(ry * ry, axis=1) / d_u))
    y_bar = 2.0 * ry / d_u[:, None]

    term_m = term_z = 0.0
    J_bar = None
    if need_jac:
        J = np.matmul(W_out, G)
        rm_res = J[:, :, :r_m] - J_m
        rz_res = J[:, :, r_m:] - J_z
        term_m = float(np.sum(np.sum(rm_res * rm_res, axis=(1, 2)) / d_m))
        term_z = float(np.sum(np.sum(rz_res * rz_res, axis=(1, 2)) / d_z))
        J_bar = np.empty_like(J)
        J_bar[:, :, :r_m] = 2.0 * alpha_d * rm_res / d_m[:, None, None]
        J_bar[:, :, r_m:] = 2.0 * alpha_d * rz_res / d_z[:, None, None]

    # Reverse pass.
    gW, gb = grads
    gW[-1] += y_bar.T @ a_list[-1]
    gb[-1] += y_bar.sum(axis=0)
    a_bar = y_bar @ W_out
    G_bar = None
    if need_jac:
        gW[-1] += np.tensordot(J_bar, G, axes=([0, 2], [0, 2]))
        G_bar = np.matmul(W_out.T, J_bar)
    for i in range(net.n_hidden - 1, -1, -1):
        W = net.weights[i]
        d1, d2 = d1_list[i], d2_list[i]
        s_bar = d1 * a_bar
        if need_jac:
            H_bar = d1[:, :, None] * G_bar
            s_bar = s_bar + d2 * np.sum(G_bar * H_list[i], axis=2)
        gW[i] += s_bar.T @ a_list[i]
        gb[i] += s_bar.sum(axis=0)
        a_bar = s_bar @ W
        if need_jac:
            gW[i] += np.tensordot(H_bar, G_in[i], axes=([0, 2], [0, 2]))
            G_bar = np.matmul(W.T, H_bar)
    return term_u, term_m, term_z


def h1_loss(net: LatentNet, batch, alpha_d: float, chunk_size: int = 64):
    """Normalized loss over a batch and its exact parameter gradient.

    ``batch`` is (m_r, z, u_r, J_m, J_z) with leading sample dimension.
    Returns (loss, (weight_grads, bias_grads), terms) where terms are the
    summed state / J_m / J_z contributions.
    """
    m_r, z, u_r, J_m, J_z = (np.asarray(a, dtype=float) for a in batch)
    if m_r.shape[0] == 0:
        raise ValueError("empty batch")
    gW = [np.zeros_like(w) for w in net.weights]
    gb = [np.zeros_like(b) for b in net.biases]
    terms = np.zeros(3)
    for start in range(0, m_r.shape[0], chunk_size):
        sl = slice(start, start + chunk_size)
        terms += _loss_grad_chunk(
            net, m_r[sl], z[sl], u_r[sl], J_m[sl], J_z[sl], alpha_d, (gW, gb)
        )
    loss = terms[0] + alpha_d * (terms[1] + terms[2])
    return loss, (gW, gb), terms


def loss_only(net: LatentNet, batch, alpha_d: float) -> float:
    m_r, z, u_r, J_m, J_z = (np.asarray(a, dtype=float) for a in batch)
    d_u, d_m, d_z = _denominators(u_r, J_m, J_z)
    X = np.concatenate([m_r, z], axis=1)
    if alpha_d == 0.0:
        y = net_forward(net, X)
        ry = y - u_r
        return float(np.sum(np.sum(ry * ry, axis=1) / d_u))
    y, J = forward_with_jacobian(net, X)
    r_m = m_r.shape[1]
    ry = y - u_r
    loss = float(np.sum(np.sum(ry * ry, axis=1) / d_u))
    rm_res = J[:, :, :r_m] - J_m
    rz_res = J[:, :, r_m:] - J_z
    loss += alpha_d * float(np.sum(np.sum(rm_res * rm_res, axis=(1, 2)) / d_m))
    loss += alpha_d * float(np.sum(np.sum(rz_res * rz_res, axis=(1, 2)) / d_z))
    return loss


@dataclass
class _AdamState:
    m: list
    v: list
    t: int = 0


def train(net: LatentNet, dataset: TrainingDataset, config: TrainConfig,
          rng: np.random.Generator | None = None):
    """Adam with milestone learning-rate decay; returns the best-validation net.

    Deterministic for a fixed seed and dataset in the default single-threaded
    mode.  History rows carry per-epoch learning rate and split losses.
    """
    if dataset.n_samples == 0 or dataset.train_idx.size == 0:
        raise ValueError("dataset has no training samples")
    rng = np.random.default_rng(config.seed) if rng is None else rng
    net = net.copy()
    adam = _AdamState(
        m=[np.zeros_like(w) for w in net.weights] + [np.zeros_like(b) for b in net.biases],
        v=[np.zeros_like(w) for w in net.weights] + [np.zeros_like(b) for b in net.biases],
    )
    params = net.weights + net.biases
    train_data = dataset.subset(dataset.train_idx)
    val_data = dataset.subset(dataset.val_idx) if dataset.val_idx.size else None
    n_train = dataset.train_idx.size
    batch_size = config.batch_size if config.batch_size and config.batch_size < n_train else n_train

    lr = config.learning_rate
    history = []
    best_val = np.inf
    best_params = [p.copy() for p in params]

    for epoch in range(1, config.epochs + 1):
        if epoch in config.milestones:
            lr *= config.decay
        order = rng.permutation(n_train) if batch_size < n_train else np.arange(n_train)
        epoch_loss = 0.0
        epoch_terms = np.zeros(3)
        for start in range(0, n_train, batch_size):
            idx = order[start:start + batch_size]
            batch = tuple(a[idx] for a in train_data)
            loss, (gW, gb), terms = h1_loss(net, batch, config.alpha_d, config.chunk_size)
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"non-finite training loss at epoch {epoch}, "
                    f"batch offset {start}, lr {lr:.3e}"
                )
            epoch_loss += loss
            epoch_terms += terms
            adam.t += 1
            bc1 = 1.0 - config.beta1 ** adam.t
            bc2 = 1.0 - config.beta2 ** adam.t
            for p, g, m_, v_ in zip(params, gW + gb, adam.m, adam.v):
                m_ *= config.beta1
                m_ += (1.0 - config.beta1) * g
                v_ *= config.beta2
                v_ += (1.0 - config.beta2) * g * g
                p -= lr * (m_ / bc1) / (np.sqrt(v_ / bc2) + config.eps)

        val_loss = loss_only(net, val_data, config.alpha_d) if val_data else np.nan
        if val_data and val_loss < best_val:
            best_val = val_loss
            best_params = [p.copy() for p in params]
        history.append({
            "epoch": epoch, "lr": lr, "train_loss": epoch_loss,
            "val_loss": val_loss, "state_term": epoch_terms[0],
            "jm_term": epoch_terms[1], "jz_term": epoch_terms[2],
        })

    if val_data:
        k = len(net.weights)
        best = LatentNet([p.copy() for p in best_params[:k]],
                         [p.copy() for p in best_params[k:]])
    else:
        best = net
    return best, history
