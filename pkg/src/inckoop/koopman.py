"""Koopman model ``(g, A, B)``: discounted k-step loss, training, EDMD, IKPM files."""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import embedding as emb
from .dataset import Dataset, Normalizer, Segment
from .embedding import EmbeddingNet
from .errors import (BadDims, FormatError, NonFinitePrediction, ShapeMismatch, SingularGram,
                     TrainFailed)

SINGULAR_EIG = 1e-12


@dataclass(eq=False)
class KoopmanModel:
    """Lifted linear model. States fed to it are in the normalized frame."""

    net: EmbeddingNet
    A: np.ndarray
    B: np.ndarray
    normalizer: Normalizer
    history: list = field(default_factory=list)

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.B = np.asarray(self.B, dtype=float)
        n = self.net.latent_dim
        if self.A.shape != (n, n) or self.B.ndim != 2 or self.B.shape[0] != n:
            raise ShapeMismatch(f"A {self.A.shape} / B {self.B.shape} do not match latent dim {n}")
        if self.normalizer.dim != self.net.input_dim:
            raise ShapeMismatch("normalizer dimension does not match n'")

    @property
    def state_dim(self) -> int:
        return self.net.input_dim

    @property
    def control_dim(self) -> int:
        return self.B.shape[1]

    @property
    def latent_dim(self) -> int:
        return self.net.latent_dim

    def lift(self, X) -> np.ndarray:
        """``g`` applied rowwise to normalized states."""
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            return emb.forward(self.net, X[None])[0]
        return emb.forward(self.net, X)

    def __eq__(self, other):
        return (isinstance(other, KoopmanModel) and self.net == other.net
                and np.array_equal(self.A, other.A) and np.array_equal(self.B, other.B)
                and self.normalizer == other.normalizer)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    lr0: float = 1e-3
    gamma: float = 0.99
    alpha: float = 0.1
    seed: int = 0
    hidden_dim: int = 64
    n_blocks: int = 2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    collapse_ratio: float = 10.0

    def validate(self):
        if self.epochs < 1:
            raise BadDims(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1 or self.hidden_dim < 1 or self.n_blocks < 0:
            raise BadDims("batch_size, hidden_dim must be >= 1 and n_blocks >= 0")
        if not 0 < self.gamma <= 1 or self.alpha < 0 or self.lr0 <= 0:
            raise BadDims("need 0 < gamma <= 1, alpha >= 0, lr0 > 0")
        return self


@dataclass
class LossBreakdown:
    total: float
    linear_part: float
    recon_part: float
    linear_terms: np.ndarray
    recon_terms: np.ndarray


def initial_dynamics(n_in: int, n: int, m: int):
    A = np.eye(n)
    A[n_in:, n_in:] *= 0.99
    return A, np.zeros((n, m))


# ---------------------------------------------------------------------------
# rollouts


def latent_rollout(model: KoopmanModel, x0, controls) -> np.ndarray:
    """``(H+1, n)`` latent trajectory from a normalized ``x0``."""
    controls = np.asarray(controls, dtype=float).reshape(-1, model.control_dim)
    Z = np.empty((controls.shape[0] + 1, model.latent_dim))
    Z[0] = model.lift(np.asarray(x0, dtype=float))
    with np.errstate(over="ignore", invalid="ignore"):
        for h, u in enumerate(controls):
            Z[h + 1] = model.A @ Z[h] + model.B @ u
    if not np.all(np.isfinite(Z)):
        raise NonFinitePrediction("latent rollout diverged (unstable A?)")
    return Z


def predict_states(model: KoopmanModel, x0, controls, denormalize: bool = False) -> np.ndarray:
    """Retrieved states ``P z_h``; ``x0`` is normalized, output optionally in plant units."""
    X = latent_rollout(model, x0, controls)[:, :model.state_dim]
    return model.normalizer.invert(X) if denormalize else X


def batch_predict(model: KoopmanModel, X0, U) -> np.ndarray:
    """Vectorised :func:`predict_states` for ``X0 (N, n')`` and ``U (N, H, m')``."""
    z = model.lift(np.asarray(X0, dtype=float))
    out = [z[:, :model.state_dim]]
    with np.errstate(over="ignore", invalid="ignore"):
        for h in range(U.shape[1]):
            z = z @ model.A.T + U[:, h] @ model.B.T
            out.append(z[:, :model.state_dim])
    out = np.stack(out, axis=1)
    if not np.all(np.isfinite(out)):
        raise NonFinitePrediction("latent rollout diverged (unstable A?)")
    return out


# ---------------------------------------------------------------------------
# loss and its gradient


def _loss_terms(net, A, B, X, U, gamma, alpha, need_grad):
    """Mean discounted k-step loss over a batch plus (optionally) all gradients.

    ``X`` is ``(N, H+1, n')`` normalized states and ``U`` is ``(N, H, m')``.
    Gradients flow into the targets ``g(x_h)`` as well as the rollout.
    """
    N, H1, n_in = X.shape
    H = H1 - 1
    n = A.shape[0]
    flat = X.reshape(-1, n_in)
    if need_grad:
        Zt, cache = emb.forward(net, flat, cache=True)
    else:
        Zt = emb.forward(net, flat)
    Zt = Zt.reshape(N, H1, n)
    zh = np.empty_like(Zt)
    zh[:, 0] = Zt[:, 0]
    for h in range(H):
        zh[:, h + 1] = zh[:, h] @ A.T + U[:, h] @ B.T
    E = zh - Zt
    # P z_h - x_h equals the first n' entries of E because g keeps x verbatim
    lin = np.einsum("bhi,bhi->bh", E[:, 1:], E[:, 1:])
    rec = np.einsum("bhi,bhi->bh", E[:, 1:, :n_in], E[:, 1:, :n_in])
    disc = gamma ** np.arange(1, H + 1)
    w = disc / (H * N)
    lin_h = lin.sum(axis=0) / N
    rec_h = rec.sum(axis=0) / N
    lin_part = float(np.dot(disc, lin_h) / H)
    rec_part = float(np.dot(disc, rec_h) / H)
    total = lin_part + alpha * rec_part
    if not need_grad:
        return total, lin_part, rec_part, lin_h, rec_h, None

    Eh = E[:, 1:]
    g_direct = 2.0 * w[None, :, None] * Eh
    g_direct[:, :, :n_in] *= 1.0 + alpha
    dZt = np.zeros_like(Zt)
    dZt[:, 1:] = -2.0 * w[None, :, None] * Eh
    dA = np.zeros_like(A)
    dB = np.zeros_like(B)
    lam = np.zeros((N, n))
    for h in range(H, 0, -1):
        lam = lam + g_direct[:, h - 1]
        dA += lam.T @ zh[:, h - 1]
        dB += lam.T @ U[:, h - 1]
        lam = lam @ A
    dZt[:, 0] += lam
    gb = emb.backward(net, cache, dZt.reshape(-1, n))
    grads = dict(gb.params)
    grads["A"] = dA
    grads["B"] = dB
    return total, lin_part, rec_part, lin_h, rec_h, grads


def loss_and_grad(net, A, B, X, U, gamma=0.99, alpha=0.1):
    """Batch loss and gradient dict keyed by net parameter names plus ``A``, ``B``."""
    X = np.asarray(X, dtype=float)
    U = np.asarray(U, dtype=float)
    total, *_, grads = _loss_terms(net, A, B, X, U, gamma, alpha, True)
    return total, grads


def batch_loss(net, A, B, X, U, gamma=0.99, alpha=0.1) -> float:
    return _loss_terms(net, A, B, np.asarray(X, float), np.asarray(U, float),
                       gamma, alpha, False)[0]


def koopman_loss(model: KoopmanModel, segment: Segment, cfg: TrainConfig,
                 horizon: int | None = None) -> LossBreakdown:
    """Loss of one segment; segment states are in plant units and get normalized here."""
    if horizon is not None and segment.length != horizon:
        raise ShapeMismatch(f"segment length {segment.length} != horizon {horizon}")
    if segment.states.shape[1] != model.state_dim or segment.controls.shape[1] != model.control_dim:
        raise ShapeMismatch("segment dimensions do not match the model")
    X = model.normalizer.apply(segment.states)[None]
    U = segment.controls[None]
    total, lin, rec, lin_h, rec_h, _ = _loss_terms(model.net, model.A, model.B, X, U,
                                                   cfg.gamma, cfg.alpha, False)
    return LossBreakdown(total, lin, rec, lin_h, rec_h)


# ---------------------------------------------------------------------------
# training


class Adam:
    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in params.items():
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            p -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def cosine_lr(lr0: float, epoch: int, epochs: int) -> float:
    return lr0 * (1.0 + math.cos(math.pi * epoch / epochs)) / 2.0


def train_koopman(n: int, dataset: Dataset, cfg: TrainConfig, callback=None) -> KoopmanModel:
    """Fit a fresh ``(g, A, B)`` with latent dimension ``n`` on ``dataset``.

    Raises :class:`TrainFailed` on a non-finite batch loss or when the last
    epoch's mean loss exceeds ``collapse_ratio`` times the first epoch's.
    """
    cfg.validate()
    if len(dataset) == 0:
        raise BadDims("cannot train on an empty dataset")
    n_in, m = dataset.state_dim, dataset.control_dim
    if n < n_in:
        raise BadDims(f"latent dim {n} < state dim {n_in}")
    net = emb.init_net(n_in, n, cfg.hidden_dim, cfg.n_blocks, [cfg.seed, 0])
    A, B = initial_dynamics(n_in, n, m)
    params = dict(net.params)
    params["A"] = A
    params["B"] = B
    opt = Adam(params, cfg.beta1, cfg.beta2, cfg.adam_eps)
    rng = np.random.default_rng([cfg.seed, 1])

    S, U = dataset.stacked()
    X = dataset.normalizer.apply(S)
    N = X.shape[0]
    history = []
    for epoch in range(cfg.epochs):
        lr = cosine_lr(cfg.lr0, epoch, cfg.epochs)
        order = rng.permutation(N)
        total = 0.0
        for start in range(0, N, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            with np.errstate(all="ignore"):
                loss, grads = loss_and_grad(net, A, B, X[idx], U[idx], cfg.gamma, cfg.alpha)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainFailed(f"non-finite loss at epoch {epoch}", epoch=epoch,
                                  losses=history)
            opt.step(params, grads, lr)
            total += loss * len(idx)
        history.append(total / N)
        if callback is not None:
            callback(epoch, history[-1])
    if history[-1] > cfg.collapse_ratio * history[0]:
        raise TrainFailed(f"loss regressed from {history[0]:.3g} to {history[-1]:.3g}",
                          epoch=cfg.epochs - 1, losses=history)
    return KoopmanModel(net, A, B, dataset.normalizer, history)


# ---------------------------------------------------------------------------
# EDMD


@dataclass
class EdmdResult:
    K: np.ndarray
    G: np.ndarray
    C: np.ndarray
    min_eig_G: float


def edmd_fit(Z, Zplus, ridge: float = 1e-10) -> EdmdResult:
    """Least-squares Koopman matrix with ``K z_i ~ z_i^+`` for row samples."""
    Z = np.asarray(Z, dtype=float)
    Zplus = np.asarray(Zplus, dtype=float)
    if Z.ndim != 2 or Z.shape != Zplus.shape or Z.shape[0] < 1:
        raise ShapeMismatch(f"Z {Z.shape} and Z+ {Zplus.shape} must be matching (m, n) arrays")
    if ridge < 0:
        raise BadDims("ridge must be >= 0")
    m, n = Z.shape
    G = Z.T @ Z / m
    G = 0.5 * (G + G.T) + ridge * np.eye(n)
    C = Zplus.T @ Z / m
    min_eig = float(np.linalg.eigvalsh(G)[0])
    if ridge == 0 and min_eig < SINGULAR_EIG:
        raise SingularGram(f"Gram matrix is singular (min eigenvalue {min_eig:.3g}, m={m})",
                           min_eig=min_eig, m=m)
    # K G = C  <=>  G K^T = C^T since G is symmetric
    K = np.linalg.solve(G, C.T).T
    return EdmdResult(K, G, C, min_eig)


# ---------------------------------------------------------------------------
# IKPM persistence

IKPM_MAGIC = b"IKPM"
IKPM_VERSION = 1
_HEAD = struct.Struct("<4sIIIIII")


def model_to_bytes(model: KoopmanModel) -> bytes:
    net = model.net
    parts = [_HEAD.pack(IKPM_MAGIC, IKPM_VERSION, net.input_dim, model.control_dim,
                        net.latent_dim, net.hidden_dim, net.n_blocks),
             np.ascontiguousarray(model.normalizer.mean, "<f8").tobytes(),
             np.ascontiguousarray(model.normalizer.std, "<f8").tobytes()]
    for p in net.params.values():
        parts.append(np.ascontiguousarray(p, "<f8").tobytes())
    parts.append(np.ascontiguousarray(model.A, "<f8").tobytes())
    parts.append(np.ascontiguousarray(model.B, "<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def model_from_bytes(buf: bytes) -> KoopmanModel:
    if len(buf) < 4 or buf[:4] != IKPM_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {IKPM_MAGIC.decode()!r}")
    if len(buf) < _HEAD.size + 4:
        raise FormatError("truncated IKPM file (header)")
    body, trailer = buf[:-4], buf[-4:]
    _, version, n_in, m, n, hidden, blocks = _HEAD.unpack_from(body, 0)
    if version != IKPM_VERSION:
        raise FormatError(f"unsupported IKPM version {version}")
    if n < n_in or n_in < 1 or hidden < 1:
        raise FormatError(f"invalid IKPM dims n'={n_in}, n={n}, hidden={hidden}")
    shapes = emb.param_shapes(n_in, n, hidden, blocks)
    sizes = [int(np.prod(s)) for s in shapes.values()]
    expected = _HEAD.size + 8 * (2 * n_in + sum(sizes) + n * n + n * m)
    if len(body) != expected:
        raise FormatError(f"truncated or oversized IKPM payload: {len(body)} != {expected} bytes")
    if struct.unpack("<I", trailer)[0] != zlib.crc32(body):
        raise FormatError("IKPM checksum mismatch")
    off = _HEAD.size

    def take(count, shape):
        nonlocal off
        arr = np.frombuffer(body, "<f8", count, off).reshape(shape).astype(float)
        off += 8 * count
        return arr

    mean = take(n_in, (n_in,))
    std = take(n_in, (n_in,))
    params = {k: take(size, shape) for (k, shape), size in zip(shapes.items(), sizes)}
    A = take(n * n, (n, n))
    B = take(n * m, (n, m))
    net = EmbeddingNet(n_in, n, hidden, blocks, params)
    return KoopmanModel(net, A, B, Normalizer(mean, std))


def save_model(model: KoopmanModel, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> KoopmanModel:
    return model_from_bytes(Path(path).read_bytes())
