"""Lifting network ``g(x) = [x; g'(x)]`` with a residual-MLP ``g'``.

Everything is written for row batches: ``X`` has shape ``(N, n')`` and the
lifted output ``(N, n)``. Weights use the ``(out, in)`` convention so a layer
computes ``H @ W.T + b``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BadDims, ShapeMismatch


@dataclass(eq=False)
class EmbeddingNet:
    """Parameters of ``g'``, stored in a fixed, serialisation-stable order.

    Parameter names are ``W_in, b_in``, then ``W1_k, b1_k, W2_k, b2_k`` for
    each block ``k``, then ``W_out, b_out``.
    """

    input_dim: int
    latent_dim: int
    hidden_dim: int
    n_blocks: int
    params: dict

    def __post_init__(self):
        expected = param_shapes(self.input_dim, self.latent_dim, self.hidden_dim, self.n_blocks)
        if list(self.params) != list(expected):
            self.params = {k: self.params[k] for k in expected}
        for k, shape in expected.items():
            p = np.asarray(self.params[k], dtype=float)
            if p.shape != shape:
                raise ShapeMismatch(f"parameter {k} has shape {p.shape}, expected {shape}")
            self.params[k] = p

    @property
    def lift_dim(self) -> int:
        return self.latent_dim - self.input_dim

    def copy(self) -> "EmbeddingNet":
        return EmbeddingNet(self.input_dim, self.latent_dim, self.hidden_dim, self.n_blocks,
                            {k: v.copy() for k, v in self.params.items()})

    def __eq__(self, other):
        return (isinstance(other, EmbeddingNet)
                and (self.input_dim, self.latent_dim, self.hidden_dim, self.n_blocks)
                == (other.input_dim, other.latent_dim, other.hidden_dim, other.n_blocks)
                and all(np.array_equal(self.params[k], other.params[k]) for k in self.params))


@dataclass
class GradientBundle:
    params: dict
    x: np.ndarray


def param_shapes(n_in: int, n: int, hidden: int, blocks: int) -> dict:
    shapes = {"W_in": (hidden, n_in), "b_in": (hidden,)}
    for k in range(blocks):
        shapes[f"W1_{k}"] = (hidden, hidden)
        shapes[f"b1_{k}"] = (hidden,)
        shapes[f"W2_{k}"] = (hidden, hidden)
        shapes[f"b2_{k}"] = (hidden,)
    shapes["W_out"] = (n - n_in, hidden)
    shapes["b_out"] = (n - n_in,)
    return shapes


def _check_dims(n_in, n, hidden, blocks):
    if n_in < 1 or n < n_in or hidden < 1 or blocks < 0:
        raise BadDims(f"invalid embedding dims n'={n_in}, n={n}, hidden={hidden}, "
                      f"blocks={blocks}")


def init_net(n_in: int, n: int, hidden: int, blocks: int, seed) -> EmbeddingNet:
    """He-uniform weights, ``U(-sqrt(6/fan_in), sqrt(6/fan_in))``, zero biases."""
    _check_dims(n_in, n, hidden, blocks)
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(n_in, n, hidden, blocks).items():
        if name.startswith("W"):
            bound = np.sqrt(6.0 / shape[1])
            params[name] = rng.uniform(-bound, bound, size=shape)
        else:
            params[name] = np.zeros(shape)
    return EmbeddingNet(n_in, n, hidden, blocks, params)


def zero_net(n_in: int, n: int, hidden: int, blocks: int) -> EmbeddingNet:
    _check_dims(n_in, n, hidden, blocks)
    return EmbeddingNet(n_in, n, hidden, blocks,
                        {k: np.zeros(s) for k, s in param_shapes(n_in, n, hidden, blocks).items()})


def forward(net: EmbeddingNet, X: np.ndarray, cache: bool = False):
    """Lift a batch. Returns ``Z`` or ``(Z, cache)`` when ``cache`` is set."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != net.input_dim:
        raise ShapeMismatch(f"expected (N, {net.input_dim}) input, got {X.shape}")
    p = net.params
    h = X @ p["W_in"].T + p["b_in"]
    hs, acts = [h], []
    for k in range(net.n_blocks):
        a = np.maximum(0.0, h @ p[f"W1_{k}"].T + p[f"b1_{k}"])
        h = np.maximum(0.0, h + a @ p[f"W2_{k}"].T + p[f"b2_{k}"])
        acts.append(a)
        hs.append(h)
    Z = np.concatenate([X, h @ p["W_out"].T + p["b_out"]], axis=1)
    if cache:
        return Z, (X, hs, acts)
    return Z


def backward(net: EmbeddingNet, cache, dZ: np.ndarray) -> GradientBundle:
    """Vector-Jacobian product of :func:`forward` (summed over the batch)."""
    X, hs, acts = cache
    p = net.params
    n_in = net.input_dim
    dZ = np.asarray(dZ, dtype=float)
    if dZ.shape != (X.shape[0], net.latent_dim):
        raise ShapeMismatch(f"upstream shape {dZ.shape} != {(X.shape[0], net.latent_dim)}")
    dy = dZ[:, n_in:]
    grads = {"W_out": dy.T @ hs[-1], "b_out": dy.sum(axis=0)}
    dh = dy @ p["W_out"]
    for k in reversed(range(net.n_blocks)):
        # h_out = relu(s); relu'(0) := 0, and h_out > 0 iff s > 0
        ds = dh * (hs[k + 1] > 0)
        a = acts[k]
        grads[f"W2_{k}"] = ds.T @ a
        grads[f"b2_{k}"] = ds.sum(axis=0)
        da = (ds @ p[f"W2_{k}"]) * (a > 0)
        grads[f"W1_{k}"] = da.T @ hs[k]
        grads[f"b1_{k}"] = da.sum(axis=0)
        dh = ds + da @ p[f"W1_{k}"]
    grads["W_in"] = dh.T @ X
    grads["b_in"] = dh.sum(axis=0)
    dX = dZ[:, :n_in] + dh @ p["W_in"]
    ordered = {k: grads[k] for k in p}
    return GradientBundle(ordered, dX)


def embed_forward(net: EmbeddingNet, x) -> np.ndarray:
    """Lift a single state vector."""
    x = np.asarray(x, dtype=float).reshape(1, -1)
    return forward(net, x)[0]


def embed_backward(net: EmbeddingNet, x, upstream) -> GradientBundle:
    """Gradients of ``<upstream, g(x)>`` for a single state."""
    x = np.asarray(x, dtype=float).reshape(1, -1)
    _, cache = forward(net, x, cache=True)
    g = backward(net, cache, np.asarray(upstream, dtype=float).reshape(1, -1))
    return GradientBundle(g.params, g.x[0])
