"""Small fully connected networks with hand-written reverse mode.

Only the fixed architecture used by the function approximators is
differentiated: three linear layers with tanh hidden activations,

    z1 = W1 x + b1,  h1 = tanh(z1),  z2 = W2 h1 + b2,  h2 = tanh(z2),
    out = W3 h2 + b3.

Inputs may be single columns ``(d,)`` or batches ``(d, B)``; parameter
gradients sum over the batch, so weighted per-sample seeds yield weighted
sums of per-sample gradients in one backward pass.
"""

from __future__ import annotations

import numpy as np

__all__ = ["mlp_init", "mlp_n_params", "mlp_forward", "mlp_backward",
           "mlp_to_vector", "mlp_from_vector"]


def _layer_shapes(sizes):
    return [((sizes[i + 1], sizes[i]), (sizes[i + 1],)) for i in range(len(sizes) - 1)]


def mlp_n_params(sizes) -> int:
    return sum(w[0] * w[1] + b[0] for w, b in _layer_shapes(sizes))


def mlp_init(sizes, rng: np.random.Generator, low: float = -0.5, high: float = 0.5):
    """Weights and biases drawn uniformly from [low, high]."""
    return [(rng.uniform(low, high, size=w), rng.uniform(low, high, size=b))
            for w, b in _layer_shapes(sizes)]


def mlp_to_vector(weights) -> np.ndarray:
    return np.concatenate([np.concatenate([w.ravel(), b.ravel()]) for w, b in weights])


def mlp_from_vector(sizes, vec: np.ndarray):
    weights = []
    k = 0
    for wshape, bshape in _layer_shapes(sizes):
        nw = wshape[0] * wshape[1]
        w = vec[k : k + nw].reshape(wshape).copy()
        k += nw
        b = vec[k : k + bshape[0]].copy()
        k += bshape[0]
        weights.append((w, b))
    if k != vec.size:
        raise ValueError(f"parameter vector length {vec.size} != expected {k}")
    return weights


def mlp_views(sizes, buf: np.ndarray):
    """Weight list whose arrays are views into ``buf``.

    In-place updates of ``buf`` (e.g. one stochastic-approximation step on
    the flat vector) are immediately visible to forward passes.
    """
    weights = []
    k = 0
    for wshape, bshape in _layer_shapes(sizes):
        nw = wshape[0] * wshape[1]
        weights.append((buf[k : k + nw].reshape(wshape), buf[k + nw : k + nw + bshape[0]]))
        k += nw + bshape[0]
    if k != buf.size:
        raise ValueError(f"buffer length {buf.size} != expected {k}")
    return weights


def mlp_forward(weights, x):
    """Returns (out, cache); out is (o,) for single input, (o, B) for batches."""
    single = x.ndim == 1
    xc = x[:, None] if single else x
    (w1, b1), (w2, b2), (w3, b3) = weights
    z1 = w1 @ xc + b1[:, None]
    h1 = np.tanh(z1)
    z2 = w2 @ h1 + b2[:, None]
    h2 = np.tanh(z2)
    out = w3 @ h2 + b3[:, None]
    cache = (xc, h1, h2)
    return (out[:, 0] if single else out), cache


def mlp_backward(weights, cache, dout) -> np.ndarray:
    """Flat parameter gradient of sum_j <dout_j, out_j> over the batch."""
    xc, h1, h2 = cache
    d = dout[:, None] if dout.ndim == 1 else dout
    (w1, b1), (w2, b2), (w3, b3) = weights
    dw3 = d @ h2.T
    db3 = d.sum(axis=1)
    dh2 = w3.T @ d
    dz2 = (1.0 - h2 * h2) * dh2
    dw2 = dz2 @ h1.T
    db2 = dz2.sum(axis=1)
    dh1 = w2.T @ dz2
    dz1 = (1.0 - h1 * h1) * dh1
    dw1 = dz1 @ xc.T
    db1 = dz1.sum(axis=1)
    return np.concatenate([dw1.ravel(), db1, dw2.ravel(), db2, dw3.ravel(), db3])
