"""Tanh multilayer perceptrons with a hand-written reverse pass.

Layers are ``(W, b)`` pairs applied to the last axis, so any number of
leading batch axes is allowed.  The reverse pass broadcasts: a cache recorded
for a batch of one can be pulled back with a stack of cotangents, which is how
input Jacobians are formed.
"""

import numpy as np


def init_mlp(rng, sizes):
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        W = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        layers.append((W, np.zeros(fan_out)))
    return layers


def mlp_forward(layers, x):
    inputs, acts = [], []
    lead = x.shape[:-1]
    # one 2-D GEMM per layer instead of a batched matmul
    h = x.reshape(-1, x.shape[-1])
    last = len(layers) - 1
    for i, (W, b) in enumerate(layers):
        inputs.append(h)
        z = h @ W + b
        if i < last:
            h = np.tanh(z)
            acts.append(h)
        else:
            h = z
    return h.reshape(lead + (h.shape[-1],)), (inputs, acts, lead)


def mlp_backward(layers, cache, gy, grads=None):
    """Pull ``gy`` back to the input.

    When ``grads`` is a list it receives ``(dW, db)`` per layer, in layer
    order, summed over all leading axes.
    """
    inputs, acts, lead = cache
    # cotangents may carry extra leading axes that broadcast against the cache
    extra = gy.shape[: gy.ndim - len(lead) - 1]
    rows = int(np.prod(lead, dtype=int))
    g = gy.reshape(extra + (rows, gy.shape[-1]))
    layer_grads = []
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        if i < len(layers) - 1:
            g = g * (1.0 - acts[i] ** 2)
        if grads is not None:
            layer_grads.append((inputs[i].T @ g, g.sum(axis=0)))
        g = (g.reshape(-1, g.shape[-1]) @ W.T).reshape(g.shape[:-1] + (W.shape[0],))
    if grads is not None:
        grads.extend(reversed(layer_grads))
    return g.reshape(extra + lead + (g.shape[-1],))
