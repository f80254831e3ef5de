"""Plain dense MLPs (affine chains with ReLU hidden activations).

Output heads apply their own activation (identity-offset gates, sigmoid
decoder), so the final layer here is linear. Weights are stored as
(d_in, d_out) matrices acting on row vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MlpConfigError(ValueError):
    pass


@dataclass
class MlpWeights:
    weights: list  # (d_in, d_out) arrays
    biases: list   # (d_out,) arrays

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise MlpConfigError("weights/biases length mismatch")
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[1],):
                raise MlpConfigError(f"layer {k}: bias shape {b.shape} vs weight {W.shape}")
            if k > 0 and self.weights[k - 1].shape[1] != W.shape[0]:
                raise MlpConfigError(
                    f"layer {k}: input dim {W.shape[0]} does not chain from "
                    f"{self.weights[k - 1].shape[1]}")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    @classmethod
    def create(cls, sizes, rng: np.random.Generator, final_zero: bool = True,
               final_bias: float = 0.0, dtype=np.float32) -> "MlpWeights":
        """He-initialized hidden layers; optionally zeroed final layer.

        A zero final layer makes the head's raw output exactly `final_bias`
        at initialization, which the gate/decoder heads rely on.
        """
        weights, biases = [], []
        for k in range(len(sizes) - 1):
            d_in, d_out = sizes[k], sizes[k + 1]
            last = k == len(sizes) - 2
            if last and final_zero:
                W = np.zeros((d_in, d_out), dtype=dtype)
                b = np.full(d_out, final_bias, dtype=dtype)
            else:
                W = (rng.normal(size=(d_in, d_out)) * np.sqrt(2.0 / d_in)).astype(dtype)
                b = np.zeros(d_out, dtype=dtype)
            weights.append(W)
            biases.append(b)
        return cls(weights=weights, biases=biases)

    def astype(self, dtype) -> "MlpWeights":
        return MlpWeights([W.astype(dtype) for W in self.weights],
                          [b.astype(dtype) for b in self.biases])


@dataclass
class MlpCache:
    inputs: list  # per-layer post-activation inputs, inputs[0] = x


def mlp_forward(x: np.ndarray, w: MlpWeights, with_cache: bool = False):
    x = np.atleast_2d(x)
    if x.shape[1] != w.in_dim:
        raise MlpConfigError(f"input dim {x.shape[1]} != expected {w.in_dim}")
    inputs = [x]
    n = len(w.weights)
    for k in range(n):
        x = x @ w.weights[k] + w.biases[k]
        if k < n - 1:
            x = np.maximum(x, 0.0)
        if with_cache and k < n - 1:
            inputs.append(x)
    if with_cache:
        return x, MlpCache(inputs=inputs)
    return x


def mlp_backward(w: MlpWeights, cache: MlpCache, d_out: np.ndarray):
    """Returns (d_x, d_weights list, d_biases list)."""
    n = len(w.weights)
    d_weights = [None] * n
    d_biases = [None] * n
    g = d_out
    for k in range(n - 1, -1, -1):
        h = cache.inputs[k]
        d_weights[k] = h.T @ g
        d_biases[k] = g.sum(axis=0)
        g = g @ w.weights[k].T
        if k > 0:
            g = g * (cache.inputs[k] > 0)  # ReLU mask of this layer's input
    return g, d_weights, d_biases
