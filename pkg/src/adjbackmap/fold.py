"""Rewrite a trained model into its equivalent topology.

Batch norm and Fixup multipliers are folded into the preceding conv
kernel, and every bias becomes a slice of one concatenated vector that is
fed to the network as extra input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ModelError
from .graph import Layer, ModelGraph
from .tensor import BiasSlice, ExtendedInput

DEFAULT_BN_EPS = 0.001


@dataclass(frozen=True, eq=False)
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = DEFAULT_BN_EPS

    def __post_init__(self):
        vecs = [np.asarray(v).reshape(-1) for v in (self.gamma, self.beta, self.mean, self.var)]
        if len({v.size for v in vecs}) != 1:
            raise DimensionError("batch norm vectors must share one length")
        if np.any(vecs[3] < 0):
            raise ModelError("batch norm variance must be non-negative")
        if not self.eps > 0:
            raise ModelError("batch norm eps must be positive")
        for name, v in zip(("gamma", "beta", "mean", "var"), vecs):
            object.__setattr__(self, name, v)

    @property
    def channels(self) -> int:
        return int(self.gamma.size)

    def __eq__(self, other):
        if not isinstance(other, BatchNormParams):
            return NotImplemented
        return self.eps == other.eps and all(
            np.array_equal(getattr(self, n), getattr(other, n)) for n in ("gamma", "beta", "mean", "var")
        )

    __hash__ = None

    def apply(self, c: np.ndarray) -> np.ndarray:
        """Inference-mode normalization of conv output ``c``, unfolded."""
        dt = c.dtype
        g, b, m, v = (a.astype(dt) for a in (self.gamma, self.beta, self.mean, self.var))
        return g * (c - m) / np.sqrt(v + dt.type(self.eps)) + b


def fold_batch_norm(kernel: np.ndarray, bn: BatchNormParams, conv_bias=None) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(w', b')`` so that ``conv(x, w') + b'`` equals ``BN(conv(x, w) + conv_bias)``.

    Computed in double, cast back to the kernel's dtype.
    """
    kernel = np.asarray(kernel)
    if kernel.shape[-1] != bn.channels:
        raise DimensionError(f"kernel has {kernel.shape[-1]} out channels, batch norm has {bn.channels}")
    denom = bn.var.astype(np.float64) + bn.eps
    if np.any(denom <= 0):
        raise ModelError("batch norm variance + eps must be positive")
    scale = bn.gamma.astype(np.float64) / np.sqrt(denom)
    w = kernel.astype(np.float64) * scale
    mean = bn.mean.astype(np.float64)
    if conv_bias is not None:
        mean = mean - np.asarray(conv_bias, dtype=np.float64).reshape(-1)
    b = bn.beta.astype(np.float64) - scale * mean
    return w.astype(kernel.dtype), b.astype(kernel.dtype)


def merge_multiplier(kernel: np.ndarray, multiplier: float) -> np.ndarray:
    if not np.isfinite(multiplier):
        raise ModelError(f"multiplier must be finite, got {multiplier}")
    kernel = np.asarray(kernel)
    return (kernel.astype(np.float64) * float(multiplier)).astype(kernel.dtype)


def extract_bias_vector(model: ModelGraph) -> tuple[ModelGraph, tuple[BiasSlice, ...], np.ndarray]:
    """Fold a raw model and gather its biases into one vector.

    Returns the equivalent model, the bias layout, and ``x_b``.
    """
    if model.form != "raw":
        raise ModelError("model is already in equivalent form; refusing to fold twice")
    dt = model.dtype
    out: list[Layer] = []
    biases: list[np.ndarray] = []
    layout: list[BiasSlice] = []
    offset = 0

    def push_bias(layer_id: str, values, broadcast: bool):
        nonlocal offset
        values = np.asarray(values, dtype=dt).reshape(-1)
        s = BiasSlice(layer_id, offset, values.size)
        offset += values.size
        biases.append(values)
        layout.append(s)
        out.append(Layer(layer_id, "bias_add", bias_slice=s, broadcast=broadcast))

    layers = model.layers
    i = 0
    while i < len(layers):
        layer = layers[i]
        k = layer.kind
        if k == "conv":
            kernel = layer.weight
            j = i + 1
            pending_bias = None
            if j < len(layers) and layers[j].kind == "bias_add" and j + 1 < len(layers) and layers[j + 1].kind == "batch_norm":
                pending_bias = layers[j]
                j += 1
            if j < len(layers) and layers[j].kind == "batch_norm":
                bn_layer = layers[j]
                conv_bias = None if pending_bias is None else pending_bias.weight
                w, b = fold_batch_norm(kernel, bn_layer.bn, conv_bias)
                out.append(layer.replace(weight=w))
                push_bias(bn_layer.id, b, broadcast=False)
                i = j + 1
                continue
            if j < len(layers) and layers[j].kind == "multiplier":
                out.append(layer.replace(weight=merge_multiplier(kernel, layers[j].multiplier)))
                i = j + 1
                continue
            out.append(layer)
        elif k == "bias_add":
            push_bias(layer.id, layer.weight, layer.broadcast)
        elif k in ("batch_norm", "multiplier"):
            raise ModelError(f"layer {layer.id!r}: {k} must directly follow a conv layer to be folded")
        else:
            out.append(layer)
        i += 1

    equivalent = ModelGraph(tuple(out), model.input_shape, "equivalent", dt, model.name)
    x_b = np.concatenate(biases) if biases else np.zeros(0, dtype=dt)
    return equivalent, tuple(layout), x_b


def extended_input(model: ModelGraph, image: np.ndarray, x_b: np.ndarray) -> ExtendedInput:
    """Pair an image with a bias vector under the model's layout."""
    return ExtendedInput(np.asarray(image, dtype=model.dtype), np.asarray(x_b, dtype=model.dtype), model.bias_layout)
