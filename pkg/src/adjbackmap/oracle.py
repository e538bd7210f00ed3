"""Dense-matrix reference for the sub-path Jacobians.

Every layer becomes an explicit matrix on flattened (row-major HWC)
vectors, built with plain index loops rather than the convolution
kernels the engine uses.  Starting from ``[I | 0]`` over the extended
input, the recurrence is

    conv / fc / pool:  J <- W J
    bias add:          J <- J + R          (R picks the layer's bias slice)
    activation:        J <- diag(sigma') J (sign pattern at the eval point)
    shortcut add:      J <- J + S J_saved

so ``J`` after a conv layer maps ``[x; x_b]`` to that layer's pre-bias
output.  Only intended for small models.
"""

from __future__ import annotations

import numpy as np

from .errors import ModelError, OracleSizeError
from .graph import ActivationTrace, Layer, ModelGraph, forward
from .tensor import ExtendedInput, _geometry

MAX_UNITS = 100_000


def total_units(model: ModelGraph) -> int:
    return int(np.prod(model.input_shape)) + sum(int(np.prod(model.out_shape(p))) for p in range(len(model.layers)))


def _flat(h, w, c):
    return lambda a, b, i: (a * w + b) * c + i


def conv_matrix(in_shape, kernel: np.ndarray, stride: int, padding: str) -> np.ndarray:
    h, w, cin = in_shape
    r1, r2, _, cout = kernel.shape
    ho, wo, (pt, _), (pl, _) = _geometry(h, w, r1, r2, stride, padding)
    W = np.zeros((ho * wo * cout, h * w * cin), dtype=np.float64)
    fo, fi = _flat(ho, wo, cout), _flat(h, w, cin)
    for a in range(ho):
        for b in range(wo):
            for u in range(r1):
                for v in range(r2):
                    y, x = a * stride - pt + u, b * stride - pl + v
                    if not (0 <= y < h and 0 <= x < w):
                        continue
                    for i in range(cout):
                        for j in range(cin):
                            W[fo(a, b, i), fi(y, x, j)] += kernel[u, v, j, i]
    return W


def avg_pool_matrix(in_shape, window: int, stride: int, padding: str) -> np.ndarray:
    h, w, c = in_shape
    ho, wo, (pt, _), (pl, _) = _geometry(h, w, window, window, stride, padding)
    P = np.zeros((ho * wo * c, h * w * c))
    fo, fi = _flat(ho, wo, c), _flat(h, w, c)
    for a in range(ho):
        for b in range(wo):
            cells = [
                (a * stride - pt + u, b * stride - pl + v)
                for u in range(window)
                for v in range(window)
                if 0 <= a * stride - pt + u < h and 0 <= b * stride - pl + v < w
            ]
            for y, x in cells:
                for i in range(c):
                    P[fo(a, b, i), fi(y, x, i)] += 1.0 / len(cells)
    return P


def max_pool_matrix(in_shape, window: int, stride: int, padding: str, argmax: np.ndarray) -> np.ndarray:
    h, w, c = in_shape
    ho, wo, (pt, _), (pl, _) = _geometry(h, w, window, window, stride, padding)
    P = np.zeros((ho * wo * c, h * w * c))
    fo, fi = _flat(ho, wo, c), _flat(h, w, c)
    for a in range(ho):
        for b in range(wo):
            for i in range(c):
                u, v = divmod(int(argmax[a, b, i]), window)
                P[fo(a, b, i), fi(a * stride - pt + u, b * stride - pl + v, i)] = 1.0
    return P


def global_pool_matrix(in_shape) -> np.ndarray:
    h, w, c = in_shape
    P = np.zeros((c, h * w * c))
    for y in range(h):
        for x in range(w):
            for i in range(c):
                P[i, (y * w + x) * c + i] = 1.0 / (h * w)
    return P


def shortcut_matrix(layer: Layer, src_shape, dst_shape) -> np.ndarray:
    if layer.shortcut == "identity":
        return np.eye(int(np.prod(src_shape)))
    P = avg_pool_matrix(src_shape, layer.window, layer.stride, "SAME")
    ho, wo, cs = dst_shape[0], dst_shape[1], src_shape[2]
    cd = dst_shape[2]
    S = np.zeros((ho * wo * cd, P.shape[0]))
    for a in range(ho):
        for b in range(wo):
            for i in range(cs):
                S[(a * wo + b) * cd + i, (a * wo + b) * cs + i] = 1.0
    return S @ P


def bias_matrix(model: ModelGraph, layer: Layer, shape) -> np.ndarray:
    n = int(np.prod(shape))
    R = np.zeros((n, model.d_in))
    s = layer.bias_slice
    d_img = int(np.prod(model.input_shape))
    rows = np.arange(n)
    if layer.broadcast:
        R[rows, d_img + s.offset] = 1.0
    else:
        R[rows, d_img + s.offset + rows % shape[-1]] = 1.0
    return R


def dense_jacobians(model: ModelGraph, trace: ActivationTrace) -> list[np.ndarray]:
    """``J`` for the output of every layer, in double, at ``trace``'s point.

    ``trace`` supplies the sign pattern and max-pool winners, so the
    oracle and the engine linearize on the same region.
    """
    if model.form != "equivalent":
        raise ModelError("the dense oracle needs an equivalent-form model")
    units = total_units(model)
    if units > MAX_UNITS:
        raise OracleSizeError(f"model has {units} units; the dense oracle is limited to {MAX_UNITS}")
    d_img = int(np.prod(model.input_shape))
    J = np.zeros((d_img, model.d_in))
    J[:, :d_img] = np.eye(d_img)
    saved: dict[str, np.ndarray] = {}
    out = []
    for p, layer in enumerate(model.layers):
        in_shape = model.in_shape(p)
        shape = model.out_shape(p)
        k = layer.kind
        if k == "conv":
            J = conv_matrix(in_shape, layer.weight.astype(np.float64), layer.stride, layer.padding) @ J
        elif k == "fc":
            J = layer.weight.astype(np.float64).T @ J
        elif k == "bias_add":
            J = J + bias_matrix(model, layer, shape)
        elif k == "activation":
            J = trace.derivative(p).astype(np.float64).reshape(-1, 1) * J
        elif k == "avg_pool":
            J = avg_pool_matrix(in_shape, layer.window, layer.stride, layer.padding) @ J
        elif k == "max_pool":
            rec = trace.pools[layer.id]
            J = max_pool_matrix(in_shape, layer.window, layer.stride, layer.padding, rec.argmax[0]) @ J
        elif k == "global_pool":
            J = global_pool_matrix(in_shape) @ J
        elif k == "shortcut_begin":
            saved[layer.id] = J
        elif k == "shortcut_add":
            src = model.index(layer.source)
            J = J + shortcut_matrix(layer, model.out_shape(src), shape) @ saved[layer.source]
        else:
            raise ModelError(f"layer {layer.id!r}: no dense rule for {k}")
        out.append(J)
    return out


def layer_jacobian(model: ModelGraph, at_point: ExtendedInput, layer) -> tuple[np.ndarray, np.ndarray]:
    """Dense ``(J_in, J_out)``: Jacobians of the input and pre-bias output of
    conv ``layer`` (or of the fc layer), evaluated at ``at_point``."""
    trace = forward(model, at_point, check=False)
    Js = dense_jacobians(model, trace)
    if layer == "fc":
        pos = model.fc_position
    else:
        pos, _ = model.conv(int(layer))
    j_in = Js[pos - 1] if pos > 0 else np.eye(int(np.prod(model.input_shape)), model.d_in)
    return j_in, Js[pos]
