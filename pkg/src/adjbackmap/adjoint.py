"""Exact Jacobians with respect to the extended input, and effective
hypersurfaces under the five reconstruction modes.

The Jacobian of the sub-path feeding a layer is evaluated at the scaled
point ``k * [x; x_b]``: a forward pass there fixes every activation
derivative (and max-pool winner), after which the sub-path is linear and
reverse-mode products against one-hot seeds give its rows exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from . import tensor as T
from .errors import ModeError, ModelError
from .graph import ActivationTrace, ModelGraph, forward, shortcut_transpose, stride_index
from .parallel import parallel_map
from .tensor import ExtendedInput

MODES = ("rm0", "rm1", "rm2", "rm3", "rm4")
DEFAULT_K = 0.125
DEFAULT_BLOCK = 256

MODE_AXES = {
    "rm4": ("h_out", "w_out", "c_in", "c_out"),
    "rm3": ("c_in", "c_out"),
    "rm2": ("h_out", "w_out", "c_out"),
    "rm1": ("c_out",),
    "rm0": ("class",),
}

LayerRef = Union[int, str]


@dataclass(frozen=True)
class EvalPoint:
    """Where the Jacobian is taken: ``k * [x; x_b]`` with ``k > 0``."""

    base: ExtendedInput
    k: float = DEFAULT_K

    def __post_init__(self):
        if not (self.k > 0 and np.isfinite(self.k)):
            raise ModeError(f"scale k must be a positive finite number, got {self.k}")

    def point(self) -> ExtendedInput:
        return self.base.scaled(self.k)


class Linearization:
    """The model frozen on one linear region, ready for transposed products."""

    def __init__(self, model: ModelGraph, trace: ActivationTrace):
        self.model = model
        self.trace = trace
        self.derivs = {
            p: trace.derivative(p) for p, layer in enumerate(model.layers) if layer.kind == "activation"
        }

    @classmethod
    def at(cls, model: ModelGraph, at: EvalPoint) -> "Linearization":
        return cls(model, forward(model, at.point()))

    def vjp(self, position: int, cot: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Pull cotangents on the input of layer ``position`` back to ``[x; x_b]``.

        ``cot`` has a leading batch axis; returns ``(image_part, bias_part)``
        shaped ``(N, H, W, C)`` and ``(N, M)``.
        """
        model = self.model
        dt = model.dtype
        g = np.asarray(cot, dtype=dt)
        n = g.shape[0]
        gb = np.zeros((n, model.n_bias), dtype=dt)
        pending: dict[str, np.ndarray] = {}
        for p in range(position - 1, -1, -1):
            layer = model.layers[p]
            k = layer.kind
            in_shape = model.in_shape(p)
            if k == "conv":
                g = T.conv2d_transpose(g, layer.weight, in_shape[:2], layer.stride, layer.padding)
            elif k == "fc":
                g = g @ layer.weight.astype(dt, copy=False).T
            elif k == "bias_add":
                s = layer.bias_slice
                if layer.broadcast:
                    gb[:, s.offset] += g.reshape(n, -1).sum(axis=1)
                else:
                    gb[:, s.offset : s.stop] += g.reshape(n, -1, s.length).sum(axis=1)
            elif k == "activation":
                g = g * self.derivs[p]
            elif k == "avg_pool":
                g = T.avg_pool_transpose(g, in_shape[:2], layer.window, layer.stride, layer.padding)
            elif k == "max_pool":
                g = T.max_pool_transpose(g, self.trace.pools[layer.id], in_shape[:2], layer.window, layer.stride, layer.padding)
            elif k == "global_pool":
                g = T.global_avg_pool_transpose(g, in_shape[:2])
            elif k == "shortcut_add":
                src_shape = model.out_shape(model.index(layer.source))
                pending[layer.source] = shortcut_transpose(layer, g, src_shape)
            elif k == "shortcut_begin":
                if layer.id in pending:
                    g = g + pending.pop(layer.id)
            else:
                raise ModelError(f"layer {layer.id!r}: no transpose rule for {k}")
        return g, gb

    def vjp_blocked(self, position: int, cots: np.ndarray, block: int = DEFAULT_BLOCK, threads: int = 1):
        """:meth:`vjp` over fixed-size seed blocks, run in parallel, joined in order."""
        n = cots.shape[0]
        starts = list(range(0, n, max(1, block)))
        parts = parallel_map(lambda a: self.vjp(position, cots[a : a + block]), starts, threads)
        if not parts:
            shape = self.model.input_shape
            return np.zeros((0,) + shape, self.model.dtype), np.zeros((0, self.model.n_bias), self.model.dtype)
        return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


# ---------------------------------------------------------------------------
# Jacobians


def target_position(model: ModelGraph, layer: LayerRef) -> int:
    """Position of the layer whose input is the mapped sub-path's output."""
    if layer == "fc":
        return model.fc_position
    try:
        l = int(layer)
    except (TypeError, ValueError):
        raise ModeError(f"layer must be a conv index or 'fc', got {layer!r}") from None
    if l == 0:
        raise ModeError("conv layer 0 is excluded: its kernels already live in the input space")
    pos, _ = model.conv(l)
    return pos


@dataclass(frozen=True)
class JacobianPair:
    """Rows of the sub-path Jacobian, split into image and bias columns.

    ``image`` is ``(n_out, H, W, C)`` and ``bias`` is ``(n_out, M)``;
    rows run over the target tensor in row-major order.
    """

    image: np.ndarray
    bias: np.ndarray
    target_shape: tuple
    layer: LayerRef
    k: float

    @property
    def n_out(self) -> int:
        return self.image.shape[0]

    def dense(self) -> np.ndarray:
        """``n_out x d_in`` matrix ``[J_image, J_bias]``."""
        return np.concatenate([self.image.reshape(self.n_out, -1), self.bias], axis=1)

    def d_in_major(self) -> tuple[np.ndarray, np.ndarray]:
        """Both parts with the extended-input axis first and target axes after."""
        n = self.n_out
        img = self.image.reshape(n, -1).T.reshape((-1,) + self.target_shape)
        bias = self.bias.T.reshape((-1,) + self.target_shape)
        return np.ascontiguousarray(img), np.ascontiguousarray(bias)


def jacobian_extended(
    model: ModelGraph,
    layer: LayerRef,
    at: EvalPoint,
    block: int = DEFAULT_BLOCK,
    threads: int = 1,
    lin: Optional[Linearization] = None,
) -> JacobianPair:
    """Jacobian of the input to conv layer ``layer`` (or to the fc layer)."""
    position = target_position(model, layer)
    lin = lin or Linearization.at(model, at)
    shape = model.in_shape(position)
    n = int(np.prod(shape))
    seeds = np.eye(n, dtype=model.dtype).reshape((n,) + tuple(shape))
    img, bias = lin.vjp_blocked(position, seeds, block, threads)
    return JacobianPair(img, bias, tuple(shape), layer, at.k)


# ---------------------------------------------------------------------------
# Hypersurfaces


@dataclass(frozen=True)
class HypersurfacePair:
    """Image and bias parts of an effective hypersurface.

    ``image`` is ``(H, W, C, *axes)`` and ``bias`` is ``(M, *axes)``; the
    trailing axes are named by ``axes`` and follow the mode's layout.
    """

    image: np.ndarray
    bias: np.ndarray
    mode: str
    layer: LayerRef
    axes: tuple[str, ...]
    coords: dict = field(default_factory=dict)

    @property
    def out_shape(self) -> tuple:
        return self.bias.shape[1:]

    @property
    def d_in(self) -> int:
        n_img = int(np.prod(self.image.shape[: self.image.ndim - len(self.axes)]))
        return n_img + self.bias.shape[0]

    def stacked(self) -> np.ndarray:
        """``(d_in, *axes)`` with image rows first, then bias rows."""
        img = self.image.reshape((-1,) + self.out_shape)
        return np.concatenate([img, self.bias], axis=0)

    def contract(self, x: ExtendedInput) -> np.ndarray:
        """``<x_n | H_image> + <x_b | H_bias>`` for every output element."""
        out = self.out_shape
        img = self.image.reshape(x.d_image, -1)
        bias = self.bias.reshape(self.bias.shape[0], -1)
        dt = self.image.dtype
        a = x.image.reshape(-1).astype(dt, copy=False) @ img
        b = x.bias_vec.astype(dt, copy=False) @ bias
        return (a + b).reshape(out)


def _conv_info(model: ModelGraph, layer: LayerRef):
    position = target_position(model, layer)
    conv = model.layers[position]
    h, w, cin = model.in_shape(position)
    ho, wo, cout = model.out_shape(position)
    return position, conv, (h, w, cin), (ho, wo, cout)


def mode_axes_shape(model: ModelGraph, mode: str, layer: LayerRef) -> tuple:
    mode = _check_mode(mode, layer)
    if mode == "rm0":
        return (model.out_shape(model.fc_position)[0],)
    _, _, (h, w, cin), (ho, wo, cout) = _conv_info(model, layer)
    return {"rm4": (ho, wo, cin, cout), "rm3": (cin, cout), "rm2": (ho, wo, cout), "rm1": (cout,)}[mode]


def hypersurface_shape(model: ModelGraph, mode: str, layer: LayerRef) -> tuple:
    """Full ``(d_in, *axes)`` shape of a reconstruction, without computing it."""
    return (model.d_in,) + mode_axes_shape(model, mode, layer)


def _check_mode(mode: str, layer: LayerRef) -> str:
    mode = str(mode).lower()
    if mode not in MODES:
        raise ModeError(f"unknown mode {mode!r}; choose from {', '.join(MODES)}")
    if (mode == "rm0") != (layer == "fc"):
        raise ModeError(f"mode {mode} does not apply to layer {layer!r}: rm0 is for the fc layer, rm1-rm4 for conv layers")
    return mode


def _selection(model, mode, layer, out_ch, stride_idx, in_ch, cls):
    """Index lists per output axis; fixed coordinates collapse to one index."""
    full = mode_axes_shape(model, mode, layer)
    axes = MODE_AXES[mode]
    sel = {a: list(range(n)) for a, n in zip(axes, full)}
    coords = {}
    if cls is not None:
        if mode != "rm0":
            raise ModeError("--class applies to rm0 only")
        if not 0 <= cls < full[0]:
            raise ModeError(f"class {cls} out of range [0, {full[0]})")
        sel["class"] = [cls]
        coords["class"] = cls
    if out_ch is not None:
        if mode == "rm0":
            raise ModeError("rm0 takes --class, not --out-ch")
        if not 0 <= out_ch < len(sel["c_out"]):
            raise ModeError(f"out channel {out_ch} out of range [0, {len(sel['c_out'])})")
        sel["c_out"] = [out_ch]
        coords["c_out"] = out_ch
    if in_ch is not None:
        if mode not in ("rm4", "rm3"):
            raise ModeError(f"{mode} sums over in channels; --in-ch applies to rm4/rm3")
        if not 0 <= in_ch < len(sel["c_in"]):
            raise ModeError(f"in channel {in_ch} out of range [0, {len(sel['c_in'])})")
        sel["c_in"] = [in_ch]
        coords["c_in"] = in_ch
    if stride_idx is not None:
        if mode not in ("rm4", "rm2"):
            raise ModeError(f"{mode} sums over stride moves; --stride-idx applies to rm4/rm2")
        r, q = stride_index(len(sel["h_out"]), len(sel["w_out"]), stride_idx)
        sel["h_out"], sel["w_out"] = [r], [q]
        coords["stride"] = stride_idx
    return axes, sel, coords


def _seed_cotangents(model, mode, layer, axes, sel) -> np.ndarray:
    """Cotangents on the target tensor, one per selected output element."""
    dt = model.dtype
    if mode == "rm0":
        w = model.layers[model.fc_position].weight.astype(dt, copy=False)
        return np.ascontiguousarray(w[:, sel["class"]].T)
    position, conv, (h, w, cin), (ho, wo, cout) = _conv_info(model, layer)
    kernel = conv.weight.astype(dt, copy=False)
    spatial = mode in ("rm4", "rm2")
    per_in = mode in ("rm4", "rm3")
    outs = []
    grid = [(r, q) for r in sel["h_out"] for q in sel["w_out"]] if spatial else [None]
    # order follows the mode's axis order: (h_out, w_out, c_in, c_out) etc.
    for rq in grid:
        for j in sel["c_in"] if per_in else [None]:
            for i in sel["c_out"]:
                seed = np.zeros((ho, wo, cout), dtype=dt)
                if rq is None:
                    seed[:, :, i] = 1
                else:
                    seed[rq[0], rq[1], i] = 1
                outs.append((seed, j))
    seeds = np.stack([s for s, _ in outs])
    cots = T.conv2d_transpose(seeds, kernel, (h, w), conv.stride, conv.padding)
    if per_in:
        mask = np.zeros((len(outs), 1, 1, cin), dtype=dt)
        for n, (_, j) in enumerate(outs):
            mask[n, 0, 0, j] = 1
        cots = cots * mask
    return cots


def _reconstruct_seed(model, lin, mode, layer, axes, sel, block, threads):
    position = target_position(model, layer)
    cots = _seed_cotangents(model, mode, layer, axes, sel)
    img, bias = lin.vjp_blocked(position, cots, block, threads)
    out = tuple(len(sel[a]) for a in axes)
    img = np.moveaxis(img.reshape(out + model.input_shape), list(range(len(out))), list(range(3, 3 + len(out))))
    bias = np.moveaxis(bias.reshape(out + (model.n_bias,)), list(range(len(out))), list(range(1, 1 + len(out))))
    return np.ascontiguousarray(img), np.ascontiguousarray(bias)


def _reconstruct_jacobian(model, lin, mode, layer, axes, sel, block, threads, at):
    jac = jacobian_extended(model, layer, at, block, threads, lin)
    j_img, j_bias = jac.d_in_major()
    n_img = j_img.shape[0]
    batch = np.concatenate([j_img, j_bias], axis=0)
    if mode == "rm0":
        w = model.layers[model.fc_position].weight.astype(model.dtype, copy=False)
        full = batch @ w
    else:
        _, conv, _, _ = _conv_info(model, layer)
        kernel = conv.weight.astype(model.dtype, copy=False)
        if mode in ("rm2", "rm1"):
            full = T.conv2d(batch, kernel, conv.stride, conv.padding)
        else:
            parts = [
                T.conv2d(batch[..., j : j + 1], kernel[:, :, j : j + 1, :], conv.stride, conv.padding)
                for j in range(kernel.shape[2])
            ]
            full = np.stack(parts, axis=3)
        if mode in ("rm3", "rm1"):
            full = full.sum(axis=(1, 2))
    for ax, name in enumerate(axes, start=1):
        full = np.take(full, sel[name], axis=ax)
    full = np.ascontiguousarray(full)
    img = full[:n_img].reshape(model.input_shape + full.shape[1:])
    return img, full[n_img:]


def reconstruct(
    model: ModelGraph,
    at: EvalPoint,
    mode: str,
    layer: LayerRef,
    out_ch: Optional[int] = None,
    stride_idx: Optional[int] = None,
    in_ch: Optional[int] = None,
    cls: Optional[int] = None,
    method: str = "auto",
    block: int = DEFAULT_BLOCK,
    threads: int = 1,
    lin: Optional[Linearization] = None,
) -> HypersurfacePair:
    """Effective hypersurface of a conv layer (rm1-rm4) or the fc layer (rm0).

    ``method="jacobian"`` builds the full sub-path Jacobian and maps the
    kernel through it as a batched convolution over the extended-input
    axis; ``method="seed"`` pulls back one structured cotangent per output
    element. ``auto`` picks whichever needs fewer transposed passes.
    """
    mode = _check_mode(mode, layer)
    axes, sel, coords = _selection(model, mode, layer, out_ch, stride_idx, in_ch, cls)
    lin = lin or Linearization.at(model, at)
    if method == "auto":
        n_seeds = int(np.prod([len(sel[a]) for a in axes]))
        n_rows = int(np.prod(model.in_shape(target_position(model, layer))))
        method = "seed" if n_seeds <= n_rows else "jacobian"
    if method == "seed":
        img, bias = _reconstruct_seed(model, lin, mode, layer, axes, sel, block, threads)
    elif method == "jacobian":
        img, bias = _reconstruct_jacobian(model, lin, mode, layer, axes, sel, block, threads, at)
    else:
        raise ModeError(f"unknown method {method!r}")
    return HypersurfacePair(img, bias, mode, layer, axes, coords)


def mode_sum_check(h4: HypersurfacePair) -> dict[str, HypersurfacePair]:
    """Derive rm3, rm2 and rm1 from a complete rm4 reconstruction.

    ``rm1`` is returned twice: summed via rm3 (over in channels) and via
    rm2 (over stride moves).
    """
    if h4.mode != "rm4":
        raise ModeError(f"expected an rm4 reconstruction, got {h4.mode}")
    if h4.coords:
        raise ModeError(f"rm4 set is incomplete (fixed coordinates {h4.coords}); sums need every s and j")
    nimg = h4.image.ndim - 4

    def summed(mode, axes_idx, names):
        img = h4.image.sum(axis=tuple(nimg + a for a in axes_idx))
        bias = h4.bias.sum(axis=tuple(1 + a for a in axes_idx))
        return HypersurfacePair(img, bias, mode, h4.layer, names)

    rm3 = summed("rm3", (0, 1), MODE_AXES["rm3"])
    rm2 = summed("rm2", (2,), MODE_AXES["rm2"])
    rm1_j = HypersurfacePair(rm3.image.sum(axis=nimg), rm3.bias.sum(axis=1), "rm1", h4.layer, MODE_AXES["rm1"])
    rm1_s = HypersurfacePair(
        rm2.image.sum(axis=(nimg, nimg + 1)), rm2.bias.sum(axis=(1, 2)), "rm1", h4.layer, MODE_AXES["rm1"]
    )
    return {"rm3": rm3, "rm2": rm2, "rm1_from_rm3": rm1_j, "rm1_from_rm2": rm1_s}


def reconstruct_many(model: ModelGraph, at: EvalPoint, requests, threads: int = 1, block: int = DEFAULT_BLOCK) -> list[HypersurfacePair]:
    """Reconstruct several ``(mode, layer, coords)`` requests sharing one linearization.

    Output order matches ``requests`` for any thread count.
    """
    lin = Linearization.at(model, at)

    def one(req):
        mode, layer, coords = req
        return reconstruct(model, at, mode, layer, lin=lin, block=block, **coords)

    return parallel_map(one, requests, threads)
