"""Layer graph of a piecewise-linear CNN and its recorded forward pass."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import TYPE_CHECKING, Callable, Optional

import numpy as np

from . import tensor as T
from .errors import DimensionError, LayoutError, ModelError
from .tensor import BiasSlice, ExtendedInput, MaxPoolRecord

if TYPE_CHECKING:
    from .fold import BatchNormParams

LAYER_KINDS = (
    "conv",
    "bias_add",
    "activation",
    "avg_pool",
    "max_pool",
    "global_pool",
    "fc",
    "shortcut_begin",
    "shortcut_add",
)
RAW_ONLY_KINDS = ("batch_norm", "multiplier")
SHORTCUT_KINDS = ("identity", "avgpool_pad")
DEFAULT_LEAKINESS = 0.1


@dataclass(frozen=True)
class Activation:
    """Elementwise activation whose derivative is piecewise constant.

    ``piecewise_linear`` is ``slope[seg(c)] * c`` where ``seg`` locates
    ``c`` among ``breakpoints`` (a value on a breakpoint belongs to the
    segment to its right). Every piece passes through the origin.
    """

    kind: str = "relu"
    leakiness: float = 0.0
    breakpoints: tuple[float, ...] = ()
    slopes: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind == "relu":
            if self.leakiness != 0.0:
                raise ModelError("relu requires leakiness 0")
        elif self.kind == "leaky_relu":
            if not 0.0 < self.leakiness < 1.0:
                raise ModelError(f"leaky_relu leakiness must lie in (0, 1), got {self.leakiness}")
        elif self.kind == "piecewise_linear":
            bp, sl = tuple(map(float, self.breakpoints)), tuple(map(float, self.slopes))
            if len(sl) != len(bp) + 1:
                raise ModelError("piecewise_linear needs one more slope than breakpoints")
            if any(lo >= hi for lo, hi in zip(bp, bp[1:])):
                raise ModelError("breakpoints must be strictly increasing")
            if not all(np.isfinite(sl)) or not all(np.isfinite(bp)):
                raise ModelError("breakpoints and slopes must be finite")
            object.__setattr__(self, "breakpoints", bp)
            object.__setattr__(self, "slopes", sl)
        else:
            raise ModelError(f"unknown activation kind {self.kind!r}")

    @property
    def homogeneous(self) -> bool:
        """True when the sign pattern alone fixes the derivative (ReLU family)."""
        return self.kind in ("relu", "leaky_relu")

    def apply(self, c: np.ndarray) -> np.ndarray:
        if self.kind == "piecewise_linear":
            return self.derivative(c) * c
        g = c.dtype.type(self.leakiness)
        if self.kind == "relu":
            return np.maximum(c, 0).astype(c.dtype, copy=False)
        return np.maximum(c, 0) + g * np.minimum(c, 0)

    def derivative(self, c: np.ndarray) -> np.ndarray:
        """Diagonal of the activation Jacobian; ``sgn(0)`` counts as positive."""
        if self.kind == "piecewise_linear":
            seg = np.searchsorted(np.asarray(self.breakpoints, dtype=c.dtype), c, side="right")
            return np.asarray(self.slopes, dtype=c.dtype)[seg]
        return np.where(c >= 0, c.dtype.type(1), c.dtype.type(self.leakiness))

    def to_json(self) -> dict:
        out = {"kind": self.kind}
        if self.kind == "leaky_relu":
            out["leakiness"] = self.leakiness
        if self.kind == "piecewise_linear":
            out["breakpoints"] = list(self.breakpoints)
            out["slopes"] = list(self.slopes)
        return out

    @classmethod
    def from_json(cls, d: dict) -> "Activation":
        kind = d.get("kind", "relu")
        if kind == "leaky_relu":
            return cls(kind, float(d.get("leakiness", DEFAULT_LEAKINESS)))
        return cls(kind, float(d.get("leakiness", 0.0)), tuple(d.get("breakpoints", ())), tuple(d.get("slopes", ())))


@dataclass(frozen=True, eq=False)
class Layer:
    id: str
    kind: str
    weight: Optional[np.ndarray] = None  # conv kernel, fc matrix, or raw bias values
    stride: int = 1
    padding: str = "SAME"
    window: int = 1
    activation: Optional[Activation] = None
    bn: Optional["BatchNormParams"] = None
    multiplier: Optional[float] = None
    bias_slice: Optional[BiasSlice] = None
    broadcast: bool = False
    shortcut: str = "identity"
    source: Optional[str] = None

    def replace(self, **changes) -> "Layer":
        vals = {f.name: getattr(self, f.name) for f in fields(self)}
        vals.update(changes)
        return Layer(**vals)

    def __eq__(self, other):
        if not isinstance(other, Layer):
            return NotImplemented
        for f in fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
                if a is None or b is None or a.dtype != b.dtype or not np.array_equal(a, b):
                    return False
            elif a != b:
                return False
        return True

    __hash__ = None


@dataclass(frozen=True, eq=False)
class ModelGraph:
    layers: tuple[Layer, ...]
    input_shape: tuple[int, int, int]
    form: str = "equivalent"
    dtype: np.dtype = np.dtype(np.float64)
    name: str = ""
    shapes: tuple = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "dtype", T.resolve_dtype(self.dtype))
        if self.form not in ("raw", "equivalent"):
            raise ModelError(f"unknown model form {self.form!r}")
        ids = [l.id for l in self.layers]
        if len(set(ids)) != len(ids):
            dup = next(i for i in ids if ids.count(i) > 1)
            raise ModelError(f"duplicate layer id {dup!r}")
        object.__setattr__(self, "shapes", tuple(_infer_shapes(self)))

    def __eq__(self, other):
        if not isinstance(other, ModelGraph):
            return NotImplemented
        return (
            self.layers == other.layers
            and self.input_shape == other.input_shape
            and self.form == other.form
            and self.dtype == other.dtype
            and self.name == other.name
        )

    __hash__ = None

    def index(self, layer_id: str) -> int:
        for i, l in enumerate(self.layers):
            if l.id == layer_id:
                return i
        raise ModelError(f"no layer {layer_id!r}")

    @property
    def conv_positions(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.kind == "conv"]

    @property
    def fc_position(self) -> int:
        pos = [i for i, l in enumerate(self.layers) if l.kind == "fc"]
        if not pos:
            raise ModelError("model has no fc layer")
        return pos[-1]

    @property
    def has_fc(self) -> bool:
        return any(l.kind == "fc" for l in self.layers)

    @property
    def n_conv(self) -> int:
        return len(self.conv_positions)

    def conv(self, l: int) -> tuple[int, Layer]:
        pos = self.conv_positions
        if not 0 <= l < len(pos):
            raise ModelError(f"conv layer {l} out of range (model has {len(pos)})")
        return pos[l], self.layers[pos[l]]

    def in_shape(self, position: int) -> tuple:
        return self.shapes[position][0]

    def out_shape(self, position: int) -> tuple:
        return self.shapes[position][1]

    @property
    def bias_layout(self) -> tuple[BiasSlice, ...]:
        return tuple(l.bias_slice for l in self.layers if l.kind == "bias_add" and l.bias_slice is not None)

    @property
    def n_bias(self) -> int:
        return sum(s.length for s in self.bias_layout)

    @property
    def d_in(self) -> int:
        return int(np.prod(self.input_shape)) + self.n_bias

    @property
    def output_size(self) -> int:
        return int(np.prod(self.out_shape(len(self.layers) - 1)))


def _infer_shapes(model: ModelGraph) -> list:
    shape = model.input_shape
    prev = "input"
    saved: dict[str, tuple] = {}
    out = []
    equivalent = model.form == "equivalent"
    for layer in model.layers:
        k = layer.kind
        if k in RAW_ONLY_KINDS and equivalent:
            raise ModelError(f"layer {layer.id!r}: {k} is not allowed in an equivalent model")
        if k not in LAYER_KINDS + RAW_ONLY_KINDS:
            raise ModelError(f"layer {layer.id!r}: unknown kind {k!r}")
        inp = shape
        if k == "conv":
            w = layer.weight
            if w is None or w.ndim != 4:
                raise ModelError(f"layer {layer.id!r}: conv kernel must be rank 4")
            if len(shape) != 3 or shape[2] != w.shape[2]:
                raise DimensionError(
                    f"layer {layer.id!r} expects {w.shape[2]} input channels but {prev!r} produces shape {shape}"
                )
            ho, wo = T.conv_output_hw(shape[0], shape[1], w.shape[0], w.shape[1], layer.stride, layer.padding)
            shape = (ho, wo, w.shape[3])
        elif k == "fc":
            w = layer.weight
            if w is None or w.ndim != 2:
                raise ModelError(f"layer {layer.id!r}: fc weight must be rank 2")
            if len(shape) != 1 or shape[0] != w.shape[0]:
                raise DimensionError(f"layer {layer.id!r} expects a length-{w.shape[0]} vector but {prev!r} produces {shape}")
            shape = (w.shape[1],)
        elif k == "bias_add":
            want = 1 if layer.broadcast else shape[-1]
            if equivalent:
                s = layer.bias_slice
                if s is None:
                    raise LayoutError(f"layer {layer.id!r}: equivalent bias_add needs a layout slice")
                if s.length != want:
                    raise DimensionError(f"layer {layer.id!r}: bias slice length {s.length}, {prev!r} needs {want}")
            else:
                if layer.weight is None or layer.weight.size != want:
                    got = None if layer.weight is None else layer.weight.size
                    raise DimensionError(f"layer {layer.id!r}: bias length {got}, {prev!r} produces {want} channels")
        elif k in ("avg_pool", "max_pool"):
            if len(shape) != 3:
                raise DimensionError(f"layer {layer.id!r}: pooling needs a feature map, {prev!r} gives {shape}")
            ho, wo = T.conv_output_hw(shape[0], shape[1], layer.window, layer.window, layer.stride, layer.padding)
            shape = (ho, wo, shape[2])
        elif k == "global_pool":
            if len(shape) != 3:
                raise DimensionError(f"layer {layer.id!r}: global pooling needs a feature map, {prev!r} gives {shape}")
            shape = (shape[2],)
        elif k == "activation":
            if layer.activation is None:
                raise ModelError(f"layer {layer.id!r}: missing activation descriptor")
        elif k == "shortcut_begin":
            saved[layer.id] = shape
        elif k == "shortcut_add":
            if layer.source not in saved:
                raise ModelError(f"layer {layer.id!r}: unknown shortcut source {layer.source!r}")
            if layer.shortcut not in SHORTCUT_KINDS:
                raise ModelError(f"layer {layer.id!r}: unknown shortcut kind {layer.shortcut!r}")
            src = saved[layer.source]
            if layer.shortcut == "avgpool_pad":
                ho, wo = T.conv_output_hw(src[0], src[1], layer.window, layer.window, layer.stride, "SAME")
                if shape[2] < src[2]:
                    raise DimensionError(f"layer {layer.id!r}: cannot pad {src[2]} channels down to {shape[2]}")
                src = (ho, wo, shape[2])
            if src != shape:
                raise DimensionError(
                    f"layer {layer.id!r}: shortcut from {layer.source!r} has shape {src}, {prev!r} produces {shape}"
                )
        elif k == "batch_norm":
            if layer.bn is None or layer.bn.channels != shape[-1]:
                raise DimensionError(f"layer {layer.id!r}: batch norm width does not match {prev!r} ({shape})")
        elif k == "multiplier":
            if layer.multiplier is None or not np.isfinite(layer.multiplier):
                raise ModelError(f"layer {layer.id!r}: multiplier must be finite")
        out.append((inp, shape))
        prev = layer.id
    return out


# ---------------------------------------------------------------------------
# Forward pass


@dataclass
class ActivationTrace:
    """Every layer output from one forward pass (batch axis dropped)."""

    model: ModelGraph
    image: np.ndarray
    outputs: list[np.ndarray]
    pools: dict[str, MaxPoolRecord]
    kinks: int = 0

    def input_of(self, position: int) -> np.ndarray:
        return self.image if position == 0 else self.outputs[position - 1]

    def output_of(self, position: int) -> np.ndarray:
        return self.outputs[position]

    @property
    def output(self) -> np.ndarray:
        return self.outputs[-1]

    @property
    def ties(self) -> int:
        return sum(r.ties for r in self.pools.values())

    def pre_activation(self, layer_id: str) -> np.ndarray:
        return self.input_of(self.model.index(layer_id))

    def post_activation(self, layer_id: str) -> np.ndarray:
        return self.output_of(self.model.index(layer_id))

    def derivative(self, position: int) -> np.ndarray:
        layer = self.model.layers[position]
        return layer.activation.derivative(self.input_of(position))

    def conv_output(self, l: int) -> np.ndarray:
        """Convolution sum of conv layer ``l`` before any bias is added."""
        pos, _ = self.model.conv(l)
        return self.outputs[pos]

    def fc_output(self) -> np.ndarray:
        return self.outputs[self.model.fc_position]


def shortcut_forward(layer: Layer, src: np.ndarray, channels: int) -> np.ndarray:
    if layer.shortcut == "identity":
        return src
    pooled = T.avg_pool(src, layer.window, layer.stride, "SAME")
    pad = channels - pooled.shape[-1]
    if pad:
        widths = [(0, 0)] * (pooled.ndim - 1) + [(0, pad)]
        pooled = np.pad(pooled, widths)
    return pooled


def shortcut_transpose(layer: Layer, g: np.ndarray, src_shape: tuple) -> np.ndarray:
    if layer.shortcut == "identity":
        return g
    g = g[..., : src_shape[2]]
    return T.avg_pool_transpose(g, src_shape[:2], layer.window, layer.stride, "SAME")


def _bias_broadcast(bias: np.ndarray, like: np.ndarray) -> np.ndarray:
    return bias.reshape((1,) * (like.ndim - 1) + (-1,)) if bias.size > 1 else bias.reshape(())


def _run(model: ModelGraph, image: np.ndarray, bias_of: Callable[[Layer], np.ndarray], check: bool = True) -> ActivationTrace:
    dt = model.dtype
    x = np.asarray(image, dtype=dt)
    if x.shape != model.input_shape:
        raise DimensionError(f"input shape {x.shape} does not match model input {model.input_shape}")
    cur = x
    outputs: list[np.ndarray] = []
    pools: dict[str, MaxPoolRecord] = {}
    saved: dict[str, np.ndarray] = {}
    kinks = 0
    for layer in model.layers:
        k = layer.kind
        if k == "conv":
            cur = T.conv2d(cur, layer.weight, layer.stride, layer.padding)
        elif k == "fc":
            cur = cur @ layer.weight.astype(dt, copy=False)
        elif k == "bias_add":
            cur = cur + _bias_broadcast(bias_of(layer), cur)
        elif k == "activation":
            if layer.activation.homogeneous:
                kinks += int(np.count_nonzero(cur == 0))
            cur = layer.activation.apply(cur)
        elif k == "avg_pool":
            cur = T.avg_pool(cur, layer.window, layer.stride, layer.padding)
        elif k == "max_pool":
            cur, rec = T.max_pool(cur, layer.window, layer.stride, layer.padding)
            pools[layer.id] = rec
        elif k == "global_pool":
            cur = T.global_avg_pool(cur)
        elif k == "shortcut_begin":
            saved[layer.id] = cur
        elif k == "shortcut_add":
            cur = cur + shortcut_forward(layer, saved[layer.source], cur.shape[-1])
        elif k == "batch_norm":
            cur = layer.bn.apply(cur)
        elif k == "multiplier":
            cur = cur * dt.type(layer.multiplier)
        cur = np.asarray(cur, dtype=dt)
        if check:
            T.check_finite(cur, f"layer {layer.id!r}")
        outputs.append(cur)
    return ActivationTrace(model, x, outputs, pools, kinks)


def forward(model: ModelGraph, x: ExtendedInput, check: bool = True) -> ActivationTrace:
    """Run an equivalent model on an extended input, recording every layer."""
    if model.form != "equivalent":
        raise ModelError("forward needs an equivalent-form model; fold it first or use forward_raw")
    layout = model.bias_layout
    if tuple(x.layout) != layout:
        raise LayoutError(
            f"input bias layout ({len(x.layout)} slices, {x.bias_vec.size} values) does not match the model "
            f"({len(layout)} slices, {model.n_bias} values)"
        )
    bias = np.asarray(x.bias_vec, dtype=model.dtype)

    def bias_of(layer: Layer) -> np.ndarray:
        s = layer.bias_slice
        return bias[s.offset : s.stop]

    return _run(model, x.image, bias_of, check)


def forward_raw(model: ModelGraph, image: np.ndarray, check: bool = True) -> ActivationTrace:
    """Run a raw model (biases, batch norm and multipliers held in the layers)."""
    if model.form != "raw":
        raise ModelError("forward_raw needs a raw-form model")
    return _run(model, image, lambda layer: np.asarray(layer.weight, dtype=model.dtype), check)


def stride_index(ho: int, wo: int, s: int) -> tuple[int, int]:
    if not 0 <= s < ho * wo:
        raise ModelError(f"stride move {s} out of range [0, {ho * wo})")
    return divmod(s, wo)


def unit_linear_activation(trace: ActivationTrace, layer, s: Optional[int] = None, i: Optional[int] = None, k: Optional[int] = None) -> float:
    """Weighted sum feeding a unit, before that layer's own bias.

    ``layer`` is a conv index ``>= 1`` (with stride move ``s`` and out
    channel ``i``) or ``"fc"`` (with class ``k``).
    """
    if layer == "fc":
        c = trace.fc_output()
        if k is None or not 0 <= k < c.shape[0]:
            raise ModelError(f"class {k} out of range [0, {c.shape[0]})")
        return float(c[k])
    layer = int(layer)
    if layer == 0:
        raise ModelError("conv layer 0 is excluded: its kernels already live in the input space")
    c = trace.conv_output(layer)
    ho, wo, cout = c.shape
    r, q = stride_index(ho, wo, s)
    if i is None or not 0 <= i < cout:
        raise ModelError(f"out channel {i} out of range [0, {cout})")
    return float(c[r, q, i])
