"""Dense tensor primitives: the extended input point, its inner product,
convolution and pooling (with their transposes), and the binary tensor
file format.

Tensors are plain numpy arrays in ``float32`` or ``float64``. Feature
maps use HWC layout with an optional leading batch axis. All arithmetic
stays in the array's own dtype unless ``accumulate`` asks for a wider one.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import BlobError, DimensionError, LayoutError, NonFiniteError

DTYPES = {"f32": np.dtype(np.float32), "f64": np.dtype(np.float64)}
DTYPE_NAMES = {v: k for k, v in DTYPES.items()}

MAGIC = b"ABMTENSR"
_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}

# cap on the im2col buffer built per conv call; larger batches are chunked
_WINDOW_BUDGET = 1 << 23


def resolve_dtype(dtype) -> np.dtype:
    if isinstance(dtype, str) and dtype in DTYPES:
        return DTYPES[dtype]
    dt = np.dtype(dtype)
    if dt not in _DTYPE_TAGS:
        raise DimensionError(f"unsupported dtype {dt}; use float32 or float64")
    return dt


def smallest_normal(dtype) -> float:
    return float(np.finfo(resolve_dtype(dtype)).tiny)


def check_finite(arr: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise NonFiniteError(f"{what}: {bad} non-finite value(s)")
    return arr


# ---------------------------------------------------------------------------
# Extended input


@dataclass(frozen=True)
class BiasSlice:
    layer_id: str
    offset: int
    length: int

    @property
    def stop(self) -> int:
        return self.offset + self.length


@dataclass(frozen=True)
class ExtendedInput:
    """A point ``[image; bias_vec]`` of the extended input space.

    ``layout`` records where each bias-carrying layer finds its slice of
    ``bias_vec``; slices are contiguous and in layer order.
    """

    image: np.ndarray
    bias_vec: np.ndarray
    layout: tuple[BiasSlice, ...] = field(default=())

    def __post_init__(self):
        image = np.asarray(self.image)
        bias = np.asarray(self.bias_vec).reshape(-1)
        if image.ndim != 3:
            raise DimensionError(f"image must be H x W x C, got shape {image.shape}")
        if bias.dtype != image.dtype:
            bias = bias.astype(image.dtype)
        layout = tuple(BiasSlice(*s) if not isinstance(s, BiasSlice) else s for s in self.layout)
        pos = 0
        for s in layout:
            if s.offset != pos or s.length <= 0:
                raise LayoutError(
                    f"bias slice for {s.layer_id!r} at offset {s.offset} (length {s.length}); expected offset {pos}"
                )
            pos = s.stop
        if layout and pos != bias.size:
            raise LayoutError(f"layout covers {pos} bias values but bias vector has {bias.size}")
        object.__setattr__(self, "image", image)
        object.__setattr__(self, "bias_vec", bias)
        object.__setattr__(self, "layout", layout)

    @property
    def dtype(self) -> np.dtype:
        return self.image.dtype

    @property
    def d_image(self) -> int:
        return int(self.image.size)

    @property
    def d_in(self) -> int:
        return int(self.image.size + self.bias_vec.size)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.image.reshape(-1), self.bias_vec])

    def slice_for(self, layer_id: str) -> np.ndarray:
        for s in self.layout:
            if s.layer_id == layer_id:
                return self.bias_vec[s.offset : s.stop]
        raise LayoutError(f"no bias slice for layer {layer_id!r}")

    def scaled(self, k: float) -> "ExtendedInput":
        k = self.dtype.type(k)
        return ExtendedInput(self.image * k, self.bias_vec * k, self.layout)

    def with_image(self, image: np.ndarray) -> "ExtendedInput":
        return ExtendedInput(np.asarray(image, dtype=self.dtype), self.bias_vec, self.layout)

    def with_bias(self, bias_vec: np.ndarray) -> "ExtendedInput":
        return ExtendedInput(self.image, np.asarray(bias_vec, dtype=self.dtype), self.layout)

    def astype(self, dtype) -> "ExtendedInput":
        dt = resolve_dtype(dtype)
        return ExtendedInput(self.image.astype(dt), self.bias_vec.astype(dt), self.layout)


def inner_product(a: ExtendedInput, b) -> float:
    """``<[x; b] | [y; d]>`` as the sum of the image and bias dot products.

    ``b`` is another :class:`ExtendedInput` or an ``(image, bias)`` pair.
    """
    if isinstance(b, ExtendedInput):
        y, d = b.image, b.bias_vec
    else:
        y, d = (np.asarray(t) for t in b)
    if a.image.shape != y.shape:
        for axis, (p, q) in enumerate(zip(a.image.shape, y.shape)):
            if p != q:
                raise DimensionError(f"image axis {axis} differs: {p} vs {q}")
        raise DimensionError(f"image rank differs: {a.image.ndim} vs {y.ndim}")
    d = d.reshape(-1)
    if a.bias_vec.shape != d.shape:
        raise DimensionError(f"bias axis 0 differs: {a.bias_vec.size} vs {d.size}")
    return float(np.dot(a.image.reshape(-1), y.reshape(-1)) + np.dot(a.bias_vec, d))


# ---------------------------------------------------------------------------
# Convolution


def same_padding(size: int, window: int, stride: int) -> tuple[int, int, int]:
    """Output size and (before, after) zero padding for SAME mode.

    An odd total pad puts the extra row/column after (bottom/right).
    """
    out = -(-size // stride)
    total = max((out - 1) * stride + window - size, 0)
    return out, total // 2, total - total // 2


def _geometry(h: int, w: int, r1: int, r2: int, stride: int, padding: str):
    if stride < 1:
        raise DimensionError(f"stride must be >= 1, got {stride}")
    padding = padding.upper()
    if padding == "SAME":
        ho, pt, pb = same_padding(h, r1, stride)
        wo, pl, pr = same_padding(w, r2, stride)
    elif padding == "VALID":
        if r1 > h or r2 > w:
            raise DimensionError(f"window {r1}x{r2} larger than input {h}x{w} under VALID padding")
        ho, wo = (h - r1) // stride + 1, (w - r2) // stride + 1
        pt = pb = pl = pr = 0
    else:
        raise DimensionError(f"unknown padding {padding!r}")
    return ho, wo, (pt, pb), (pl, pr)


def _pad_hw(x: np.ndarray, ph, pw, value=0.0) -> np.ndarray:
    if not any(ph) and not any(pw):
        return x
    widths = [(0, 0)] * (x.ndim - 3) + [ph, pw, (0, 0)]
    return np.pad(x, widths, constant_values=value)


def _windows(xp: np.ndarray, r1: int, r2: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # (..., ho, wo, C, r1, r2) view; no copy
    win = sliding_window_view(xp, (r1, r2), axis=(-3, -2))
    return win[..., : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride, :, :, :]


def _batched(x: np.ndarray):
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    if x.ndim != 4:
        raise DimensionError(f"feature maps must be HxWxC or NxHxWxC, got shape {x.shape}")
    return x, squeeze


def conv2d(x: np.ndarray, kernel: np.ndarray, stride: int = 1, padding: str = "SAME", accumulate=None) -> np.ndarray:
    """Cross-correlation of HWC maps with an ``r1 x r2 x c_in x c_out`` kernel."""
    if accumulate is not None:
        acc = resolve_dtype(accumulate)
        return conv2d(x.astype(acc), kernel.astype(acc), stride, padding).astype(x.dtype)
    x, squeeze = _batched(np.asarray(x))
    kernel = np.asarray(kernel)
    if kernel.ndim != 4:
        raise DimensionError(f"kernel must be rank 4, got shape {kernel.shape}")
    r1, r2, cin, cout = kernel.shape
    if x.shape[-1] != cin:
        raise DimensionError(f"channel axis differs: input has {x.shape[-1]}, kernel expects {cin}")
    n, h, w, _ = x.shape
    ho, wo, ph, pw = _geometry(h, w, r1, r2, stride, padding)
    xp = _pad_hw(x, ph, pw)
    kt = kernel.transpose(2, 0, 1, 3).reshape(cin * r1 * r2, cout).astype(x.dtype, copy=False)
    per_item = max(ho * wo * cin * r1 * r2, 1)
    chunk = max(1, _WINDOW_BUDGET // per_item)
    out = np.empty((n, ho, wo, cout), dtype=x.dtype)
    for start in range(0, n, chunk):
        win = _windows(xp[start : start + chunk], r1, r2, stride, ho, wo)
        m = win.shape[0]
        cols = win.reshape(m * ho * wo, cin * r1 * r2)
        out[start : start + m] = (cols @ kt).reshape(m, ho, wo, cout)
    return out[0] if squeeze else out


def conv2d_transpose(g: np.ndarray, kernel: np.ndarray, input_hw: tuple[int, int], stride: int = 1, padding: str = "SAME") -> np.ndarray:
    """Adjoint of :func:`conv2d` with respect to its input."""
    g, squeeze = _batched(np.asarray(g))
    r1, r2, cin, cout = kernel.shape
    h, w = input_hw
    ho, wo, ph, pw = _geometry(h, w, r1, r2, stride, padding)
    if g.shape[1:] != (ho, wo, cout):
        raise DimensionError(f"cotangent shape {g.shape[1:]} does not match conv output {(ho, wo, cout)}")
    n = g.shape[0]
    kernel = kernel.astype(g.dtype, copy=False)
    gp = np.zeros((n, h + sum(ph), w + sum(pw), cin), dtype=g.dtype)
    hi, wi = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    flat = g.reshape(-1, cout)
    for a in range(r1):
        for b in range(r2):
            contrib = (flat @ kernel[a, b].T).reshape(n, ho, wo, cin)
            gp[:, a : a + hi : stride, b : b + wi : stride, :] += contrib
    out = gp[:, ph[0] : ph[0] + h, pw[0] : pw[0] + w, :]
    out = np.ascontiguousarray(out)
    return out[0] if squeeze else out


def conv_output_hw(h: int, w: int, r1: int, r2: int, stride: int, padding: str) -> tuple[int, int]:
    ho, wo, _, _ = _geometry(h, w, r1, r2, stride, padding)
    return ho, wo


# ---------------------------------------------------------------------------
# Pooling


def _check_window(window, h, w):
    if window < 1:
        raise DimensionError(f"window must be >= 1, got {window}")
    if window > h or window > w:
        raise DimensionError(f"pool window {window} exceeds input {h}x{w}")


def _pool_counts(h, w, window, stride, padding, dtype):
    ho, wo, ph, pw = _geometry(h, w, window, window, stride, padding)
    ones = _pad_hw(np.ones((1, h, w, 1), dtype=dtype), ph, pw)
    counts = _windows(ones, window, window, stride, ho, wo).sum(axis=(-2, -1))[0]
    return counts, (ho, wo, ph, pw)


def avg_pool(x: np.ndarray, window: int, stride: int, padding: str = "SAME") -> np.ndarray:
    """Window mean; under SAME padding only in-bounds elements are counted."""
    x, squeeze = _batched(np.asarray(x))
    n, h, w, c = x.shape
    _check_window(window, h, w)
    counts, (ho, wo, ph, pw) = _pool_counts(h, w, window, stride, padding, x.dtype)
    xp = _pad_hw(x, ph, pw)
    sums = _windows(xp, window, window, stride, ho, wo).sum(axis=(-2, -1))
    out = sums / counts
    return out[0] if squeeze else out


def avg_pool_transpose(g: np.ndarray, input_hw, window: int, stride: int, padding: str = "SAME") -> np.ndarray:
    g, squeeze = _batched(np.asarray(g))
    h, w = input_hw
    counts, (ho, wo, ph, pw) = _pool_counts(h, w, window, stride, padding, g.dtype)
    n, c = g.shape[0], g.shape[-1]
    scaled = g / counts
    gp = np.zeros((n, h + sum(ph), w + sum(pw), c), dtype=g.dtype)
    hi, wi = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    for a in range(window):
        for b in range(window):
            gp[:, a : a + hi : stride, b : b + wi : stride, :] += scaled
    out = np.ascontiguousarray(gp[:, ph[0] : ph[0] + h, pw[0] : pw[0] + w, :])
    return out[0] if squeeze else out


@dataclass(frozen=True)
class MaxPoolRecord:
    """Winning window offsets from a max-pool forward pass."""

    argmax: np.ndarray  # (N, ho, wo, C) flat index into the window
    ties: int


def max_pool(x: np.ndarray, window: int, stride: int, padding: str = "SAME"):
    """Returns ``(out, record)``; ties go to the lowest flat window index."""
    x, squeeze = _batched(np.asarray(x))
    n, h, w, c = x.shape
    _check_window(window, h, w)
    ho, wo, ph, pw = _geometry(h, w, window, window, stride, padding)
    xp = _pad_hw(x, ph, pw, value=-np.inf)
    win = _windows(xp, window, window, stride, ho, wo).reshape(n, ho, wo, c, window * window)
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    ties = int(np.count_nonzero((win == out[..., None]).sum(axis=-1) > 1))
    out = np.ascontiguousarray(out)
    rec = MaxPoolRecord(idx, ties)
    return (out[0] if squeeze else out), rec


def max_pool_transpose(g: np.ndarray, record: MaxPoolRecord, input_hw, window: int, stride: int, padding: str = "SAME") -> np.ndarray:
    g, squeeze = _batched(np.asarray(g))
    h, w = input_hw
    ho, wo, ph, pw = _geometry(h, w, window, window, stride, padding)
    n, c = g.shape[0], g.shape[-1]
    idx = np.broadcast_to(record.argmax, (n, ho, wo, c)) if record.argmax.shape[0] == 1 else record.argmax
    gp = np.zeros((n, h + sum(ph), w + sum(pw), c), dtype=g.dtype)
    da, db = np.divmod(idx, window)
    ii = np.arange(ho)[None, :, None, None] * stride + da
    jj = np.arange(wo)[None, None, :, None] * stride + db
    nn = np.broadcast_to(np.arange(n)[:, None, None, None], idx.shape)
    cc = np.broadcast_to(np.arange(c)[None, None, None, :], idx.shape)
    np.add.at(gp, (nn, ii, jj, cc), g)
    out = np.ascontiguousarray(gp[:, ph[0] : ph[0] + h, pw[0] : pw[0] + w, :])
    return out[0] if squeeze else out


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    h, w = x.shape[-3], x.shape[-2]
    return x.sum(axis=(-3, -2)) / x.dtype.type(h * w)


def global_avg_pool_transpose(g: np.ndarray, input_hw) -> np.ndarray:
    h, w = input_hw
    scaled = g / g.dtype.type(h * w)
    return np.broadcast_to(scaled[..., None, None, :], scaled.shape[:-1] + (h, w, scaled.shape[-1])).copy()


def pool(x: np.ndarray, kind: str, window: int = 2, stride: int = 2, padding: str = "SAME") -> np.ndarray:
    """Dispatch to ``avg``, ``max`` or ``global_avg`` pooling."""
    if kind == "avg":
        return avg_pool(x, window, stride, padding)
    if kind == "max":
        return max_pool(x, window, stride, padding)[0]
    if kind == "global_avg":
        return global_avg_pool(x)
    raise DimensionError(f"unknown pool kind {kind!r}")


# ---------------------------------------------------------------------------
# Binary tensor format


def tensor_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    dt = arr.dtype
    if dt not in _DTYPE_TAGS:
        raise DimensionError(f"cannot serialize dtype {dt}")
    if arr.ndim > 255:
        raise DimensionError("rank exceeds 255")
    head = MAGIC + struct.pack("<BB", _DTYPE_TAGS[dt], arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr).astype(dt.newbyteorder("<"), copy=False).tobytes()


def read_tensor(f: BinaryIO, where: str = "stream") -> np.ndarray:
    head = f.read(10)
    if len(head) < 10:
        raise BlobError(f"{where}: truncated tensor header")
    if head[:8] != MAGIC:
        raise BlobError(f"{where}: bad magic {head[:8]!r}")
    tag, rank = head[8], head[9]
    if tag not in _TAG_DTYPES:
        raise BlobError(f"{where}: unknown dtype tag {tag}")
    dims_raw = f.read(4 * rank)
    if len(dims_raw) < 4 * rank:
        raise BlobError(f"{where}: truncated dims")
    shape = struct.unpack(f"<{rank}I", dims_raw)
    dt = _TAG_DTYPES[tag]
    count = int(np.prod(shape, dtype=np.int64))
    raw = f.read(count * dt.itemsize)
    if len(raw) < count * dt.itemsize:
        raise BlobError(f"{where}: tensor data out of bounds ({len(raw)} of {count * dt.itemsize} bytes)")
    return np.frombuffer(raw, dtype=dt.newbyteorder("<")).astype(dt).reshape(shape)


def save_tensor(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(tensor_bytes(arr))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor(f, str(path))


def read_tensor_at(blob: bytes, offset: int, where: str = "blob") -> np.ndarray:
    if offset < 0 or offset >= len(blob):
        raise BlobError(f"{where}: offset {offset} outside blob of {len(blob)} bytes")
    return read_tensor(io.BytesIO(blob[offset:]), f"{where}@{offset}")


def pack_tensors(tensors: Sequence[np.ndarray]) -> tuple[bytes, list[int]]:
    """Concatenate tensor records; returns the blob and each record's offset."""
    parts, offsets, pos = [], [], 0
    for t in tensors:
        rec = tensor_bytes(t)
        offsets.append(pos)
        parts.append(rec)
        pos += len(rec)
    return b"".join(parts), offsets
