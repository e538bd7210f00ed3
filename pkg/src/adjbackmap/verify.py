"""Check reconstructed activations against the forward pass.

For every unit the hypersurface at ``k * [x; x_b]`` is contracted with
``[x; x_b]`` and compared with the true pre-bias activation; relative
errors are streamed into fixed-bin histograms so memory does not grow
with the number of samples.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .adjoint import DEFAULT_BLOCK, DEFAULT_K, EvalPoint, Linearization, reconstruct, target_position
from .errors import AdjointError, ModeError
from .graph import ActivationTrace, ModelGraph, forward
from .oracle import layer_jacobian
from .parallel import parallel_map, tree_reduce
from .tensor import ExtendedInput

THRESHOLD = 0.01
N_SIDE_BINS = 50
HIST_EDGES = np.geomspace(1e-12, 1e1, N_SIDE_BINS + 1)
N_BINS = 2 * N_SIDE_BINS + 1
ZERO_BIN = N_SIDE_BINS
# beyond this many Jacobian entries per sample, conv layers are streamed
JACOBIAN_BUDGET = 1 << 24


def relative_errors(c_hat: np.ndarray, c: np.ndarray) -> np.ndarray:
    """``(c_hat - c) / c`` in ``c``'s dtype, zeros in ``c`` replaced by the
    smallest positive normal number of that dtype."""
    c = np.asarray(c)
    dt = c.dtype if c.dtype in (np.float32, np.float64) else np.dtype(np.float64)
    c = c.astype(dt, copy=False)
    c_hat = np.asarray(c_hat, dtype=dt)
    if c_hat.shape != c.shape:
        raise ValueError(f"shape mismatch: {c_hat.shape} vs {c.shape}")
    denom = np.where(c == 0, dt.type(T.smallest_normal(dt)), c)
    return (c_hat - c) / denom


def histogram_bins(eps: np.ndarray) -> np.ndarray:
    """Bin index per error: 0..49 negative (large to small |eps|), 50 exact
    zero, 51..100 positive (small to large). Out-of-range magnitudes clamp
    to the end bins."""
    e = np.asarray(eps, dtype=np.float64).ravel()
    mag = np.abs(e)
    side = np.clip(np.searchsorted(HIST_EDGES, mag, side="right") - 1, 0, N_SIDE_BINS - 1)
    return np.where(e == 0, ZERO_BIN, np.where(e > 0, ZERO_BIN + 1 + side, ZERO_BIN - 1 - side))


def bin_table() -> list[tuple[int, str, float, float]]:
    """``(bin, sign, lo, hi)`` rows describing each histogram bin by |eps| range."""
    rows = []
    for b in range(N_BINS):
        if b == ZERO_BIN:
            rows.append((b, "zero", 0.0, 0.0))
        elif b > ZERO_BIN:
            s = b - ZERO_BIN - 1
            rows.append((b, "+", float(HIST_EDGES[s]), float(HIST_EDGES[s + 1])))
        else:
            s = ZERO_BIN - 1 - b
            rows.append((b, "-", float(HIST_EDGES[s]), float(HIST_EDGES[s + 1])))
    return rows


@dataclass(frozen=True, eq=False)
class RelativeErrorStats:
    layer_id: str
    hist: np.ndarray
    count_total: int
    count_within_1pct: int
    min_abs: float
    max_abs: float
    sum_abs: float

    def __post_init__(self):
        if self.count_within_1pct > self.count_total:
            raise ValueError("count_within_1pct exceeds count_total")
        if int(self.hist.sum()) != self.count_total:
            raise ValueError("histogram does not sum to count_total")

    @classmethod
    def empty(cls, layer_id: str) -> "RelativeErrorStats":
        return cls(layer_id, np.zeros(N_BINS, dtype=np.int64), 0, 0, float("inf"), 0.0, 0.0)

    @classmethod
    def from_errors(cls, layer_id: str, eps: np.ndarray) -> "RelativeErrorStats":
        e = np.asarray(eps).ravel()
        if e.size == 0:
            return cls.empty(layer_id)
        mag = np.abs(e.astype(np.float64))
        hist = np.bincount(histogram_bins(e), minlength=N_BINS).astype(np.int64)
        return cls(
            layer_id,
            hist,
            int(e.size),
            int(np.count_nonzero(mag <= THRESHOLD)),
            float(mag.min()),
            float(mag.max()),
            float(mag.sum()),
        )

    def merge(self, other: "RelativeErrorStats") -> "RelativeErrorStats":
        if other.layer_id != self.layer_id:
            raise ValueError(f"cannot merge stats of {self.layer_id!r} and {other.layer_id!r}")
        return RelativeErrorStats(
            self.layer_id,
            self.hist + other.hist,
            self.count_total + other.count_total,
            self.count_within_1pct + other.count_within_1pct,
            min(self.min_abs, other.min_abs),
            max(self.max_abs, other.max_abs),
            self.sum_abs + other.sum_abs,
        )

    @property
    def mean_abs(self) -> float:
        return self.sum_abs / self.count_total if self.count_total else 0.0

    @property
    def pct_within_1pct(self) -> float:
        return 100.0 * self.count_within_1pct / self.count_total if self.count_total else 100.0

    def to_json(self) -> dict:
        return {
            "layer": self.layer_id,
            "count_total": self.count_total,
            "count_within_1pct": self.count_within_1pct,
            "pct_within_1pct": self.pct_within_1pct,
            "min_abs": self.min_abs if self.count_total else None,
            "max_abs": self.max_abs,
            "mean_abs": self.mean_abs,
            "sum_abs": self.sum_abs,
            "histogram": self.hist.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "RelativeErrorStats":
        min_abs = d["min_abs"] if d["min_abs"] is not None else float("inf")
        return cls(
            d["layer"], np.asarray(d["histogram"], dtype=np.int64), d["count_total"],
            d["count_within_1pct"], min_abs, d["max_abs"], d["sum_abs"],
        )


# ---------------------------------------------------------------------------
# Per-layer verification


def layer_name(layer) -> str:
    return "fc" if layer == "fc" else f"conv{int(layer)}"


def default_layers(model: ModelGraph) -> list:
    layers: list = list(range(1, model.n_conv))
    if model.has_fc:
        layers.append("fc")
    return layers


def _streamed_rm2(model: ModelGraph, lin: Linearization, x: ExtendedInput, layer: int, block: int, threads: int) -> np.ndarray:
    """All rm2 units of a conv layer, contracted block by block."""
    position = target_position(model, layer)
    conv = model.layers[position]
    h, w, _ = model.in_shape(position)
    out_shape = model.out_shape(position)
    n = int(np.prod(out_shape))
    dt = model.dtype
    kernel = conv.weight.astype(dt, copy=False)
    img = x.image.astype(dt, copy=False).ravel()
    xb = x.bias_vec.astype(dt, copy=False)

    def run(start):
        stop = min(start + block, n)
        seeds = np.zeros((stop - start, n), dtype=dt)
        seeds[np.arange(stop - start), np.arange(start, stop)] = 1
        cots = T.conv2d_transpose(seeds.reshape((-1,) + out_shape), kernel, (h, w), conv.stride, conv.padding)
        g_img, g_b = lin.vjp(position, cots)
        return g_img.reshape(stop - start, -1) @ img + g_b @ xb

    parts = parallel_map(run, range(0, n, block), threads)
    return np.concatenate(parts).reshape(out_shape)


def unit_estimates(
    model: ModelGraph,
    lin: Linearization,
    x: ExtendedInput,
    layer,
    at: EvalPoint,
    block: int = DEFAULT_BLOCK,
    threads: int = 1,
    method: str = "auto",
) -> np.ndarray:
    """Reconstructed values c-hat for every unit of a conv layer (rm2) or the fc layer (rm0)."""
    if layer == "fc":
        return reconstruct(model, at, "rm0", "fc", lin=lin, block=block, threads=threads).contract(x)
    position = target_position(model, layer)
    if method == "auto":
        size = int(np.prod(model.in_shape(position))) * model.d_in
        method = "jacobian" if size <= JACOBIAN_BUDGET else "stream"
    if method == "stream":
        return _streamed_rm2(model, lin, x, layer, block, threads)
    h = reconstruct(model, at, "rm2", layer, method=method, lin=lin, block=block, threads=threads)
    return h.contract(x)


def true_values(trace: ActivationTrace, layer) -> np.ndarray:
    return trace.fc_output() if layer == "fc" else trace.conv_output(int(layer))


def verify_layer(
    model: ModelGraph,
    x: ExtendedInput,
    layer,
    k: float = DEFAULT_K,
    lin: Optional[Linearization] = None,
    trace: Optional[ActivationTrace] = None,
    block: int = DEFAULT_BLOCK,
    threads: int = 1,
    method: str = "auto",
) -> RelativeErrorStats:
    """Relative errors of every unit of one layer for one extended input."""
    if layer != "fc" and int(layer) == 0:
        raise ModeError("conv layer 0 is excluded: its kernels already live in the input space")
    at = EvalPoint(x, k)
    lin = lin or Linearization.at(model, at)
    trace = trace or forward(model, x)
    c_hat = unit_estimates(model, lin, x, layer, at, block, threads, method)
    return RelativeErrorStats.from_errors(layer_name(layer), relative_errors(c_hat, true_values(trace, layer)))


@dataclass(frozen=True)
class SampleResult:
    stats: tuple
    kinks: int
    ties: int


def verify_sample(model: ModelGraph, x: ExtendedInput, k: float, layers, block: int = DEFAULT_BLOCK, method: str = "auto") -> SampleResult:
    at = EvalPoint(x, k)
    lin = Linearization.at(model, at)
    trace = forward(model, x)
    stats = tuple(verify_layer(model, x, l, k, lin, trace, block, 1, method) for l in layers)
    return SampleResult(stats, lin.trace.kinks, lin.trace.ties)


@dataclass(frozen=True, eq=False)
class VerificationReport:
    model: str
    dtype: str
    k: float
    samples: int
    layers: tuple
    kinks: int = 0
    ties: int = 0
    runtime_s: float = 0.0

    @property
    def max_abs(self) -> float:
        return max((s.max_abs for s in self.layers), default=0.0)

    @property
    def min_pct_within_1pct(self) -> float:
        return min((s.pct_within_1pct for s in self.layers), default=100.0)

    def layer(self, layer_id: str) -> RelativeErrorStats:
        for s in self.layers:
            if s.layer_id == layer_id:
                return s
        raise KeyError(layer_id)

    def to_json(self, include_runtime: bool = True) -> dict:
        d = {
            "model": self.model,
            "dtype": self.dtype,
            "k": self.k,
            "samples": self.samples,
            "threshold": THRESHOLD,
            "kinks": self.kinks,
            "max_pool_ties": self.ties,
            "max_abs": self.max_abs,
            "layers": [s.to_json() for s in self.layers],
        }
        if include_runtime:
            d["runtime_s"] = self.runtime_s
        return d

    def canonical(self) -> str:
        """Serialized report without the wall-clock field, for reproducibility checks."""
        return json.dumps(self.to_json(include_runtime=False), sort_keys=True)

    @classmethod
    def from_json(cls, d: dict) -> "VerificationReport":
        return cls(
            d["model"], d["dtype"], d["k"], d["samples"],
            tuple(RelativeErrorStats.from_json(s) for s in d["layers"]),
            d.get("kinks", 0), d.get("max_pool_ties", 0), d.get("runtime_s", 0.0),
        )

    def write(self, out_dir, hist_dir=None) -> list[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = [out_dir / "report.json", out_dir / "report.csv"]
        paths[0].write_text(json.dumps(self.to_json(), sort_keys=True, indent=1) + "\n")
        write_table(paths[1], [self])
        if hist_dir is not None:
            paths += write_histograms(hist_dir, self)
        return paths


def aggregate_report(
    stats: Sequence[RelativeErrorStats],
    model: str = "",
    dtype: str = "f64",
    k: float = DEFAULT_K,
    samples: int = 0,
    kinks: int = 0,
    ties: int = 0,
    runtime_s: float = 0.0,
) -> VerificationReport:
    """Merge per-layer stats (any number per layer) into a report; layer
    order follows first appearance."""
    if not stats:
        raise ValueError("no statistics to aggregate")
    groups: dict[str, list] = {}
    for s in stats:
        groups.setdefault(s.layer_id, []).append(s)
    merged = tuple(tree_reduce(lambda a, b: a.merge(b), g) for g in groups.values())
    return VerificationReport(model, dtype, k, samples, merged, kinks, ties, runtime_s)


def verify_model(
    model: ModelGraph,
    samples: Sequence[ExtendedInput],
    k: float = DEFAULT_K,
    layers=None,
    threads: int = 1,
    block: int = DEFAULT_BLOCK,
    method: str = "auto",
) -> VerificationReport:
    """Verify every listed layer on every sample; samples run in parallel
    and partial stats merge over a fixed tree, so results do not depend
    on ``threads``."""
    if not samples:
        raise AdjointError("no input samples")
    layers = default_layers(model) if layers is None else list(layers)
    t0 = time.perf_counter()
    results = parallel_map(lambda x: verify_sample(model, x, k, layers, block, method), samples, threads)
    merged = [tree_reduce(lambda a, b: a.merge(b), [r.stats[i] for r in results]) for i in range(len(layers))]
    return VerificationReport(
        model.name,
        T.DTYPE_NAMES[model.dtype],
        float(k),
        len(samples),
        tuple(merged),
        sum(r.kinks for r in results),
        sum(r.ties for r in results),
        time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# Output files


def write_table(path, reports: Sequence[VerificationReport]) -> Path:
    """Percent of units with |eps| <= 1%: one row per verified layer, one
    column per model, N/A where a model has fewer layers."""
    path = Path(path)
    n_rows = max(len(r.layers) for r in reports)
    with path.open("w", newline="") as f:
        out = csv.writer(f)
        out.writerow(["row"] + [r.model or f"model{i}" for i, r in enumerate(reports)])
        for i in range(n_rows):
            row = [f"eps_{i + 1}"]
            for r in reports:
                if i < len(r.layers):
                    s = r.layers[i]
                    cell = f"{s.pct_within_1pct:.4f}"
                    row.append(cell + " (FC)" if s.layer_id == "fc" else cell)
                else:
                    row.append("N/A")
            out.writerow(row)
    return path


def write_histograms(hist_dir, report: VerificationReport) -> list[Path]:
    hist_dir = Path(hist_dir)
    hist_dir.mkdir(parents=True, exist_ok=True)
    bins = bin_table()
    paths = []
    for s in report.layers:
        p = hist_dir / f"{s.layer_id}.csv"
        with p.open("w", newline="") as f:
            out = csv.writer(f)
            out.writerow(["bin", "sign", "abs_lo", "abs_hi", "count"])
            for (b, sign, lo, hi), n in zip(bins, s.hist.tolist()):
                out.writerow([b, sign, repr(lo), repr(hi), n])
        paths.append(p)
    return paths


# ---------------------------------------------------------------------------
# Dense oracle


def oracle_dense_check(model: ModelGraph, x: ExtendedInput, layer, k: float = DEFAULT_K) -> float:
    """Largest deviation between the pre-bias output of ``layer`` and the
    dense ``J_l [x; x_b]``, relative to the output's largest magnitude."""
    _, j_out = layer_jacobian(model, x.scaled(k), layer)
    c = true_values(forward(model, x), layer).astype(np.float64).ravel()
    c_hat = j_out @ x.flat().astype(np.float64)
    scale = float(np.abs(c).max()) if c.size else 0.0
    dev = float(np.abs(c_hat - c).max()) if c.size else 0.0
    if dev == 0.0:
        return 0.0
    return dev / max(scale, T.smallest_normal(np.float64))
