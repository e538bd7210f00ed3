"""Model manifests, tensor blobs, architecture templates and seeded
random models/inputs.

A manifest is canonical JSON (sorted keys) describing the layer list;
every tensor it mentions is a record in one accompanying blob file,
addressed by byte offset. Equivalent-form manifests may also name the
bias vector file written by ``fold``.
"""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path
from typing import Optional, Union

import jsonschema
import numpy as np

from . import tensor as T
from .errors import BlobError, ModelError, SchemaError
from .fold import BatchNormParams
from .graph import Activation, Layer, ModelGraph
from .tensor import BiasSlice

SCHEMA_VERSION = 1
BUILTIN_TEMPLATES = ("toy2", "toy4", "toy-res", "vgg-mini", "vgg7", "resnet20", "resnet20-fixup")

_REF = {"type": "object", "required": ["offset"], "properties": {"offset": {"type": "integer", "minimum": 0}}}
_KINDS = [
    "conv", "bias_add", "activation", "avg_pool", "max_pool", "global_pool",
    "fc", "shortcut_begin", "shortcut_add", "batch_norm", "multiplier",
]


def _requires(kind, props, required):
    return {
        "if": {"properties": {"kind": {"const": kind}}},
        "then": {"required": required, "properties": props},
    }


MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "form", "dtype", "input_shape", "blob", "layers"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "name": {"type": "string"},
        "form": {"enum": ["raw", "equivalent"]},
        "dtype": {"enum": ["f32", "f64"]},
        "input_shape": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 3, "maxItems": 3},
        "blob": {"type": "string"},
        "bias_vector": {"type": ["string", "null"]},
        "layers": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "kind"],
                "properties": {
                    "id": {"type": "string", "minLength": 1},
                    "kind": {"enum": _KINDS},
                    "stride": {"type": "integer", "minimum": 1},
                    "window": {"type": "integer", "minimum": 1},
                    "padding": {"enum": ["SAME", "VALID"]},
                    "broadcast": {"type": "boolean"},
                },
                "allOf": [
                    _requires("conv", {"kernel": _REF}, ["kernel"]),
                    _requires("fc", {"weight": _REF}, ["weight"]),
                    _requires(
                        "activation",
                        {
                            "activation": {
                                "type": "object",
                                "required": ["kind"],
                                "properties": {
                                    "kind": {"enum": ["relu", "leaky_relu", "piecewise_linear"]},
                                    "leakiness": {"type": "number"},
                                    "breakpoints": {"type": "array", "items": {"type": "number"}},
                                    "slopes": {"type": "array", "items": {"type": "number"}},
                                },
                            }
                        },
                        ["activation"],
                    ),
                    _requires("avg_pool", {}, ["window", "stride"]),
                    _requires("max_pool", {}, ["window", "stride"]),
                    _requires(
                        "shortcut_add",
                        {"source": {"type": "string"}, "shortcut": {"enum": ["identity", "avgpool_pad"]}},
                        ["source", "shortcut"],
                    ),
                    _requires(
                        "batch_norm",
                        {"gamma": _REF, "beta": _REF, "mean": _REF, "var": _REF, "eps": {"type": "number", "exclusiveMinimum": 0}},
                        ["gamma", "beta", "mean", "var", "eps"],
                    ),
                    _requires("multiplier", {"value": {"type": "number"}}, ["value"]),
                ],
            },
        },
    },
}


def _pointer(path) -> str:
    return "".join(f"/{p}" for p in path)


def validate_manifest(doc: dict) -> None:
    validator = jsonschema.Draft202012Validator(MANIFEST_SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: (len(e.absolute_path), list(map(str, e.absolute_path))))
    if errors:
        err = errors[0]
        raise SchemaError(err.message, _pointer(err.absolute_path))
    form = doc["form"]
    for n, layer in enumerate(doc["layers"]):
        if layer["kind"] == "bias_add":
            need = "slice" if form == "equivalent" else "bias"
            if need not in layer:
                raise SchemaError(f"'{need}' is a required property for a {form} bias_add", f"/layers/{n}")


# ---------------------------------------------------------------------------
# Saving and loading


def _layer_to_json(layer: Layer, tensors: list) -> dict:
    def ref(arr):
        tensors.append(arr)
        return {"offset": len(tensors) - 1}  # index, patched to a byte offset later

    d: dict = {"id": layer.id, "kind": layer.kind}
    k = layer.kind
    if k == "conv":
        d.update(kernel=ref(layer.weight), stride=layer.stride, padding=layer.padding)
    elif k == "fc":
        d["weight"] = ref(layer.weight)
    elif k == "bias_add":
        d["broadcast"] = layer.broadcast
        if layer.bias_slice is not None:
            d["slice"] = [layer.bias_slice.offset, layer.bias_slice.length]
        else:
            d["bias"] = ref(layer.weight)
    elif k == "activation":
        d["activation"] = layer.activation.to_json()
    elif k in ("avg_pool", "max_pool"):
        d.update(window=layer.window, stride=layer.stride, padding=layer.padding)
    elif k == "shortcut_add":
        d.update(source=layer.source, shortcut=layer.shortcut, window=layer.window, stride=layer.stride)
    elif k == "batch_norm":
        bn = layer.bn
        d.update(gamma=ref(bn.gamma), beta=ref(bn.beta), mean=ref(bn.mean), var=ref(bn.var), eps=bn.eps)
    elif k == "multiplier":
        d["value"] = layer.multiplier
    return d


def _patch_refs(obj, offsets):
    if isinstance(obj, dict):
        if set(obj) == {"offset"}:
            return {"offset": offsets[obj["offset"]]}
        return {k: _patch_refs(v, offsets) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_patch_refs(v, offsets) for v in obj]
    return obj


def manifest_document(model: ModelGraph, blob_name: str, bias_vector: Optional[str] = None) -> tuple[dict, bytes]:
    tensors: list = []
    layers = [_layer_to_json(l, tensors) for l in model.layers]
    blob, offsets = T.pack_tensors(tensors)
    doc = {
        "schema_version": SCHEMA_VERSION,
        "name": model.name,
        "form": model.form,
        "dtype": T.DTYPE_NAMES[model.dtype],
        "input_shape": list(model.input_shape),
        "blob": blob_name,
        "layers": _patch_refs(layers, offsets),
    }
    if bias_vector is not None:
        doc["bias_vector"] = bias_vector
    return doc, blob


def dumps_manifest(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def save_model(model: ModelGraph, path, x_b: Optional[np.ndarray] = None) -> Path:
    """Write ``<path>`` (manifest), ``<stem>.abm`` (blob) and, if given, ``<stem>.xb.abm``."""
    path = Path(path)
    stem = path.name[: -len(path.suffix)] if path.suffix else path.name
    blob_name = f"{stem}.abm"
    xb_name = None
    if x_b is not None:
        if model.form != "equivalent":
            raise ModelError("a bias vector only accompanies an equivalent-form model")
        xb_name = f"{stem}.xb.abm"
        T.save_tensor(path.parent / xb_name, np.asarray(x_b, dtype=model.dtype))
    doc, blob = manifest_document(model, blob_name, xb_name)
    (path.parent / blob_name).write_bytes(blob)
    path.write_text(dumps_manifest(doc))
    return path


def _layer_from_json(d: dict, blob: bytes, dtype, where: str) -> Layer:
    def get(key):
        arr = T.read_tensor_at(blob, d[key]["offset"], f"{where}/{key}")
        return arr.astype(dtype, copy=False)

    k = d["kind"]
    kw: dict = {"id": d["id"], "kind": k}
    if k == "conv":
        kw.update(weight=get("kernel"), stride=d.get("stride", 1), padding=d.get("padding", "SAME"))
    elif k == "fc":
        kw["weight"] = get("weight")
    elif k == "bias_add":
        kw["broadcast"] = bool(d.get("broadcast", False))
        if "slice" in d:
            kw["bias_slice"] = BiasSlice(d["id"], int(d["slice"][0]), int(d["slice"][1]))
        else:
            kw["weight"] = get("bias").reshape(-1)
    elif k == "activation":
        kw["activation"] = Activation.from_json(d["activation"])
    elif k in ("avg_pool", "max_pool"):
        kw.update(window=d["window"], stride=d["stride"], padding=d.get("padding", "SAME"))
    elif k == "shortcut_add":
        kw.update(source=d["source"], shortcut=d["shortcut"], window=d.get("window", 1), stride=d.get("stride", 1))
    elif k == "batch_norm":
        kw["bn"] = BatchNormParams(get("gamma"), get("beta"), get("mean"), get("var"), float(d["eps"]))
    elif k == "multiplier":
        kw["multiplier"] = float(d["value"])
    return Layer(**kw)


def model_from_document(doc: dict, blob: bytes) -> ModelGraph:
    validate_manifest(doc)
    dtype = T.DTYPES[doc["dtype"]]
    layers = [_layer_from_json(d, blob, dtype, f"/layers/{n}") for n, d in enumerate(doc["layers"])]
    return ModelGraph(tuple(layers), tuple(doc["input_shape"]), doc["form"], dtype, doc.get("name", ""))


def load_model(path) -> ModelGraph:
    """Read and shape-check a manifest and its blob."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise SchemaError(f"invalid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise SchemaError("manifest must be a JSON object")
    validate_manifest(doc)
    blob_path = path.parent / doc["blob"]
    if not blob_path.exists():
        raise BlobError(f"blob file {blob_path} not found")
    return model_from_document(doc, blob_path.read_bytes())


def load_bias_vector(path) -> Optional[np.ndarray]:
    """Bias vector named by an equivalent manifest, or ``None``."""
    path = Path(path)
    doc = json.loads(path.read_text())
    name = doc.get("bias_vector")
    if not name:
        return None
    return T.load_tensor(path.parent / name).reshape(-1)


# ---------------------------------------------------------------------------
# Templates and random models


def load_template(template: Union[str, Path]) -> dict:
    if isinstance(template, str) and template in BUILTIN_TEMPLATES:
        text = resources.files("adjbackmap").joinpath("templates", f"{template}.json").read_text()
        return json.loads(text)
    p = Path(template)
    if p.suffix == ".json" and p.exists():
        return json.loads(p.read_text())
    raise ModelError(f"unknown template {template!r}; built-ins are {', '.join(BUILTIN_TEMPLATES)}")


def gen_random_model(template: Union[str, Path, dict], seed: int, dtype="f64") -> ModelGraph:
    """Raw model with weights ~ U[-0.5, 0.5] and biases ~ U[-0.1, 0.1].

    Batch norm scales and variances are drawn from U[0.5, 1.5], shifts and
    means from U[-0.1, 0.1], multipliers from U[0.5, 1.5].
    """
    spec = template if isinstance(template, dict) else load_template(template)
    dt = T.resolve_dtype(dtype)
    rng = np.random.default_rng(seed)

    def u(lo, hi, shape):
        return rng.uniform(lo, hi, size=shape).astype(dt)

    layers = []
    for d in spec["layers"]:
        k = d["kind"]
        kw: dict = {"id": d["id"], "kind": k}
        if k == "conv":
            kw.update(weight=u(-0.5, 0.5, d["kernel_shape"]), stride=d.get("stride", 1), padding=d.get("padding", "SAME"))
        elif k == "fc":
            kw["weight"] = u(-0.5, 0.5, d["weight_shape"])
        elif k == "bias_add":
            kw.update(weight=u(-0.1, 0.1, d["length"]), broadcast=bool(d.get("broadcast", False)))
        elif k == "activation":
            kw["activation"] = Activation.from_json(d["activation"])
        elif k in ("avg_pool", "max_pool"):
            kw.update(window=d["window"], stride=d["stride"], padding=d.get("padding", "SAME"))
        elif k == "shortcut_add":
            kw.update(source=d["source"], shortcut=d["shortcut"], window=d.get("window", 1), stride=d.get("stride", 1))
        elif k == "batch_norm":
            c = d["channels"]
            kw["bn"] = BatchNormParams(u(0.5, 1.5, c), u(-0.1, 0.1, c), u(-0.1, 0.1, c), u(0.5, 1.5, c), float(d.get("eps", 0.001)))
        elif k == "multiplier":
            kw["multiplier"] = float(rng.uniform(0.5, 1.5))
        elif k not in ("global_pool", "shortcut_begin"):
            raise ModelError(f"template layer {d['id']!r}: unknown kind {k!r}")
        layers.append(Layer(**kw))
    return ModelGraph(tuple(layers), tuple(spec["input_shape"]), "raw", dt, spec.get("template", ""))


def gen_inputs(shape, n: int, seed: int, dtype="f64") -> np.ndarray:
    """``n`` images with pixels ~ U[0, 1], shape ``(n, H, W, C)``."""
    rng = np.random.default_rng(seed)
    return rng.uniform(0.0, 1.0, size=(n,) + tuple(shape)).astype(T.resolve_dtype(dtype))


def read_ppm(path) -> np.ndarray:
    """8-bit binary PPM (P6) as an ``H x W x 3`` float64 image in [0, 1]."""
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise BlobError(f"{path}: truncated PPM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise BlobError(f"{path}: only binary P6 PPM is supported")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise BlobError(f"{path}: only 8-bit PPM (maxval 255) is supported")
    pos += 1
    raw = data[pos : pos + w * h * 3]
    if len(raw) < w * h * 3:
        raise BlobError(f"{path}: pixel data truncated")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0


def load_images(path) -> np.ndarray:
    """Images from a tensor file (``HxWxC`` or ``NxHxWxC``) or a PPM, as a batch."""
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        return read_ppm(path)[None]
    arr = T.load_tensor(path)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise BlobError(f"{path}: expected an HxWxC or NxHxWxC tensor, got shape {arr.shape}")
    return arr


def cast_model(model: ModelGraph, dtype) -> ModelGraph:
    """Same model with every stored tensor in ``dtype``."""
    dt = T.resolve_dtype(dtype)
    if dt == model.dtype:
        return model
    layers = []
    for layer in model.layers:
        changes = {}
        if layer.weight is not None:
            changes["weight"] = layer.weight.astype(dt)
        if layer.bn is not None:
            bn = layer.bn
            changes["bn"] = BatchNormParams(*(a.astype(dt) for a in (bn.gamma, bn.beta, bn.mean, bn.var)), bn.eps)
        layers.append(layer.replace(**changes) if changes else layer)
    return ModelGraph(tuple(layers), model.input_shape, model.form, dt, model.name)
