import numpy as np
import pytest

from adjbackmap import extended_input, extract_bias_vector, gen_inputs, gen_random_model


def conv(id, kh, cin, cout, stride=1, padding="SAME"):
    return {"id": id, "kind": "conv", "kernel_shape": [kh, kh, cin, cout], "stride": stride, "padding": padding}


def bias(id, n, broadcast=False):
    d = {"id": id, "kind": "bias_add", "length": n}
    if broadcast:
        d["broadcast"] = True
    return d


def act(id, kind="relu", **kw):
    return {"id": id, "kind": "activation", "activation": {"kind": kind, **kw}}


def template(input_shape, *layers):
    return {"template": "test", "input_shape": list(input_shape), "layers": list(layers)}


def two_conv_net(input_shape=(4, 4, 1), c1=2, c2=3, kind="relu", **kw):
    """conv0 + b0 + act + conv1 + b1 + act: the smallest net with a layer-1 target."""
    h, w, c = input_shape
    return template(
        input_shape,
        conv("conv0", 3, c, c1), bias("b0", c1), act("a0", kind, **kw),
        conv("conv1", 3, c1, c2, stride=2), bias("b1", c2), act("a1", kind, **kw),
    )


def three_layer_net(input_shape=(6, 6, 2), kind="relu", **kw):
    c = input_shape[2]
    return template(
        input_shape,
        conv("conv0", 3, c, 3), bias("b0", 3), act("a0", kind, **kw),
        conv("conv1", 3, 3, 4, stride=2), bias("b1", 4), act("a1", kind, **kw),
        conv("conv2", 2, 4, 4), bias("b2", 4), act("a2", kind, **kw),
        {"id": "gp", "kind": "global_pool"},
        {"id": "fc", "kind": "fc", "weight_shape": [4, 5]},
    )


def folded(spec, seed=0, dtype="f64"):
    """(raw, equivalent, x_b) for a template name or dict."""
    raw = gen_random_model(spec, seed, dtype)
    eq, _, x_b = extract_bias_vector(raw)
    return raw, eq, x_b


def sample(eq, x_b, seed=0, n=None):
    imgs = gen_inputs(eq.input_shape, 1 if n is None else n, seed, eq.dtype)
    xs = [extended_input(eq, im, x_b) for im in imgs]
    return xs[0] if n is None else xs


def rel(a, b):
    """Largest deviation relative to the larger magnitude of the two arrays."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0))
    return 0.0 if scale == 0 else float(np.abs(a - b).max() / scale)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
