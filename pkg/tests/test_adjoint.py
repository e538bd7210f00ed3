import numpy as np
import pytest
from conftest import act, bias, conv, folded, rel, sample, template, three_layer_net, two_conv_net
from hypothesis import given, settings
from hypothesis import strategies as st

from adjbackmap import (
    Activation, EvalPoint, ExtendedInput, Layer, Linearization, ModelGraph, forward, hypersurface_shape,
    jacobian_extended, mode_sum_check, reconstruct, reconstruct_many,
)
from adjbackmap import oracle as O
from adjbackmap.errors import ModeError, ModelError
from adjbackmap.graph import stride_index
from adjbackmap.tensor import BiasSlice, _geometry


def linear_net(input_shape=(5, 5, 2)):
    c = input_shape[2]
    return template(input_shape, conv("conv0", 3, c, 3), bias("b0", 3), conv("conv1", 3, 3, 2, stride=2), bias("b1", 2), conv("conv2", 2, 2, 2))


def test_linear_model_jacobian_is_the_matrix_product():
    _, eq, x_b = folded(linear_net(), seed=1)
    xs = sample(eq, x_b, seed=2, n=2)
    jac = [jacobian_extended(eq, 2, EvalPoint(x)).dense() for x in xs]
    np.testing.assert_array_equal(jac[0], jac[1])
    # explicit product over the flat image plus the bias pick-up matrices
    p0, c0 = eq.conv(0)
    p1, c1 = eq.conv(1)
    W0 = O.conv_matrix(eq.in_shape(p0), c0.weight, c0.stride, c0.padding)
    W1 = O.conv_matrix(eq.in_shape(p1), c1.weight, c1.stride, c1.padding)
    d = W0.shape[1]
    J = np.zeros((W0.shape[0], eq.d_in))
    J[:, :d] = W0
    J = J + O.bias_matrix(eq, eq.layers[eq.index("b0")], eq.out_shape(p0))
    J = W1 @ J + O.bias_matrix(eq, eq.layers[eq.index("b1")], eq.out_shape(p1))
    assert rel(jac[0], J) <= 1e-14


def test_all_positive_relu_net_matches_linear_net():
    spec = linear_net()
    with_relu = dict(spec, layers=spec["layers"][:2] + [act("a0")] + spec["layers"][2:4] + [act("a1")] + spec["layers"][4:])
    lin_raw, lin_eq, x_b = folded(spec, seed=3)
    pos = lambda m: ModelGraph(
        [l.replace(weight=np.abs(l.weight)) if l.kind == "conv" else l for l in m.layers], m.input_shape, m.form
    )
    lin_eq = pos(lin_eq)
    _, relu_eq, _ = folded(with_relu, seed=3)
    relu_eq = ModelGraph(
        [l.replace(weight=lin_eq.layers[lin_eq.index(l.id)].weight) if l.kind == "conv" else l for l in relu_eq.layers],
        relu_eq.input_shape,
    )
    x = sample(lin_eq, np.abs(x_b), seed=4)
    a = jacobian_extended(lin_eq, 2, EvalPoint(x)).dense()
    b = jacobian_extended(relu_eq, 2, EvalPoint(x.with_bias(x.bias_vec))).dense()
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("spec", [two_conv_net(), three_layer_net(), three_layer_net(kind="leaky_relu", leakiness=0.1), "toy-res", "toy4"])
def test_jacobian_matches_dense_oracle(spec):
    _, eq, x_b = folded(spec, seed=5)
    x = sample(eq, x_b, seed=6)
    at = EvalPoint(x)
    layers = list(range(1, eq.n_conv)) + (["fc"] if eq.has_fc else [])
    for l in layers:
        j_in, _ = O.layer_jacobian(eq, at.point(), l)
        assert rel(jacobian_extended(eq, l, at).dense(), j_in) <= 1e-12


def identity_path(w_fc):
    """1x1 identity convs on 2x2x3, positive pattern, global pool and an fc layer."""
    eye = np.eye(3).reshape(1, 1, 3, 3)
    s0, s1 = BiasSlice("b0", 0, 3), BiasSlice("b1", 3, 3)
    layers = (
        Layer("conv0", "conv", weight=eye), Layer("b0", "bias_add", bias_slice=s0), Layer("a0", "activation", activation=Activation("relu")),
        Layer("conv1", "conv", weight=eye), Layer("b1", "bias_add", bias_slice=s1), Layer("a1", "activation", activation=Activation("relu")),
        Layer("gp", "global_pool"), Layer("fc", "fc", weight=w_fc),
    )
    return ModelGraph(layers, (2, 2, 3)), (s0, s1)


def test_rm0_on_identity_path(rng):
    w = rng.normal(size=(3, 4))
    model, layout = identity_path(w)
    x = ExtendedInput(rng.uniform(size=(2, 2, 3)), rng.uniform(size=6), layout)
    h = reconstruct(model, EvalPoint(x), "rm0", "fc")
    assert h.stacked().shape == (18, 4)
    for c in range(4):
        np.testing.assert_allclose(h.image[..., c], np.broadcast_to(w[:, c] / 4, (2, 2, 3)), rtol=1e-15)
        np.testing.assert_allclose(h.bias[:, c], np.concatenate([w[:, c], w[:, c]]), rtol=1e-15)
    one = reconstruct(model, EvalPoint(x), "rm0", "fc", cls=2)
    assert one.stacked().shape == (18, 1)
    np.testing.assert_array_equal(one.stacked()[:, 0], h.stacked()[:, 2])


def test_rm2_shape_on_vgg7():
    _, eq, _ = folded("vgg7")
    pos, _ = eq.conv(2)
    assert eq.d_in == 32 * 32 * 3 + 384
    assert hypersurface_shape(eq, "rm2", 2) == (eq.d_in,) + eq.out_shape(pos)
    assert hypersurface_shape(eq, "rm4", 2) == (eq.d_in,) + eq.out_shape(pos)[:2] + (eq.in_shape(pos)[2],) + eq.out_shape(pos)[2:]
    assert hypersurface_shape(eq, "rm1", 2) == (eq.d_in, eq.out_shape(pos)[2])
    assert hypersurface_shape(eq, "rm0", "fc") == (eq.d_in, 10)


def brute_rm4(model, at, l):
    """Loop over (s, j, i) and the kernel taps that see each input pixel."""
    j_in, _ = O.layer_jacobian(model, at.point(), l)
    pos, layer = model.conv(l)
    h, w, cin = model.in_shape(pos)
    kernel = layer.weight
    r1, r2, _, cout = kernel.shape
    ho, wo, (pt, _), (pl, _) = _geometry(h, w, r1, r2, layer.stride, layer.padding)
    out = np.zeros((model.d_in, ho, wo, cin, cout))
    for s in range(ho * wo):
        r, q = stride_index(ho, wo, s)
        for j in range(cin):
            for i in range(cout):
                for a in range(r1):
                    for b in range(r2):
                        y, z = r * layer.stride + a - pt, q * layer.stride + b - pl
                        if 0 <= y < h and 0 <= z < w:
                            out[:, r, q, j, i] += kernel[a, b, j, i] * j_in[(y * w + z) * cin + j]
    return out


@pytest.mark.parametrize("spec", [two_conv_net(), two_conv_net(input_shape=(5, 5, 2), kind="leaky_relu", leakiness=0.2)])
def test_rm4_matches_brute_force(spec):
    _, eq, x_b = folded(spec, seed=7)
    at = EvalPoint(sample(eq, x_b, seed=8))
    ref = brute_rm4(eq, at, 1)
    for method in ("jacobian", "seed"):
        assert rel(reconstruct(eq, at, "rm4", 1, method=method).stacked(), ref) <= 1e-12


@pytest.mark.parametrize("spec", [three_layer_net(), "toy-res"])
def test_mode_sums(spec):
    _, eq, x_b = folded(spec, seed=9)
    at = EvalPoint(sample(eq, x_b, seed=10))
    lin = Linearization.at(eq, at)
    for l in range(1, eq.n_conv):
        sums = mode_sum_check(reconstruct(eq, at, "rm4", l, lin=lin))
        direct = {m: reconstruct(eq, at, m, l, lin=lin).stacked() for m in ("rm3", "rm2", "rm1")}
        assert rel(sums["rm3"].stacked(), direct["rm3"]) <= 1e-12
        assert rel(sums["rm2"].stacked(), direct["rm2"]) <= 1e-12
        assert rel(sums["rm1_from_rm3"].stacked(), direct["rm1"]) <= 1e-12
        assert rel(sums["rm1_from_rm2"].stacked(), direct["rm1"]) <= 1e-12


def test_single_stride_single_channel_modes_coincide():
    # conv1 sees a 1x1 single-channel map, so every mode holds the same numbers
    spec = template((2, 2, 1), conv("conv0", 2, 1, 1, stride=2), bias("b0", 1), act("a0"), conv("conv1", 1, 1, 3), bias("b1", 3))
    _, eq, x_b = folded(spec, seed=1)
    at = EvalPoint(sample(eq, x_b))
    h1 = reconstruct(eq, at, "rm1", 1).stacked()
    for m in ("rm4", "rm3", "rm2"):
        np.testing.assert_array_equal(reconstruct(eq, at, m, 1).stacked().reshape(h1.shape), h1)


def test_zeroed_kernel_channel_gives_zero_slices():
    _, eq, x_b = folded(three_layer_net(), seed=2)
    pos, layer = eq.conv(1)
    w = layer.weight.copy()
    w[..., 2] = 0
    eq = ModelGraph([l.replace(weight=w) if i == pos else l for i, l in enumerate(eq.layers)], eq.input_shape)
    at = EvalPoint(sample(eq, x_b))
    for m in ("rm4", "rm3", "rm2", "rm1"):
        h = reconstruct(eq, at, m, 1).stacked()
        assert not np.any(h[..., 2])
        assert np.any(h[..., 1])


def identity_errors(eq, x, k, layers=None):
    """Largest |c_hat - c| / max|c| over every mapped unit at point k*x."""
    at = EvalPoint(x, k)
    lin = Linearization.at(eq, at)
    worst = 0.0
    for l in layers or range(1, eq.n_conv):
        c = lin.trace.conv_output(l)
        c_hat = reconstruct(eq, at, "rm2", l, lin=lin).contract(x.scaled(k))
        worst = max(worst, rel(c_hat, c))
    if eq.has_fc:
        c = lin.trace.fc_output()
        c_hat = reconstruct(eq, at, "rm0", "fc", lin=lin).contract(x.scaled(k))
        worst = max(worst, rel(c_hat, c))
    return worst


@pytest.mark.parametrize("k", [0.125, 0.5, 1.0, 3.0])
def test_identity_at_every_scale(k):
    _, eq, x_b = folded(three_layer_net(kind="leaky_relu", leakiness=0.1), seed=3)
    assert identity_errors(eq, sample(eq, x_b, seed=4), k) <= 1e-12


@settings(max_examples=15, deadline=None)
@given(st.floats(0.01, 10.0), st.integers(0, 10_000))
def test_hypersurface_is_scale_invariant(k, seed):
    _, eq, x_b = folded(three_layer_net(), seed=seed)
    x = sample(eq, x_b, seed=seed + 1)
    a = reconstruct(eq, EvalPoint(x, 1.0), "rm1", 2).stacked()
    b = reconstruct(eq, EvalPoint(x, k), "rm1", 2).stacked()
    assert rel(a, b) <= 1e-12


def test_mapping_is_not_linear_in_the_input():
    _, eq, x_b = folded(three_layer_net(), seed=5)
    x1, x2 = sample(eq, x_b, seed=6, n=2)
    x12 = x1.with_image(x1.image - x2.image)
    c = lambda x: forward(eq, x).conv_output(2)
    assert rel(c(x12), c(x1) - c(x2)) > 1e-3
    assert identity_errors(eq, x12, 1.0) <= 1e-12


def test_zero_bias_vector_leaves_image_part_only():
    _, eq, x_b = folded(three_layer_net(), seed=6)
    x = sample(eq, np.zeros_like(x_b), seed=7)
    at = EvalPoint(x, 1.0)
    h = reconstruct(eq, at, "rm2", 2)
    img_only = np.tensordot(x.image, h.image, axes=3)
    np.testing.assert_array_equal(h.contract(x), img_only)
    assert rel(img_only, forward(eq, x).conv_output(2)) <= 1e-12


def test_piecewise_linear_identity_at_unit_scale():
    pwl = {"kind": "piecewise_linear", "breakpoints": [0.0, 0.5], "slopes": [0.1, 1.0, 1.5]}
    spec = three_layer_net()
    spec["layers"] = [act(l["id"], **pwl) if l["kind"] == "activation" else l for l in spec["layers"]]
    _, eq, x_b = folded(spec, seed=8)
    x = sample(eq, x_b, seed=9)
    assert identity_errors(eq, x, 1.0) <= 1e-12


def test_seed_and_jacobian_routes_agree():
    _, eq, x_b = folded("toy-res", seed=1)
    at = EvalPoint(sample(eq, x_b, seed=2))
    lin = Linearization.at(eq, at)
    cases = [
        ("rm4", 1, {}), ("rm4", 2, {"out_ch": 1, "stride_idx": 5, "in_ch": 0}), ("rm3", 1, {"in_ch": 1}),
        ("rm2", 2, {"stride_idx": 3}), ("rm1", 1, {"out_ch": 0}), ("rm1", 2, {}), ("rm0", "fc", {"cls": 1}), ("rm0", "fc", {}),
    ]
    for mode, l, coords in cases:
        a = reconstruct(eq, at, mode, l, method="seed", lin=lin, **coords)
        b = reconstruct(eq, at, mode, l, method="jacobian", lin=lin, **coords)
        assert a.stacked().shape == b.stacked().shape
        assert rel(a.stacked(), b.stacked()) <= 1e-12, (mode, l, coords)


def test_fixed_coordinates_keep_size_one_axes():
    _, eq, x_b = folded(three_layer_net())
    at = EvalPoint(sample(eq, x_b))
    full = reconstruct(eq, at, "rm4", 1)
    one = reconstruct(eq, at, "rm4", 1, out_ch=2, stride_idx=4, in_ch=1)
    r, q = stride_index(full.out_shape[0], full.out_shape[1], 4)
    assert one.out_shape == (1, 1, 1, 1)
    assert one.coords == {"c_out": 2, "stride": 4, "c_in": 1}
    assert rel(one.stacked()[:, 0, 0, 0, 0], full.stacked()[:, r, q, 1, 2]) <= 1e-14


def test_errors():
    _, eq, x_b = folded(three_layer_net())
    x = sample(eq, x_b)
    at = EvalPoint(x)
    with pytest.raises(ModeError, match="layer 0"):
        reconstruct(eq, at, "rm1", 0)
    for k in (0.0, -1.0, float("inf")):
        with pytest.raises(ModeError):
            EvalPoint(x, k)
    with pytest.raises(ModeError):
        reconstruct(eq, at, "rm0", 1)
    with pytest.raises(ModeError):
        reconstruct(eq, at, "rm2", "fc")
    with pytest.raises(ModeError):
        reconstruct(eq, at, "rm5", 1)
    with pytest.raises(ModeError):
        reconstruct(eq, at, "rm1", 1, out_ch=4)
    with pytest.raises(ModeError):
        reconstruct(eq, at, "rm0", "fc", cls=5)
    with pytest.raises(ModelError):
        reconstruct(eq, at, "rm2", 1, stride_idx=999)
    with pytest.raises(ModeError):
        reconstruct(eq, at, "rm2", 1, in_ch=0)
    with pytest.raises(ModeError):
        reconstruct(eq, at, "rm3", 1, stride_idx=0)
    with pytest.raises(ModelError):
        reconstruct(eq, at, "rm1", 7)
    with pytest.raises(ModeError, match="incomplete"):
        mode_sum_check(reconstruct(eq, at, "rm4", 1, out_ch=0))
    with pytest.raises(ModeError):
        mode_sum_check(reconstruct(eq, at, "rm3", 1))


def test_results_do_not_depend_on_threads_or_block():
    _, eq, x_b = folded("toy-res", seed=4)
    at = EvalPoint(sample(eq, x_b))
    ref = reconstruct(eq, at, "rm4", 2, threads=1).stacked()
    for threads, block in ((4, 256), (3, 7), (1, 1)):
        got = reconstruct(eq, at, "rm4", 2, threads=threads, block=block).stacked()
        assert got.tobytes() == ref.tobytes()


def test_reconstruct_many_keeps_request_order():
    _, eq, x_b = folded(three_layer_net())
    at = EvalPoint(sample(eq, x_b))
    reqs = [("rm1", 2, {}), ("rm0", "fc", {"cls": 3}), ("rm2", 1, {"out_ch": 0}), ("rm3", 2, {})]
    many = reconstruct_many(eq, at, reqs, threads=3)
    for h, (mode, l, coords) in zip(many, reqs):
        single = reconstruct(eq, at, mode, l, **coords)
        assert h.mode == mode and h.layer == l
        assert h.stacked().tobytes() == single.stacked().tobytes()
