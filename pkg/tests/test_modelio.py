import json

import numpy as np
import pytest
from conftest import folded

from adjbackmap import gen_inputs, gen_random_model, load_model, load_template, save_model
from adjbackmap import modelio as io
from adjbackmap import tensor as T
from adjbackmap.errors import BlobError, DimensionError, ModelError, SchemaError
from adjbackmap.verify import default_layers


@pytest.mark.parametrize("name", ["toy4", "toy-res", "resnet20-fixup"])
def test_raw_round_trip(tmp_path, name):
    raw = gen_random_model(name, 3)
    p = save_model(raw, tmp_path / "m.json")
    assert load_model(p) == raw
    # writing the loaded model again reproduces both files byte for byte
    q = save_model(load_model(p), tmp_path / "n.json")
    assert p.read_text().replace("m.abm", "n.abm") == q.read_text()
    assert (tmp_path / "m.abm").read_bytes() == (tmp_path / "n.abm").read_bytes()


def test_equivalent_round_trip_with_bias_vector(tmp_path):
    _, eq, x_b = folded("toy-res", seed=2, dtype="f32")
    p = save_model(eq, tmp_path / "eq.json", x_b)
    assert load_model(p) == eq
    np.testing.assert_array_equal(io.load_bias_vector(p), x_b)
    doc = json.loads(p.read_text())
    assert doc["form"] == "equivalent" and doc["dtype"] == "f32" and doc["bias_vector"] == "eq.xb.abm"
    raw = gen_random_model("toy2", 0)
    with pytest.raises(ModelError):
        save_model(raw, tmp_path / "r.json", x_b)


def test_same_seed_gives_identical_blobs(tmp_path):
    a = save_model(gen_random_model("vgg-mini", 9), tmp_path / "a.json")
    b = save_model(gen_random_model("vgg-mini", 9), tmp_path / "b.json")
    save_model(gen_random_model("vgg-mini", 10), tmp_path / "c.json")
    assert (tmp_path / "a.abm").read_bytes() == (tmp_path / "b.abm").read_bytes()
    assert (tmp_path / "a.abm").read_bytes() != (tmp_path / "c.abm").read_bytes()
    assert a.read_text().replace("a.abm", "x") == b.read_text().replace("b.abm", "x")


def test_manifest_tensor_refs_are_offsets(tmp_path):
    p = save_model(gen_random_model("toy2", 1), tmp_path / "m.json")
    doc = json.loads(p.read_text())
    conv = next(l for l in doc["layers"] if l["kind"] == "conv")
    blob = (tmp_path / "m.abm").read_bytes()
    assert set(conv["kernel"]) == {"offset"}
    assert blob[conv["kernel"]["offset"] : conv["kernel"]["offset"] + 8] == b"ABMTENSR"


def test_template_structure():
    toy4 = gen_random_model("toy4", 0)
    kinds = [l.kind for l in toy4.layers]
    assert kinds.count("conv") == 3 and kinds.count("global_pool") == 1 and kinds[-2:] == ["fc", "bias_add"]
    _, eq, _ = folded("resnet20")
    assert eq.n_conv == 19
    assert len(default_layers(eq)) == 19  # conv1..conv18 plus fc
    for name in io.BUILTIN_TEMPLATES:
        assert load_template(name)["input_shape"]
    with pytest.raises(ModelError, match="unknown template"):
        load_template("alexnet")


def test_random_ranges():
    raw = gen_random_model("toy4", 5)
    for l in raw.layers:
        if l.kind in ("conv", "fc"):
            assert np.abs(l.weight).max() <= 0.5
        elif l.kind == "bias_add":
            assert np.abs(l.weight).max() <= 0.1
    x = gen_inputs((4, 4, 3), 3, 1, "f32")
    assert x.shape == (3, 4, 4, 3) and x.dtype == np.float32
    assert x.min() >= 0 and x.max() <= 1
    np.testing.assert_array_equal(x, gen_inputs((4, 4, 3), 3, 1, "f32"))


def test_truncated_and_missing_blob(tmp_path):
    p = save_model(gen_random_model("toy2", 1), tmp_path / "m.json")
    blob = tmp_path / "m.abm"
    blob.write_bytes(blob.read_bytes()[:-5])
    with pytest.raises(BlobError):
        load_model(p)
    blob.unlink()
    with pytest.raises(BlobError, match="not found"):
        load_model(p)


def test_schema_errors_carry_a_pointer(tmp_path):
    p = save_model(gen_random_model("toy2", 1), tmp_path / "m.json")
    doc = json.loads(p.read_text())
    doc["layers"][0]["stride"] = 0
    p.write_text(json.dumps(doc))
    with pytest.raises(SchemaError) as e:
        load_model(p)
    assert e.value.pointer == "/layers/0/stride"
    doc["layers"][0]["stride"] = 1
    del doc["input_shape"]
    p.write_text(json.dumps(doc))
    with pytest.raises(SchemaError, match="input_shape"):
        load_model(p)
    p.write_text("{not json")
    with pytest.raises(SchemaError, match="invalid JSON"):
        load_model(p)


def test_shape_mismatch_in_manifest_is_reported(tmp_path):
    p = save_model(gen_random_model("toy2", 1), tmp_path / "m.json")
    doc = json.loads(p.read_text())
    doc["input_shape"] = [6, 6, 3]
    p.write_text(json.dumps(doc))
    with pytest.raises(DimensionError, match="conv0"):
        load_model(p)


def test_ppm(tmp_path):
    px = np.arange(2 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3) * 10
    p = tmp_path / "img.ppm"
    p.write_bytes(b"P6\n# comment\n3 2\n255\n" + px.tobytes())
    np.testing.assert_array_equal(io.read_ppm(p), px / 255.0)
    assert io.load_images(p).shape == (1, 2, 3, 3)
    p.write_bytes(b"P6\n3 2\n255\n" + px.tobytes()[:-1])
    with pytest.raises(BlobError, match="truncated"):
        io.read_ppm(p)
    p.write_bytes(b"P3\n3 2\n255\n")
    with pytest.raises(BlobError):
        io.read_ppm(p)


def test_load_images_tensor(tmp_path):
    T.save_tensor(tmp_path / "x.abm", np.zeros((4, 4, 3)))
    assert io.load_images(tmp_path / "x.abm").shape == (1, 4, 4, 3)
    T.save_tensor(tmp_path / "y.abm", np.zeros((4, 3)))
    with pytest.raises(BlobError):
        io.load_images(tmp_path / "y.abm")


def test_cast_model():
    raw = gen_random_model("toy-res", 1)
    m32 = io.cast_model(raw, "f32")
    assert m32.dtype == np.float32
    assert all(l.weight.dtype == np.float32 for l in m32.layers if l.weight is not None)
    assert io.cast_model(raw, "f64") == raw
