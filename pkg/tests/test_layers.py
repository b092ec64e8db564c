import numpy as np
import pytest

from voxrecon.archive import decode_archive, encode_archive, load_archive, save_archive
from voxrecon.errors import (ArchiveShapeError, ConfigError, CorruptArchiveError, MissingEntryError, ShapeError,
                             UnknownEntryError, VersionError)
from voxrecon.layers import (LayerSpec, init_params, layer_forward, load_params, param_count, save_params,
                             shape_chain)
from voxrecon.tensor import Tensor


SPECS = [LayerSpec("conv3d", "a", 1, 8, kernel=3, pad=1),
         LayerSpec("batchnorm", "a.bn", 8),
         LayerSpec("activation", "a.act", act="leaky_relu", alpha=0.2),
         LayerSpec("maxpool3d", "a.pool", kernel=2, stride=2),
         LayerSpec("fully_connected", "fc", 8 * 8, 5)]


def test_param_count_examples():
    assert param_count([LayerSpec("conv3d", "c", 1, 8, kernel=3)]) == 224
    assert param_count([LayerSpec("fully_connected", "f", 2048, 8192)]) == 16_785_408
    # batchnorm counts gamma and beta only
    assert param_count([LayerSpec("batchnorm", "b", 16)]) == 32


def test_init_params_contract():
    a, b = init_params(SPECS, seed=3), init_params(SPECS, seed=3)
    assert a.equal(b)
    assert not a.equal(init_params(SPECS, seed=4))
    np.testing.assert_array_equal(a["a.bn.gamma"].data, np.ones(8))
    np.testing.assert_array_equal(a["a.bn.beta"].data, np.zeros(8))
    np.testing.assert_array_equal(a["a.bn.running_var"].data, np.ones(8))
    w = init_params([LayerSpec("conv3d", "s", 9, 16, kernel=3)], 0)["s.weight"]
    assert w.shape == (16, 9, 3, 3, 3)
    assert [k for k, _ in a.trainable()] == ["a.weight", "a.bias", "a.bn.gamma", "a.bn.beta", "fc.weight", "fc.bias"]


def test_init_stream_per_layer():
    # a layer's draw does not depend on what precedes it
    alone = init_params(SPECS[-1:], 5)
    full = init_params(SPECS, 5)
    assert alone["fc.weight"].data.tobytes() == full["fc.weight"].data.tobytes()


def test_duplicate_names():
    with pytest.raises(ConfigError):
        init_params([SPECS[0], SPECS[0]], 0)


def test_unknown_kind():
    with pytest.raises(ConfigError):
        LayerSpec("conv4d", "x")


def test_shape_chain():
    chain = shape_chain(SPECS[:4], (1, 8, 8, 8))
    assert chain[-1] == ("a.pool", (8, 4, 4, 4))
    assert shape_chain([LayerSpec("maxpool3d", "p", kernel=2, stride=2)], (1, 32, 32, 32))[0][1] == (1, 16, 16, 16)
    with pytest.raises(ShapeError):
        shape_chain(SPECS[:1], (2, 8, 8, 8))
    with pytest.raises(ShapeError):
        shape_chain([LayerSpec("fully_connected", "f", 10, 2)], (11,))


def test_layer_forward(rng):
    p = init_params(SPECS, 0, np.float64)
    x = Tensor(rng.standard_normal((2, 1, 8, 8, 8)))
    y = x
    for spec in SPECS[:4]:
        y = layer_forward(spec, p, y, "train")
    assert y.shape == (2, 8, 4, 4, 4)
    out = layer_forward(SPECS[4], p, Tensor(y.data[:, :, :2, :2, :2].copy()), "eval")
    assert out.shape == (2, 5)
    relu = LayerSpec("activation", "r", act="relu")
    np.testing.assert_array_equal(layer_forward(relu, p, Tensor(np.array([-1.0, 1.0]))).data, [0, 1])


def test_layer_forward_names_layer_on_error():
    p = init_params(SPECS, 0)
    with pytest.raises(ShapeError, match="^a:"):
        layer_forward(SPECS[0], p, Tensor(np.zeros((1, 2, 4, 4, 4), np.float32)))


class TestParamsArchive:
    def test_round_trip(self, tmp_path):
        p = init_params(SPECS, 1)
        save_params(p, tmp_path / "p.ntar")
        q = load_params(tmp_path / "p.ntar", SPECS)
        assert p.equal(q)
        assert q["a.weight"].requires_grad and not q["a.bn.running_mean"].requires_grad

    def test_missing_entry_names_layer(self, tmp_path):
        arr = init_params(SPECS, 1).arrays()
        del arr["a.bn.gamma"]
        save_archive(tmp_path / "p.ntar", arr)
        with pytest.raises(MissingEntryError, match="a.bn"):
            load_params(tmp_path / "p.ntar", SPECS)

    def test_unknown_entry(self, tmp_path):
        arr = init_params(SPECS, 1).arrays()
        arr["extra.weight"] = np.zeros(3, np.float32)
        save_archive(tmp_path / "p.ntar", arr)
        with pytest.raises(UnknownEntryError):
            load_params(tmp_path / "p.ntar", SPECS)

    def test_shape_mismatch(self, tmp_path):
        arr = init_params(SPECS, 1).arrays()
        arr["fc.bias"] = np.zeros(6, np.float32)
        save_archive(tmp_path / "p.ntar", arr)
        with pytest.raises(ArchiveShapeError):
            load_params(tmp_path / "p.ntar", SPECS)


class TestArchiveFormat:
    def test_bitwise_round_trip(self, rng, tmp_path):
        tensors = {"a": rng.standard_normal((3, 4)).astype(np.float32), "b/c": rng.standard_normal(5),
                   "i": np.arange(7, dtype=np.int64), "u": np.array([1, 0, 255], np.uint8),
                   "s": np.array(2.5), "e": np.zeros((0, 3))}
        blob = encode_archive(tensors, {"k": [1, 2]})
        back, meta = decode_archive(blob)
        assert meta == {"k": [1, 2]}
        assert list(back) == list(tensors)
        for k in tensors:
            assert back[k].dtype == tensors[k].dtype and back[k].tobytes() == tensors[k].tobytes()
        save_archive(tmp_path / "x.ntar", back, meta)
        assert (tmp_path / "x.ntar").read_bytes() == blob
        assert load_archive(tmp_path / "x.ntar")[1] == meta

    def test_corruption_detected(self):
        blob = bytearray(encode_archive({"a": np.arange(4.0)}))
        blob[-6] ^= 1
        with pytest.raises(CorruptArchiveError):
            decode_archive(bytes(blob))
        with pytest.raises(CorruptArchiveError):
            decode_archive(b"XXXX" + bytes(blob[4:]))
        with pytest.raises(CorruptArchiveError):
            decode_archive(bytes(blob[:10]))

    def test_version(self):
        blob = bytearray(encode_archive({"a": np.arange(4.0)}))
        blob[4] = 9
        with pytest.raises(VersionError):
            decode_archive(bytes(blob))

    def test_bad_dtype_and_name(self):
        with pytest.raises(TypeError):
            encode_archive({"a": np.zeros(2, np.complex64)})
        with pytest.raises(ValueError):
            encode_archive({"a\tb": np.zeros(2)})
