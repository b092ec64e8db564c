"""Architecture bookkeeping for F and A, forward behaviour on Toy."""
import numpy as np
import pytest

from voxrecon.errors import ConfigError, ShapeError
from voxrecon.layers import ParamStore
from voxrecon.model import (build_config, decoder_forward, encoder_forward, init_model, inject_weights,
                            model_forward, refiner_forward)
from voxrecon.tensor import Tensor, no_grad


@pytest.fixture(scope="module")
def toy():
    cfg = build_config("Toy", 16, refiner=True)
    return cfg, init_model(cfg, 0)


@pytest.fixture
def images():
    return np.random.default_rng(5).random((2, 3, 3, 32, 32)).astype(np.float32)


class TestArchitecture:
    @pytest.mark.parametrize("variant,reported", [("F", 7.41e6), ("A", 114.24e6)])
    def test_param_count_near_reported(self, variant, reported):
        assert abs(build_config(variant).param_count() - reported) / reported < 0.10

    def test_feature_lengths(self):
        assert build_config("F").shapes["enc.flatten"] == (2048,)
        assert build_config("A").shapes["enc.flatten"] == (16384,)

    def test_decoder_chain_a(self):
        s = build_config("A").shapes
        assert s["dec.reshape"] == (2048, 2, 2, 2)
        chain = [s[f"dec.up{i}.conv"][1] for i in range(1, 5)] + [s["dec.head.conv"][1]]
        assert chain == [4, 8, 16, 32, 32]
        assert [s[f"dec.up{i}.conv"][0] for i in range(1, 5)] + [1] == [512, 128, 32, 8, 1]

    def test_decoder_channels_f(self):
        s = build_config("F").shapes
        assert s["dec.reshape"] == (256, 2, 2, 2)
        assert [s[f"dec.up{i}.conv"][0] for i in range(1, 5)] == [128, 64, 32, 8]

    def test_refiner_chain(self):
        s = build_config("A").shapes
        assert [s[f"ref.enc{i}.conv"][1] for i in (1, 2, 3)] == [33, 17, 9]
        assert [s[f"ref.enc{i}.pool"][1] for i in (1, 2, 3)] == [16, 8, 4]
        assert s["ref.fc1"] == (2048,) and s["ref.fc2"] == (8192,)
        assert s["ref.dec3.act"] == (1, 32, 32, 32)

    def test_fusion_input(self):
        s = build_config("F").shapes
        assert s["fusion.conv1"] == (9, 32, 32, 32) and s["fusion.act5"] == (1, 32, 32, 32)

    def test_variants(self):
        assert build_config("F").refiner is None
        assert build_config("A").refiner is not None
        assert build_config("Toy", refiner=False).refiner is None
        assert build_config("Toy", 16).shapes["dec.head.conv"] == (1, 16, 16, 16)
        with pytest.raises(ConfigError):
            build_config("B")
        with pytest.raises(ConfigError):
            build_config("Toy", 24)

    def test_describe_is_json_friendly(self):
        import json
        d = build_config("Toy").describe()
        assert json.loads(json.dumps(d)) == d


class TestForward:
    def test_shapes(self, toy, images):
        cfg, p = toy
        with no_grad():
            rec = model_forward(cfg, p, images)
        assert len(rec.coarse) == 3 and rec.coarse[0].shape == (2, 1, 16, 16, 16)
        assert rec.contexts[0].shape == (2, 9, 16, 16, 16)
        assert rec.fused.shape == rec.refined.shape == (2, 1, 16, 16, 16)
        for s in (rec.fused.data, rec.refined.data):
            assert 0 < s.min() and s.max() < 1
        total = sum(s.data for s in rec.scores)
        np.testing.assert_allclose(total, 1, atol=1e-6)

    def test_single_view_fused_is_coarse(self, toy, images):
        cfg, p = toy
        rec = model_forward(cfg, p, images[:, :1])
        assert np.array_equal(rec.fused.data, rec.coarse[0].data)
        assert rec.scores is None

    def test_identical_views_identical_features(self, toy, images):
        cfg, p = toy
        imgs = np.repeat(images[:, :1], 2, axis=1)
        rec = model_forward(cfg, p, imgs)
        assert np.array_equal(rec.coarse[0].data, rec.coarse[1].data)
        np.testing.assert_allclose(rec.fused.data, rec.coarse[0].data, rtol=1e-6)

    def test_canonical_permutation_bitwise(self, toy, images):
        cfg, p = toy
        a = model_forward(cfg, p, images, canonical=True)
        b = model_forward(cfg, p, images[:, [2, 0, 1]], canonical=True)
        assert a.refined.data.tobytes() == b.refined.data.tobytes()
        assert a.fused.data.tobytes() == b.fused.data.tobytes()
        c = model_forward(cfg, p, images[:, [1, 2, 0]], "eval", "average", canonical=True)
        d = model_forward(cfg, p, images, "eval", "average", canonical=True)
        assert c.fused.data.tobytes() == d.fused.data.tobytes()

    def test_batched_matches_canonical(self, toy, images):
        cfg, p = toy
        a = model_forward(cfg, p, images)
        b = model_forward(cfg, p, images, canonical=True)
        np.testing.assert_allclose(a.output.data, b.output.data, atol=1e-5)

    def test_average_differs_from_context(self, toy, images):
        cfg, p = toy
        a = model_forward(cfg, p, images, fusion="average")
        assert a.scores is None
        np.testing.assert_allclose(a.fused.data, sum(c.data for c in a.coarse) / 3, rtol=1e-6)

    def test_canonical_needs_eval(self, toy, images):
        cfg, p = toy
        with pytest.raises(ConfigError):
            model_forward(cfg, p, images, "train", canonical=True)

    def test_train_mode_updates_running_stats(self, images):
        cfg = build_config("Toy", 16, refiner=False)
        p = init_model(cfg, 1)
        before = p["fusion.bn1.running_mean"].data.copy()
        model_forward(cfg, p, images, "train")
        assert not np.array_equal(before, p["fusion.bn1.running_mean"].data)

    def test_bad_inputs(self, toy, images):
        cfg, p = toy
        with pytest.raises(ShapeError):
            model_forward(cfg, p, images[..., :16, :16])
        with pytest.raises(ShapeError):
            model_forward(cfg, p, images[:, :, :1])
        with pytest.raises(ConfigError):
            model_forward(cfg, p, images, fusion="max")
        with pytest.raises(ShapeError):
            decoder_forward(cfg, p, Tensor(np.zeros((1, 10), np.float32)))
        nocfg = build_config("Toy", 16, refiner=False)
        with pytest.raises(ConfigError):
            refiner_forward(nocfg, p, Tensor(np.zeros((1, 1, 16, 16, 16), np.float32)))

    def test_encoder_shape(self, toy, images):
        cfg, p = toy
        assert encoder_forward(cfg, p, Tensor(images[0])).shape == (3, cfg.feature_len)


def test_inject_weights():
    cfg = build_config("Toy", 16, refiner=False)
    p = init_model(cfg, 0)
    w = np.ones_like(p["enc.block1.conv.weight"].data)
    assert inject_weights(p, {"enc.block1.conv.weight": w, "dec.x": w}, prefix="enc.") == 1
    assert np.all(p["enc.block1.conv.weight"].data == 1)
    with pytest.raises(ShapeError):
        inject_weights(p, {"enc.block1.conv.weight": w[:1]}, prefix="enc.")
    with pytest.raises(KeyError):
        inject_weights(p, {"enc.nope": w}, prefix="enc.")
