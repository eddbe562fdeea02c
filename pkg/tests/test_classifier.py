"""Tests for the flow-stack classifier: forward, training, persistence."""

import numpy as np
import pytest

from motionguard import autodiff as ad
from motionguard import classifier as cls
from motionguard import flow as fl
from motionguard import video as vd

from helpers import check_grad


def tiny_model(k=3, h=8, w=8, seed=0):
    return cls.init_model(num_classes=k, height=h, width=w, seed=seed)


def np_forward(model, flows):
    """Independent numpy reference of the forward pass."""

    def conv(x, kern, bias):
        n, cin, h, w = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ho, wo = (h - 1) // 2 + 1, (w - 1) // 2 + 1
        out = np.zeros((n, kern.shape[0], ho, wo), dtype=x.dtype)
        for i in range(ho):
            for j in range(wo):
                win = xp[:, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3]
                out[:, :, i, j] = np.einsum("ncij,ocij->no", win, kern)
        return out + bias[None, :, None, None]

    x = np.transpose(flows, (0, 3, 1, 2)).astype(np.float32)
    h1 = np.maximum(conv(x, model.params["conv1_w"], model.params["conv1_b"]), 0)
    h2 = np.maximum(conv(h1, model.params["conv2_w"], model.params["conv2_b"]), 0)
    feats = h2.mean(axis=(2, 3)).mean(axis=0)
    return feats @ model.params["head_w"] + model.params["head_b"]


class TestForward:
    def test_zero_flow_bias_path(self):
        model = tiny_model()
        # zero biases at init: an all-zero flow stack reaches the head as
        # zeros, so the logits are exactly the head bias
        model.params["head_b"] = np.arange(3, dtype=np.float32)
        logits = cls.forward(model, np.zeros((4, 8, 8, 2), np.float32))
        assert np.array_equal(logits.values, model.params["head_b"])

    def test_matches_numpy_reference(self):
        model = tiny_model(seed=1)
        rng = np.random.default_rng(2)
        for k in ("conv1_b", "conv2_b", "head_b"):
            model.params[k] = rng.standard_normal(model.params[k].shape).astype(
                np.float32
            )
        flows = rng.standard_normal((3, 8, 8, 2)).astype(np.float32)
        logits = cls.forward(model, flows)
        assert np.allclose(logits.values, np_forward(model, flows), atol=1e-5)

    def test_temporal_order_invariance(self):
        model = tiny_model(seed=3)
        flows = np.random.default_rng(4).standard_normal((6, 8, 8, 2)).astype(np.float32)
        a = cls.forward(model, flows).values
        b = cls.forward(model, flows[::-1].copy()).values
        assert np.allclose(a, b, atol=1e-6)

    def test_geometry_mismatch(self):
        model = tiny_model()
        with pytest.raises(cls.GeometryError):
            cls.forward(model, np.zeros((2, 16, 16, 2), np.float32))

    def test_softmax_normalized(self):
        model = tiny_model(seed=5)
        flows = np.random.default_rng(6).standard_normal((2, 8, 8, 2))
        probs = cls.softmax_np(cls.forward(model, flows).values)
        assert abs(probs.sum() - 1.0) < 1e-6


class TestGradients:
    def test_input_adjoint_matches_finite_differences(self):
        model = tiny_model(seed=7)
        flows = np.random.default_rng(8).standard_normal((2, 8, 8, 2))

        def build(tape, leaf):
            p = {k: tape.tensor(v) for k, v in model.params.items()}
            return cls.cross_entropy(cls.forward(model, leaf, param_tensors=p), 1)

        idx = np.random.default_rng(9).choice(flows.size, 40, replace=False)
        check_grad(build, flows, h=1e-6, rtol=1e-4, indices=idx)

    @pytest.mark.parametrize("name", ["conv1_w", "conv2_b", "head_w"])
    def test_param_adjoints_match_finite_differences(self, name):
        model = tiny_model(seed=10)
        flows = np.random.default_rng(11).standard_normal((2, 8, 8, 2))

        def build(tape, leaf):
            p = {
                k: (leaf if k == name else tape.tensor(v))
                for k, v in model.params.items()
            }
            flows_t = tape.tensor(flows)
            return cls.cross_entropy(cls.forward(model, flows_t, param_tensors=p), 0)

        x = model.params[name].astype(np.float64)
        idx = np.random.default_rng(12).choice(x.size, min(30, x.size), replace=False)
        check_grad(build, x, h=1e-6, rtol=1e-4, indices=idx)


class TestTraining:
    def make_dataset(self, clips_per_class=1, seed=0):
        spec = vd.DatasetSpec(
            T=6, H=32, W=32, C=3, clips_per_class=clips_per_class,
            texture_smoothness=3.0,
        )
        return [c for c, _, _ in vd.generate_dataset(spec, seed=seed)]

    def test_memorize_single_clip(self):
        clip = self.make_dataset()[0]
        cfg = cls.TrainConfig(epochs=30, seed=0)
        fcfg = fl.FlowConfig(iters_inference=16)
        model = cls.train([clip], cfg, fcfg)
        assert model.train_accuracy == 1.0
        label, probs = cls.predict(model, clip, fcfg)
        assert label == clip.label
        assert abs(probs.sum() - 1.0) < 1e-6

    def test_determinism(self):
        clips = self.make_dataset()
        cfg = cls.TrainConfig(epochs=3, seed=1)
        fcfg = fl.FlowConfig(iters_inference=8)
        m1 = cls.train(clips, cfg, fcfg)
        m2 = cls.train(clips, cfg, fcfg)
        for k in m1.params:
            assert np.array_equal(m1.params[k], m2.params[k])

    def test_predict_matches_recomputed_forward(self):
        clips = self.make_dataset()
        fcfg = fl.FlowConfig(iters_inference=8)
        model = cls.train(clips, cls.TrainConfig(epochs=2, seed=2), fcfg)
        clip = clips[3]
        label, probs = cls.predict(model, clip, fcfg)
        stack = fl.estimate_clip(clip.frames, "forward", fcfg)
        logits = cls.forward(model, stack)
        assert label == int(np.argmax(logits.values))
        assert np.allclose(probs, cls.softmax_np(logits.values))

    def test_divergence_reported(self):
        clips = self.make_dataset()
        cfg = cls.TrainConfig(learning_rate=1e6, epochs=5, seed=3)
        with np.errstate(all="ignore"):
            with pytest.raises(cls.ClassifierError, match="diverged"):
                cls.train(clips, cfg, fl.FlowConfig(iters_inference=4))

    def test_empty_dataset_rejected(self):
        with pytest.raises(cls.ClassifierError):
            cls.train([], cls.TrainConfig(epochs=1))

    def test_invalid_config(self):
        with pytest.raises(cls.ClassifierError):
            cls.TrainConfig(learning_rate=0.0).validate()
        with pytest.raises(cls.ClassifierError):
            cls.TrainConfig(epochs=0).validate()


class TestPersistence:
    def test_round_trip_bit_exact(self, tmp_path):
        model = tiny_model(k=5, h=16, w=16, seed=13)
        model.train_accuracy = 0.875
        path = tmp_path / "m.vmdl"
        cls.save_model(model, path)
        loaded = cls.load_model(path)
        assert loaded.height == 16 and loaded.width == 16
        assert loaded.num_classes == 5
        assert loaded.train_accuracy == 0.875
        assert loaded.class_names == model.class_names
        for k in model.params:
            assert np.array_equal(loaded.params[k], model.params[k])

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.vmdl"
        path.write_bytes(b"NOPE" + b"\0" * 64)
        with pytest.raises(cls.BadModelMagicError):
            cls.load_model(path)

    def test_bad_version(self, tmp_path):
        model = tiny_model()
        path = tmp_path / "v.vmdl"
        cls.save_model(model, path)
        data = bytearray(path.read_bytes())
        data[4] = 99
        path.write_bytes(bytes(data))
        with pytest.raises(cls.ModelVersionError):
            cls.load_model(path)

    def test_truncated(self, tmp_path):
        model = tiny_model()
        path = tmp_path / "t.vmdl"
        cls.save_model(model, path)
        path.write_bytes(path.read_bytes()[:-16])
        with pytest.raises(cls.TruncatedModelError):
            cls.load_model(path)

    def test_geometry_guard(self, tmp_path):
        model = tiny_model(h=64, w=64)
        path = tmp_path / "g.vmdl"
        cls.save_model(model, path)
        with pytest.raises(cls.GeometryError):
            cls.load_model(path, expect_geometry=(32, 32))
