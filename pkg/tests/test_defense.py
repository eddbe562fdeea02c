"""Tests for consistency-loss purification and defended prediction."""

import json

import numpy as np
import pytest

from motionguard import attacks as atk
from motionguard import classifier as cls
from motionguard import defense as df
from motionguard import flow as fl
from motionguard import losses as ls
from motionguard import video as vd


def dcfg(**kw):
    defaults = dict(K=4)
    defaults.update(kw)
    return df.DefenseConfig(**defaults)


class TestConfig:
    def test_invalid(self):
        with pytest.raises(df.DefenseError):
            df.DefenseConfig(epsilon_r=0.0).validate()
        with pytest.raises(df.DefenseError):
            df.DefenseConfig(epsilon_r=1.0, eta=3.0).validate()
        with pytest.raises(df.DefenseError):
            df.DefenseConfig(K=-1).validate()
        with pytest.raises(df.DefenseError):
            df.DefenseConfig(loss="tv").validate()

    def test_units(self):
        c = df.DefenseConfig()
        assert c.epsilon == pytest.approx(12 / 255)
        assert c.step == pytest.approx(2 / 255)


class TestPurify:
    def test_zero_iterations_identity(self, small_clips, small_flow_config):
        clip = small_clips[0]
        result = df.purify(clip, small_flow_config, dcfg(K=0))
        assert np.array_equal(result.purified, clip.frames)
        assert np.all(result.r == 0.0)
        assert result.loss_trace == []

    def test_disabled_identity(self, small_clips, small_flow_config):
        clip = small_clips[0]
        result = df.purify(clip, small_flow_config, dcfg(enabled=False))
        assert np.array_equal(result.purified, clip.frames)

    def test_containment_every_iteration(self, small_clips, small_flow_config):
        clip = small_clips[1]
        cfg = dcfg(K=6)
        result = df.purify(clip, small_flow_config, cfg)
        assert len(result.loss_trace) == 6
        for entry in result.loss_trace:
            assert entry["max_r"] <= np.float32(cfg.epsilon)
        assert np.abs(result.r).max() <= np.float32(cfg.epsilon)
        assert result.purified.min() >= 0.0 and result.purified.max() <= 1.0

    def test_best_iterate_tracking(self, small_clips, small_flow_config):
        clip = small_clips[2]
        result = df.purify(clip, small_flow_config, dcfg(K=6))
        losses = [e["loss"] for e in result.loss_trace]
        assert result.best_loss == min(losses)
        assert result.best_loss <= losses[0]

    def test_reduces_mc_on_attacked_clip(
        self, small_clips, small_model, small_flow_config
    ):
        clip = small_clips[3]
        pert = atk.pgd_attack(
            clip, clip.label, small_model, small_flow_config,
            atk.AttackConfig(steps=8, seed=0),
        )
        attacked = pert.apply(clip.frames)
        result = df.purify(attacked, small_flow_config, dcfg(K=10))
        mc_attacked = ls.mc_loss_value(attacked, small_flow_config)
        mc_purified = ls.mc_loss_value(result.purified, small_flow_config)
        assert mc_purified < mc_attacked

    def test_multimc_odd_t_rejected(self, small_flow_config):
        frames = np.random.default_rng(0).random((5, 8, 8, 3)).astype(np.float32)
        with pytest.raises(df.DefenseError):
            df.purify(frames, small_flow_config, dcfg(loss="multiMC"))

    def test_determinism(self, small_clips, small_flow_config):
        clip = small_clips[4]
        a = df.purify(clip, small_flow_config, dcfg(K=3))
        b = df.purify(clip, small_flow_config, dcfg(K=3))
        assert np.array_equal(a.purified, b.purified)


class TestDefendedPredict:
    def test_k_zero_matches_undefended(
        self, small_clips, small_model, small_flow_config
    ):
        clip = small_clips[5]
        plain_label, plain_probs = cls.predict(small_model, clip, small_flow_config)
        label, probs, result = df.defended_predict(
            clip, small_model, small_flow_config, dcfg(K=0)
        )
        assert label == plain_label
        assert np.array_equal(probs, plain_probs)
        assert result.prediction == label

    def test_multimc_path_runs(self, small_clips, small_model, small_flow_config):
        clip = small_clips[6]
        label, probs, result = df.defended_predict(
            clip, small_model, small_flow_config, dcfg(K=2, loss="multiMC")
        )
        assert 0 <= label < small_model.num_classes
        assert abs(probs.sum() - 1.0) < 1e-6
        assert len(result.loss_trace) == 2


class TestExport:
    def test_result_files(self, small_clips, small_flow_config, tmp_path):
        clip = small_clips[7]
        result = df.purify(clip, small_flow_config, dcfg(K=2))
        prefix = tmp_path / "purified"
        df.export_result(result, str(prefix))
        loaded = vd.load_clip(f"{prefix}.vclip")
        assert np.array_equal(loaded.frames, result.purified)
        payload = json.loads(open(f"{prefix}.trace.json").read())
        assert len(payload["loss_trace"]) == 2
        assert payload["max_r"] <= df.DefenseConfig().epsilon
