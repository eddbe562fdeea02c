"""Tests for the command-line interface: dispatch, exit codes, artifacts."""

import json
import os

import numpy as np
import pytest

from motionguard import cli
from motionguard import classifier as cls
from motionguard import video as vd


TINY = {
    "dataset": {
        "T": 6, "H": 32, "W": 32, "C": 3,
        "clips_per_class": 1, "texture_smoothness": 3.0,
    },
    "flow": {"iters_inference": 4, "iters_gradient": 1},
    "train": {"epochs": 1, "seed": 0},
    "defense": {"K": 1},
    "seed": 17,
}


@pytest.fixture(scope="module")
def tiny_cfg_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps(TINY))
    return str(path)


@pytest.fixture(scope="module")
def tiny_model_path(tmp_path_factory, small_model):
    path = tmp_path_factory.mktemp("model") / "model.vmdl"
    cls.save_model(small_model, str(path))
    return str(path)


class TestDispatch:
    def test_no_arguments_usage(self, capsys):
        assert cli.main([]) == cli.EXIT_USAGE

    def test_unknown_subcommand(self, capsys):
        assert cli.main(["teleport"]) == cli.EXIT_USAGE

    def test_unknown_flag(self, capsys):
        assert cli.main(["gen-data", "--frobnicate"]) == cli.EXIT_USAGE

    def test_missing_config_file(self, tmp_path, capsys):
        code = cli.main(
            ["gen-data", "--config", str(tmp_path / "nope.json"),
             "--out", str(tmp_path)]
        )
        assert code == cli.EXIT_CONFIG

    def test_invalid_json_config(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{nope")
        code = cli.main(
            ["gen-data", "--config", str(bad), "--out", str(tmp_path)]
        )
        assert code == cli.EXIT_CONFIG

    def test_unknown_config_key(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"dataset": {"frames": 6}}))
        code = cli.main(
            ["gen-data", "--config", str(bad), "--out", str(tmp_path)]
        )
        assert code == cli.EXIT_CONFIG


class TestGenData:
    def test_writes_manifest_and_clips(self, tiny_cfg_path, tmp_path, capsys):
        out = tmp_path / "data"
        assert cli.main(
            ["gen-data", "--config", tiny_cfg_path, "--out", str(out)]
        ) == 0
        manifest = json.load(open(out / "manifest.json"))
        assert len(manifest["clips"]) == 8
        clip = vd.load_clip(out / manifest["clips"][0]["path"])
        assert clip.frames.shape == (6, 32, 32, 3)


class TestTrain:
    def test_trains_and_saves(self, tiny_cfg_path, tmp_path, capsys):
        out = tmp_path / "model.vmdl"
        assert cli.main(
            ["train", "--config", tiny_cfg_path, "--out", str(out)]
        ) == 0
        model = cls.load_model(str(out))
        assert model.num_classes == 8

    def test_bad_train_config(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        cfg = dict(TINY)
        cfg["train"] = {"epochs": 0}
        bad.write_text(json.dumps(cfg))
        code = cli.main(
            ["train", "--config", str(bad), "--out", str(tmp_path / "m.vmdl")]
        )
        assert code == cli.EXIT_CONFIG


class TestAttackDefend:
    def test_attack_requires_model(self, tiny_cfg_path, tmp_path, capsys):
        code = cli.main(
            ["attack", "--config", tiny_cfg_path, "--out", str(tmp_path)]
        )
        assert code == cli.EXIT_CONFIG

    def test_attack_writes_adversarial_clips(
        self, tmp_path, tiny_model_path, capsys
    ):
        cfg = dict(TINY)
        cfg["attack"] = {"kind": "pgd", "steps": 2}
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg))
        out = tmp_path / "adv"
        code = cli.main(
            ["attack", "--config", str(path), "--model", tiny_model_path,
             "--out", str(out), "--sample", "2"]
        )
        assert code == 0
        files = sorted(os.listdir(out))
        assert len(files) == 2 and files[0].endswith(".adv.vclip")

    def test_defend_writes_purified_clips(
        self, tiny_cfg_path, tmp_path, capsys
    ):
        out = tmp_path / "pure"
        code = cli.main(
            ["defend", "--config", tiny_cfg_path, "--out", str(out),
             "--sample", "2"]
        )
        assert code == 0
        names = sorted(os.listdir(out))
        assert any(n.endswith(".vclip") for n in names)
        assert any(n.endswith(".trace.json") for n in names)


class TestEvalAndReports:
    @staticmethod
    def _run_eval(tmp_path, tiny_model_path):
        cfg = dict(TINY)
        cfg["attacks"] = [{"kind": "pgd", "steps": 2}]
        cfg["adaptive_sample_size"] = 2
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg))
        out = tmp_path / "run"
        code = cli.main(
            ["eval", "--config", str(path), "--model", tiny_model_path,
             "--out", str(out), "--sample", "3"]
        )
        assert code == 0
        return out

    def test_eval_report_recomputable(
        self, tmp_path, tiny_model_path, capsys
    ):
        out = self._run_eval(tmp_path, tiny_model_path)
        payload = json.load(open(out / "report.json"))
        for row, cells in payload["accuracy"].items():
            records = [r for r in payload["per_clip"] if r["row"] == row]
            for col, value in cells.items():
                key = "pred_" + col.replace("-", "_")
                hits = sum(r[key] == r["label"] for r in records)
                assert value == hits / len(records)

    def test_loss_hist_from_report(self, tmp_path, tiny_model_path, capsys):
        run = self._run_eval(tmp_path, tiny_model_path)
        out = tmp_path / "hist"
        code = cli.main(
            ["loss-hist", "--report", str(run / "report.json"),
             "--out", str(out), "--bins", "6"]
        )
        assert code == 0
        assert (out / "mc_loss_hist.csv").exists()
        assert (out / "mc_loss_hist.ppm").exists()

    def test_loss_hist_missing_report(self, tmp_path, capsys):
        code = cli.main(
            ["loss-hist", "--report", str(tmp_path / "nope.json"),
             "--out", str(tmp_path)]
        )
        assert code == cli.EXIT_CONFIG


class TestVizFlow:
    def test_panel_files(self, tiny_cfg_path, tmp_path, capsys):
        out = tmp_path / "viz"
        code = cli.main(
            ["viz-flow", "--config", tiny_cfg_path, "--out", str(out),
             "--sample", "1"]
        )
        assert code == 0
        assert (out / "frames.ppm").exists()
        assert (out / "flow_clean.ppm").exists()
