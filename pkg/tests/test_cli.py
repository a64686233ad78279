"""End-to-end CLI checks at miniature scale."""
import json

import numpy as np
import pytest

from amtennet.cli import main, read_config
from amtennet.errors import DataError


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "toy"
    code = main(["forge", "--out", str(out), "--toy", "--classes", "3",
                 "--n-per-class", "20", "--image-size", "32", "--seed", "1"])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def trained(toy, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "run"
    code = main(["train", "--out", str(out), "--manifest", str(toy / "manifest.tsv"),
                 "--image-size", "40", "--epochs", "1", "--batch-size", "16",
                 "--eval-every", "2", "--seed", "1"])
    assert code == 0
    return out


class TestForge:
    def test_split_counts_match_ratios(self, toy):
        lines = (toy / "manifest.tsv").read_text().strip().splitlines()
        splits = [line.split("\t")[4] for line in lines]
        assert splits.count("train") == 45  # 15 per class at 75%
        assert splits.count("val") == 3
        assert splits.count("test") == 12

    def test_stamp_written(self, toy):
        stamp = json.loads((toy / "run_stamp.json").read_text())
        assert "version" in stamp and stamp["config"]["seed"] == "1"

    def test_derived_forge(self, toy, tmp_path):
        code = main(["forge", "--out", str(tmp_path / "jp"), "--manifest",
                     str(toy / "manifest.tsv"), "--op", "JP", "--mode", "single",
                     "--param", "60", "--seed", "1"])
        assert code == 0
        assert (tmp_path / "jp" / "manifest.tsv").exists()


class TestTrainEval:
    def test_artifacts(self, trained):
        assert (trained / "metrics.csv").exists()
        assert (trained / "checkpoint_best.ckpt").exists()
        assert (trained / "checkpoint_final.ckpt").exists()
        assert (trained / "trace_energy.csv").exists()

    def test_eval_runs(self, trained, toy, tmp_path):
        code = main(["eval", "--out", str(tmp_path / "ev"),
                     "--checkpoint", str(trained / "checkpoint_final.ckpt"),
                     "--manifest", str(toy / "manifest.tsv"),
                     "--real-classes", "0"])
        assert code == 0
        assert (tmp_path / "ev" / "confusion.txt").exists()

    def test_identical_config_identical_metrics(self, toy, tmp_path):
        outs = []
        for run in ("a", "b"):
            out = tmp_path / run
            code = main(["train", "--out", str(out), "--manifest", str(toy / "manifest.tsv"),
                         "--image-size", "40", "--epochs", "1", "--batch-size", "16",
                         "--eval-every", "5", "--seed", "7"])
            assert code == 0
            outs.append((out / "metrics.csv").read_bytes())
        assert outs[0] == outs[1]

    def test_traces_dump(self, trained, toy, tmp_path):
        code = main(["traces", "--out", str(tmp_path / "tr"),
                     "--checkpoint", str(trained / "checkpoint_final.ckpt"),
                     "--manifest", str(toy / "manifest.tsv")])
        assert code == 0
        dumps = list((tmp_path / "tr").glob("iter_*/trace_ch*.png"))
        assert len(dumps) == 3


class TestExitCodes:
    def test_usage_error_is_1(self):
        assert main(["train"]) == 1  # missing required --out
        assert main(["no-such-command", "--out", "x"]) == 1

    def test_data_error_is_2(self, tmp_path):
        code = main(["train", "--out", str(tmp_path / "o"),
                     "--manifest", str(tmp_path / "missing.tsv")])
        assert code == 2

    def test_missing_checkpoint_is_2(self, toy, tmp_path):
        code = main(["eval", "--out", str(tmp_path / "o"),
                     "--checkpoint", str(tmp_path / "nothing.ckpt"),
                     "--manifest", str(toy / "manifest.tsv")])
        assert code == 2

    def test_numerical_failure_is_3(self, tmp_path):
        # an unreachable tolerance makes the gradient check report failures
        code = main(["gradcheck", "--out", str(tmp_path / "gc"),
                     "--tolerance", "1e-18", "--samples-per-block", "2", "--seed", "0"])
        assert code == 3


class TestConfigFile:
    def test_parse_and_override(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("epochs = 3\nbatch_size = 8  # comment\n\n# full-line comment\nseed = 5\n")
        parsed = read_config(cfg)
        assert parsed == {"epochs": "3", "batch_size": "8", "seed": "5"}

    def test_malformed_rejected(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("epochs: 3\n")
        with pytest.raises(DataError):
            read_config(cfg)

    def test_flags_override_file(self, toy, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(f"manifest = {toy / 'manifest.tsv'}\nepochs = 1\nimage_size = 40\n"
                       "batch_size = 16\neval_every = 9\n")
        out = tmp_path / "cfgrun"
        code = main(["train", "--out", str(out), "--config", str(cfg), "--seed", "2"])
        assert code == 0
        stamp = json.loads((out / "run_stamp.json").read_text())
        assert stamp["config"]["seed"] == "2"
        assert stamp["config"]["epochs"] == "1"
