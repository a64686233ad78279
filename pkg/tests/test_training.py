"""Training loop: determinism, checkpoint round trips, resume exactness."""
import numpy as np
import pytest

from amtennet.errors import CheckpointError, DataError
from amtennet.models import build_mini
from amtennet.optim import TrainConfig, lr_at
from amtennet.layers import softmax_cross_entropy
from amtennet.training import (
    _epoch_batches,
    evaluate_accuracy,
    fit,
    load_checkpoint,
    save_checkpoint,
)


def tiny_data(n=48, size=40, classes=3, seed=0):
    g = np.random.default_rng(seed)
    X = g.uniform(size=(n, 3, size, size)).astype(np.float32)
    y = np.tile(np.arange(classes), n // classes + 1)[:n].astype(np.int64)
    return X, y


def tiny_config(**kw):
    defaults = dict(batch_size=16, epochs=2, eval_every=3, seed=0)
    defaults.update(kw)
    return TrainConfig(**defaults)


class TestEpochBatches:
    def test_published_iteration_count(self):
        # 116,288 training samples at batch 64 -> 1,817 iterations per epoch
        batches = list(_epoch_batches(116288, 64, seed=0, epoch=0))
        assert len(batches) == 1817

    def test_ceil_semantics(self):
        assert len(list(_epoch_batches(3000, 64, 0, 0))) == 47

    def test_trailing_singleton_folded(self):
        batches = list(_epoch_batches(65, 32, 0, 0))
        assert [len(b) for b in batches] == [32, 33]

    def test_permutation_covers_everything(self):
        batches = list(_epoch_batches(100, 9, 0, 0))
        assert sorted(np.concatenate(batches)) == list(range(100))

    def test_epochs_differ_and_reproduce(self):
        a0 = np.concatenate(list(_epoch_batches(50, 10, seed=3, epoch=0)))
        a1 = np.concatenate(list(_epoch_batches(50, 10, seed=3, epoch=1)))
        b0 = np.concatenate(list(_epoch_batches(50, 10, seed=3, epoch=0)))
        assert not np.array_equal(a0, a1)
        assert np.array_equal(a0, b0)


class TestFit:
    def test_deterministic_same_seed_identical_metrics(self, tmp_path):
        X, y = tiny_data()
        val = tiny_data(12, seed=1)
        outputs = []
        for run in range(2):
            model = build_mini(3, input_size=40, rng=np.random.default_rng(7))
            fit(model, (X, y), val, tiny_config(), tmp_path / f"run{run}")
            outputs.append((tmp_path / f"run{run}" / "metrics.csv").read_bytes())
        assert outputs[0] == outputs[1]

    def test_empty_split_rejected(self, tmp_path):
        model = build_mini(3, input_size=40, rng=np.random.default_rng(0))
        X, y = tiny_data()
        with pytest.raises(DataError, match="empty"):
            fit(model, (X, y), (X[:0], y[:0]), tiny_config(), tmp_path)

    def test_label_out_of_range_rejected(self, tmp_path):
        model = build_mini(3, input_size=40, rng=np.random.default_rng(0))
        X, y = tiny_data()
        bad = y.copy()
        bad[0] = 3
        with pytest.raises(DataError, match="out of range"):
            fit(model, (X, bad), (X[:4], y[:4]), tiny_config(), tmp_path)

    def test_metrics_csv_schema(self, tmp_path):
        X, y = tiny_data()
        model = build_mini(3, input_size=40, rng=np.random.default_rng(1))
        result = fit(model, (X, y), (X[:8], y[:8]), tiny_config(), tmp_path)
        lines = result.metrics_path.read_text().strip().splitlines()
        assert lines[0] == "iteration,lr,loss,val_accuracy"
        assert len(lines) == 1 + result.iterations
        # val accuracy recorded at eval_every cadence
        assert lines[3].split(",")[3] != ""

    def test_velocities_finite_after_run(self, tmp_path):
        X, y = tiny_data()
        model = build_mini(3, input_size=40, rng=np.random.default_rng(2))
        fit(model, (X, y), (X[:6], y[:6]), tiny_config(), tmp_path)
        for p in model.params():
            assert np.all(np.isfinite(p.velocity)) and np.all(np.isfinite(p.value))

    def test_constrained_extractor_projected_during_fit(self, tmp_path):
        from amtennet.extractors import ExtractorConfig

        model = build_mini(3, ExtractorConfig(kind="constrained_conv"), input_size=40,
                           rng=np.random.default_rng(3))
        X, y = tiny_data()
        fit(model, (X, y), (X[:6], y[:6]), tiny_config(epochs=1), tmp_path)
        k = model.extractor.conv.p.kernels.value.astype(np.float64)
        assert np.allclose(k[:, :, 2, 2], -1.0)
        assert np.abs(k.sum(axis=(2, 3))).max() < 1e-6


class TestCheckpoints:
    def test_save_load_save_identical_bytes(self, tmp_path):
        model = build_mini(3, input_size=40, rng=np.random.default_rng(3))
        a = tmp_path / "a.ckpt"
        b = tmp_path / "b.ckpt"
        save_checkpoint(a, model, iteration=5)
        loaded, iteration, _ = load_checkpoint(a)
        assert iteration == 5
        save_checkpoint(b, loaded, iteration=5)
        assert a.read_bytes() == b.read_bytes()

    def test_values_and_velocities_roundtrip(self, tmp_path):
        model = build_mini(3, input_size=40, rng=np.random.default_rng(4))
        for p in model.params():
            p.velocity[...] = np.random.default_rng(5).normal(size=p.velocity.shape)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model, iteration=1)
        loaded, _, _ = load_checkpoint(path)
        by_name = {p.name: p for p in loaded.params()}
        for p in model.params():
            assert np.array_equal(by_name[p.name].value, p.value.astype(np.float32))
            assert np.array_equal(by_name[p.name].velocity, p.velocity.astype(np.float32))

    def test_corrupt_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 64)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_version_mismatch_rejected(self, tmp_path):
        import json, struct
        from amtennet.training import CHECKPOINT_MAGIC

        model = build_mini(3, input_size=40, rng=np.random.default_rng(6))
        path = tmp_path / "v.ckpt"
        save_checkpoint(path, model)
        raw = path.read_bytes()
        (hlen,) = struct.unpack("<Q", raw[8:16])
        header = json.loads(raw[16 : 16 + hlen])
        header["version"] = 99
        new_header = json.dumps(header, sort_keys=True).encode()
        path.write_bytes(CHECKPOINT_MAGIC + struct.pack("<Q", len(new_header)) + new_header
                         + raw[16 + hlen :])
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(CheckpointError, match="exist"):
            load_checkpoint(tmp_path / "nope.ckpt")

    def test_resume_continues_loss_curve_exactly(self, tmp_path):
        """Training 2 epochs straight equals 1 epoch + checkpoint + 1 epoch."""
        X, y = tiny_data(n=32, seed=8)
        val = tiny_data(8, seed=9)
        cfg2 = tiny_config(epochs=2, eval_every=1000)

        model_a = build_mini(3, input_size=40, rng=np.random.default_rng(10))
        fit(model_a, (X, y), val, cfg2, tmp_path / "straight")
        straight = (tmp_path / "straight" / "metrics.csv").read_text().splitlines()

        # float32 state written through a checkpoint is bit-exact, so a
        # resumed second epoch must reproduce the same loss rows
        model_b = build_mini(3, input_size=40, rng=np.random.default_rng(10))
        fit(model_b, (X, y), val, tiny_config(epochs=1, eval_every=1000), tmp_path / "part1")
        resumed, _, _ = load_checkpoint(tmp_path / "part1" / "checkpoint_final.ckpt")

        # continue manually for epoch 2 using the same batch derivation
        from amtennet.training import _epoch_batches
        from amtennet.optim import sgd_step_all

        losses = []
        iteration = len(list(_epoch_batches(len(y), cfg2.batch_size, cfg2.seed, 0)))
        for idx in _epoch_batches(len(y), cfg2.batch_size, cfg2.seed, 1):
            logits = resumed.forward(X[idx], train=True)
            loss, dlogits = softmax_cross_entropy(logits, y[idx])
            resumed.zero_grads()
            resumed.backward(dlogits)
            sgd_step_all(resumed.params(), lr_at(iteration, cfg2), cfg2.momentum, cfg2.decay)
            iteration += 1
            losses.append(loss)
        second_epoch_rows = [float(line.split(",")[2]) for line in straight[1:]][len(losses):]
        assert losses == pytest.approx(second_epoch_rows, abs=0.0)


class TestEvaluate:
    def test_accuracy_batched_equals_whole(self):
        model = build_mini(3, input_size=40, rng=np.random.default_rng(11))
        X, y = tiny_data(20, seed=12)
        assert evaluate_accuracy(model, X, y, batch_size=7) == evaluate_accuracy(model, X, y)
