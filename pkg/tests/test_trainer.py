import csv

import numpy as np
import pytest

from gestaltclosure.config.settings import AugmentationConfig, NetConfig
from gestaltclosure.core import trainer as trainer_module
from gestaltclosure.core.checkpoint import load_checkpoint
from gestaltclosure.core.datasets import Dataset, Provenance, make_white_noise
from gestaltclosure.core.errors import NonFiniteError, ShapeMismatchError, TrainingDivergedError
from gestaltclosure.core.network import build_network
from gestaltclosure.core.trainer import (
    REPORT_HEADER,
    augment_image,
    max_shift,
    prepare_batch,
    train,
)

NO_AUG = AugmentationConfig.disabled()


def polarity_dataset(n: int = 32, size: int = 16, seed: int = 0) -> Dataset:
    """Two classes told apart by overall brightness."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    base = np.where(labels[:, None, None, None] == 1, 0.5, -0.5)
    images = (base + rng.normal(0, 0.05, (n, size, size, 3))).astype(np.float32)
    return Dataset(images, labels.astype(np.int64), 2, Provenance.NATURAL)


@pytest.fixture
def binary_net():
    config = NetConfig(n_layers=3, n_classes=2, base_width=4, width_step=2, input_shape=(16, 16, 3))
    return build_network(config, seed=0)


@pytest.fixture
def noise():
    return make_white_noise(count=12, classes=3, seed=0, size=16)


class TestAugmentation:
    def test_disabled_is_identity(self, rng):
        image = rng.uniform(-1, 1, (10, 10, 3)).astype(np.float32)
        np.testing.assert_array_equal(augment_image(image, NO_AUG, rng), image)

    def test_flip_only(self):
        image = np.arange(2 * 3 * 1, dtype=np.float32).reshape(2, 3, 1)
        aug = AugmentationConfig(horizontal_flip=True, translation_range=0.0)
        outs = {augment_image(image, aug, np.random.default_rng(s)).tobytes() for s in range(20)}
        assert outs == {image.tobytes(), image[:, ::-1, :].tobytes()}

    def test_shift_replicates_edges(self):
        image = np.arange(100, dtype=np.float32).reshape(10, 10, 1)
        aug = AugmentationConfig(horizontal_flip=False, translation_range=0.2)
        assert max_shift(aug, 10) == 2
        for s in range(10):
            out = augment_image(image, aug, np.random.default_rng(s))
            assert out.shape == image.shape
            assert set(np.unique(out)) <= set(np.unique(image))

    def test_batches_are_keyed_by_seed_epoch_and_index(self, noise):
        aug = AugmentationConfig(translation_range=0.1)
        a = prepare_batch(noise, [3, 5], aug, seed=1, epoch=2, normalization=None)
        b = prepare_batch(noise, [5, 3], aug, seed=1, epoch=2, normalization=None)
        np.testing.assert_array_equal(a[0], b[1])
        c = prepare_batch(noise, [3], aug, seed=1, epoch=3, normalization=None)
        d = prepare_batch(noise, [3], aug, seed=1, epoch=3, normalization=None)
        np.testing.assert_array_equal(c, d)


class TestTrain:
    def test_learns_a_separable_task(self, binary_net):
        train_ds = polarity_dataset(32, seed=0)
        val_ds = polarity_dataset(16, seed=1)
        report = train(binary_net, train_ds, NO_AUG, epochs=15, seed=0, val=val_ds, batch_size=8)
        assert len(report.epochs) == 15
        assert report.final_train_accuracy >= 0.9
        assert report.final_val_accuracy >= 0.9
        assert report.epochs[-1].train_loss < report.epochs[0].train_loss

    def test_deterministic(self, tiny_conv, noise):
        params = []
        for _ in range(2):
            net = build_network(tiny_conv, seed=4)
            train(net, noise, AugmentationConfig(), epochs=2, seed=9, batch_size=5)
            params.append(net.copy_parameters())
        for name in params[0]:
            np.testing.assert_array_equal(params[0][name], params[1][name])

    def test_checkpoints_and_report_files(self, tiny_conv, noise, tmp_path):
        net = build_network(tiny_conv, seed=0)
        report = train(
            net, noise, NO_AUG, epochs=3, seed=0, checkpoint_epochs=[0, 2], out_dir=tmp_path
        )
        assert sorted(report.checkpoints) == [0, 2, 3]
        names = sorted(p.name for p in (tmp_path / "checkpoints").iterdir())
        assert names == ["epoch_000.npz", "epoch_002.npz", "epoch_003.npz"]
        final = load_checkpoint(tmp_path / "checkpoints" / "epoch_003.npz")
        for name, value in net.parameters().items():
            np.testing.assert_array_equal(final.params[name], value)
        assert final.optimizer.steps == 3  # one batch per epoch

    def test_no_validation_set(self, tiny_conv, noise, tmp_path):
        report = train(build_network(tiny_conv, seed=0), noise, NO_AUG, epochs=1)
        assert not report.validation_available
        assert report.final_val_accuracy is None
        path = report.write_csv(tmp_path / "training.csv")
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        assert rows[0] == REPORT_HEADER
        assert rows[1][0] == "1" and rows[1][3] == ""

    def test_normalization_is_fitted_on_training_data(self, tiny_conv, noise):
        report = train(build_network(tiny_conv, seed=0), noise, AugmentationConfig(), epochs=0)
        expected = noise.images.mean(axis=(0, 1, 2), dtype=np.float64)
        np.testing.assert_allclose(report.normalization.mean, expected, rtol=1e-10)
        assert report.normalization.mean.dtype == np.float64
        assert report.checkpoints[0].normalization is report.normalization

    def test_callback_stops_early(self, tiny_conv, noise):
        seen = []

        def stop_at_two(net, record):
            seen.append(record.epoch)
            return record.epoch == 2

        report = train(
            build_network(tiny_conv, seed=0), noise, NO_AUG, epochs=5, on_epoch_end=stop_at_two
        )
        assert seen == [1, 2]
        assert report.early_stopped
        assert sorted(report.checkpoints) == [0, 2]

    def test_label_arity_must_match_head(self, binary_net, noise):
        with pytest.raises(ShapeMismatchError, match="3 classes"):
            train(binary_net, noise, NO_AUG, epochs=1)

    def test_divergence_restores_last_good_weights(self, tiny_conv, noise, tmp_path, monkeypatch):
        real_step = trainer_module.rmsprop_step
        calls = {"n": 0}

        def failing_step(state, params, grads, lr):
            calls["n"] += 1
            if calls["n"] > 2:
                raise NonFiniteError("non-finite gradient for output.W")
            return real_step(state, params, grads, lr)

        monkeypatch.setattr(trainer_module, "rmsprop_step", failing_step)
        net = build_network(tiny_conv, seed=0)
        with pytest.raises(TrainingDivergedError) as info:
            train(net, noise, NO_AUG, epochs=4, batch_size=6, out_dir=tmp_path)
        assert "epoch 2" in str(info.value)
        last_good = load_checkpoint(info.value.last_checkpoint)
        assert last_good.epoch == 1
        for name, value in net.parameters().items():
            np.testing.assert_array_equal(last_good.params[name], value)

    def test_divergence_rolls_back_optimizer_state(self, tiny_conv, noise, tmp_path, monkeypatch):
        real_step = trainer_module.rmsprop_step
        seen = {"n": 0, "state": None}

        def failing_step(state, params, grads, lr):
            seen["n"] += 1
            seen["state"] = state
            # Epoch 2 takes one good step before its second batch diverges.
            if seen["n"] > 3:
                raise NonFiniteError("non-finite gradient for output.W")
            return real_step(state, params, grads, lr)

        monkeypatch.setattr(trainer_module, "rmsprop_step", failing_step)
        with pytest.raises(TrainingDivergedError) as info:
            train(build_network(tiny_conv, seed=0), noise, NO_AUG, epochs=4, batch_size=6, out_dir=tmp_path)
        last_good = load_checkpoint(info.value.last_checkpoint).optimizer
        state = seen["state"]
        assert state.steps == last_good.steps == 2
        assert set(state.accumulators) == set(last_good.accumulators)
        for name, acc in state.accumulators.items():
            np.testing.assert_array_equal(acc, last_good.accumulators[name])
