import numpy as np
import pytest

from abstract_spamlens_test import AbstractSpamLensTest, gradient_error
from spamlens.cnn_model import (
    REDUCED_ARCHITECTURE,
    REDUCED_INPUT_SHAPE,
    TrainConfig,
    build_model,
    classify_probability,
    evaluate,
    forward,
    predict,
    train,
)
from spamlens.dataset_pipeline import NORMAL, SPAM, DatasetSplit, LabeledSample, gen_synthetic, ingest, split
from spamlens.errors import ConfigError, ShapeError, TrainingError
from spamlens.tensor_core import OptimizerState, bce_loss, rmsprop_step


def tiny_samples(rng, n_per_class=6):
    """16x16x1 samples: bright striped images are spam, dark smooth noise is normal."""
    samples = []
    for i in range(n_per_class):
        stripes = np.full((16, 16, 1), 0.6)
        stripes[:, ::2, 0] = 1.0
        stripes -= 0.05 * rng.random((16, 16, 1))
        smooth = 0.2 + 0.05 * rng.random((16, 16, 1))
        samples.append(LabeledSample(stripes, SPAM, f"spam/{i}", f"s{i:03d}"))
        samples.append(LabeledSample(smooth, NORMAL, f"normal/{i}", f"n{i:03d}"))
    return samples


def reduced(seed=5):
    return build_model(seed=seed, architecture=REDUCED_ARCHITECTURE, input_shape=REDUCED_INPUT_SHAPE, dtype=np.float64)


class TestArchitecture:
    def test_parameter_counts(self):
        counts = build_model(seed=0).parameter_counts()
        assert counts[:5] == [896, 18_496, 73_856, 409_728, 1_638_912]
        # The reference architecture table lists 512 for the output layer: 512 weights
        # plus the bias of the single sigmoid unit gives 513.
        assert counts[5] == 513, "output layer keeps its bias (512 weights + 1 bias)"
        assert sum(counts) == 2_142_501

    def test_output_shapes(self):
        assert build_model(seed=0).output_shapes() == [
            (126, 126, 32),
            (63, 63, 32),
            (61, 61, 64),
            (30, 30, 64),
            (28, 28, 128),
            (14, 14, 128),
            (10, 10, 128),
            (5, 5, 128),
            (3200,),
            (512,),
            (1,),
        ]

    def test_same_seed_same_weights(self):
        a = build_model(seed=3).parameters()
        b = build_model(seed=3).parameters()
        for name in a:
            np.testing.assert_array_equal(a[name], b[name])

    def test_biases_start_at_zero(self):
        for name, value in build_model(seed=1).parameters().items():
            if name.endswith("/bias"):
                assert not value.any()

    def test_fingerprint_depends_on_architecture(self):
        assert build_model(seed=0).fingerprint != reduced().fingerprint
        assert len(build_model(seed=0).fingerprint) == 32


class TestForward(AbstractSpamLensTest):
    def test_probability_in_open_interval_and_pure(self):
        model = build_model(seed=2)
        image = self.rng.random((128, 128, 3)).astype(np.float32)
        p = forward(model, image)
        assert 0 < p < 1
        assert forward(model, image) == p

    @pytest.mark.parametrize("bias", [20.0, 1000.0, -1000.0])
    def test_saturated_output_stays_in_open_interval(self, bias):
        model = build_model(seed=0)
        model.parameters()["dense_10/bias"][:] = bias
        image = np.zeros((128, 128, 3), np.float32)
        p = forward(model, image)
        assert 0 < p < 1
        assert 0 < model.predict_proba(image[None])[0] < 1

    def test_large_logits_stay_distinguishable(self):
        model = build_model(seed=0)
        image = np.zeros((128, 128, 3), np.float32)
        model.parameters()["dense_10/bias"][:] = 17.0
        lower = forward(model, image)
        model.parameters()["dense_10/bias"][:] = 20.0
        assert lower < forward(model, image) < 1

    def test_zero_parameters_give_one_half(self):
        model = reduced()
        model.set_parameters({name: np.zeros_like(value) for name, value in model.parameters().items()})
        assert model.forward(self.rng.random(REDUCED_INPUT_SHAPE)) == 0.5

    def test_wrong_input_shape(self):
        with pytest.raises(ShapeError):
            reduced().forward(np.zeros((16, 16, 3)))

    def test_predict_proba_matches_forward(self):
        model = reduced()
        images = self.rng.random((5,) + REDUCED_INPUT_SHAPE)
        batched = model.predict_proba(images, batch_size=2)
        np.testing.assert_allclose(batched, [model.forward(x) for x in images], atol=1e-12)

    @pytest.mark.parametrize("probability, label", [(0.7, "spam"), (0.5, "spam"), (0.2, "normal")])
    def test_threshold(self, probability, label):
        assert classify_probability(probability).label == label

    def test_predict(self):
        model = reduced()
        prediction = predict(model, self.rng.random(REDUCED_INPUT_SHAPE), threshold=0.0001)
        assert prediction.is_spam


class TestGradients(AbstractSpamLensTest):
    @pytest.mark.parametrize("trial", range(100))
    def test_end_to_end_gradient_check(self, trial):
        rng = np.random.default_rng(trial)
        model = reduced(seed=trial)
        images = rng.random((3,) + REDUCED_INPUT_SHAPE)
        labels = rng.integers(0, 2, size=3).astype(np.float64)
        _, grads, _ = model.loss_and_gradients(images, labels)

        def loss():
            return float(np.mean(bce_loss(model.predict_proba(images), labels)[0]))

        for name, value in model.parameters().items():
            assert gradient_error(loss, value, grads[name]) < 1e-4, name

    def test_small_step_decreases_sample_loss(self):
        model = reduced(seed=4)
        image = self.rng.random((1,) + REDUCED_INPUT_SHAPE)
        label = np.array([1.0])
        before, grads, _ = model.loss_and_gradients(image, label)
        state = OptimizerState.zeros_like(model.parameters(), learning_rate=1e-6)
        params, _ = rmsprop_step(model.parameters(), grads, state)
        model.set_parameters(params)
        after, _, _ = model.loss_and_gradients(image, label)
        assert after < before


class TestTrain(AbstractSpamLensTest):
    def test_config_defaults(self):
        config = TrainConfig()
        assert (config.learning_rate, config.epochs, config.batch_size) == (1e-4, 30, 20)
        assert config.optimizer == "rmsprop"

    @pytest.mark.parametrize(
        "kwargs", [{"learning_rate": 0}, {"epochs": 0}, {"batch_size": 0}, {"optimizer": "adam"}]
    )
    def test_invalid_config(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)

    def test_deterministic_and_leaves_input_untouched(self):
        data = split(tiny_samples(self.rng), seed=1)
        config = TrainConfig(learning_rate=1e-3, epochs=3, batch_size=4, seed=9)
        model = reduced()
        initial = {k: v.copy() for k, v in model.parameters().items()}

        first, history = train(model, data, config)
        second, _ = train(model, data, config)

        for name, value in first.parameters().items():
            np.testing.assert_array_equal(value, second.parameters()[name])
            np.testing.assert_array_equal(model.parameters()[name], initial[name])
        assert [r.epoch for r in history.records] == [1, 2, 3]
        assert all(r.test_accuracy is not None for r in history.records)
        assert len(history.to_jsonl().splitlines()) == 3

    def test_learns_separable_toy_problem(self):
        data = split(tiny_samples(self.rng, n_per_class=10), seed=2)
        model, history = train(reduced(seed=8), data, TrainConfig(learning_rate=3e-3, epochs=25, batch_size=4, seed=2))
        assert history.records[-1].loss < history.records[0].loss
        assert history.records[-1].train_accuracy >= 0.9

    def test_single_class_rejected(self):
        samples = [s for s in tiny_samples(self.rng) if s.label == SPAM]
        with pytest.raises(TrainingError, match="both classes"):
            train(reduced(), DatasetSplit(train=samples, test=[], seed=0))

    def test_empty_training_set_rejected(self):
        with pytest.raises(TrainingError):
            train(reduced(), DatasetSplit(train=[], test=[], seed=0))

    def test_non_finite_loss_names_epoch_and_batch(self):
        model = reduced()
        params = model.parameters()
        params["dense_6/bias"] = np.array([np.nan])
        model.set_parameters(params)
        data = split(tiny_samples(self.rng), seed=0)
        with pytest.raises(TrainingError, match="epoch 1, batch 0"):
            train(model, data, TrainConfig(epochs=1, batch_size=4))

    def test_evaluate_counts_every_sample(self):
        samples = tiny_samples(self.rng)
        cm = evaluate(reduced(), samples)
        assert cm.total == len(samples)
        assert cm.tp + cm.fn == 6


@pytest.mark.slow
class TestDeskScaleTraining:
    def test_synthetic_corpus_reaches_high_accuracy(self, tmp_path):
        corpus = gen_synthetic(200, seed=7, out_dir=tmp_path / "synthetic")
        samples, _ = ingest(corpus.root)
        data = split(samples, seed=7)
        model, history = train(build_model(seed=7), data, TrainConfig(seed=7))
        assert history.records[-1].train_accuracy >= 0.98
        assert history.records[-1].test_accuracy >= 0.95
