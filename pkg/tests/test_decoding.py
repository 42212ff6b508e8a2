"""Test-latent inference, label-blind decoding, prediction, and metrics."""

import hashlib

import numpy as np
import pytest

from conftest import random_state
from ldgd.data import FeatureScaler, SynthConfig, synth_generate
from ldgd.decoding import (
    DecodeResult,
    TestLatent,
    decode_latent,
    evaluate,
    infer_latent,
    normalize_bernoulli_means,
    predict_labels,
    objective_at_latent,
)
from ldgd.errors import DimensionMismatch, ValidationError
from ldgd.model import Dataset
from ldgd.training import TrainConfig, fit, init_model


@pytest.fixture(scope="module")
def trained():
    """A trained model on a small synthetic set, plus held-out test trials."""
    cfg = SynthConfig(n=120, d=12, k=2, q_true=2, noise_sd=0.2, class_separation=3.0, seed=21)
    data, _ = synth_generate(cfg)
    train_idx = np.arange(90)
    test_idx = np.arange(90, 120)
    train = data.subset(train_idx)
    test = data.subset(test_idx)
    scaler = FeatureScaler.fit(train.y_continuous)
    train_std = Dataset(scaler.transform(train.y_continuous), train.y_discrete)
    tc = TrainConfig(max_iters=800, learning_rate=0.02, seed=0, mc_samples_discrete=10)
    st = init_model(train_std, q=3, m=10, seed=0, mc_samples_discrete=10)
    model, _ = fit(train_std, tc, init=st)
    return {
        "model": model,
        "train_std": train_std,
        "test_feats": scaler.transform(test.y_continuous),
        "test_labels": test.labels(),
        "test_onehot": test.y_discrete,
    }


def decode_cfg(iters=200, seed=5):
    return TrainConfig(max_iters=iters, learning_rate=0.05, seed=seed, mc_samples_discrete=10)


class TestInferLatent:
    def test_zero_iterations_returns_initialization(self, trained):
        model = trained["model"]
        lat = infer_latent(
            model,
            trained["test_feats"],
            trained["test_onehot"],
            decode_cfg(iters=0),
            train_features=trained["train_std"].y_continuous,
        )
        assert np.allclose(lat.scale_star, 0.1)
        d2 = (
            (trained["test_feats"][:, None, :] - trained["train_std"].y_continuous[None, :, :])
            ** 2
        ).sum(axis=2)
        expected_mu = model.latent.mu[np.argmin(d2, axis=1)]
        assert np.array_equal(lat.mu_star, expected_mu)

    def test_model_untouched_by_inference(self, trained):
        model = trained["model"]
        before = hashlib.sha256(model.to_json().encode()).hexdigest()
        infer_latent(
            model,
            trained["test_feats"],
            trained["test_onehot"],
            decode_cfg(iters=50),
            train_features=trained["train_std"].y_continuous,
        )
        after = hashlib.sha256(model.to_json().encode()).hexdigest()
        assert before == after

    def test_replaying_training_points_recovers_their_posravel(self, trained):
        model = trained["model"]
        train_std = trained["train_std"]
        idx = np.arange(12)
        lat = infer_latent(
            model,
            train_std.y_continuous[idx],
            train_std.y_discrete[idx],
            decode_cfg(iters=300, seed=11),
            train_features=train_std.y_continuous,
        )
        relevance = 1.0 / model.kernel_cont.lengthscales**2
        active = relevance >= 0.1 * relevance.max()
        diff = lat.mu_star[:, active] - model.latent.mu[idx][:, active]
        rms = np.sqrt(np.mean(diff**2, axis=1))
        assert np.all(rms <= 0.5), rms

    def test_requires_labels(self, trained):
        with pytest.raises(ValidationError):
            infer_latent(trained["model"], trained["test_feats"], None, decode_cfg())


class TestDecodeLatent:
    def test_deterministic_given_seed(self, trained):
        kwargs = dict(
            init_mode="nearest", train_features=trained["train_std"].y_continuous
        )
        a = decode_latent(trained["model"], trained["test_feats"], decode_cfg(), **kwargs)
        b = decode_latent(trained["model"], trained["test_feats"], decode_cfg(), **kwargs)
        assert np.array_equal(a.mu_star, b.mu_star)
        assert np.array_equal(a.log_scale_star, b.log_scale_star)

    def test_end_to_end_separability(self, trained):
        lat = decode_latent(
            trained["model"],
            trained["test_feats"],
            decode_cfg(iters=300),
            train_features=trained["train_std"].y_continuous,
        )
        result = predict_labels(trained["model"], lat, n_samples=100, seed=3)
        metrics = evaluate(result.predicted, trained["test_labels"])
        assert metrics.accuracy >= 0.85, metrics

    def test_random_init_mode_available(self, trained):
        lat = decode_latent(
            trained["model"], trained["test_feats"], decode_cfg(iters=0), init_mode="random"
        )
        assert lat.mu_star.shape == (trained["test_feats"].shape[0], trained["model"].config.q)

    def test_feature_dimension_checked(self, trained):
        with pytest.raises(DimensionMismatch):
            decode_latent(
                trained["model"], np.zeros((3, 99)), decode_cfg(), init_mode="random"
            )

    def test_infer_objective_dominates_decode_optimum(self, trained):
        model = trained["model"]
        feats = trained["test_feats"][:10]
        onehot = trained["test_onehot"][:10]
        train_feats = trained["train_std"].y_continuous
        inferred = infer_latent(
            model, feats, onehot, decode_cfg(iters=300, seed=7), train_features=train_feats
        )
        decoded = decode_latent(
            model, feats, decode_cfg(iters=300, seed=7), train_features=train_feats
        )
        at_inferred = objective_at_latent(model, inferred, feats, onehot, seed=99)
        at_decoded = objective_at_latent(model, decoded, feats, onehot, seed=99)
        assert at_inferred >= at_decoded


class TestPredictLabels:
    def test_vanishing_discrete_path_gives_uniform(self):
        st = random_state(seed=30)
        st.kernel_disc.log_signal_variance = -60.0
        st.inducing_disc.m[:] = 0.0
        idx = np.arange(st.config.m)
        st.inducing_disc.s_raw[:] = 0.0
        st.inducing_disc.s_raw[:, idx, idx] = -60.0
        lat = TestLatent(np.zeros((5, st.config.q)), np.full((5, st.config.q), -2.0))
        result = predict_labels(st, lat, n_samples=50, seed=0)
        assert np.allclose(result.class_probs, 1.0 / st.k, atol=1e-6)

    def test_normalization_rule(self):
        probs = normalize_bernoulli_means(np.array([[0.9, 0.1]]))
        assert np.allclose(probs, [[0.9, 0.1]])
        probs = normalize_bernoulli_means(np.array([[0.6, 0.6]]))
        assert np.allclose(probs, [[0.5, 0.5]])

    def test_rows_sum_to_one(self, trained):
        rng = np.random.default_rng(4)
        lat = TestLatent(
            rng.standard_normal((7, trained["model"].config.q)),
            np.full((7, trained["model"].config.q), -1.5),
        )
        result = predict_labels(trained["model"], lat, n_samples=30, seed=1)
        assert np.all(np.abs(result.class_probs.sum(axis=1) - 1.0) <= 1e-9)

    def test_argmax_tie_breaks_to_lowest_index(self):
        res = DecodeResult(
            class_probs=np.array([[0.5, 0.5]]),
            predicted=np.argmax(np.array([[0.5, 0.5]]), axis=1),
            latent=TestLatent(np.zeros((1, 2)), np.zeros((1, 2))),
        )
        assert res.predicted[0] == 0

    def test_deterministic(self, trained):
        lat = TestLatent(
            np.zeros((4, trained["model"].config.q)),
            np.full((4, trained["model"].config.q), -1.0),
        )
        a = predict_labels(trained["model"], lat, n_samples=20, seed=9)
        b = predict_labels(trained["model"], lat, n_samples=20, seed=9)
        assert np.array_equal(a.class_probs, b.class_probs)


class TestEvaluate:
    def test_perfect_predictions(self):
        m = evaluate([0, 1, 1, 0], [0, 1, 1, 0])
        assert m.accuracy == 1.0
        assert m.per_class_f == (1.0, 1.0)
        assert m.macro_f == 1.0

    def test_all_predictions_one_class_hand_values(self):
        m = evaluate([0, 0, 0, 0], [0, 0, 1, 1])
        assert m.accuracy == pytest.approx(0.5)
        assert m.per_class_f[0] == pytest.approx(2.0 / 3.0)
        assert m.per_class_f[1] == 0.0
        assert m.macro_f == pytest.approx(1.0 / 3.0)

    def test_relabeling_invariance_of_accuracy(self):
        rng = np.random.default_rng(5)
        pred = rng.integers(0, 3, size=50)
        truth = rng.integers(0, 3, size=50)
        perm = np.array([2, 0, 1])
        m1 = evaluate(pred, truth)
        m2 = evaluate(perm[pred], perm[truth])
        assert m1.accuracy == m2.accuracy
        assert sorted(m1.per_class_f) == pytest.approx(sorted(m2.per_class_f))

    def test_empty_input_rejected(self):
        with pytest.raises(ValidationError):
            evaluate([], [])

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            evaluate([0, 1], [0, 1, 0])


class TestDecodeResultExport:
    def test_rows_with_and_without_truth(self):
        res = DecodeResult(
            class_probs=np.array([[0.8, 0.2], [0.3, 0.7]]),
            predicted=np.array([0, 1]),
            latent=TestLatent(np.zeros((2, 2)), np.zeros((2, 2))),
        )
        header, rows = res.to_rows()
        assert header == ["trial_id", "prob_0", "prob_1", "predicted"]
        assert rows[0] == [0, 0.8, 0.2, 0]
        header, rows = res.to_rows(trial_ids=[10, 11], truth=[1, 1])
        assert header[-1] == "truth"
        assert rows[1] == [11, 0.3, 0.7, 1, 1]

    def test_mismatched_truth_rejected(self):
        res = DecodeResult(
            class_probs=np.array([[0.5, 0.5]]),
            predicted=np.array([0]),
            latent=TestLatent(np.zeros((1, 2)), np.zeros((1, 2))),
        )
        with pytest.raises(ValidationError):
            res.to_rows(truth=[0, 1])
