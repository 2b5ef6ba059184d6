import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_dataset
from nirs_speech.classifier import (
    DEFAULT_LOADING,
    ClassifierError,
    NumericalError,
    blend_covariance,
    class_statistics,
    decision_scores,
    load_model,
    predict,
    predict_many,
    save_model,
    train_rlda,
)
from nirs_speech.epoching import LABELS, LabeledDataset


def pooled_lda_oracle(X, y, Xtest, loading):
    """Textbook LDA with linear discriminants, written without the package internals."""
    classes = [c for c in LABELS if c in set(y)]
    y = np.asarray(y)
    N, d = X.shape
    mus = {c: X[y == c].mean(axis=0) for c in classes}
    S = sum((X[y == c] - mus[c]).T @ (X[y == c] - mus[c]) for c in classes) / (N - len(classes))
    S = S + loading * np.trace(S) / d * np.eye(d)
    P = np.linalg.inv(S)
    W = np.array([P @ mus[c] for c in classes])
    b = np.array([-0.5 * mus[c] @ P @ mus[c] for c in classes])
    return [classes[k] for k in np.argmax(Xtest @ W.T + b, axis=1)]


class TestClassStatistics:
    def test_identical_points_zero_pooled(self):
        d = LabeledDataset(np.array([[1.0, 2], [1, 2], [5, 5], [5, 5]]), ("yes", "yes", "no", "no"))
        assert np.all(class_statistics(d).pooled == 0)

    def test_1d_example(self):
        d = LabeledDataset(np.array([[0.0], [2.0], [1.0], [3.0]]), ("yes", "yes", "no", "no"))
        assert class_statistics(d).pooled[0, 0] == pytest.approx(2.0, rel=1e-15)

    def test_recombination_identity(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            data = random_dataset(rng, 5, [rng.integers(2, 15) for _ in range(3)])
            st_ = class_statistics(data)
            recomb = sum((n - 1) * c for n, c in zip(st_.counts, st_.class_covs)) / (st_.N - st_.K)
            np.testing.assert_allclose(recomb, st_.pooled, atol=1e-10)
            for c in st_.class_covs + (st_.pooled,):
                assert np.array_equal(c, c.T)
            assert np.linalg.eigvalsh(st_.pooled).min() > -1e-12

    def test_n_equals_k(self):
        with pytest.raises(ClassifierError):
            class_statistics(LabeledDataset(np.eye(3), LABELS))

    def test_single_example_class_needs_gamma_zero(self):
        d = LabeledDataset(np.array([[0.0], [1.0], [5.0], [6.0], [9.0]]), ("yes", "yes", "no", "no", "rest"))
        train_rlda(d, 0.0)
        with pytest.raises(ClassifierError, match="at least 2"):
            train_rlda(d, 0.5)

    def test_duplication_changes_only_divisors(self):
        rng = np.random.default_rng(1)
        data = random_dataset(rng, 4, [6, 7, 8])
        dup = LabeledDataset(np.vstack([data.X, data.X]), data.y + data.y)
        a, b = class_statistics(data), class_statistics(dup)
        np.testing.assert_allclose(b.means, a.means, atol=1e-14)
        for n, ca, cb in zip(a.counts, a.class_covs, b.class_covs):
            np.testing.assert_allclose(cb * (2 * n - 1), 2 * ca * (n - 1), rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(b.pooled * (2 * a.N - a.K), 2 * a.pooled * (a.N - a.K), rtol=1e-12, atol=1e-14)


class TestBlend:
    def _stats(self):
        return class_statistics(random_dataset(np.random.default_rng(2), 3, [5, 5, 5]))

    def test_endpoints(self):
        s = self._stats()
        np.testing.assert_array_equal(blend_covariance(s, "no", 0.0), s.pooled)
        np.testing.assert_allclose(blend_covariance(s, "no", 1.0), s.class_covs[1], atol=1e-15)

    def test_midpoint(self):
        d = LabeledDataset(np.array([[0.0], [2], [10], [10 + 2 * np.sqrt(3)]]), ("yes", "yes", "no", "no"))
        s = class_statistics(d)
        # pooled 4, class yes 2 -> midpoint 3
        assert s.pooled[0, 0] == pytest.approx(4.0)
        assert blend_covariance(s, "yes", 0.5)[0, 0] == pytest.approx(3.0)

    @pytest.mark.parametrize("g", [-0.01, 1.01, float("nan")])
    def test_out_of_range(self, g):
        with pytest.raises(ClassifierError):
            blend_covariance(self._stats(), 0, g)


class TestTrain:
    def test_1d_inverse(self):
        d = LabeledDataset(np.array([[0.0], [2.0], [1.0], [3.0]]), ("yes", "yes", "no", "no"))
        m = train_rlda(d, 0.0, loading=0.0)
        assert m.inverse(0)[0, 0] == pytest.approx(0.5, rel=1e-14)

    def test_gamma_zero_shares_matrix(self):
        m = train_rlda(random_dataset(np.random.default_rng(3), 4, [6, 6, 6]), 0.0)
        assert all(np.array_equal(m.covariances[0], c) for c in m.covariances)
        assert all(np.array_equal(m.cholesky[0], c) for c in m.cholesky)

    def test_first_training_size(self):
        data = random_dataset(np.random.default_rng(4), 44, [12, 12, 12])
        st_ = class_statistics(data)
        assert np.linalg.matrix_rank(st_.pooled) <= 33
        with pytest.raises(NumericalError, match="yes"):
            train_rlda(data, 0.0, loading=0.0)
        for g in (0.0, 0.3, 1.0):
            m = train_rlda(data, g)
            for k in range(3):
                assert np.linalg.eigvalsh(m.loaded_covariance(k)).min() > 0

    def test_loading_is_relative_to_mean_diagonal(self):
        m = train_rlda(random_dataset(np.random.default_rng(5), 3, [5, 5, 5]), 0.4)
        for k in range(3):
            assert m.loads[k] == pytest.approx(DEFAULT_LOADING * np.trace(m.covariances[k]) / 3, rel=1e-14)

    def test_negative_loading(self):
        with pytest.raises(ClassifierError):
            train_rlda(random_dataset(np.random.default_rng(5), 3, [5, 5, 5]), 0.4, loading=-1.0)


class TestPredict:
    def test_nearest_mean(self):
        X = np.array([[0.0, 0], [0, 1], [1, 0], [1, 1]])
        X = np.vstack([X, X + 10, X - 10])
        data = LabeledDataset(X, ("yes",) * 4 + ("no",) * 4 + ("rest",) * 4)
        m = train_rlda(data, 0.0)
        assert predict(m, m.means[0])[0] == "yes"
        assert predict(m, m.means[2])[0] == "rest"

    def test_tie_break_order(self):
        X = np.array([[-1.0], [1.0], [1.0], [3.0]])
        data = LabeledDataset(X, ("no", "no", "yes", "yes"))
        m = train_rlda(data, 0.0)
        label, scores = predict(m, np.array([1.0]))
        assert scores["yes"] == scores["no"]
        assert label == "yes"

    def test_dimension_mismatch(self):
        m = train_rlda(random_dataset(np.random.default_rng(6), 3, [4, 4, 4]), 0.5)
        with pytest.raises(ClassifierError):
            predict(m, np.zeros(4))

    def test_matches_pooled_lda_oracle(self):
        rng = np.random.default_rng(10)
        for _ in range(200):
            d = int(rng.integers(1, 6))
            K = int(rng.integers(2, 4))
            counts = [int(rng.integers(2, 60 // K + 1)) for _ in range(K)]
            data = random_dataset(rng, d, counts, shift=rng.uniform(0.2, 2), classes=LABELS[:K])
            Xt = rng.standard_normal((40, d)) * 2
            m = train_rlda(data, 0.0)
            assert predict_many(m, Xt) == pooled_lda_oracle(data.X, data.y, Xt, DEFAULT_LOADING)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from([0.0, 0.35, 1.0]))
    def test_translation_equivariance(self, seed, gamma):
        rng = np.random.default_rng(seed)
        data = random_dataset(rng, 3, [6, 6, 6])
        c = rng.normal(0, 5, 3)
        Xt = rng.standard_normal((30, 3))
        a = predict_many(train_rlda(data, gamma), Xt)
        b = predict_many(train_rlda(LabeledDataset(data.X + c, data.y), gamma), Xt + c)
        assert a == b

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from([0.0, 0.5, 1.0]))
    def test_training_order_invariance(self, seed, gamma):
        rng = np.random.default_rng(seed)
        data = random_dataset(rng, 3, [6, 6, 6])
        perm = rng.permutation(data.N)
        shuffled = LabeledDataset(data.X[perm], tuple(data.y[i] for i in perm))
        Xt = rng.standard_normal((30, 3))
        assert predict_many(train_rlda(data, gamma), Xt) == predict_many(train_rlda(shuffled, gamma), Xt)


def test_model_round_trip_bit_equal(tmp_path):
    rng = np.random.default_rng(11)
    m = train_rlda(random_dataset(rng, 44, [12, 12, 12]), 0.35)
    path = save_model(tmp_path / "model.json", m)
    back = load_model(path)
    Xt = rng.standard_normal((50, 44))
    assert np.array_equal(decision_scores(back, Xt), decision_scores(m, Xt))
    assert back.gamma == 0.35 and back.loading == m.loading
