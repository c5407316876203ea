import numpy as np
import pytest

from aesrank.cluster import ContentModel, content_weights, kmeans_fit, normalize_rows


def blobs(rng, K=3, per=40, d=5, sep=10.0, sd=1.0):
    """Gaussian blobs whose unit-normalized means are 10 sd apart after scaling."""
    centers = np.eye(d)[:K] * sep
    labels = np.repeat(np.arange(K), per)
    X = centers[labels] + rng.normal(0, sd, size=(K * per, d))
    return X, labels


def test_k1_is_normalized_mean():
    X = np.random.default_rng(0).normal(size=(30, 4))
    cm = kmeans_fit(X, K=1)
    np.testing.assert_allclose(cm.centroids[0], normalize_rows(X).mean(axis=0), atol=1e-12)


def test_k_equals_n_zero_inertia():
    X = np.random.default_rng(1).normal(size=(6, 3))
    assert kmeans_fit(X, K=6).inertia_history[-1] == pytest.approx(0.0, abs=1e-12)


def test_separated_blobs_recovered():
    rng = np.random.default_rng(2)
    X, labels = blobs(rng, K=2, sep=100.0, sd=1.0)
    assign = kmeans_fit(X, K=2, seed=0).assign(X)
    # a bijection between found and true clusters
    assert len({(a, b) for a, b in zip(assign, labels)}) == 2


def test_inertia_non_increasing_and_deterministic():
    X = np.random.default_rng(3).normal(size=(300, 6))
    cm = kmeans_fit(X, K=7, seed=4)
    h = cm.inertia_history
    assert all(b <= a + 1e-12 for a, b in zip(h, h[1:]))
    np.testing.assert_array_equal(cm.centroids, kmeans_fit(X, K=7, seed=4).centroids)


def test_empty_cluster_is_reseeded():
    # three identical points and one outlier: k-means++ seeds may collide on the duplicates
    X = np.array([[1.0, 0.0]] * 3 + [[0.0, 1.0]] + [[0.7, 0.7]])
    cm = kmeans_fit(X, K=3, seed=0)
    assert np.isfinite(cm.centroids).all()
    assert cm.inertia_history[-1] == pytest.approx(0.0, abs=1e-12)


def test_fit_errors():
    with pytest.raises(ValueError, match="at least K"):
        kmeans_fit(np.zeros((2, 3)), K=3)


def test_weights_uniform_when_equidistant():
    cm = ContentModel(np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]]))
    w = content_weights(cm, np.array([0.0, 0.0]))
    np.testing.assert_allclose(w, 0.25, atol=1e-15)


def test_weights_sharpen_with_beta():
    C = np.array([[1.0, 0.0], [0.0, 1.0]])
    # normalized x = (1, 0): distances 0 and sqrt(2), gap > 1
    w = content_weights(ContentModel(C, beta=100.0), np.array([3.0, 0.0]))
    assert w[0] > 0.99
    assert content_weights(ContentModel(C[:1]), np.array([0.2, 0.5])).tolist() == [1.0]


def test_weight_properties_and_permutation():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(40, 5))
    cm = kmeans_fit(X, K=4, seed=1)
    W = content_weights(cm, X)
    assert np.all(W > 0) and np.allclose(W.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_array_equal(W.argmax(axis=1), cm.distances(X).argmin(axis=1))
    perm = np.array([2, 0, 3, 1])
    Wp = content_weights(ContentModel(cm.centroids[perm], cm.beta), X)
    np.testing.assert_allclose(Wp, W[:, perm], atol=1e-15)


def test_json_round_trip(tmp_path):
    cm = kmeans_fit(np.random.default_rng(6).normal(size=(20, 3)), K=3)
    cm.save(tmp_path / "cm.json")
    again = ContentModel.load(tmp_path / "cm.json")
    np.testing.assert_array_equal(again.centroids, cm.centroids)
    assert again.beta == cm.beta and again.inertia_history == cm.inertia_history


def test_invalid_content_model():
    with pytest.raises(ValueError):
        ContentModel(np.array([[np.nan, 0.0]]))
    with pytest.raises(ValueError):
        ContentModel(np.zeros((2, 2)), beta=0.0)


def test_restarts_escape_local_optimum():
    # seed 4 with a single k-means++ start merges two blobs
    rng = np.random.default_rng(4)
    centers = np.eye(6)[:4] * (10 / np.sqrt(2))
    labels = np.repeat(np.arange(4), 100)
    X = centers[labels] + rng.normal(size=(400, 6))
    one = kmeans_fit(X, 4, seed=4, normalize=False, n_init=1)
    many = kmeans_fit(X, 4, seed=4, normalize=False)
    assert many.inertia_history[-1] < one.inertia_history[-1]
    assert many.inertia_history[-1] <= kmeans_fit(X, 4, seed=4, normalize=False, n_init=3).inertia_history[-1]
    with pytest.raises(ValueError, match="n_init"):
        kmeans_fit(X, 4, n_init=0)
