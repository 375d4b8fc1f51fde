import math

import numpy as np
import pytest

from retifuse.errors import ConfigError, InsufficientDataError, NumericalError
from retifuse.tsne import (
    TsneConfig,
    conditional_probabilities,
    joint_probabilities,
    kl_divergence,
    silhouette,
    squared_distances,
    tsne_embed,
)


def _two_clusters(n=50, d=64, sep=20.0, seed=0):
    rng = np.random.default_rng(seed)
    shift = np.zeros(d)
    shift[0] = sep
    x = np.vstack([rng.standard_normal((n, d)), rng.standard_normal((n, d)) + shift])
    return x, np.repeat([0, 1], n)


@pytest.fixture(scope="module")
def clusters_run():
    x, labels = _two_clusters()
    return x, labels, tsne_embed(x, TsneConfig(seed=3))


def test_output_shape_and_centering(clusters_run):
    _, _, res = clusters_run
    assert res.embedding.shape == (100, 2)
    np.testing.assert_allclose(res.embedding.mean(axis=0), 0.0, atol=1e-10)
    assert len(res.kl_history) == 1000


def test_two_clusters_separate(clusters_run):
    _, labels, res = clusters_run
    assert silhouette(res.embedding, labels) > 0.5


def test_kl_non_increasing_after_exaggeration(clusters_run):
    kl = clusters_run[2].kl_history
    assert all(b <= a + 1e-3 for a, b in zip(kl[250:], kl[251:]))
    assert kl[-1] < kl[250]


def test_seed_determinism():
    x, _ = _two_clusters(n=15, d=8)
    cfg = TsneConfig(perplexity=5, iterations=300, seed=7)
    a = tsne_embed(x, cfg).embedding
    assert a.tobytes() == tsne_embed(x, cfg).embedding.tobytes()
    assert a.tobytes() != tsne_embed(x, TsneConfig(perplexity=5, iterations=300, seed=8)).embedding.tobytes()


def test_perplexity_calibration():
    x = np.random.default_rng(1).standard_normal((60, 10))
    for perp in (5.0, 15.0, 30.0):
        cond, worst = conditional_probabilities(squared_distances(x), perp)
        assert worst < 1e-5
        for row in cond:
            p = row[row > 0]
            assert abs(-(p * np.log2(p)).sum() - math.log2(perp)) < 1e-5


def test_joint_probabilities_properties():
    x = np.random.default_rng(2).standard_normal((40, 6))
    P, _ = joint_probabilities(x, 10.0)
    assert P.sum() == pytest.approx(1.0, abs=1e-12)
    assert not np.diag(P).any()
    np.testing.assert_array_equal(P, P.T)


def test_bisection_cap_warns():
    x = np.random.default_rng(3).standard_normal((20, 4))
    with pytest.warns(UserWarning):
        conditional_probabilities(squared_distances(x), 8.0, max_steps=2)


def test_kl_zero_for_identical():
    P = np.full((4, 4), 1 / 12)
    np.fill_diagonal(P, 0.0)
    assert kl_divergence(P, P) == 0.0


def test_errors():
    x = np.random.default_rng(4).standard_normal((10, 3))
    with pytest.raises(ConfigError):
        tsne_embed(x, TsneConfig(perplexity=10))
    with pytest.raises(ConfigError):
        tsne_embed(x, TsneConfig(perplexity=3, iterations=0))
    with pytest.raises(InsufficientDataError):
        tsne_embed(x[:4], TsneConfig(perplexity=2))
    x[0, 0] = np.nan
    with pytest.raises(NumericalError):
        tsne_embed(x, TsneConfig(perplexity=3))


def test_silhouette_hand_value():
    pts = np.array([[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]])
    # a = 1, b = mean(10, sqrt(101)) for every point
    b = (10 + math.sqrt(101)) / 2
    assert silhouette(pts, [0, 0, 1, 1]) == pytest.approx((b - 1) / b)
