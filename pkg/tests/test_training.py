import numpy as np
import pytest

from retifuse.dataprep import synth_generate
from retifuse.errors import ConfigError, InsufficientDataError
from retifuse.fusion import TabularNet
from retifuse.training import TrainConfig, fit_classifier, train_fusion_cv, train_tabular


@pytest.fixture(scope="module")
def cohort():
    ds, emb = synth_generate(82, seed=1, holdout_per_class=20)
    tr = np.array([s == "train" for s in ds.split])
    return ds.subset(np.flatnonzero(tr)), emb[tr], ds.subset(np.flatnonzero(~tr)), emb[~tr], ds


@pytest.fixture(scope="module")
def concat_run(cohort):
    train, emb, test, test_emb, _ = cohort
    return train_fusion_cv(train, emb, TrainConfig(strategy="concat", seed=0), test=test, test_images=test_emb)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(strategy="sum")
    assert TrainConfig(strategy="cross_attention").strategy == "xattn"


def test_fold_sizes(concat_run):
    for f in concat_run.folds:
        assert f.train_metrics.n == 328 and f.val_metrics.n == 82
    val_ids = sum((f.val_ids for f in concat_run.folds), [])
    assert sorted(val_ids) == sorted(concat_run.train_ids)


def test_concat_separable_accuracy(concat_run):
    d = concat_run.to_dict()
    assert d["fold_val_mean"]["accuracy"] >= 0.9
    assert concat_run.test_metrics.n == 100
    np.testing.assert_array_equal(concat_run.test_metrics.confusion.sum(axis=1), [20] * 5)


def test_cv_seed_rerun_identical(cohort, concat_run):
    train, emb, test, test_emb, _ = cohort
    again = train_fusion_cv(train, emb, TrainConfig(strategy="concat", seed=0), test=test, test_images=test_emb)
    assert again.to_dict() == concat_run.to_dict()


def test_cv_invariant_to_presentation_order(cohort, concat_run):
    train, emb, test, test_emb, _ = cohort
    perm = np.random.default_rng(9).permutation(len(train))
    shuffled = train_fusion_cv(train.subset(perm), emb[perm], TrainConfig(strategy="concat", seed=0),
                               test=test, test_images=test_emb)
    assert shuffled.to_dict() == concat_run.to_dict()


def test_cv_too_few_samples(cohort):
    train, emb, *_ = cohort
    with pytest.raises(InsufficientDataError):
        train_fusion_cv(train.subset(np.arange(3)), emb[:3], TrainConfig(per_class=None))


def test_tabular_better_than_chance_and_deterministic(cohort):
    ds = cohort[4]
    a = train_tabular(ds)
    b = train_tabular(ds)
    assert a.test_metrics.accuracy > 0.2
    assert a.to_dict() == b.to_dict()
    assert len(a.loss_history) == 20
    assert a.loss_history[-1] < a.loss_history[0]


def test_tabular_constant_features_plateau(cohort):
    ds = cohort[4]
    flat = ds.subset(np.arange(len(ds)))
    flat.X[...] = 1.0
    res = train_tabular(flat)
    assert res.test_metrics.accuracy <= 0.4
    assert abs(res.loss_history[-1] - res.loss_history[-5]) < 0.05


def test_fit_classifier_decreases_loss():
    rng = np.random.default_rng(0)
    y = np.arange(100) % 5
    x = rng.standard_normal((100, 17)) + 2.0 * np.eye(17)[y]
    hist = fit_classifier(TabularNet(seed=0), (x,), y, np.ones(5), 15, 16, 1e-2, np.random.default_rng(1))
    assert hist[-1] < 0.5 * hist[0]
