import numpy as np
import pytest
from scipy.special import expit
from sklearn.base import BaseEstimator, ClassifierMixin, clone

from geocausal.propensity import (FoldDegenerateError, FusionPropensityClassifier,
                                  UnsupportedSpecificationError, balanced_batches,
                                  cross_fit_propensity, grouped_folds, salience_gradients)
from geocausal.vit import FusionViT, ModelConfig
from _oracles import brute_auc

TAB = dict(image_bands=0, image_side=0, embed_dim=16, num_layers=1, num_heads=2,
           dropout_rate=0.0, drop_path_rate=0.0, epochs=20, batch_size=32,
           learning_rate=0.02, momentum=0.9)


class SpyClassifier(ClassifierMixin, BaseEstimator):
    """Records which groups (first column of X) it was trained on; predicts the training mean."""

    def __init__(self, random_state=0):
        self.random_state = random_state

    def fit(self, X, y):
        self.seen_groups_ = set(np.asarray(X)[:, 0].astype(int).tolist())
        self.rate_ = float(np.mean(y))
        self.classes_ = np.array([0, 1])
        return self

    def predict_proba(self, X):
        p = np.full(len(X), self.rate_)
        return np.column_stack([1 - p, p])


def test_balanced_batches_are_balanced():
    y = np.array([1] * 7 + [0] * 93)
    for idx in balanced_batches(y, 32, 20, np.random.default_rng(0)):
        assert len(idx) == 32
        assert y[idx].sum() == 16


def test_balanced_batches_single_class_falls_back():
    y = np.zeros(10, int)
    idx = next(balanced_batches(y, 4, 1, np.random.default_rng(0)))
    assert len(idx) == 4


def test_grouped_folds_partition_50_adm2_into_10():
    groups = np.repeat([f"A{i:02d}" for i in range(50)], np.random.default_rng(1).integers(1, 9, 50))
    fold = grouped_folds(groups, 10, seed=3)
    assert set(fold) == set(range(10))
    for g in np.unique(groups):
        assert len(set(fold[groups == g])) == 1  # each ADM2 in exactly one validation fold
    sizes = np.bincount(fold)
    assert sizes.max() - sizes.min() <= 8


def test_grouped_folds_need_enough_groups():
    with pytest.raises(ValueError):
        grouped_folds(["a", "b", "c"], 10)


def test_cross_fit_is_out_of_fold():
    rng = np.random.default_rng(0)
    groups = rng.integers(0, 30, 400)
    X = np.column_stack([groups, rng.normal(size=400)])
    y = rng.integers(0, 2, 400)
    res = cross_fit_propensity(SpyClassifier(), X, y, groups, n_folds=5, seed=11)
    assert not np.isnan(res.p_hat).any()
    for k, model in enumerate(res.models):
        held_out = set(groups[res.fold == k].tolist())
        assert not (held_out & model.seen_groups_)
        assert model.random_state == 11 + k
        np.testing.assert_allclose(res.p_hat[res.fold == k], y[res.fold != k].mean())


def test_cross_fit_clips():
    groups = np.repeat(np.arange(4), 25)
    y = np.ones(100, int)
    y[[0, 25]] = 0  # one control in group 0, one in group 1
    res = cross_fit_propensity(SpyClassifier(), np.column_stack([groups, groups]), y, groups,
                               n_folds=2, clip=(0.01, 0.9), fold=groups % 2)
    assert res.p_hat.max() <= 0.9 and res.raw_p_hat.max() > 0.9


def test_cross_fit_single_class_fold_raises():
    groups = np.repeat(np.arange(4), 5)
    y = np.zeros(20, int)
    y[groups == 0] = 1
    fold = (groups == 0).astype(int)  # fold 0 trains only on the treated rows of fold 1
    with pytest.raises(FoldDegenerateError, match="fold 0"):
        cross_fit_propensity(SpyClassifier(), np.column_stack([groups, groups]), y, groups,
                             n_folds=2, fold=fold)


def test_classifier_follows_sklearn_conventions():
    est = FusionPropensityClassifier(**TAB)
    params = est.get_params()
    assert params["epochs"] == 20 and params["image_bands"] == 0
    twin = clone(est).set_params(epochs=3)
    assert twin.epochs == 3 and est.epochs == 20


def test_classifier_separable_training_auc():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(200, 3))
    y = (X[:, 0] + 0.5 * X[:, 1] > 0).astype(int)
    est = FusionPropensityClassifier(**TAB).fit(X, y)
    p = est.predict_proba(X)[:, 1]
    assert brute_auc(p, y) > 0.95
    assert est.predict(X).shape == (200,)


def test_out_of_fold_auc_near_bayes_auc():
    rng = np.random.default_rng(8)
    n = 1200
    X = rng.normal(size=(n, 3))
    p_true = expit(-0.8 + 1.2 * X[:, 0] - 0.8 * X[:, 1])
    y = (rng.random(n) < p_true).astype(int)
    groups = rng.integers(0, 40, n)
    res = cross_fit_propensity(FusionPropensityClassifier(**TAB), X, y, groups, n_folds=5, seed=1)
    assert abs(brute_auc(res.p_hat, y) - brute_auc(p_true, y)) < 0.05


def test_prior_correction_offset():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(100, 2))
    y = (rng.random(100) < 0.2).astype(int)
    est = FusionPropensityClassifier(**{**TAB, "epochs": 1}).fit(X, y)
    assert est.logit_offset_ == pytest.approx(np.log(y.mean() / (1 - y.mean())))
    plain = FusionPropensityClassifier(**{**TAB, "epochs": 1, "prior_correction": False}).fit(X, y)
    assert plain.logit_offset_ == 0.0


def test_divergent_training_aborts():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(64, 2)) * 1e3
    y = rng.integers(0, 2, 64)
    with pytest.raises(FloatingPointError):
        FusionPropensityClassifier(**{**TAB, "learning_rate": 1e35, "epochs": 3}).fit(X, y)


# --- salience -------------------------------------------------------------------

def linear_model(width):
    cfg = ModelConfig(image_bands=0, image_side=0, tabular_width=width, embed_dim=4, num_heads=1,
                      num_layers=0, pool="mean", final_norm=False, head_init="normal")
    return FusionViT(cfg, seed=0)


def test_salience_of_sigma_2x_at_zero_is_one_half():
    m = linear_model(1)
    for name in ("cls_token", "pos_embed", "tab_b", "head_b"):
        m.params[name].values[:] = 0
    m.params["tab_w"].values[:] = [[4.0, 0, 0, 0]]  # mean pooling over two tokens halves it
    m.params["head_w"].values[:] = [[1.0], [0], [0], [0]]
    s = salience_gradients(m, None, np.zeros((1, 1)))
    np.testing.assert_allclose(s, [0.5], atol=1e-6)


def test_salience_positive_for_positive_weight():
    m = linear_model(1)
    m.params["tab_w"].values[:] = np.abs(m.params["tab_w"].values)
    m.params["head_w"].values[:] = np.abs(m.params["head_w"].values)
    assert salience_gradients(m, None, np.random.default_rng(0).normal(size=(20, 1)))[0] > 0


def test_salience_matches_logistic_derivative_for_depth_zero():
    m = linear_model(3)
    x = np.random.default_rng(1).normal(size=(50, 3)).astype(np.float32)
    P = {k: v.values.astype(np.float64) for k, v in m.params.items()}
    pooled = ((P["cls_token"][0, 0] + P["pos_embed"][0, 0])[None]
              + x @ P["tab_w"] + P["tab_b"] + P["pos_embed"][0, 1]) / 2
    z = pooled @ P["head_w"][:, 0] + P["head_b"][0]
    slope = P["tab_w"] @ P["head_w"][:, 0] / 2
    s_ref = np.mean(expit(z) * (1 - expit(z))) * slope
    np.testing.assert_allclose(salience_gradients(m, None, x), s_ref, atol=1e-4)


def test_zeroed_tabular_projection_gives_zero_salience():
    m = linear_model(3)
    m.params["tab_w"].values[:] = 0
    np.testing.assert_array_equal(salience_gradients(m, None, np.ones((4, 3))), np.zeros(3))


def test_salience_requires_tabular_inputs():
    img = FusionViT(ModelConfig(image_bands=1, image_side=8, patch_size=4, embed_dim=4,
                                num_heads=1, num_layers=0), 0)
    with pytest.raises(UnsupportedSpecificationError):
        salience_gradients(img, np.zeros((1, 4, 16), np.float32), None)


def test_classifier_salience_reports_dropped_columns_as_zero():
    rng = np.random.default_rng(4)
    X = np.column_stack([rng.normal(size=80), np.ones(80), rng.normal(size=80)])
    y = (X[:, 0] > 0).astype(int)
    est = FusionPropensityClassifier(**{**TAB, "epochs": 5}).fit(X, y)
    s = est.salience(X)
    assert s.shape == (3,) and s[1] == 0.0 and s[0] > 0


def test_image_only_classifier_salience_unsupported():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(20, 1 * 8 * 8))
    y = np.array([0, 1] * 10)
    est = FusionPropensityClassifier(image_bands=1, image_side=8, patch_size=4, embed_dim=4,
                                     num_heads=1, num_layers=1, epochs=1).fit(X, y)
    with pytest.raises(UnsupportedSpecificationError):
        est.salience(X)
