"""Propensity estimation: scikit-learn classifier around :class:`FusionViT`,
ADM2-grouped cross-fitting, and input-gradient salience."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, clone
from sklearn.utils.validation import check_is_fitted

from . import tensor as T
from .covariates import FoldStandardScaler
from .validation import check_binary, check_matrix
from .vit import FusionViT, ModelConfig, patchify

log = logging.getLogger(__name__)


class FoldDegenerateError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    pass


class UnsupportedSpecificationError(ValueError):
    pass


def balanced_batches(y: np.ndarray, batch_size: int, n_batches: int, rng: np.random.Generator):
    """Yield index arrays with equal treated/control counts (resampled with replacement).

    Falls back to uniform sampling when only one class is present.
    """
    pos = np.flatnonzero(y == 1)
    neg = np.flatnonzero(y == 0)
    for _ in range(n_batches):
        if len(pos) and len(neg):
            half = batch_size // 2
            idx = np.concatenate([rng.choice(pos, half), rng.choice(neg, batch_size - half)])
        else:
            idx = rng.choice(len(y), batch_size)
        yield rng.permutation(idx)


class FusionPropensityClassifier(ClassifierMixin, BaseEstimator):
    """Treatment-probability classifier over fused image and tabular inputs.

    ``X`` rows are ``[pixels | tabular]``: the first
    ``image_bands * image_side**2`` columns hold one tile flattened band-major
    (NaN marks masked pixels), the remaining columns are tabular covariates.
    Set ``image_bands=0`` for a tabular-only model; pass no tabular columns for
    an image-only model.

    With ``balanced=True`` each minibatch holds equal treated and control
    counts; ``prior_correction`` then adds the training log-odds of treatment
    to the logit so probabilities refer to the observed treated share.

    Pixels are standardized per band and tabular columns per column using
    statistics of the training rows only. Tabular columns that are constant in
    the training rows are dropped (their salience is reported as 0).
    """

    def __init__(self, image_bands=5, image_side=64, patch_size=16, embed_dim=64,
                 num_layers=8, num_heads=4, dropout_rate=0.10, drop_path_rate=0.10,
                 mlp_ratio=2, activation="gelu", pool="cls", final_norm=True,
                 epochs=30, batch_size=64, learning_rate=1e-3, momentum=0.9,
                 weight_decay=0.0, balanced=True, prior_correction=True, random_state=0):
        self.image_bands = image_bands
        self.image_side = image_side
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.dropout_rate = dropout_rate
        self.drop_path_rate = drop_path_rate
        self.mlp_ratio = mlp_ratio
        self.activation = activation
        self.pool = pool
        self.final_norm = final_norm
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.balanced = balanced
        self.prior_correction = prior_correction
        self.random_state = random_state

    @property
    def _n_pixel_columns(self) -> int:
        return self.image_bands * self.image_side ** 2 if self.image_bands and self.image_side else 0

    def _split(self, X):
        X = check_matrix(X, allow_nan=True)
        k = self._n_pixel_columns
        if X.shape[1] < k:
            raise ValueError(f"X has {X.shape[1]} columns, fewer than the {k} pixel columns")
        pixels = X[:, :k].reshape(len(X), self.image_bands, self.image_side, self.image_side) if k else None
        tabular = X[:, k:]
        if np.isnan(tabular).any():
            raise ValueError("tabular covariates contain NaN")
        return pixels, tabular

    def _prepare(self, pixels, tabular):
        patches = None
        if pixels is not None:
            z = (pixels - self.band_mean_[None, :, None, None]) / self.band_scale_[None, :, None, None]
            z = np.where(np.isnan(z), 0.0, z)
            patches = patchify(z.astype(np.float32), self.patch_size)
        tab = None
        if self.scaler_ is not None:
            tab = self.scaler_.transform(tabular).astype(np.float32)
        return patches, tab

    def fit(self, X, y):
        pixels, tabular = self._split(X)
        y = check_binary(y, n=len(pixels if pixels is not None else tabular))
        self.classes_ = np.array([0, 1])
        if pixels is not None:
            self.band_mean_ = np.nanmean(pixels, axis=(0, 2, 3))
            sd = np.nanstd(pixels, axis=(0, 2, 3))
            self.band_scale_ = np.where(sd > 1e-8, sd, 1.0)
        self.scaler_ = None
        width = 0
        if tabular.shape[1] > 0:
            self.scaler_ = FoldStandardScaler().fit(tabular)
            width = len(self.scaler_.kept_)
            if width == 0:
                self.scaler_ = None
        self.n_tabular_in_ = tabular.shape[1]
        self.config_ = ModelConfig(
            patch_size=self.patch_size, embed_dim=self.embed_dim, num_layers=self.num_layers,
            num_heads=self.num_heads, dropout_rate=self.dropout_rate,
            drop_path_rate=self.drop_path_rate, tabular_width=width,
            image_bands=self.image_bands if pixels is not None else 0,
            image_side=self.image_side if pixels is not None else 0,
            mlp_ratio=self.mlp_ratio, activation=self.activation, pool=self.pool,
            final_norm=self.final_norm)
        self.model_ = FusionViT(self.config_, seed=self.random_state)
        patches, tab = self._prepare(pixels, tabular)
        self.loss_curve_ = self._train(patches, tab, y)
        # balanced batches fit log-odds under a 50/50 prior; shift back to the sample prior
        self.logit_offset_ = 0.0
        if self.balanced and self.prior_correction and 0 < y.mean() < 1:
            self.logit_offset_ = float(np.log(y.mean() / (1 - y.mean())))
        return self

    def _train(self, patches, tab, y):
        rng = np.random.default_rng(self.random_state)
        opt = T.SGD(self.model_.params, self.learning_rate, self.momentum, self.weight_decay)
        n = len(y)
        n_batches = max(1, int(np.ceil(n / self.batch_size)))
        curve = []
        for epoch in range(self.epochs):
            if self.balanced:
                batches = balanced_batches(y, self.batch_size, n_batches, rng)
            else:
                perm = rng.permutation(n)
                batches = (perm[i:i + self.batch_size] for i in range(0, n, self.batch_size))
            total = 0.0
            for idx in batches:
                opt.zero_grad()
                logits = self.model_.logits(
                    None if patches is None else patches[idx],
                    None if tab is None else tab[idx],
                    train_mode=True, rng_seed=int(rng.integers(2 ** 31)))
                loss = T.binary_cross_entropy_with_logits(logits, y[idx])
                if not np.isfinite(loss.item()):
                    raise DivergenceError(f"non-finite loss at epoch {epoch}")
                T.backward(loss)
                opt.step()
                total += loss.item()
            curve.append(total / n_batches)
        return curve

    def decision_function(self, X, batch_size: int = 256):
        check_is_fitted(self, "model_")
        patches, tab = self._prepare(*self._split(X))
        n = len(patches) if patches is not None else len(tab)
        out = np.empty(n)
        for i in range(0, n, batch_size):
            sl = slice(i, i + batch_size)
            out[sl] = self.model_.logits(
                None if patches is None else patches[sl],
                None if tab is None else tab[sl]).values
        return out + self.logit_offset_

    def predict_proba(self, X):
        z = self.decision_function(X)
        p = 1.0 / (1.0 + np.exp(-z))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.decision_function(X) > 0).astype(int)

    def salience(self, X) -> np.ndarray:
        """Mean d p_hat / d x_j over rows, w.r.t. standardized tabular inputs.

        Columns dropped as constant during fit get salience 0.
        """
        check_is_fitted(self, "model_")
        if self.scaler_ is None:
            raise UnsupportedSpecificationError("salience requires a model with tabular inputs")
        patches, tab = self._prepare(*self._split(X))
        grads = salience_gradients(self.model_, patches, tab, logit_offset=self.logit_offset_)
        full = np.zeros(self.n_tabular_in_)
        full[self.scaler_.kept_] = grads
        return full


def salience_gradients(model: FusionViT, patches, tabular, batch_size: int = 256,
                       logit_offset: float = 0.0) -> np.ndarray:
    """Mean over rows of the gradient of the eval-mode probability w.r.t. ``tabular``.

    ``logit_offset`` is added before the sigmoid (the prior correction).
    """
    if model.config.tabular_width <= 0:
        raise UnsupportedSpecificationError("salience requires a model with tabular inputs")
    tabular = np.asarray(tabular, dtype=np.float32)
    n = len(tabular)
    total = np.zeros(tabular.shape[1], dtype=np.float64)
    for i in range(0, n, batch_size):
        sl = slice(i, i + batch_size)
        x = T.Tensor(tabular[sl], requires_grad=True)
        z = model.logits(None if patches is None else patches[sl], x)
        p = T.sigmoid(z + logit_offset) if logit_offset else T.sigmoid(z)
        T.backward(T.tsum(p))
        total += x.grad.sum(axis=0, dtype=np.float64)
    return total / n


# ---------------------------------------------------------------------------
# cross-fitting
# ---------------------------------------------------------------------------

def grouped_folds(groups, n_folds: int = 10, seed: int = 0) -> np.ndarray:
    """Assign each group to one of ``n_folds`` validation folds.

    Groups are shuffled under ``seed`` and then placed greedily on the fold
    with the fewest rows so far, so folds are near-equal in size.
    """
    groups = np.asarray(groups)
    labels, counts = np.unique(groups, return_counts=True)
    if len(labels) < n_folds:
        raise ValueError(f"{len(labels)} groups cannot fill {n_folds} folds")
    order = np.random.default_rng(seed).permutation(len(labels))
    load = np.zeros(n_folds)
    group_fold = {}
    for j in order:
        f = int(np.argmin(load))
        group_fold[labels[j]] = f
        load[f] += counts[j]
    return np.array([group_fold[g] for g in groups])


@dataclass
class CrossFitResult:
    p_hat: np.ndarray
    fold: np.ndarray
    models: list = field(default_factory=list)
    clip: tuple = (0.01, 0.99)
    raw_p_hat: np.ndarray | None = None


def cross_fit_propensity(estimator, X, y, groups, n_folds: int = 10,
                         clip=(0.01, 0.99), seed: int = 0, fold=None) -> CrossFitResult:
    """Out-of-fold propensities: each row scored by the model that never saw its group.

    The model for fold ``k`` is a clone of ``estimator`` with
    ``random_state = seed + k``.
    """
    y = check_binary(y)
    groups = np.asarray(groups)
    fold = grouped_folds(groups, n_folds, seed) if fold is None else np.asarray(fold)
    raw = np.full(len(y), np.nan)
    models = []
    for k in range(n_folds):
        val = fold == k
        train = ~val
        if len(np.unique(y[train])) < 2:
            raise FoldDegenerateError(f"fold {k}: training rows contain a single class")
        model = clone(estimator)
        if "random_state" in model.get_params():
            model.set_params(random_state=seed + k)
        model.fit(X[train], y[train])
        raw[val] = model.predict_proba(X[val])[:, 1]
        models.append(model)
        log.debug("fold %d: %d train rows, %d held out", k, train.sum(), val.sum())
    return CrossFitResult(np.clip(raw, *clip), fold, models, tuple(clip), raw)
