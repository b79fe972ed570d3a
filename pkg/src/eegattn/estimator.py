"""scikit-learn wrappers: a BaseNet classifier and two trial-array transformers."""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from eegattn import tensor as T
from eegattn.basenet import BaseNetConfig, build
from eegattn.exceptions import ShapeError
from eegattn.signal import filter_array, znormalize_array
from eegattn.tensor import Tensor
from eegattn.training import TrainConfig, fit_model, predict_logits


def check_trials(X, n_channels: Optional[int] = None, n_samples: Optional[int] = None) -> np.ndarray:
    """Validate a ``[trials, channels, samples]`` array of finite floats."""
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float64)
    if X.ndim != 3:
        raise ShapeError(f"expected [trials, channels, samples], got shape {X.shape}")
    if n_channels is not None and X.shape[1] != n_channels:
        raise ShapeError(f"expected {n_channels} channels, got {X.shape[1]}")
    if n_samples is not None and X.shape[2] != n_samples:
        raise ShapeError(f"expected {n_samples} samples, got {X.shape[2]}")
    return X


def check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n:
        raise ShapeError(f"y must be 1-D with {n} entries, got shape {y.shape}")
    return y


class BaseNetClassifier(ClassifierMixin, BaseEstimator):
    """BaseNet trained with Adam, linear warmup and cosine decay.

    ``attention`` is an attention kind name, a dict of AttentionSpec fields,
    or None. Labels may be any hashable values; they are encoded to
    ``classes_`` order.
    """

    def __init__(self, attention=None, epochs: int = 100, warmup_epochs: int = 20, peak_lr: float = 1e-3,
                 batch_size: int = 64, temporal_filters: int = 40, projected_channels: int = 16,
                 pool1=(75, 15), pool2=(8, 8), dropout: float = 0.5, random_state: int = 0):
        self.attention = attention
        self.epochs = epochs
        self.warmup_epochs = warmup_epochs
        self.peak_lr = peak_lr
        self.batch_size = batch_size
        self.temporal_filters = temporal_filters
        self.projected_channels = projected_channels
        self.pool1 = pool1
        self.pool2 = pool2
        self.dropout = dropout
        self.random_state = random_state

    def fit(self, X, y):
        X = check_trials(X)
        y = check_labels(y, X.shape[0])
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes to fit")
        self.n_channels_, self.n_samples_ = X.shape[1], X.shape[2]
        cfg = BaseNetConfig(
            in_channels=self.n_channels_, n_samples=self.n_samples_, n_classes=len(self.classes_),
            temporal_filters=self.temporal_filters, projected_channels=self.projected_channels,
            pool1=tuple(self.pool1), pool2=tuple(self.pool2), dropout=self.dropout, attention=self.attention,
        )
        cfg.validate()
        seed = int(self.random_state or 0)
        self.model_ = build(cfg, seed=seed)
        tcfg = TrainConfig(epochs=self.epochs, warmup_epochs=self.warmup_epochs, peak_lr=self.peak_lr,
                           batch_size=self.batch_size, seeds=1)
        self.loss_history_ = fit_model(self.model_, X, y_enc, tcfg, seed)
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_trials(X, self.n_channels_, self.n_samples_)
        return predict_logits(self.model_, X)

    def predict_proba(self, X) -> np.ndarray:
        return T.softmax(Tensor(self.decision_function(X).astype(np.float64)), axis=1).data

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]


class BandpassFilter(TransformerMixin, BaseEstimator):
    """Zero-phase Butterworth filter along the sample axis (stateless)."""

    def __init__(self, fs: float = 250.0, low_hz: Optional[float] = 4.0, high_hz: Optional[float] = 40.0,
                 order: int = 4):
        self.fs = fs
        self.low_hz = low_hz
        self.high_hz = high_hz
        self.order = order

    def fit(self, X, y=None):
        self.n_channels_ = check_trials(X).shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_channels_")
        return filter_array(check_trials(X, self.n_channels_), self.fs, self.low_hz, self.high_hz, self.order)


class ChannelStandardizer(TransformerMixin, BaseEstimator):
    """Zero mean and unit variance per channel.

    With ``per_trial=True`` every trial is standardized on its own
    statistics; otherwise per-channel statistics are learned in ``fit``.
    """

    def __init__(self, per_trial: bool = True):
        self.per_trial = per_trial

    def fit(self, X, y=None):
        X = check_trials(X)
        self.n_channels_ = X.shape[1]
        if not self.per_trial:
            self.mean_ = X.mean(axis=(0, 2))
            self.scale_ = np.maximum(X.std(axis=(0, 2)), 1e-8)
        return self

    def transform(self, X):
        check_is_fitted(self, "n_channels_")
        X = check_trials(X, self.n_channels_)
        if self.per_trial:
            return znormalize_array(X)
        return (X - self.mean_[None, :, None]) / self.scale_[None, :, None]
