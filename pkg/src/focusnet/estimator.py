"""scikit-learn compatible wrappers.

``FocusNetSegmenter`` follows the estimator protocol (``get_params``,
``set_params``, ``fit`` returning self, fitted attributes with a trailing
underscore) so it can be cloned, grid-searched or dropped into a Pipeline
after a ``ChannelStandardizer``.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .autodiff import Tensor, make_rng
from .data import STD_FLOOR, NormalizationStats
from .metrics import binarize, report_from_masks
from .model import ArchConfig, forward
from .training import TrainConfig, iter_batches, train
from .validation import check_fraction, check_images, check_masks


class ChannelStandardizer(TransformerMixin, BaseEstimator):
    """Per-channel (x - mean) / std with statistics pooled over all training pixels."""

    def fit(self, X, y=None):
        X = check_images(X, dtype=np.float64)
        mean = X.mean(axis=(0, 2, 3))
        std = X.std(axis=(0, 2, 3))
        clamped = tuple(int(i) for i in np.flatnonzero(std < STD_FLOOR))
        self.stats_ = NormalizationStats(mean, np.maximum(std, STD_FLOOR), clamped)
        self.n_channels_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "stats_")
        X = check_images(X, channels=self.n_channels_in_, dtype=np.float64)
        s = self.stats_
        return ((X - s.mean[None, :, None, None]) / s.std[None, :, None, None]).astype(np.float32)

    def inverse_transform(self, X):
        check_is_fitted(self, "stats_")
        X = check_images(X, channels=self.n_channels_in_, dtype=np.float64)
        s = self.stats_
        return (X * s.std[None, :, None, None] + s.mean[None, :, None, None]).astype(np.float32)


class FocusNetSegmenter(BaseEstimator):
    """Binary segmentation with the two-branch gated-attention network.

    Parameters
    ----------
    encoder_widths : tuple of int
        Widths of the encoder stages; the decoder mirrors them.
    bottleneck_width : int
    se_ratio : int
        Squeeze-and-excitation reduction ratio.
    dropout_rate : float
    max_epochs, batch_size, learning_rate, smooth :
        Training loop settings (dice loss, Adam, halving on plateau).
    threshold : float
        Probability cut used by ``predict`` and ``score``.
    validation_fraction : float
        Held-out share of ``X`` when ``fit`` gets no explicit validation set.
    standardize : bool
        Fit a ``ChannelStandardizer`` on the training split and apply it.
    random_state : int
    """

    def __init__(self, encoder_widths=(32, 64, 128, 256), bottleneck_width=512, se_ratio=8,
                 dropout_rate=0.2, max_epochs=80, batch_size=8, learning_rate=1e-3, smooth=1.0,
                 threshold=0.5, validation_fraction=0.2, standardize=True, random_state=0):
        self.encoder_widths = encoder_widths
        self.bottleneck_width = bottleneck_width
        self.se_ratio = se_ratio
        self.dropout_rate = dropout_rate
        self.max_epochs = max_epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.smooth = smooth
        self.threshold = threshold
        self.validation_fraction = validation_fraction
        self.standardize = standardize
        self.random_state = random_state

    def _arch(self, channels, size) -> ArchConfig:
        widths = tuple(self.encoder_widths)
        return ArchConfig(
            in_channels=channels, encoder_widths=widths, bottleneck_width=self.bottleneck_width,
            decoder_widths=tuple(reversed(widths)), se_ratio=self.se_ratio,
            dropout_rate=self.dropout_rate, input_size=size,
        ).validate()

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_images(X)
        y = check_masks(y, X)
        if X.shape[2] != X.shape[3]:
            raise ValueError(f"images must be square, got {X.shape[2]}x{X.shape[3]}")
        check_fraction(self.threshold, "threshold")
        if X_val is None:
            check_fraction(self.validation_fraction, "validation_fraction")
            if len(X) < 2:
                raise ValueError("need at least 2 images to hold out a validation split")
            order = make_rng(self.random_state).permutation(len(X))
            n_val = min(max(int(round(len(X) * self.validation_fraction)), 1), len(X) - 1)
            val_idx, tr_idx = np.sort(order[:n_val]), np.sort(order[n_val:])
            X_tr, y_tr, X_va, y_va = X[tr_idx], y[tr_idx], X[val_idx], y[val_idx]
        else:
            X_tr, y_tr = X, y
            X_va = check_images(X_val, channels=X.shape[1], size=X.shape[2])
            y_va = check_masks(y_val, X_va)

        if self.standardize:
            self.standardizer_ = ChannelStandardizer().fit(X_tr)
            X_tr, X_va = self.standardizer_.transform(X_tr), self.standardizer_.transform(X_va)
        else:
            self.standardizer_ = None

        self.arch_ = self._arch(X.shape[1], X.shape[2])
        cfg = TrainConfig(max_epochs=self.max_epochs, batch_size=self.batch_size, seed=self.random_state,
                          smooth=self.smooth, lr=self.learning_rate)
        self.history_, best = train(cfg, self.arch_, (X_tr, y_tr), (X_va, y_va))
        self.params_ = best.params
        self.best_val_loss_ = best.best_val_loss
        self.best_epoch_ = best.epoch
        self.n_channels_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        """Foreground probability maps, N x 1 x H x W."""
        check_is_fitted(self, "params_")
        X = check_images(X, channels=self.n_channels_in_, size=self.arch_.input_size)
        if self.standardizer_ is not None:
            X = self.standardizer_.transform(X)
        out = []
        for batch in iter_batches(len(X), self.batch_size):
            prob, _ = forward(self.params_, Tensor(X[batch], dtype=self.params_.dtype), "eval")
            out.append(prob.data)
        return np.concatenate(out)

    def predict(self, X):
        """Binary masks (uint8) at ``threshold``."""
        return binarize(self.predict_proba(X), self.threshold)

    def evaluate(self, X, y):
        """Full metrics report (micro SE/SP/AC/JI/DI with per-image entries)."""
        pred = self.predict(X)
        y = check_masks(y, pred)
        return report_from_masks(list(pred), list(y.astype(np.uint8)))

    def score(self, X, y):
        """Pooled dice coefficient of the binarised prediction."""
        return self.evaluate(X, y).DI
