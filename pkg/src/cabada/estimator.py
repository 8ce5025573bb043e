"""Scikit-learn style wrapper around the mixer and its training loop.

MixerClassifier exposes fit/predict/predict_proba over windowed arrays of
shape (n, timesteps, features). Domain keys are optional fit metadata;
without them the model trains plain supervised, with them the full
class-aware block-aware objective is available.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array, check_is_fitted

from .data import DatasetIndex, DomainKey, WindowSample
from .discrepancy import KernelConfig
from .errors import ConfigError, DataError
from .mixer import MixerConfig, forward
from .splits import holdout_by_group
from .trainer import TrainConfig, carve_validation, train_fold


class MixerClassifier(ClassifierMixin, BaseEstimator):
    """Workload classifier over block-designed physiological windows.

    Parameters mirror the model and trainer knobs; geometry (timesteps,
    feature count, class count) is inferred from the data at fit time.
    """

    def __init__(self, groups: int = 1, width: int = 8, depth: int = 2,
                 temporal_hidden: int = 16, channel_hidden: int = 16,
                 alpha: float = 1.0, learning_rate: float = 1e-3,
                 dropout: float = 0.0, batch_size: int = 32,
                 patience: int = 50, max_epochs: int = 1000,
                 da_mode: str = "none", val_fraction: float = 0.1,
                 random_state: int = 0):
        self.groups = groups
        self.width = width
        self.depth = depth
        self.temporal_hidden = temporal_hidden
        self.channel_hidden = channel_hidden
        self.alpha = alpha
        self.learning_rate = learning_rate
        self.dropout = dropout
        self.batch_size = batch_size
        self.patience = patience
        self.max_epochs = max_epochs
        self.da_mode = da_mode
        self.val_fraction = val_fraction
        self.random_state = random_state

    def _check_windows(self, X) -> np.ndarray:
        X = check_array(X, allow_nd=True, dtype=np.float64)
        if X.ndim != 3:
            raise DataError(f"X must have shape (n, timesteps, features), "
                            f"got {X.shape}")
        if X.shape[2] % self.groups != 0:
            raise DataError(f"feature count {X.shape[2]} is not divisible by "
                            f"groups={self.groups}")
        return X

    def _build_index(self, X, y_enc, keys) -> DatasetIndex:
        n = X.shape[0]
        if keys is None:
            key_rows = [DomainKey(0, 0, 0, i) for i in range(n)]
        else:
            keys = np.asarray(keys, dtype=np.int64)
            if keys.shape != (n, 4):
                raise DataError(f"keys must have shape ({n}, 4), got {keys.shape}")
            key_rows = [DomainKey(*[int(v) for v in row]) for row in keys]
        samples = [WindowSample(values=X[i], label=int(y_enc[i]),
                                key=key_rows[i], spatial_groups=self.groups)
                   for i in range(n)]
        return DatasetIndex(samples=samples,
                            shape=(X.shape[1], X.shape[2], self.groups),
                            class_count=len(self.classes_),
                            sample_rate_hz=1.0)

    def fit(self, X, y, keys=None):
        """Train on windows X (n, T, D) with labels y.

        ``keys`` is an optional (n, 4) integer array of
        (subject, session, block, trial) identifiers; it is required for
        any da_mode other than "none".
        """
        X = self._check_windows(X)
        y = np.asarray(y)
        if y.shape != (X.shape[0],):
            raise DataError(f"y must have shape ({X.shape[0]},), got {y.shape}")
        self.classes_ = np.unique(y)
        if len(self.classes_) < 2:
            raise DataError("need at least 2 classes to fit a classifier")
        if self.da_mode != "none" and keys is None:
            raise ConfigError(f"da_mode={self.da_mode!r} needs domain keys")
        y_enc = np.searchsorted(self.classes_, y)
        index = self._build_index(X, y_enc, keys)
        tcfg = TrainConfig(alpha=self.alpha, learning_rate=self.learning_rate,
                           dropout=self.dropout, batch_size=self.batch_size,
                           patience=self.patience, max_epochs=self.max_epochs,
                           da_mode=self.da_mode, seed=self.random_state)
        tcfg.validate()
        mcfg = MixerConfig(timesteps=X.shape[1], groups=self.groups,
                           group_features=X.shape[2] // self.groups,
                           width=self.width, depth=self.depth,
                           temporal_hidden=self.temporal_hidden,
                           channel_hidden=self.channel_hidden,
                           classes=len(self.classes_), dropout=self.dropout)
        try:
            fit_index, val_index = holdout_by_group(index, seed=self.random_state,
                                                    fraction=self.val_fraction)
        except DataError:
            fit_index, val_index = carve_validation(index, seed=self.random_state,
                                                    fraction=self.val_fraction)
        params, history = train_fold(fit_index, val_index, mcfg, tcfg,
                                     KernelConfig())
        self.model_config_ = mcfg
        self.params_ = params
        self.history_ = history
        self.n_features_in_ = X.shape[1] * X.shape[2]
        return self

    def _logits(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = self._check_windows(X)
        cfg = self.model_config_
        if X.shape[1] != cfg.timesteps or X.shape[2] != cfg.token_size:
            raise DataError(
                f"X windows {X.shape[1:]} do not match the fitted geometry "
                f"({cfg.timesteps}, {cfg.token_size})"
            )
        return forward(self.params_, cfg, X, mode="eval").logits

    def predict(self, X):
        """Most likely class per window, in the original label space."""
        logits = self._logits(X)
        return self.classes_[logits.argmax(axis=1)]

    def predict_proba(self, X):
        """Softmax class probabilities, columns ordered like classes_."""
        logits = self._logits(X)
        shifted = logits - logits.max(axis=1, keepdims=True)
        expd = np.exp(shifted)
        return expd / expd.sum(axis=1, keepdims=True)

    def decision_function(self, X):
        """Raw logits, columns ordered like classes_."""
        return self._logits(X)
