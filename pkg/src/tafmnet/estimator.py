"""scikit-learn style wrapper around model construction, training and thresholding."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import tensorcore as tc
from .data import Sample
from .losses import LossSchedule
from .metrics import confusion, metrics, select_threshold_max_f1
from .model import ModelConfig, TAFMNet, binarize
from .training import TrainConfig, predict_probs, train
from .validation import check_images, check_masks


class TAFMSegmenter(BaseEstimator):
    """Binary lesion segmenter.

    ``fit`` takes ``n x s x s x 3`` images in [0, 1] and ``n x s x s`` binary
    masks. When no validation split is passed, ``validation_fraction`` of the
    training data is held out (seeded) for early stopping.
    """

    def __init__(self, stage_widths=(16, 32, 64, 128, 256), connection_mode="residual",
                 dropout_rate=0.5, loss="L4", learning_rate=1e-3, max_epochs=40, batch_size=8,
                 threshold_policy="fixed", threshold=0.5, validation_fraction=0.2,
                 precision="float64", random_state=0):
        self.stage_widths = stage_widths
        self.connection_mode = connection_mode
        self.dropout_rate = dropout_rate
        self.loss = loss
        self.learning_rate = learning_rate
        self.max_epochs = max_epochs
        self.batch_size = batch_size
        self.threshold_policy = threshold_policy
        self.threshold = threshold
        self.validation_fraction = validation_fraction
        self.precision = precision
        self.random_state = random_state

    def _dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_images(X)
        y = check_masks(y, X)
        seed = int(self.random_state or 0)
        if X_val is None:
            n_val = max(1, int(round(self.validation_fraction * len(X))))
            if n_val >= len(X):
                raise ValueError("need at least two images to hold one out for validation")
            perm = np.random.default_rng(seed).permutation(len(X))
            val_idx, tr_idx = perm[:n_val], perm[n_val:]
            X_val, y_val, X, y = X[val_idx], y[val_idx], X[tr_idx], y[tr_idx]
        else:
            X_val = check_images(X_val, X.shape[1])
            y_val = check_masks(y_val, X_val)
        cfg = ModelConfig(input_size=X.shape[1], stage_widths=tuple(self.stage_widths),
                          connection_mode=self.connection_mode, dropout_rate=self.dropout_rate,
                          seed=seed)
        tcfg = TrainConfig(learning_rate=self.learning_rate, max_epochs=self.max_epochs,
                           batch_size=self.batch_size, loss=LossSchedule(kind=self.loss), seed=seed)
        train_set = [Sample(x, m, f"train-{i}") for i, (x, m) in enumerate(zip(X, y))]
        val_set = [Sample(x, m, f"val-{i}") for i, (x, m) in enumerate(zip(X_val, y_val))]
        with tc.use_dtype(self._dtype()):
            self.model_ = TAFMNet(cfg)
            self.report_ = train(self.model_, train_set, val_set, tcfg)
            if self.threshold_policy == "max_f1":
                probs = predict_probs(self.model_, X_val)
                self.threshold_ = select_threshold_max_f1(list(probs), list(y_val))
            else:
                self.threshold_ = float(self.threshold)
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_images(X, self.model_.cfg.input_size)
        with tc.use_dtype(self._dtype()):
            return predict_probs(self.model_, X)

    def predict(self, X) -> np.ndarray:
        return binarize(self.predict_proba(X), self.threshold_)

    def score(self, X, y) -> float:
        """Pooled Jaccard index of the thresholded predictions."""
        X = check_images(X)
        y = check_masks(y, X)
        c = confusion(self.predict(X), y)
        return metrics(c)["J"]
