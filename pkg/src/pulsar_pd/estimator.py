"""scikit-learn style wrappers around the stream models.

``PulsarClassifier`` trains one stream model per requested stream and fuses
their logits. ``StreamTransformer`` maps joint clips to a derived stream so
it can sit in a ``Pipeline``.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .graph import build_hand_graph
from .network import ModelConfig
from .risk import RiskConfig
from .stats import fuse_streams
from .streams import StreamKind, derive_stream
from .training import TrainConfig, train_stream

CLIP_SHAPE = (2, 80, 21)


def check_clips(X, frames=None):
    """Validate an N x 2 x T x 21 float array of finite values."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 4 or X.shape[1] != CLIP_SHAPE[0] or X.shape[3] != CLIP_SHAPE[2]:
        raise ValueError(f"expected clips shaped N x 2 x T x 21, got {X.shape}")
    if frames is not None and X.shape[2] != frames:
        raise ValueError(f"expected {frames} frames per clip, got {X.shape[2]}")
    if len(X) == 0:
        raise ValueError("no clips given")
    if not np.all(np.isfinite(X)):
        raise ValueError("clips contain NaN or infinite values")
    return X


def _check_labels(y, n):
    y = np.asarray(y)
    if y.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    values = set(np.unique(y).tolist())
    if not values <= {0, 1}:
        raise ValueError(f"labels must be 0 (unlabeled/negative) or 1 (positive), got {sorted(values)}")
    return y.astype(int)


class StreamTransformer(TransformerMixin, BaseEstimator):
    """Derive the bone, velocity or acceleration stream from joint clips."""

    def __init__(self, stream="velocity"):
        self.stream = stream

    def fit(self, X, y=None):
        StreamKind(self.stream)
        check_clips(X)
        self.n_features_in_ = int(np.prod(np.asarray(X).shape[1:]))
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        return derive_stream(check_clips(X), self.stream, build_hand_graph())


class PulsarClassifier(ClassifierMixin, BaseEstimator):
    """Graph-convolutional finger-tapping classifier trained from P/U labels.

    ``fit`` takes clips shaped N x 2 x 80 x 21 and labels where 1 marks a
    labeled positive and 0 an unlabeled (PU) or negative (PN) clip. Pass
    ``groups`` to hold out whole participants for validation, or give an
    explicit ``X_val``/``y_val``.
    """

    def __init__(self, adaptive=True, risk_mode="pu_nonneg", theta_p=0.5, base_loss="sigmoid",
                 streams=("joint",), batch_size=64, lr=1e-4, factor=0.5, patience=5,
                 max_epochs=30, channels=(16, 32), temporal_kernel=9, embed_channels=4,
                 dropout=0.5, dtype="float32", val_fraction=0.2, random_state=0):
        self.adaptive = adaptive
        self.risk_mode = risk_mode
        self.theta_p = theta_p
        self.base_loss = base_loss
        self.streams = streams
        self.batch_size = batch_size
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.max_epochs = max_epochs
        self.channels = channels
        self.temporal_kernel = temporal_kernel
        self.embed_channels = embed_channels
        self.dropout = dropout
        self.dtype = dtype
        self.val_fraction = val_fraction
        self.random_state = random_state

    def _configs(self, frames):
        model = ModelConfig(frames=frames, channels=tuple(self.channels),
                            temporal_kernel=self.temporal_kernel, dropout=self.dropout,
                            adaptive=self.adaptive, embed_channels=self.embed_channels,
                            dtype=self.dtype)
        risk = RiskConfig(base_loss=self.base_loss, theta_p=self.theta_p, mode=self.risk_mode)
        train = TrainConfig(batch_size=self.batch_size, lr=self.lr, factor=self.factor,
                            patience=self.patience, max_epochs=self.max_epochs, risk=risk,
                            seed=self.random_state)
        return model, train

    def _holdout(self, n, groups):
        rng = np.random.default_rng(self.random_state)
        if groups is None:
            ids = np.arange(n)
        else:
            ids = np.asarray(groups, dtype=object)
            if len(ids) != n:
                raise ValueError("groups must have one entry per clip")
        uniq = sorted(set(ids.tolist()))
        if len(uniq) < 2:
            raise ValueError("need at least 2 groups to hold out a validation set")
        n_val = min(len(uniq) - 1, max(1, int(round(self.val_fraction * len(uniq)))))
        val_ids = {uniq[i] for i in rng.permutation(len(uniq))[:n_val]}
        mask = np.array([g in val_ids for g in ids.tolist()])
        return ~mask, mask

    def fit(self, X, y, groups=None, X_val=None, y_val=None):
        X = check_clips(X)
        y = _check_labels(y, len(X))
        streams = tuple(StreamKind(s).value for s in self.streams)
        if not streams:
            raise ValueError("at least one stream is required")
        if X_val is None:
            train_mask, val_mask = self._holdout(len(X), groups)
            X, X_val, y, y_val = X[train_mask], X[val_mask], y[train_mask], y[val_mask]
        else:
            X_val = check_clips(X_val, X.shape[2])
            y_val = _check_labels(y_val, len(X_val))
        model_cfg, train_cfg = self._configs(X.shape[2])
        graph = build_hand_graph()
        self.checkpoints_ = {}
        for s in streams:
            cfg = TrainConfig(**{**train_cfg.__dict__, "stream": s})
            self.checkpoints_[s] = train_stream(model_cfg, derive_stream(X, s, graph), y,
                                                derive_stream(X_val, s, graph), y_val, cfg)
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self.frames_ = X.shape[2]
        return self

    def stream_logits(self, X):
        check_is_fitted(self, "checkpoints_")
        X = check_clips(X, self.frames_)
        graph = build_hand_graph()
        return {s: ck.logits(derive_stream(X, s, graph)) for s, ck in self.checkpoints_.items()}

    def decision_function(self, X):
        return fuse_streams(list(self.stream_logits(X).values()))

    def predict(self, X):
        return (self.decision_function(X) >= 0).astype(int)


def variant_classifier(name, **overrides) -> PulsarClassifier:
    """Classifier configured as one of the ablation variants."""
    from .experiment import get_variant

    v = get_variant(name)
    params = {"adaptive": v.adaptive, "risk_mode": "pu_nonneg" if v.pu else "pn",
              "streams": v.streams}
    params.update(overrides)
    return PulsarClassifier(**params)
