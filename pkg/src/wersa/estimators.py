"""scikit-learn style wrappers.

``WersaAttention`` is a transformer: ``fit`` draws the layer parameters for
the input width, ``transform`` returns self-attention outputs of the same
shape. ``WersaClassifier`` trains the small encoder on integer token
sequences and exposes ``predict`` / ``predict_proba``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted, check_X_y

from . import autograd as ag
from ._validation import check_sequence_batch, check_token_batch
from .attention import WersaConfig, init_params, wersa_forward
from .model import EncoderConfig, ToyTask, encoder_forward, train
from .wavelet import CoefficientCache


class WersaAttention(TransformerMixin, BaseEstimator):
    def __init__(self, heads=4, levels=2, features=1024, beta_init=1.0, eps=1e-6,
                 norm_mode="denominator", r_init="gaussian", share_random_features=False,
                 no_wavelet=False, no_adaptive_filters=False, no_scale_weights=False,
                 no_random_features=False, use_cache=True, random_state=0):
        self.heads = heads
        self.levels = levels
        self.features = features
        self.beta_init = beta_init
        self.eps = eps
        self.norm_mode = norm_mode
        self.r_init = r_init
        self.share_random_features = share_random_features
        self.no_wavelet = no_wavelet
        self.no_adaptive_filters = no_adaptive_filters
        self.no_scale_weights = no_scale_weights
        self.no_random_features = no_random_features
        self.use_cache = use_cache
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_sequence_batch(X)
        params = self.get_params()
        params.pop("use_cache")
        seed = params.pop("random_state")
        self.config_ = WersaConfig(d_model=X.shape[-1], seed=0 if seed is None else int(seed), **params)
        self.params_ = init_params(self.config_)
        self.cache_ = CoefficientCache() if self.use_cache else None
        self.n_features_in_ = X.shape[-1]
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        X = check_sequence_batch(X, self.n_features_in_)
        return wersa_forward(X, X, X, self.config_, self.params_, training=False, cache=self.cache_)


class WersaClassifier(ClassifierMixin, BaseEstimator):
    """Encoder classifier over token sequences; labels may be any hashable values."""

    def __init__(self, backend="wersa", layers=1, d_model=32, heads=4, ffn_dim=64, vocab_size=16,
                 levels=2, features=64, norm_mode="denominator", learning_rate=1e-3, batch_size=32,
                 epochs=20, validation_fraction=0.2, random_state=0):
        self.backend = backend
        self.layers = layers
        self.d_model = d_model
        self.heads = heads
        self.ffn_dim = ffn_dim
        self.vocab_size = vocab_size
        self.levels = levels
        self.features = features
        self.norm_mode = norm_mode
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=None)
        X = check_token_batch(X, self.vocab_size)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        n_val = int(round(len(y_idx) * self.validation_fraction))
        self.config_ = EncoderConfig(
            layers=self.layers, d_model=self.d_model, heads=self.heads, ffn_dim=self.ffn_dim,
            vocab_size=self.vocab_size, max_len=X.shape[1], num_classes=len(self.classes_),
            backend=self.backend, levels=self.levels, features=self.features, norm_mode=self.norm_mode,
            learning_rate=self.learning_rate, batch_size=self.batch_size, epochs=self.epochs,
            seed=0 if self.random_state is None else int(self.random_state),
        )
        # fall back to training-set metrics when no validation split is requested
        X_val, y_val = (X[:n_val], y_idx[:n_val]) if n_val else (X, y_idx)
        task = ToyTask(X[n_val:], y_idx[n_val:], X_val, y_val, marker=-1, num_classes=len(self.classes_))
        result = train(self.config_, task)
        self.params_ = result.params
        self.history_ = result.log
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "params_")
        X = check_token_batch(X, self.vocab_size)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected sequences of length {self.n_features_in_}, got {X.shape[1]}")
        return encoder_forward(X, self.config_, self.params_)

    def predict_proba(self, X):
        return ag.softmax(self.decision_function(X))

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]
