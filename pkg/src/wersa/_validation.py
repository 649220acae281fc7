"""Input checks shared by the estimator wrappers."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array


def check_sequence_batch(X, d_model: int | None = None, name: str = "X") -> np.ndarray:
    """Validate a ``[batch, seq, features]`` float array; 2-D input is treated as one sequence."""
    X = check_array(X, dtype=np.float64, allow_nd=True, ensure_2d=True, input_name=name)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ValueError(f"{name} must have shape [batch, seq, features], got {X.shape}")
    if d_model is not None and X.shape[-1] != d_model:
        raise ValueError(f"{name} has {X.shape[-1]} features, estimator was fitted with {d_model}")
    return X


def check_token_batch(X, vocab_size: int | None = None, name: str = "X") -> np.ndarray:
    """Validate a ``[batch, seq]`` array of non-negative integer token ids."""
    X = check_array(X, dtype=None, ensure_2d=True, input_name=name)
    if not np.issubdtype(X.dtype, np.integer):
        if not np.all(np.equal(np.mod(X, 1), 0)):
            raise ValueError(f"{name} must contain integer token ids")
        X = X.astype(np.int64)
    if X.min() < 0:
        raise ValueError(f"{name} contains negative token ids")
    if vocab_size is not None and X.max() >= vocab_size:
        raise ValueError(f"{name} contains token id {X.max()} >= vocab_size {vocab_size}")
    return X
