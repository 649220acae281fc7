"""Dense float64 array substrate.

Arrays are plain ``numpy.ndarray`` objects of dtype float64 with rank at most 4
(batch, head, sequence, feature). This module adds the few primitives the rest
of the package relies on: checked batched matmul, stable softmax, layer norm,
and an explicit-state random number generator.

Randomness uses numpy's Philox4x64 counter-based generator. An ``RngState``
is the pair ``(seed, counter)``: every sampling call builds a fresh Philox
stream keyed by ``seed`` with the counter placed in the second counter word,
then advances ``counter`` by one. Gaussian variates come from numpy's
ziggurat transform (``Generator.standard_normal``). Given the same
``(seed, counter)`` the produced values are bit-identical across runs and
platforms supported by numpy.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

MAX_RANK = 4

Tensor = np.ndarray


class ShapeError(ValueError):
    """Raised when array shapes do not conform."""


def as_tensor(x, name: str = "x") -> Tensor:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim > MAX_RANK:
        raise ShapeError(f"{name} has rank {arr.ndim}, at most {MAX_RANK} supported")
    if any(s < 1 for s in arr.shape):
        raise ShapeError(f"{name} has an empty extent: shape {arr.shape}")
    return arr


@dataclass
class RngState:
    """Explicit generator state: a 64-bit key and a 64-bit stream counter."""

    seed: int
    counter: int = 0

    def __post_init__(self):
        self.seed = int(self.seed) & 0xFFFFFFFFFFFFFFFF
        self.counter = int(self.counter) & 0xFFFFFFFFFFFFFFFF

    def generator(self) -> np.random.Generator:
        """Return a generator for the current stream and advance the counter."""
        bitgen = np.random.Philox(key=self.seed, counter=[0, self.counter, 0, 0])
        self.counter = (self.counter + 1) & 0xFFFFFFFFFFFFFFFF
        return np.random.Generator(bitgen)

    def copy(self) -> "RngState":
        return RngState(self.seed, self.counter)


def sample_gaussian(rng: RngState, shape: Sequence[int] | int) -> Tensor:
    if isinstance(shape, int):
        shape = (shape,)
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ShapeError(f"invalid shape {shape}")
    return rng.generator().standard_normal(shape)


def sample_orthogonal(rng: RngState, rows: int, cols: int, max_tries: int = 16) -> Tensor:
    """Random matrix whose shorter side is orthonormal.

    For ``rows >= cols`` the columns are orthonormal, otherwise the rows are.
    Uses QR of a Gaussian matrix with the sign of ``diag(R)`` folded in so the
    result is Haar-distributed.
    """
    tall = rows >= cols
    big, small = (rows, cols) if tall else (cols, rows)
    for _ in range(max_tries):
        g = sample_gaussian(rng, (big, small))
        q, r = np.linalg.qr(g)
        diag = np.diag(r)
        # rank-deficient draw: resample with the advanced counter
        if np.min(np.abs(diag)) < 1e-10 * max(1.0, np.max(np.abs(diag))):
            continue
        q = q * np.sign(diag)
        return q if tall else q.T.copy()
    raise np.linalg.LinAlgError("could not draw a full-rank Gaussian sample")


def matmul_batched(a, b) -> Tensor:
    """Batched matrix product over the trailing two axes.

    Leading axes must be equal or have extent 1.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"cannot contract shapes {a.shape} and {b.shape}")
    lead_a, lead_b = a.shape[:-2], b.shape[:-2]
    width = max(len(lead_a), len(lead_b))
    lead_a = (1,) * (width - len(lead_a)) + lead_a
    lead_b = (1,) * (width - len(lead_b)) + lead_b
    for x, y in zip(lead_a, lead_b):
        if x != y and x != 1 and y != 1:
            raise ShapeError(f"leading dims of {a.shape} and {b.shape} do not broadcast")
    return np.matmul(a, b)


def softmax_lastdim(x) -> Tensor:
    x = np.asarray(x, dtype=np.float64)
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def layer_norm_lastdim(x, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    x = np.asarray(x, dtype=np.float64)
    mu = np.mean(x, axis=-1, keepdims=True)
    var = np.var(x, axis=-1, keepdims=True)
    y = (x - mu) / np.sqrt(var + eps)
    if gamma is not None:
        y = y * gamma
    if beta is not None:
        y = y + beta
    return y


def relu(x) -> Tensor:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def sigmoid(x) -> Tensor:
    x = np.asarray(x, dtype=np.float64)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def add(a, b) -> Tensor:
    return np.add(a, b, dtype=np.float64)


def mul(a, b) -> Tensor:
    return np.multiply(a, b, dtype=np.float64)


def mean_over_axis(x, axis: int, keepdims: bool = False) -> Tensor:
    return np.mean(np.asarray(x, dtype=np.float64), axis=axis, keepdims=keepdims)


def transpose_last_two(x) -> Tensor:
    return np.swapaxes(np.asarray(x, dtype=np.float64), -1, -2)


def reshape(x, shape) -> Tensor:
    x = np.asarray(x, dtype=np.float64)
    try:
        return x.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} to {tuple(shape)}") from exc


def concat_last_dim(arrays) -> Tensor:
    return np.concatenate([np.asarray(a, dtype=np.float64) for a in arrays], axis=-1)
