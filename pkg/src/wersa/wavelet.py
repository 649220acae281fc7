"""Multi-level orthonormal Haar transform along the sequence axis.

Inputs have shape ``[..., n, d]``; the transform runs over axis ``-2``. The
sequence is zero padded to a power of two, decomposed ``levels`` times, and
the coefficient blocks are ordered ``[d1, d2, ..., dL, aL]`` (finest detail
first, final approximation last). Filters and scale weights index blocks in
that same order.

Internally a pyramid is also kept in *packed* form: all blocks concatenated
along the sequence axis in block order, which makes the whole transform a
single orthogonal ``padded_len x padded_len`` map. The autograd layer uses
the packed form because the adjoint of the forward transform is then simply
the inverse transform.
"""

from __future__ import annotations

import hashlib
import threading
from collections import Counter, OrderedDict
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .tensor import ShapeError, Tensor

SQRT1_2 = np.sqrt(0.5)

# incremented on every forward / inverse transform; tests use it to observe caching
op_counts: Counter = Counter()


class InvalidLevelError(ValueError):
    pass


class PyramidStructureError(ValueError):
    pass


def next_pow2(n: int) -> int:
    return 1 << max(0, int(n - 1).bit_length())


def padded_length(n: int, levels: int, pad_to_levels: bool = False) -> int:
    p = next_pow2(n)
    if pad_to_levels:
        p = max(p, 1 << levels)
    return p


def block_lengths(padded_len: int, levels: int) -> list[int]:
    """Sequence extents of the blocks ``[d1, ..., dL, aL]``."""
    return [padded_len >> i for i in range(1, levels + 1)] + [padded_len >> levels]


def block_index(padded_len: int, levels: int) -> np.ndarray:
    """Block id of every position of the packed layout."""
    return np.repeat(np.arange(levels + 1), block_lengths(padded_len, levels))


@dataclass
class WaveletPyramid:
    blocks: list
    orig_len: int
    levels: int

    @property
    def padded_len(self) -> int:
        return self.blocks[0].shape[-2] * 2

    def packed(self) -> Tensor:
        return np.concatenate(self.blocks, axis=-2)

    @classmethod
    def from_packed(cls, packed: Tensor, levels: int, orig_len: int) -> "WaveletPyramid":
        lengths = block_lengths(packed.shape[-2], levels)
        cuts = np.cumsum(lengths)[:-1]
        blocks = np.split(packed, cuts, axis=-2)
        return cls(blocks=list(blocks), orig_len=orig_len, levels=levels)

    def validate(self) -> None:
        if len(self.blocks) != self.levels + 1:
            raise PyramidStructureError(
                f"expected {self.levels + 1} blocks for {self.levels} levels, got {len(self.blocks)}"
            )
        p = self.padded_len
        want = block_lengths(p, self.levels)
        got = [b.shape[-2] for b in self.blocks]
        if got != want:
            raise PyramidStructureError(f"block lengths {got} inconsistent with levels; expected {want}")
        trailing = {b.shape[:-2] + b.shape[-1:] for b in self.blocks}
        if len(trailing) != 1:
            raise PyramidStructureError("blocks disagree on non-sequence dims")
        if not 1 <= self.orig_len <= p:
            raise PyramidStructureError(f"orig_len {self.orig_len} outside [1, {p}]")


def dwt_packed(x, levels: int, pad_to_levels: bool = False) -> tuple[Tensor, int]:
    """Forward transform returning ``(packed coefficients, orig_len)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2:
        raise ShapeError(f"dwt needs [..., n, d] input, got shape {x.shape}")
    if levels < 1:
        raise InvalidLevelError(f"levels must be >= 1, got {levels}")
    n = x.shape[-2]
    p = padded_length(n, levels, pad_to_levels)
    if (1 << levels) > p:
        raise InvalidLevelError(f"{levels} levels exceed log2 of padded length {p}")
    op_counts["dwt"] += 1

    approx = np.zeros(x.shape[:-2] + (p,) + x.shape[-1:])
    approx[..., :n, :] = x
    out = np.empty_like(approx)
    start = 0
    for _ in range(levels):
        even = approx[..., 0::2, :]
        odd = approx[..., 1::2, :]
        half = even.shape[-2]
        out[..., start:start + half, :] = (even - odd) * SQRT1_2
        approx = (even + odd) * SQRT1_2
        start += half
    out[..., start:, :] = approx
    return out, n


def idwt_packed(packed, levels: int, orig_len: int) -> Tensor:
    """Inverse of :func:`dwt_packed`, trimmed to ``orig_len``."""
    packed = np.asarray(packed, dtype=np.float64)
    p = packed.shape[-2]
    if p & (p - 1) or (1 << levels) > p:
        raise PyramidStructureError(f"packed length {p} incompatible with {levels} levels")
    op_counts["idwt"] += 1
    lengths = block_lengths(p, levels)
    offsets = np.concatenate([[0], np.cumsum(lengths)])
    approx = packed[..., offsets[levels]:, :]
    for lvl in range(levels - 1, -1, -1):
        detail = packed[..., offsets[lvl]:offsets[lvl + 1], :]
        s = approx.shape[-2]
        nxt = np.empty(approx.shape[:-2] + (2 * s,) + approx.shape[-1:])
        nxt[..., 0::2, :] = (approx + detail) * SQRT1_2
        nxt[..., 1::2, :] = (approx - detail) * SQRT1_2
        approx = nxt
    return approx[..., :orig_len, :]


def dwt(x, levels: int, pad_to_levels: bool = False) -> WaveletPyramid:
    """Decompose ``x`` of shape ``[..., n, d]`` into ``levels`` Haar scales.

    The sequence axis is zero padded to the next power of two (and, with
    ``pad_to_levels``, to at least ``2**levels`` so short inputs still admit
    the requested depth).
    """
    packed, n = dwt_packed(x, levels, pad_to_levels)
    return WaveletPyramid.from_packed(packed, levels, n)


def idwt(pyramid: WaveletPyramid) -> Tensor:
    pyramid.validate()
    return idwt_packed(pyramid.packed(), pyramid.levels, pyramid.orig_len)


def block_gains(filters, scale_weights, padded_len: int, levels: int) -> Tensor:
    """Per-position gains ``filters[b, i] * scale_weights[i]``, shape ``[b, 1, P, 1]``."""
    filters = np.asarray(filters, dtype=np.float64)
    scale_weights = np.asarray(scale_weights, dtype=np.float64)
    if filters.ndim != 2 or filters.shape[1] != levels + 1:
        raise PyramidStructureError(f"filters must be [b, {levels + 1}], got {filters.shape}")
    if scale_weights.shape != (levels + 1,):
        raise PyramidStructureError(f"scale_weights must be [{levels + 1}], got {scale_weights.shape}")
    combined = filters * scale_weights
    g = combined[:, block_index(padded_len, levels)]
    return g[:, None, :, None]


def filtered_idwt(pyramid: WaveletPyramid, filters, scale_weights) -> Tensor:
    """Scale block ``i`` by ``filters[:, i] * scale_weights[i]`` and invert.

    Blocks are ``[b, h, s, d]``; the gain broadcasts over head, sequence and
    feature axes.
    """
    pyramid.validate()
    gains = block_gains(filters, scale_weights, pyramid.padded_len, pyramid.levels)
    return idwt_packed(pyramid.packed() * gains, pyramid.levels, pyramid.orig_len)


# -- inference-time coefficient cache ------------------------------------------------


class CachedCoeffs(NamedTuple):
    q_coeffs: Tensor
    k_coeffs: Tensor
    orig_len: int


def input_digest(*arrays) -> str:
    """64-bit BLAKE2b digest over the shapes and raw float64 buffers of ``arrays``."""
    h = hashlib.blake2b(digest_size=8)
    for a in arrays:
        a = np.ascontiguousarray(a, dtype=np.float64)
        h.update(repr(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


class CoefficientCache:
    """Bounded LRU cache of Q/K pyramids keyed by an input digest.

    Thread safe: all reads and writes hold one lock. Only consulted when the
    caller is in inference mode.
    """

    def __init__(self, maxsize: int = 8):
        self.maxsize = maxsize
        self._store: OrderedDict[str, CachedCoeffs] = OrderedDict()
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    @staticmethod
    def key(q, k, levels: int) -> str:
        return f"L{levels}:" + input_digest(q, k)

    def get(self, key: str) -> CachedCoeffs | None:
        with self._lock:
            entry = self._store.get(key)
            if entry is None:
                self.misses += 1
                return None
            self._store.move_to_end(key)
            self.hits += 1
            return entry

    def put(self, key: str, entry: CachedCoeffs) -> None:
        with self._lock:
            self._store[key] = entry
            self._store.move_to_end(key)
            while len(self._store) > self.maxsize:
                self._store.popitem(last=False)

    def clear(self) -> None:
        with self._lock:
            self._store.clear()
            self.hits = self.misses = 0

    def __len__(self) -> int:
        return len(self._store)
