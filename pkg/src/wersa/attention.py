"""WERSA multi-head attention, its ablations, and the exact softmax oracle.

Pipeline for ``wersa_forward`` on ``[b, n, d_model]`` inputs:

1. project queries, keys and values and split into ``h`` heads;
2. Haar-decompose the projected queries and keys over the sequence axis;
3. pool the projected queries over the sequence, flatten heads, and map
   through one affine layer + sigmoid to per-scale filters ``F[b, L+1]``;
4. scale every coefficient block by ``F[:, i] * scale_weights[i]`` and
   reconstruct (the same filters are used for queries and keys);
5. apply ReLU random features and linear attention against the projected
   values (values are never filtered);
6. merge heads and apply the output projection.

Ablation flags switch off single stages: ``no_wavelet`` skips 2-4,
``no_adaptive_filters`` fixes ``F = 1``, ``no_scale_weights`` fixes the
scale weights to 1, and ``no_random_features`` replaces stage 5 with exact
softmax attention over the filtered queries and keys.

The attention mask is not supported; attention is bidirectional.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import NamedTuple

import numpy as np

from . import autograd as ag
from .spectral import DENOMINATOR, LAYERNORM, NORM_MODES, linear_attention, random_features, sample_projection
from .tensor import RngState, ShapeError, Tensor, sample_gaussian, softmax_lastdim
from .wavelet import CachedCoeffs, CoefficientCache, block_index

ABLATIONS = ("no_wavelet", "no_adaptive_filters", "no_scale_weights", "no_random_features")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class WersaConfig:
    d_model: int = 64
    heads: int = 4
    levels: int = 2
    features: int = 1024
    beta_init: float = 1.0
    eps: float = 1e-6
    norm_mode: str = DENOMINATOR
    r_init: str = "gaussian"
    share_random_features: bool = False
    no_wavelet: bool = False
    no_adaptive_filters: bool = False
    no_scale_weights: bool = False
    no_random_features: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.heads < 1 or self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.levels < 1:
            raise ConfigError("levels must be >= 1")
        if self.features < 1:
            raise ConfigError("features must be >= 1")
        if self.norm_mode not in NORM_MODES:
            raise ConfigError(f"norm_mode must be one of {NORM_MODES}")
        if self.r_init not in ("gaussian", "orthogonal"):
            raise ConfigError("r_init must be 'gaussian' or 'orthogonal'")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    @property
    def ablations(self) -> tuple[str, ...]:
        return tuple(a for a in ABLATIONS if getattr(self, a))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "WersaConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown WersaConfig fields: {sorted(unknown)}")
        return cls(**data)


# trainable names in enumeration order; R_q/R_k are frozen and never listed
PARAM_ORDER = ("W_q", "W_k", "W_v", "W_filter", "b_filter", "scale_weights", "beta", "ln_gamma", "ln_beta", "W_out")


@dataclass
class WersaParams:
    W_q: Tensor
    W_k: Tensor
    W_v: Tensor
    W_out: Tensor
    W_filter: Tensor
    b_filter: Tensor
    scale_weights: Tensor
    beta: Tensor
    R_q: Tensor
    R_k: Tensor
    ln_gamma: Tensor | None = None
    ln_beta: Tensor | None = None

    def arrays(self) -> dict[str, Tensor]:
        """Every array, frozen ones included, keyed by field name."""
        return {f.name: getattr(self, f.name) for f in fields(self) if getattr(self, f.name) is not None}

    def replace(self, **updates) -> "WersaParams":
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        data.update(updates)
        return WersaParams(**data)


def init_params(cfg: WersaConfig) -> WersaParams:
    """Gaussian projections scaled by ``1/sqrt(fan_in)``, unit scale weights, zero filter bias."""
    rng = RngState(cfg.seed)
    d, h, dh, L = cfg.d_model, cfg.heads, cfg.head_dim, cfg.levels
    inner = h * dh
    W_q = sample_gaussian(rng, (d, inner)) / np.sqrt(d)
    W_k = sample_gaussian(rng, (d, inner)) / np.sqrt(d)
    W_v = sample_gaussian(rng, (d, inner)) / np.sqrt(d)
    W_out = sample_gaussian(rng, (inner, d)) / np.sqrt(inner)
    W_filter = sample_gaussian(rng, (inner, L + 1)) / np.sqrt(inner)
    count = 1 if cfg.share_random_features else h
    R_q = np.stack([sample_projection(rng, dh, cfg.features, cfg.r_init) for _ in range(count)])
    R_k = np.stack([sample_projection(rng, dh, cfg.features, cfg.r_init) for _ in range(count)])
    layer_norm = cfg.norm_mode == LAYERNORM
    return WersaParams(
        W_q=W_q, W_k=W_k, W_v=W_v, W_out=W_out,
        W_filter=W_filter, b_filter=np.zeros(L + 1), scale_weights=np.ones(L + 1),
        beta=np.array([cfg.beta_init]), R_q=R_q, R_k=R_k,
        ln_gamma=np.ones(dh) if layer_norm else None,
        ln_beta=np.zeros(dh) if layer_norm else None,
    )


class ParamEntry(NamedTuple):
    name: str
    value: Tensor
    frozen: bool


def trainable_parameters(params: WersaParams, cfg: WersaConfig) -> list[ParamEntry]:
    """Learnable arrays in a fixed order.

    Parameters an ablation disconnects stay listed but are flagged frozen.
    The random projections are never listed.
    """
    frozen = set()
    if cfg.no_wavelet:
        frozen |= {"W_filter", "b_filter", "scale_weights"}
    if cfg.no_adaptive_filters:
        frozen |= {"W_filter", "b_filter"}
    if cfg.no_scale_weights:
        frozen.add("scale_weights")
    if cfg.no_random_features:
        frozen |= {"beta", "ln_gamma", "ln_beta"}
    out = []
    for name in PARAM_ORDER:
        value = getattr(params, name)
        if value is not None:
            out.append(ParamEntry(name, value, name in frozen))
    return out


def _check_inputs(x_q, x_k, x_v, d_model: int):
    shapes = [np.shape(ag.value_of(x)) for x in (x_q, x_k, x_v)]
    for s in shapes:
        if len(s) != 3 or s[-1] != d_model:
            raise ShapeError(f"expected [b, n, {d_model}] inputs, got {shapes}")
    if shapes[1][:2] != shapes[2][:2] or shapes[0][0] != shapes[1][0]:
        raise ShapeError(f"batch/sequence extents disagree: {shapes}")
    if shapes[0][1] < 1:
        raise ShapeError("empty sequence")


def split_heads(x, heads: int):
    b, n, inner = np.shape(ag.value_of(x))
    return ag.transpose(ag.reshape(x, (b, n, heads, inner // heads)), (0, 2, 1, 3))


def merge_heads(x):
    b, h, n, dh = np.shape(ag.value_of(x))
    return ag.reshape(ag.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def adaptive_filters(q_heads, W_filter, b_filter):
    """``sigmoid(mean_seq(q) @ W_filter + b_filter)``; one filter row per batch element."""
    b, h, _, dh = np.shape(ag.value_of(q_heads))
    pooled = ag.reshape(ag.mean(q_heads, axis=2), (b, h * dh))
    return ag.sigmoid(ag.matmul(pooled, W_filter) + b_filter)


def _indicator(padded_len: int, levels: int) -> Tensor:
    idx = block_index(padded_len, levels)
    e = np.zeros((levels + 1, padded_len))
    e[idx, np.arange(padded_len)] = 1.0
    return e


def filtered_reconstruction(coeffs, gains_per_block, levels: int, orig_len: int):
    """Apply ``[b, L+1]`` block gains to packed coefficients ``[b, h, P, d]`` and invert."""
    P = np.shape(ag.value_of(coeffs))[-2]
    b = np.shape(ag.value_of(gains_per_block))[0]
    per_pos = ag.matmul(gains_per_block, _indicator(P, levels))  # [b, P]
    return ag.idwt(coeffs * ag.reshape(per_pos, (b, 1, P, 1)), levels, orig_len)


def _wavelet_coeffs(q, k, cfg: WersaConfig, training: bool, cache: CoefficientCache | None):
    use_cache = cache is not None and not training and not isinstance(q, ag.Var) and not isinstance(k, ag.Var)
    if use_cache:
        key = cache.key(q, k, cfg.levels)
        hit = cache.get(key)
        if hit is not None:
            return hit.q_coeffs, hit.k_coeffs
    qc = ag.dwt(q, cfg.levels, pad_to_levels=True)
    kc = ag.dwt(k, cfg.levels, pad_to_levels=True)
    if use_cache:
        cache.put(key, CachedCoeffs(qc.copy(), kc.copy(), np.shape(q)[-2]))
    return qc, kc


def wersa_graph(x_q, x_k, x_v, cfg: WersaConfig, p, training: bool = False,
                cache: CoefficientCache | None = None, return_filters: bool = False):
    """WERSA forward over arrays or ``Var`` leaves.

    ``p`` maps parameter names to arrays or ``Var`` objects (a ``WersaParams``
    also works).
    """
    get = p.get if isinstance(p, dict) else lambda name: getattr(p, name)
    _check_inputs(x_q, x_k, x_v, cfg.d_model)
    b, n, _ = np.shape(ag.value_of(x_q))
    n_k = np.shape(ag.value_of(x_k))[1]
    h, dh, L = cfg.heads, cfg.head_dim, cfg.levels

    q = split_heads(ag.matmul(x_q, get("W_q")), h)
    k = split_heads(ag.matmul(x_k, get("W_k")), h)
    v = split_heads(ag.matmul(x_v, get("W_v")), h)

    filters = None
    if cfg.no_wavelet:
        q_f, k_f = q, k
    else:
        qc, kc = _wavelet_coeffs(q, k, cfg, training, cache)
        if cfg.no_adaptive_filters:
            filters = np.ones((b, L + 1))
        else:
            filters = adaptive_filters(q, get("W_filter"), get("b_filter"))
        omega = np.ones(L + 1) if cfg.no_scale_weights else get("scale_weights")
        gains = filters * omega
        q_f = filtered_reconstruction(qc, gains, L, n)
        k_f = filtered_reconstruction(kc, gains, L, n_k)

    if cfg.no_random_features:
        scores = ag.matmul(q_f, ag.swap_last_two(k_f)) * (1.0 / np.sqrt(dh))
        attn = ag.matmul(ag.softmax(scores), v)
    else:
        phi_q = random_features(q_f, get("R_q"), get("beta"))
        phi_k = random_features(k_f, get("R_k"), get("beta"))
        if cfg.norm_mode == LAYERNORM:
            attn = linear_attention(phi_q, phi_k, v, LAYERNORM, cfg.eps, get("ln_gamma"), get("ln_beta"))
        else:
            attn = linear_attention(phi_q, phi_k, v, DENOMINATOR, cfg.eps)

    out = ag.matmul(merge_heads(attn), get("W_out"))
    if return_filters:
        return out, filters
    return out


def wersa_forward(x_q, x_k, x_v, cfg: WersaConfig, params: WersaParams, training: bool = False,
                  cache: CoefficientCache | None = None) -> Tensor:
    """Numeric WERSA forward on ``[b, n, d_model]`` arrays."""
    x_q, x_k, x_v = (np.asarray(x, dtype=np.float64) for x in (x_q, x_k, x_v))
    return wersa_graph(x_q, x_k, x_v, cfg, params, training=training, cache=cache)


def mha_graph(x_q, x_k, x_v, p, heads: int):
    """Standard softmax multi-head attention over arrays or ``Var`` leaves."""
    get = p.get if isinstance(p, dict) else lambda name: getattr(p, name)
    q = split_heads(ag.matmul(x_q, get("W_q")), heads)
    k = split_heads(ag.matmul(x_k, get("W_k")), heads)
    v = split_heads(ag.matmul(x_v, get("W_v")), heads)
    dh = np.shape(ag.value_of(q))[-1]
    scores = ag.matmul(q, ag.swap_last_two(k)) * (1.0 / np.sqrt(dh))
    return ag.matmul(merge_heads(ag.matmul(ag.softmax(scores), v)), get("W_out"))


def mha_heads(x_q, x_k, x_v, params: WersaParams, heads: int, block_rows: int | None = None) -> Tensor:
    """Per-head softmax attention outputs ``[b, h, n, d_h]`` before merging.

    With ``block_rows`` the query axis is processed in row blocks; the result
    is identical (softmax is row-wise) but peak memory is ``O(block_rows * n)``
    per head instead of ``O(n^2)``.
    """
    def heads_of(x, w):
        b, n, _ = x.shape
        y = np.matmul(x, w)
        return y.reshape(b, n, heads, -1).transpose(0, 2, 1, 3)

    q = heads_of(np.asarray(x_q, dtype=np.float64), params.W_q)
    k = heads_of(np.asarray(x_k, dtype=np.float64), params.W_k)
    v = heads_of(np.asarray(x_v, dtype=np.float64), params.W_v)
    scale = 1.0 / np.sqrt(q.shape[-1])
    kt = np.swapaxes(k, -1, -2)
    n_q = q.shape[2]
    step = n_q if block_rows is None else block_rows
    out = np.empty(q.shape[:3] + (v.shape[-1],))
    for start in range(0, n_q, step):
        stop = min(start + step, n_q)
        weights = softmax_lastdim(np.matmul(q[:, :, start:stop], kt) * scale)
        out[:, :, start:stop] = np.matmul(weights, v)
    return out


def mha_forward(x_q, x_k, x_v, params: WersaParams, heads: int, block_rows: int | None = None) -> Tensor:
    """Exact quadratic softmax multi-head attention; the reference for equivalence tests."""
    x_q = np.asarray(x_q, dtype=np.float64)
    if x_q.ndim != 3:
        raise ShapeError(f"expected [b, n, d_model] inputs, got {x_q.shape}")
    if params.W_q.shape[1] % heads:
        raise ShapeError(f"projection width {params.W_q.shape[1]} not divisible by {heads} heads")
    attn = mha_heads(x_q, x_k, x_v, params, heads, block_rows)
    b, h, n, dh = attn.shape
    return np.matmul(attn.transpose(0, 2, 1, 3).reshape(b, n, h * dh), params.W_out)


def filtered_qk(x_q, x_k, cfg: WersaConfig, params: WersaParams) -> tuple[Tensor, Tensor]:
    """Wavelet-filtered per-head queries and keys exactly as WERSA computes them."""
    x_q = np.asarray(x_q, dtype=np.float64)
    x_k = np.asarray(x_k, dtype=np.float64)
    b, n, _ = x_q.shape
    q = split_heads(np.matmul(x_q, params.W_q), cfg.heads)
    k = split_heads(np.matmul(x_k, params.W_k), cfg.heads)
    if cfg.no_wavelet:
        return q, k
    L = cfg.levels
    qc = ag.dwt(q, L, pad_to_levels=True)
    kc = ag.dwt(k, L, pad_to_levels=True)
    f = np.ones((b, L + 1)) if cfg.no_adaptive_filters else adaptive_filters(q, params.W_filter, params.b_filter)
    omega = np.ones(L + 1) if cfg.no_scale_weights else params.scale_weights
    gains = f * omega
    return filtered_reconstruction(qc, gains, L, n), filtered_reconstruction(kc, gains, L, x_k.shape[1])

