"""ReLU random features and the linear-attention contraction.

The feature map is ``phi(x) = relu(x @ R / bw) / sqrt(m)`` with a frozen
random matrix ``R`` of shape ``[d_h, m]`` and effective bandwidth
``bw = max(beta, BANDWIDTH_FLOOR)``. Attention then factorises as
``phi(Q) @ (phi(K).T @ V)`` so no ``n x n`` array is ever formed.

All functions accept plain arrays or autograd ``Var`` objects.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .tensor import RngState, Tensor, sample_gaussian, sample_orthogonal, softmax_lastdim

BANDWIDTH_FLOOR = 1e-4
DENOMINATOR = "denominator"
LAYERNORM = "layernorm"
NORM_MODES = (DENOMINATOR, LAYERNORM)


def sample_projection(rng: RngState, d_h: int, m: int, kind: str = "gaussian") -> Tensor:
    """Random ``[d_h, m]`` projection.

    ``orthogonal`` stacks independent ``d_h x d_h`` orthogonal blocks along the
    feature axis and rescales every column to norm ``sqrt(d_h)``, so column
    norms match the Gaussian case in expectation.
    """
    if kind == "gaussian":
        return sample_gaussian(rng, (d_h, m))
    if kind != "orthogonal":
        raise ValueError(f"unknown projection kind {kind!r}")
    blocks, have = [], 0
    while have < m:
        blocks.append(sample_orthogonal(rng, d_h, d_h))
        have += d_h
    return np.concatenate(blocks, axis=1)[:, :m] * np.sqrt(d_h)


@dataclass
class RandomFeatureMap:
    """Frozen projections ``R_q``/``R_k`` plus the trainable bandwidth.

    ``R_q`` and ``R_k`` have shape ``[heads, d_h, m]`` (``heads == 1`` when
    shared across heads) so they broadcast against ``[b, h, n, d_h]`` inputs.
    """

    R_q: Tensor
    R_k: Tensor
    beta: Tensor = field(default_factory=lambda: np.array([1.0]))
    init_kind: str = "gaussian"

    @property
    def m(self) -> int:
        return self.R_q.shape[-1]

    @classmethod
    def create(cls, rng: RngState, d_h: int, m: int, heads: int = 1, *, shared: bool = False,
               beta: float = 1.0, kind: str = "gaussian") -> "RandomFeatureMap":
        count = 1 if shared else heads
        r_q = np.stack([sample_projection(rng, d_h, m, kind) for _ in range(count)])
        r_k = np.stack([sample_projection(rng, d_h, m, kind) for _ in range(count)])
        return cls(R_q=r_q, R_k=r_k, beta=np.array([float(beta)]), init_kind=kind)

    def bandwidth(self) -> float:
        return float(max(self.beta[0], BANDWIDTH_FLOOR))


def random_features(x, R, beta):
    """``relu(x @ R / max(beta, floor)) / sqrt(m)`` for arrays or ``Var`` inputs."""
    bw = ag.clamp_min(beta, BANDWIDTH_FLOOR)
    m = np.shape(R)[-1]
    return ag.relu(ag.matmul(x, R) / bw) * (1.0 / np.sqrt(m))


def phi(x, fmap: RandomFeatureMap, which: str = "q"):
    if which not in ("q", "k"):
        raise ValueError("which must be 'q' or 'k'")
    R = fmap.R_q if which == "q" else fmap.R_k
    return random_features(x, R, fmap.beta)


def linear_attention(phi_q, phi_k, v, mode: str = DENOMINATOR, eps: float = 1e-6,
                     ln_gamma=None, ln_beta=None, ln_eps: float = 1e-5):
    """Kernelised attention ``phi_q @ (phi_k.T @ v)`` over ``[b, h, n, .]`` arrays.

    ``denominator`` divides each row by ``phi_q @ (phi_k.T @ 1) + eps``;
    ``layernorm`` instead normalises the unnormalised product over the head
    dimension (affine terms default to identity).
    """
    kv = ag.matmul(ag.swap_last_two(phi_k), v)  # [b, h, m, d_h]
    num = ag.matmul(phi_q, kv)  # [b, h, n, d_h]
    if mode == DENOMINATOR:
        k_sum = ag.sum(phi_k, axis=-2, keepdims=True)  # [b, h, 1, m]
        den = ag.matmul(phi_q, ag.swap_last_two(k_sum)) + eps  # [b, h, n, 1]
        return num / den
    if mode == LAYERNORM:
        d_h = np.shape(ag.value_of(v))[-1]
        gamma = np.ones(d_h) if ln_gamma is None else ln_gamma
        beta = np.zeros(d_h) if ln_beta is None else ln_beta
        return ag.layer_norm(num, gamma, beta, ln_eps)
    raise ValueError(f"unknown normalisation mode {mode!r}")


def softmax_attention(q, k, v) -> Tensor:
    """Exact ``softmax(q k^T / sqrt(d_h)) v`` on plain arrays."""
    d_h = q.shape[-1]
    scores = np.matmul(q, np.swapaxes(k, -1, -2)) / np.sqrt(d_h)
    return np.matmul(softmax_lastdim(scores), v)


@dataclass
class ErrorTable:
    rows: list  # (m, seed, frob_error)
    medians: dict  # m -> median error over seeds


def kernel_error_probe(q, k, v, m_values, seeds, beta: float = 1.0, eps: float = 1e-6,
                       kind: str = "gaussian") -> ErrorTable:
    """Frobenius error of random-feature attention against exact softmax attention.

    For each feature count ``m`` and each seed a fresh projection is drawn
    from ``RngState(seed)``; the median over seeds is reported per ``m``.
    """
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    exact = softmax_attention(q, k, v)
    d_h = q.shape[-1]
    rows, medians = [], {}
    for m in m_values:
        errs = []
        for seed in seeds:
            fmap = RandomFeatureMap.create(RngState(seed), d_h, m, beta=beta, kind=kind)
            approx = linear_attention(phi(q, fmap, "q"), phi(k, fmap, "k"), v, DENOMINATOR, eps)
            err = float(np.linalg.norm(np.reshape(approx, exact.shape) - exact))
            rows.append((int(m), int(seed), err))
            errs.append(err)
        medians[int(m)] = float(np.median(errs))
    return ErrorTable(rows=rows, medians=medians)
