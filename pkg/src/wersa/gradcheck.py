"""Central finite-difference verification of the autograd rules."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autograd as ag
from .attention import WersaConfig, WersaParams, init_params, trainable_parameters, wersa_graph
from .tensor import RngState, sample_gaussian


@dataclass(frozen=True)
class GradReport:
    param: str
    max_rel_err: float
    max_abs_err: float
    h: float


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return np.abs(analytic - numeric) / denom


def numeric_gradient(f: Callable[[], float], x: np.ndarray, h: float) -> np.ndarray:
    """Central differences of ``f`` w.r.t. every entry of ``x`` (perturbed in place, then restored)."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def compare(name: str, analytic: np.ndarray, numeric: np.ndarray, h: float) -> GradReport:
    return GradReport(
        param=name,
        max_rel_err=float(np.max(relative_error(analytic, numeric))),
        max_abs_err=float(np.max(np.abs(analytic - numeric))),
        h=h,
    )


def check_function(fn: Callable, inputs: dict[str, np.ndarray], h: float = 1e-6,
                   seed: int = 0) -> list[GradReport]:
    """Gradient check of ``sum(fn(**inputs) * w)`` for a fixed random weighting ``w``.

    ``fn`` must be built from :mod:`wersa.autograd` ops so it accepts both
    ``Var`` and plain-array arguments.
    """
    inputs = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    w = sample_gaussian(RngState(seed), np.shape(fn(**inputs)) or (1,)).reshape(np.shape(fn(**inputs)))

    def loss_value() -> float:
        return float(np.sum(fn(**inputs) * w))

    leaves = {k: ag.Var(v, name=k) for k, v in inputs.items()}
    loss = ag.sum(ag.mul(fn(**leaves), w))
    grads = ag.backward(loss, leaves)
    return [compare(k, grads[k], numeric_gradient(loss_value, inputs[k], h), h) for k in inputs]


def wersa_loss_setup(cfg: WersaConfig, seed: int, batch: int = 2, seq_len: int = 8):
    """Random inputs and regression target for a squared-error loss."""
    rng = RngState(seed)
    x = sample_gaussian(rng, (batch, seq_len, cfg.d_model))
    target = sample_gaussian(rng, (batch, seq_len, cfg.d_model))
    return x, target


def grad_check(cfg: WersaConfig, params: WersaParams | None = None, seed: int = 0, h: float = 1e-5,
               batch: int = 2, seq_len: int = 8) -> list[GradReport]:
    """One report per trainable (non-frozen) parameter group of a WERSA layer.

    Loss is ``0.5 * ||wersa(x, x, x) - target||^2`` in training mode.
    """
    if params is None:
        params = init_params(cfg)
    x, target = wersa_loss_setup(cfg, seed, batch, seq_len)
    arrays = {k: np.array(v) for k, v in params.arrays().items()}
    groups = [e.name for e in trainable_parameters(params, cfg) if not e.frozen]

    def loss_value() -> float:
        out = wersa_graph(x, x, x, cfg, arrays, training=True)
        return 0.5 * float(np.sum((out - target) ** 2))

    leaves = {k: ag.Var(v, name=k) if k in groups else v for k, v in arrays.items()}
    out = wersa_graph(x, x, x, cfg, leaves, training=True)
    diff = out - target
    loss = ag.sum(diff * diff) * 0.5
    grads = ag.backward(loss, {k: leaves[k] for k in groups})
    return [compare(k, grads[k], numeric_gradient(loss_value, arrays[k], h), h) for k in groups]
