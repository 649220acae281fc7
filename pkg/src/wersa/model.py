"""Small encoder-only classifier around a pluggable attention backend.

Block structure (post-norm)::

    h = LayerNorm(h + Attention(h))
    h = LayerNorm(h + W2 relu(W1 h + b1) + b2)

Tokens are embedded, a learned positional table is added, the blocks run,
the sequence is mean-pooled, and a linear head produces class logits.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import autograd as ag
from .attention import ABLATIONS, WersaConfig, init_params, mha_graph, trainable_parameters, wersa_graph
from .tensor import RngState, sample_gaussian

log = logging.getLogger(__name__)

BACKENDS = ("wersa", "standard")
CHECKPOINT_MAGIC = b"WERSACKP"
CHECKPOINT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 1
    d_model: int = 32
    heads: int = 4
    ffn_dim: int = 64
    vocab_size: int = 16
    max_len: int = 128
    num_classes: int = 2
    backend: str = "wersa"
    levels: int = 2
    features: int = 64
    beta_init: float = 1.0
    eps: float = 1e-6
    norm_mode: str = "denominator"
    r_init: str = "gaussian"
    no_wavelet: bool = False
    no_adaptive_filters: bool = False
    no_scale_weights: bool = False
    no_random_features: bool = False
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ValueError(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        for name in ("layers", "ffn_dim", "vocab_size", "max_len", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        self.attention_config(0)  # validates the attention fields

    def attention_config(self, layer: int) -> WersaConfig:
        return WersaConfig(
            d_model=self.d_model, heads=self.heads, levels=self.levels, features=self.features,
            beta_init=self.beta_init, eps=self.eps, norm_mode=self.norm_mode, r_init=self.r_init,
            no_wavelet=self.no_wavelet, no_adaptive_filters=self.no_adaptive_filters,
            no_scale_weights=self.no_scale_weights, no_random_features=self.no_random_features,
            seed=self.seed * 1000 + layer + 1,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "EncoderConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown EncoderConfig fields: {sorted(unknown)}")
        return cls(**data)


def variant_config(cfg: EncoderConfig, variant: str) -> EncoderConfig:
    """``cfg`` with exactly one ablation switched on (``"full"`` for none)."""
    flags = {a: a == variant for a in ABLATIONS}
    if variant != "full" and variant not in ABLATIONS:
        raise ValueError(f"unknown variant {variant!r}")
    return replace(cfg, **flags)


# -- parameters ----------------------------------------------------------------------


def init_encoder(cfg: EncoderConfig) -> dict[str, np.ndarray]:
    """All encoder arrays keyed ``"<scope>.<name>"``, frozen projections included."""
    rng = RngState(cfg.seed)
    d = cfg.d_model
    p = {
        "embed": sample_gaussian(rng, (cfg.vocab_size, d)) * 0.1,
        "pos": sample_gaussian(rng, (cfg.max_len, d)) * 0.1,
    }
    for i in range(cfg.layers):
        attn = init_params(cfg.attention_config(i))
        for name, value in attn.arrays().items():
            p[f"layer{i}.attn.{name}"] = value
        p[f"layer{i}.ln1_gamma"] = np.ones(d)
        p[f"layer{i}.ln1_beta"] = np.zeros(d)
        p[f"layer{i}.ffn_W1"] = sample_gaussian(rng, (d, cfg.ffn_dim)) / np.sqrt(d)
        p[f"layer{i}.ffn_b1"] = np.zeros(cfg.ffn_dim)
        p[f"layer{i}.ffn_W2"] = sample_gaussian(rng, (cfg.ffn_dim, d)) / np.sqrt(cfg.ffn_dim)
        p[f"layer{i}.ffn_b2"] = np.zeros(d)
        p[f"layer{i}.ln2_gamma"] = np.ones(d)
        p[f"layer{i}.ln2_beta"] = np.zeros(d)
    p["head_W"] = sample_gaussian(rng, (d, cfg.num_classes)) / np.sqrt(d)
    p["head_b"] = np.zeros(cfg.num_classes)
    return p


def trainable_names(cfg: EncoderConfig, params: dict) -> list[str]:
    """Names the optimiser updates, in a stable order."""
    names = []
    for key in params:
        if ".attn." in key:
            layer = int(key.split(".")[0][len("layer"):])
            scope, name = key.rsplit(".", 1)
            attn_cfg = cfg.attention_config(layer)
            if cfg.backend == "standard":
                if name in ("W_q", "W_k", "W_v", "W_out"):
                    names.append(key)
                continue
            entries = {e.name: e for e in trainable_parameters(_AttnView(params, scope), attn_cfg)}
            if name in entries and not entries[name].frozen:
                names.append(key)
        else:
            names.append(key)
    return names


class _AttnView:
    """Attribute access over one layer's attention arrays in a flat parameter dict."""

    def __init__(self, params: dict, scope: str):
        self._params, self._scope = params, scope

    def __getattr__(self, name):
        return self._params.get(f"{self._scope}.{name}")


# -- forward -------------------------------------------------------------------------


def check_tokens(tokens, cfg: EncoderConfig) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValueError(f"tokens must be [batch, seq], got shape {tokens.shape}")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise ValueError("tokens must be integers")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise ValueError(f"token id outside [0, {cfg.vocab_size})")
    if tokens.shape[1] > cfg.max_len:
        raise ValueError(f"sequence length {tokens.shape[1]} exceeds max_len {cfg.max_len}")
    return tokens


def encoder_graph(tokens, cfg: EncoderConfig, p: dict, training: bool = False):
    """Class logits ``[batch, num_classes]``; ``p`` values may be arrays or ``Var`` leaves."""
    tokens = check_tokens(tokens, cfg)
    n = tokens.shape[1]
    h = ag.embedding(p["embed"], tokens) + ag.getitem(p["pos"], slice(0, n))
    for i in range(cfg.layers):
        scope = f"layer{i}"
        attn_p = {k[len(scope) + 6:]: v for k, v in p.items() if k.startswith(scope + ".attn.")}
        if cfg.backend == "standard":
            a = mha_graph(h, h, h, attn_p, cfg.heads)
        else:
            a = wersa_graph(h, h, h, cfg.attention_config(i), attn_p, training=training)
        h = ag.layer_norm(h + a, p[f"{scope}.ln1_gamma"], p[f"{scope}.ln1_beta"])
        f = ag.relu(ag.matmul(h, p[f"{scope}.ffn_W1"]) + p[f"{scope}.ffn_b1"])
        f = ag.matmul(f, p[f"{scope}.ffn_W2"]) + p[f"{scope}.ffn_b2"]
        h = ag.layer_norm(h + f, p[f"{scope}.ln2_gamma"], p[f"{scope}.ln2_beta"])
    pooled = ag.mean(h, axis=1)
    return ag.matmul(pooled, p["head_W"]) + p["head_b"]


def encoder_forward(tokens, cfg: EncoderConfig, params: dict) -> np.ndarray:
    return encoder_graph(tokens, cfg, params, training=False)


# -- toy task ------------------------------------------------------------------------


@dataclass
class ToyTask:
    """Marker-position classification split into train and validation parts."""

    X_train: np.ndarray
    y_train: np.ndarray
    X_val: np.ndarray
    y_val: np.ndarray
    marker: int
    num_classes: int


def make_toy_task(seed: int, n: int, size: int, num_classes: int = 2, vocab_size: int = 16,
                  val_fraction: float = 0.2) -> ToyTask:
    """One marker token per sequence; the label is the segment (of ``num_classes``) holding it.

    Filler tokens are uniform over ``[0, vocab_size - 1)``; the marker is
    ``vocab_size - 1`` and its position is uniform over the sequence.
    """
    if n < 32:
        raise ValueError("toy task needs n >= 32")
    if n % num_classes:
        raise ValueError("n must be divisible by num_classes")
    rng = np.random.Generator(np.random.Philox(key=seed))
    marker = vocab_size - 1
    X = rng.integers(0, marker, size=(size, n))
    pos = rng.integers(0, n, size=size)
    X[np.arange(size), pos] = marker
    y = pos * num_classes // n
    n_val = int(round(size * val_fraction))
    return ToyTask(X[n_val:], y[n_val:], X[:n_val], y[:n_val], marker, num_classes)


# -- training ------------------------------------------------------------------------


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict) -> None:
        self.step_count += 1
        t = self.step_count
        for name, g in grads.items():
            m = self.m.get(name, 0.0) * self.beta1 + (1 - self.beta1) * g
            v = self.v.get(name, 0.0) * self.beta2 + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            m_hat = m / (1 - self.beta1 ** t)
            v_hat = v / (1 - self.beta2 ** t)
            params[name] = params[name] - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class LogRow:
    epoch: int
    split: str
    loss: float
    accuracy: float


@dataclass
class TrainResult:
    log: list
    params: dict
    config: EncoderConfig
    rng: RngState

    def final(self, split: str = "val") -> LogRow:
        return [r for r in self.log if r.split == split][-1]


def evaluate(tokens, labels, cfg: EncoderConfig, params: dict, batch_size: int = 256) -> tuple[float, float]:
    losses, correct = 0.0, 0
    for start in range(0, len(labels), batch_size):
        xb, yb = tokens[start:start + batch_size], labels[start:start + batch_size]
        logits = encoder_forward(xb, cfg, params)
        losses += float(ag.cross_entropy(logits, yb)) * len(yb)
        correct += int(np.sum(np.argmax(logits, axis=1) == yb))
    return losses / len(labels), correct / len(labels)


def train(cfg: EncoderConfig, task: ToyTask, params: dict | None = None) -> TrainResult:
    """Minibatch Adam on cross-entropy; deterministic given ``cfg.seed``."""
    params = dict(init_encoder(cfg) if params is None else params)
    names = trainable_names(cfg, params)
    opt = Adam(lr=cfg.learning_rate)
    shuffle_rng = RngState(cfg.seed ^ 0x5EED)
    log_rows = []
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.generator().permutation(len(task.y_train))
        total, seen, correct = 0.0, 0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, yb = task.X_train[idx], task.y_train[idx]
            leaves = {k: (ag.Var(v, name=k) if k in names else v) for k, v in params.items()}
            logits = encoder_graph(xb, cfg, leaves, training=True)
            loss = ag.cross_entropy(logits, yb)
            if not math.isfinite(float(loss.value)):
                raise TrainingDivergedError(_nan_report(params, names, epoch))
            grads = ag.backward(loss, {k: leaves[k] for k in names})
            opt.step(params, grads)
            bad = _first_nonfinite(params, names)
            if bad is not None:
                raise TrainingDivergedError(f"epoch {epoch}: parameter {bad!r} became non-finite")
            total += float(loss.value) * len(yb)
            correct += int(np.sum(np.argmax(logits.value, axis=1) == yb))
            seen += len(yb)
        log_rows.append(LogRow(epoch, "train", total / seen, correct / seen))
        val_loss, val_acc = evaluate(task.X_val, task.y_val, cfg, params)
        log_rows.append(LogRow(epoch, "val", val_loss, val_acc))
        log.info("epoch %d train_loss=%.4f val_loss=%.4f val_acc=%.4f", epoch, total / seen, val_loss, val_acc)
    return TrainResult(log_rows, params, cfg, shuffle_rng)


def _first_nonfinite(params: dict, names) -> str | None:
    for k in names:
        if not np.all(np.isfinite(params[k])):
            return k
    return None


def _nan_report(params: dict, names, epoch: int) -> str:
    bad = _first_nonfinite(params, names)
    where = f"first non-finite parameter {bad!r}" if bad else "all parameters finite; loss overflowed"
    return f"loss became non-finite in epoch {epoch} ({where})"


# -- checkpoints ---------------------------------------------------------------------
#
# layout: magic (8 bytes) | version (u32 LE) | header length (u64 LE) | JSON header
#         | raw little-endian float64 buffers in header order


def save_checkpoint(path, cfg: EncoderConfig, params: dict, rng: RngState | None = None) -> None:
    tensors, offset, blobs = [], 0, []
    for name, value in params.items():
        buf = np.ascontiguousarray(value, dtype="<f8").tobytes()
        tensors.append({"name": name, "shape": list(np.shape(value)), "dtype": "<f8",
                        "offset": offset, "nbytes": len(buf)})
        blobs.append(buf)
        offset += len(buf)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "tensors": tensors,
        "rng": None if rng is None else {"seed": rng.seed, "counter": rng.counter},
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(raw)))
        fh.write(raw)
        for buf in blobs:
            fh.write(buf)


def load_checkpoint(path) -> tuple[EncoderConfig, dict, RngState | None]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", data, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = 8 + struct.calcsize("<IQ")
    header = json.loads(data[start:start + hlen].decode("utf-8"))
    body = memoryview(data)[start + hlen:]
    params = {}
    for t in header["tensors"]:
        chunk = body[t["offset"]:t["offset"] + t["nbytes"]]
        if len(chunk) != t["nbytes"]:
            raise CheckpointError(f"{path}: truncated tensor {t['name']!r}")
        params[t["name"]] = np.frombuffer(chunk, dtype=t["dtype"]).astype(np.float64).reshape(t["shape"])
    rng = header.get("rng")
    return (EncoderConfig.from_dict(header["config"]), params,
            None if rng is None else RngState(rng["seed"], rng["counter"]))
