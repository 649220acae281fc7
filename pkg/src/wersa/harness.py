"""Benchmarks, analytical cost model, and the ``wersa-bench`` command line.

Subcommands write CSV to ``--out`` and print one summary line:

* ``bench``        wall-time sweep over sequence lengths
* ``flops``        analytical FLOP / memory model
* ``approx-error`` random-feature error against exact attention
* ``gradcheck``    finite-difference check of every trainable group
* ``ablate``       toy-task training of the full layer and each ablation
* ``train-toy``    toy-task training with an optional checkpoint

Exit status: 0 on success, 2 on invalid arguments, 1 if the experiment fails.
FLOPs count two per multiply-accumulate throughout.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import statistics
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attention import ABLATIONS, WersaConfig, init_params, mha_forward, wersa_forward
from .gradcheck import grad_check
from .model import EncoderConfig, make_toy_task, save_checkpoint, train, variant_config
from .spectral import kernel_error_probe
from .tensor import RngState, sample_gaussian

log = logging.getLogger(__name__)

MECHANISMS = ("wersa", "standard") + ABLATIONS
BENCH_HEADER = ["mechanism", "n", "reps", "median_seconds", "flops_est", "mem_bytes_est"]
APPROX_HEADER = ["m", "seed", "frob_error"]
GRADCHECK_HEADER = ["param", "max_rel_err", "max_abs_err", "h"]
TRAIN_HEADER = ["epoch", "split", "loss", "accuracy"]
ABLATE_HEADER = ["variant"] + TRAIN_HEADER
FLOPS_HEADER = ["mechanism", "n", "attention_flops", "total_flops", "mem_bytes_est"]

BYTES = 8

PRESETS = {
    "arxiv-like": {"layers": 4, "d_model": 256, "heads": 8, "ffn_dim": 1024, "features": 1024, "levels": 2},
    "imdb-like": {"layers": 2, "d_model": 128, "heads": 4, "ffn_dim": 256, "features": 1024, "levels": 2},
}


class InsufficientDataError(ValueError):
    pass


# -- analytical model ----------------------------------------------------------------


@dataclass(frozen=True)
class FlopsModel:
    d_model: int
    heads: int
    features: int
    levels: int
    batch: int = 1

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    def components(self, n: int, mechanism: str = "wersa") -> dict[str, float]:
        """Per-component FLOPs of one attention layer on a length-``n`` sequence."""
        d, h, dh, m, L = self.d_model, self.heads, self.head_dim, self.features, self.levels
        inner = h * dh
        c = {
            "projections": 2 * n * d * inner * 3,
            "output": 2 * n * inner * d,
        }
        if mechanism == "standard":
            c["scores_and_mix"] = 2 * n * n * dh * 2 * h
            return {k: float(v * self.batch) for k, v in c.items()}
        wavelet = mechanism != "no_wavelet"
        if wavelet:
            c["wavelet"] = 4 * n * inner * L * 2  # forward + inverse, queries and keys
            if mechanism != "no_adaptive_filters":
                c["filter_net"] = 2 * inner * (L + 1)
        if mechanism == "no_random_features":
            c["scores_and_mix"] = 2 * n * n * dh * 2 * h
        else:
            c["random_projection"] = 2 * n * dh * m * 2 * h
            c["linear_attention"] = 2 * n * m * dh * 2 * h
        return {k: float(v * self.batch) for k, v in c.items()}

    def attention_flops(self, n: int, mechanism: str = "wersa") -> float:
        return sum(self.components(n, mechanism).values())

    def mem_bytes(self, n: int, mechanism: str = "wersa") -> float:
        """Peak extra bytes from the live-array inventory of one forward pass."""
        d, h, dh, m = self.d_model, self.heads, self.head_dim, self.features
        inner = h * dh
        live = 3 * n * inner + n * d  # projected q, k, v and the output
        if mechanism == "standard" or mechanism == "no_random_features":
            live += h * n * n * 2  # scores and their softmax
        if mechanism not in ("standard", "no_wavelet"):
            live += 2 * 2 * n * inner  # packed pyramids and reconstructions (padding ignored)
        if mechanism not in ("standard", "no_random_features"):
            live += 2 * n * h * m + h * m * dh
        return float(live * BYTES * self.batch)


def encoder_flops(model: FlopsModel, n: int, mechanism: str, layers: int, ffn_dim: int) -> float:
    ffn = 2 * n * model.d_model * ffn_dim * 2 * model.batch
    return layers * (model.attention_flops(n, mechanism) + ffn)


# -- timing --------------------------------------------------------------------------


@dataclass
class BenchRecord:
    mechanism: str
    n: int
    reps: int
    median_seconds: float
    flops_est: float
    mem_bytes_est: float

    def row(self) -> list:
        return [self.mechanism, self.n, self.reps, repr(self.median_seconds), repr(self.flops_est), repr(self.mem_bytes_est)]


def bench_config(mechanism: str, d_model: int = 32, heads: int = 2, features: int = 64, levels: int = 2,
                 seed: int = 0) -> WersaConfig:
    flags = {a: a == mechanism for a in ABLATIONS}
    return WersaConfig(d_model=d_model, heads=heads, features=features, levels=levels, seed=seed, **flags)


def time_forward(mechanism: str, n: int, reps: int = 5, warmup: int = 2, seed: int = 0, batch: int = 1,
                 block_rows: int = 1024, **cfg_kwargs) -> list[float]:
    """Timed forward passes; parameters and inputs are built outside the timed region."""
    cfg = bench_config(mechanism, seed=seed, **cfg_kwargs)
    params = init_params(cfg)
    x = sample_gaussian(RngState(seed + 1), (batch, n, cfg.d_model))
    if mechanism == "standard":
        def run():
            return mha_forward(x, x, x, params, cfg.heads, block_rows=block_rows)
    else:
        def run():
            return wersa_forward(x, x, x, cfg, params)
    for _ in range(warmup):
        run()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        run()
        times.append(time.perf_counter() - t0)
    return times


def bench(mechanisms, ns, reps: int = 5, warmup: int = 2, seed: int = 0, batch: int = 1,
          **cfg_kwargs) -> list[BenchRecord]:
    if reps < 5 or warmup < 2:
        raise ValueError("bench needs reps >= 5 and warmup >= 2")
    ns = sorted(ns)
    out = []
    for mech in mechanisms:
        if mech not in MECHANISMS:
            raise ValueError(f"unknown mechanism {mech!r}")
        cfg = bench_config(mech, seed=seed, **cfg_kwargs)
        model = FlopsModel(cfg.d_model, cfg.heads, cfg.features, cfg.levels, batch)
        for n in ns:
            times = time_forward(mech, n, reps, warmup, seed, batch, **cfg_kwargs)
            out.append(BenchRecord(mech, n, reps, statistics.median(times),
                                   model.attention_flops(n, mech), model.mem_bytes(n, mech)))
            log.info("%s n=%d median=%.4fs", mech, n, out[-1].median_seconds)
    return out


def fit_scaling_slope(records) -> float:
    """Least-squares slope of ``log(time)`` against ``log(n)``.

    Accepts ``BenchRecord`` objects or ``(n, seconds)`` pairs for one mechanism.
    """
    pts = [(r.n, r.median_seconds) if isinstance(r, BenchRecord) else tuple(r) for r in records]
    ns = sorted({n for n, _ in pts})
    if len(ns) < 4:
        raise InsufficientDataError(f"need at least 4 distinct n, got {len(ns)}")
    if ns[-1] < 8 * ns[0]:
        raise InsufficientDataError("n values must span at least a factor of 8")
    x = np.log([n for n, _ in pts])
    y = np.log([t for _, t in pts])
    slope, _ = np.polyfit(x, y, 1)
    return float(slope)


# -- CSV helpers ---------------------------------------------------------------------


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    if path in (None, "-"):
        sys.stdout.write(buf.getvalue())
    else:
        Path(path).write_text(buf.getvalue())


# -- CLI -----------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(t) for t in text.split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _mech_list(text: str) -> list[str]:
    vals = [t.strip() for t in text.split(",") if t.strip()]
    bad = [v for v in vals if v not in MECHANISMS]
    if bad or not vals:
        raise argparse.ArgumentTypeError(f"unknown mechanism(s) {bad}; choose from {', '.join(MECHANISMS)}")
    return vals


def _load_config(arg: str | None) -> dict:
    if arg is None:
        return {}
    if arg in PRESETS:
        return dict(PRESETS[arg])
    path = Path(arg)
    if not path.is_file():
        raise argparse.ArgumentTypeError(f"--config must be a preset ({', '.join(PRESETS)}) or a JSON file")
    return json.loads(path.read_text())


def _encoder_config(args) -> EncoderConfig:
    data = {"max_len": args.n, "epochs": args.epochs, "seed": args.seed}
    data.update(_load_config(args.config))
    if args.backend:
        data["backend"] = args.backend
    if args.norm_mode:
        data["norm_mode"] = args.norm_mode
    return EncoderConfig.from_dict(data)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="wersa-bench", description="WERSA attention experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    b = sub.add_parser("bench", help="wall-time scaling sweep")
    b.add_argument("--mech", type=_mech_list, default=["wersa", "standard"])
    b.add_argument("--n", type=_int_list, default=[1024, 2048, 4096, 8192])
    b.add_argument("--reps", type=int, default=5)
    b.add_argument("--warmup", type=int, default=2)
    b.add_argument("--d-model", type=int, default=32)
    b.add_argument("--heads", type=int, default=2)
    b.add_argument("--features", type=int, default=64)
    b.add_argument("--levels", type=int, default=2)

    f = sub.add_parser("flops", help="analytical FLOP model")
    f.add_argument("--config", default="arxiv-like")
    f.add_argument("--n", type=_int_list, default=[1024, 2048, 4096, 8192, 16384])
    f.add_argument("--mech", type=_mech_list, default=["wersa", "standard"])

    a = sub.add_parser("approx-error", help="random-feature error vs exact attention")
    a.add_argument("--m", type=_int_list, default=[64, 256, 1024])
    a.add_argument("--seeds", type=int, default=10)
    a.add_argument("--n", type=int, default=32)
    a.add_argument("--dh", type=int, default=16)

    g = sub.add_parser("gradcheck", help="finite-difference gradient check")
    g.add_argument("--h", type=float, default=1e-5)
    g.add_argument("--features", type=int, default=16)

    for name, help_text in (("ablate", "train the full layer and every ablation"),
                            ("train-toy", "train on the marker task")):
        t = sub.add_parser(name, help=help_text)
        t.add_argument("--n", type=int, default=128)
        t.add_argument("--size", type=int, default=1500)
        t.add_argument("--epochs", type=int, default=20)
        t.add_argument("--config", default=None, help="JSON file of EncoderConfig fields")
        t.add_argument("--backend", choices=("wersa", "standard"), default=None)
        t.add_argument("--norm-mode", choices=("denominator", "layernorm"), default=None)
        if name == "train-toy":
            t.add_argument("--checkpoint", default=None)

    for s in sub.choices.values():
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--out", default="-")
    return p


def _cmd_bench(args) -> str:
    kw = dict(d_model=args.d_model, heads=args.heads, features=args.features, levels=args.levels)
    recs = bench(args.mech, args.n, reps=args.reps, warmup=args.warmup, seed=args.seed, **kw)
    write_csv(args.out, BENCH_HEADER, [r.row() for r in recs])
    parts = []
    for mech in args.mech:
        mine = [r for r in recs if r.mechanism == mech]
        try:
            parts.append(f"{mech} slope={fit_scaling_slope(mine):.3f}")
        except InsufficientDataError:
            parts.append(f"{mech} n/a")
    return "bench: " + ", ".join(parts)


def _cmd_flops(args) -> str:
    cfg = _load_config(args.config)
    model = FlopsModel(cfg.get("d_model", 256), cfg.get("heads", 8), cfg.get("features", 1024), cfg.get("levels", 2))
    layers, ffn = cfg.get("layers", 1), cfg.get("ffn_dim", 4 * model.d_model)
    rows = []
    for mech in args.mech:
        for n in args.n:
            rows.append([mech, n, model.attention_flops(n, mech) * layers,
                         encoder_flops(model, n, mech, layers, ffn), model.mem_bytes(n, mech) * layers])
    write_csv(args.out, FLOPS_HEADER, rows)
    summary = []
    if "wersa" in args.mech and "standard" in args.mech:
        for n in args.n:
            ratio = model.attention_flops(n, "standard") / model.attention_flops(n, "wersa")
            summary.append(f"n={n}: standard/wersa={ratio:.2f}")
    return "flops: " + "; ".join(summary or ["written"])


def _cmd_approx(args) -> str:
    rng = RngState(args.seed)
    q, k, v = (sample_gaussian(rng, (args.n, args.dh)) for _ in range(3))
    table = kernel_error_probe(q, k, v, args.m, range(args.seeds))
    rows = [list(r) for r in table.rows] + [[m, "median", med] for m, med in table.medians.items()]
    write_csv(args.out, APPROX_HEADER, rows)
    return "approx-error: " + ", ".join(f"m={m} median={e:.4f}" for m, e in table.medians.items())


def _cmd_gradcheck(args) -> str:
    rows, worst = [], 0.0
    for mode in ("denominator", "layernorm"):
        for variant in ("full",) + ABLATIONS:
            flags = {a: a == variant for a in ABLATIONS}
            cfg = WersaConfig(d_model=8, heads=2, levels=2, features=args.features, norm_mode=mode,
                              seed=args.seed, **flags)
            for r in grad_check(cfg, seed=args.seed, h=args.h):
                rows.append([f"{mode}/{variant}/{r.param}", r.max_rel_err, r.max_abs_err, r.h])
                worst = max(worst, r.max_rel_err)
    write_csv(args.out, GRADCHECK_HEADER, rows)
    if worst >= 1e-3:
        raise RuntimeError(f"gradient check failed: max relative error {worst:.3e}")
    return f"gradcheck: {len(rows)} groups, max relative error {worst:.3e}"


def _cmd_train(args) -> str:
    cfg = _encoder_config(args)
    task = make_toy_task(args.seed, args.n, args.size, cfg.num_classes, cfg.vocab_size)
    result = train(cfg, task)
    write_csv(args.out, TRAIN_HEADER, [[r.epoch, r.split, r.loss, r.accuracy] for r in result.log])
    if args.checkpoint:
        save_checkpoint(args.checkpoint, cfg, result.params, result.rng)
    final = result.final("val")
    return f"train-toy: epoch {final.epoch} val_loss={final.loss:.4f} val_acc={final.accuracy:.4f}"


def _cmd_ablate(args) -> str:
    base = _encoder_config(args)
    task = make_toy_task(args.seed, args.n, args.size, base.num_classes, base.vocab_size)
    rows, finals = [], {}
    for variant in ("full",) + ABLATIONS:
        result = train(variant_config(base, variant), task)
        rows += [[variant, r.epoch, r.split, r.loss, r.accuracy] for r in result.log]
        finals[variant] = result.final("val").accuracy
    write_csv(args.out, ABLATE_HEADER, rows)
    return "ablate: " + ", ".join(f"{k}={v:.4f}" for k, v in finals.items())


COMMANDS = {
    "bench": _cmd_bench,
    "flops": _cmd_flops,
    "approx-error": _cmd_approx,
    "gradcheck": _cmd_gradcheck,
    "ablate": _cmd_ablate,
    "train-toy": _cmd_train,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command in ("train-toy", "ablate"):
            _encoder_config(args)
        elif args.command == "flops":
            _load_config(args.config)
    except (argparse.ArgumentTypeError, ValueError, TypeError) as exc:
        parser.print_usage(sys.stderr)
        print(f"wersa-bench: error: {exc}", file=sys.stderr)
        return 2
    try:
        summary = COMMANDS[args.command](args)
    except Exception as exc:
        print(f"wersa-bench: {args.command} failed: {exc}", file=sys.stderr)
        return 1
    print(summary, file=sys.stderr if args.out in (None, "-") else sys.stdout)
    return 0


if __name__ == "__main__":
    sys.exit(main())
