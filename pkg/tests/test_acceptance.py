"""Acceptance suite: one test per criterion, run at the stated tolerances.

The terminal summary (see conftest) prints one PASS/FAIL line per criterion.
"""

import csv
import json
import subprocess
import sys
import time
import tracemalloc

import numpy as np
import pytest

from _oracles import hand_filtered, loop_mha, merge
from wersa import autograd as ag
from wersa import wavelet as W
from wersa.attention import ABLATIONS, WersaConfig, init_params, mha_forward, wersa_forward, wersa_graph
from wersa.gradcheck import grad_check
from wersa.harness import FlopsModel, bench, fit_scaling_slope
from wersa.model import EncoderConfig, make_toy_task, train, variant_config
from wersa.spectral import kernel_error_probe, softmax_attention
from wersa.tensor import RngState, sample_gaussian

crit = pytest.mark.criterion


# -- 1 -------------------------------------------------------------------------------


@crit(1, "Haar round trip and Parseval on 200 random inputs")
def test_haar_correctness(measured):
    gen = RngState(2024).generator()
    t0 = time.perf_counter()
    worst_rt = worst_energy = 0.0
    for i in range(200):
        n = int(gen.integers(1, 65))
        d = int(gen.choice([1, 4]))
        levels = int(gen.integers(1, 4))
        x = sample_gaussian(RngState(10_000 + i), (1, 1, n, d))
        p = W.dwt(x, levels, pad_to_levels=True)
        worst_rt = max(worst_rt, float(np.max(np.abs(W.idwt(p) - x))))
        e_x = float(np.sum(x ** 2))
        e_c = sum(float(np.sum(b ** 2)) for b in p.blocks)
        worst_energy = max(worst_energy, abs(e_c - e_x) / e_x)
    elapsed = time.perf_counter() - t0
    measured(f"max |idwt(dwt(x))-x|={worst_rt:.1e}, max energy rel err={worst_energy:.1e}, {elapsed:.2f}s")
    assert worst_rt < 1e-9
    assert worst_energy < 1e-9
    assert elapsed < 5.0


# -- 2 -------------------------------------------------------------------------------


@crit(2, "exact path matches the softmax multi-head oracle on 50 instances")
def test_oracle_equivalence(measured):
    gen = RngState(77).generator()
    worst = worst_loop = 0.0
    for i in range(50):
        heads = int(gen.choice([1, 2, 4]))
        d_model = heads * int(gen.integers(1, 5))
        n = int(gen.integers(1, 17))
        b = int(gen.integers(1, 4))
        cfg = WersaConfig(d_model=d_model, heads=heads, levels=int(gen.integers(1, 4)), features=8,
                          no_wavelet=True, no_random_features=True, no_adaptive_filters=True,
                          no_scale_weights=True, seed=i)
        params = init_params(cfg)
        x = sample_gaussian(RngState(500 + i), (b, n, d_model))
        out = wersa_forward(x, x, x, cfg, params)
        worst = max(worst, float(np.max(np.abs(out - mha_forward(x, x, x, params, heads)))))
        if i < 10:
            worst_loop = max(worst_loop, float(np.max(np.abs(out - loop_mha(x, params, heads)))))
    measured(f"max |wersa-mha|={worst:.1e}, max |wersa-loop oracle|={worst_loop:.1e}")
    assert worst < 1e-10
    assert worst_loop < 1e-10


# -- 3 -------------------------------------------------------------------------------


@crit(3, "quadratic ablation equals softmax attention on filtered Q_F, K_F")
def test_quadratic_ablation(measured):
    worst = 0.0
    for i in range(20):
        gen = RngState(900 + i).generator()
        heads = int(gen.choice([1, 2, 4]))
        dh = int(gen.integers(1, 5))
        n = int(gen.integers(1, 33))
        levels = int(gen.integers(1, 4))
        cfg = WersaConfig(d_model=heads * dh, heads=heads, levels=levels, features=8, no_random_features=True, seed=i)
        params = init_params(cfg).replace(
            scale_weights=gen.uniform(0.5, 1.5, levels + 1), b_filter=gen.normal(size=levels + 1))
        x = sample_gaussian(RngState(i), (2, n, cfg.d_model))
        qf = hand_filtered(x, params.W_q, params, cfg)
        kf = hand_filtered(x, params.W_k, params, cfg)
        v = (x @ params.W_v).reshape(2, n, heads, dh).transpose(0, 2, 1, 3)
        ref = merge(softmax_attention(qf, kf, v), params)
        worst = max(worst, float(np.max(np.abs(wersa_forward(x, x, x, cfg, params) - ref))))
    measured(f"max abs diff={worst:.1e}")
    assert worst < 1e-10


# -- 4 -------------------------------------------------------------------------------


@crit(4, "random-feature error median strictly decreases over m = 64, 256, 1024")
def test_feature_concentration(measured):
    rng = RngState(0)
    q, k, v = (sample_gaussian(rng, (32, 16)) for _ in range(3))
    t0 = time.perf_counter()
    table = kernel_error_probe(q, k, v, [64, 256, 1024], range(10))
    elapsed = time.perf_counter() - t0
    med = table.medians
    measured(", ".join(f"m={m}: {e:.4f}" for m, e in med.items()) + f", {elapsed:.1f}s")
    assert med[64] > med[256] > med[1024]
    assert elapsed < 30.0


# -- 5 -------------------------------------------------------------------------------


@crit(5, "gradient checks in both norm modes and all ablations")
def test_gradient_checks(measured):
    t0 = time.perf_counter()
    worst, groups = 0.0, 0
    for mode in ("denominator", "layernorm"):
        for variant in ("full",) + ABLATIONS:
            flags = {a: a == variant for a in ABLATIONS}
            cfg = WersaConfig(d_model=8, heads=2, levels=2, features=16, norm_mode=mode, **flags)
            for r in grad_check(cfg, seed=0, h=1e-5, batch=2, seq_len=8):
                assert r.max_rel_err < 1e-3, (mode, variant, r)
                worst = max(worst, r.max_rel_err)
                groups += 1
    elapsed = time.perf_counter() - t0
    measured(f"{groups} groups, max rel err={worst:.1e}, {elapsed:.1f}s")
    assert elapsed < 60.0


# -- 6 -------------------------------------------------------------------------------

SCALING_NS = [1024, 2048, 4096, 8192, 16384]


@pytest.mark.slow
@crit(6, "wall-time slopes and affine FLOPS model")
def test_complexity_scaling(measured):
    t0 = time.perf_counter()
    recs = bench(["wersa", "standard"], SCALING_NS, reps=5, warmup=2, seed=0)
    elapsed = time.perf_counter() - t0
    s_w = fit_scaling_slope([r for r in recs if r.mechanism == "wersa"])
    s_s = fit_scaling_slope([r for r in recs if r.mechanism == "standard"])

    model = FlopsModel(d_model=32, heads=2, features=64, levels=2)
    ns = np.array(SCALING_NS, dtype=float)
    f = np.array([model.attention_flops(int(n)) for n in ns])
    coef = np.polyfit(ns, f, 1)
    residual = float(np.max(np.abs(np.polyval(coef, ns) - f)) / np.max(f))
    measured(f"wersa slope={s_w:.3f}, standard slope={s_s:.3f}, flops affinity residual={residual:.1e}, {elapsed:.0f}s")
    assert 0.8 <= s_w <= 1.3
    assert s_s >= 1.7
    assert residual < 1e-6
    assert elapsed < 300.0


# -- 7 -------------------------------------------------------------------------------


def _record_shapes(monkeypatch):
    shapes = []
    original = ag._node

    def probe(op, value, inputs, ctx=None):
        shapes.append(np.shape(value))
        return original(op, value, inputs, ctx)

    monkeypatch.setattr(ag, "_node", probe)
    return shapes


def _has_square(shapes, n):
    return any(sum(1 for e in s if e >= n) >= 2 for s in shapes)


MEMORY_PATHS = [
    {},
    {"norm_mode": "layernorm"},
    {"no_wavelet": True},
    {"no_adaptive_filters": True},
    {"no_scale_weights": True},
    {"r_init": "orthogonal", "share_random_features": True},
]


@crit(7, "no n x n allocation on any WERSA path at n = 8192")
def test_memory_contract(monkeypatch, measured):
    n = 8192
    x = sample_gaussian(RngState(1), (1, n, 32))
    peaks = []
    for flags in MEMORY_PATHS:
        cfg = WersaConfig(d_model=32, heads=2, features=64, **flags)
        params = init_params(cfg)
        shapes = _record_shapes(monkeypatch)
        tracemalloc.start()
        wersa_forward(x, x, x, cfg, params, cache=W.CoefficientCache())
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()
        peaks.append(peak)
        assert shapes and not _has_square(shapes, n), flags
        # an n x n float64 array alone would be 8 n^2 bytes
        assert peak < n * n, (flags, peak)

        # training graph: forward and backward, every recorded intermediate
        shapes.clear()
        leaves = {k: ag.Var(v) for k, v in params.arrays().items() if k not in ("R_q", "R_k")}
        tracemalloc.start()
        out = wersa_graph(x, x, x, cfg, {**params.arrays(), **leaves}, training=True)
        ag.backward(ag.sum(ag.mul(out, out)), leaves)
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()
        assert not _has_square(shapes, n), flags
        assert peak < 8 * n * n, (flags, peak)
        monkeypatch.undo()
    measured(f"inference peak {max(peaks) / 1e6:.1f} MB vs n^2 = {n * n / 1e6:.1f} MB")


@crit(7, "no n x n allocation on any WERSA path at n = 8192")
def test_memory_probe_detects_quadratic_paths(monkeypatch):
    n = 2048
    x = sample_gaussian(RngState(2), (1, n, 16))
    cfg = WersaConfig(d_model=16, heads=2, features=16, no_random_features=True)
    shapes = _record_shapes(monkeypatch)
    wersa_forward(x, x, x, cfg, init_params(cfg))
    assert _has_square(shapes, n)
    monkeypatch.undo()
    tracemalloc.start()
    mha_forward(x, x, x, init_params(cfg), 2)
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    assert peak >= 8 * n * n


# -- 8 and 10 share the toy runs -----------------------------------------------------

TOY = dict(seed=0, n=128, size=1500)


@pytest.fixture(scope="session")
def toy_runs():
    task = make_toy_task(TOY["seed"], TOY["n"], TOY["size"])
    base = EncoderConfig(max_len=TOY["n"], epochs=20, seed=TOY["seed"])
    cache = {}

    def run(variant):
        if variant not in cache:
            t0 = time.perf_counter()
            result = train(variant_config(base, variant), task)
            cache[variant] = (result, time.perf_counter() - t0)
        return cache[variant]

    return run


@pytest.mark.slow
@crit(8, "toy task: val accuracy >= 0.90 in 20 epochs, epoch-5 loss < epoch-1 loss")
def test_toy_trainability(toy_runs, measured):
    result, elapsed = toy_runs("full")
    val = [r for r in result.log if r.split == "val"]
    train_loss = {r.epoch: r.loss for r in result.log if r.split == "train"}
    best = max(r.accuracy for r in val)
    first = next(r.epoch for r in val if r.accuracy >= 0.90) if best >= 0.90 else None
    measured(f"final val acc={val[-1].accuracy:.3f} (>=0.90 from epoch {first}), "
             f"train loss e1={train_loss[1]:.4f} e5={train_loss[5]:.4f}, {elapsed:.0f}s")
    assert len(val) == 20
    assert val[-1].accuracy >= 0.90
    assert train_loss[5] < train_loss[1]
    assert elapsed < 600.0


# -- 9 -------------------------------------------------------------------------------

_SMALL_ENCODER = {"d_model": 8, "heads": 2, "ffn_dim": 8, "features": 8, "batch_size": 8}


def _cli(args, out):
    subprocess.run([sys.executable, "-m", "wersa", *args, "--seed", "5", "--out", str(out)],
                   check=True, capture_output=True)
    with open(out, newline="") as fh:
        rows = list(csv.reader(fh))
    if "median_seconds" in rows[0]:
        col = rows[0].index("median_seconds")
        rows = [r[:col] + r[col + 1:] for r in rows]
    return rows


@crit(9, "CSV outputs byte-identical across runs apart from wall time")
def test_determinism(tmp_path, measured):
    cfg = tmp_path / "enc.json"
    cfg.write_text(json.dumps(_SMALL_ENCODER))
    commands = {
        "bench": ["bench", "--mech", "wersa,standard,no_wavelet", "--n", "64,128,256,512", "--reps", "5"],
        "flops": ["flops", "--config", "arxiv-like"],
        "approx-error": ["approx-error", "--m", "16,64", "--seeds", "4", "--n", "16", "--dh", "8"],
        "gradcheck": ["gradcheck"],
        "train-toy": ["train-toy", "--n", "32", "--size", "40", "--epochs", "2", "--config", str(cfg)],
        "ablate": ["ablate", "--n", "32", "--size", "40", "--epochs", "1", "--config", str(cfg)],
    }
    for name, args in commands.items():
        first = _cli(args, tmp_path / f"{name}-1.csv")
        second = _cli(args, tmp_path / f"{name}-2.csv")
        assert len(first) > 1, name
        assert first == second, name
    for name in ("flops", "approx-error", "gradcheck", "train-toy", "ablate"):
        assert (tmp_path / f"{name}-1.csv").read_bytes() == (tmp_path / f"{name}-2.csv").read_bytes(), name
    measured(f"{len(commands)} commands compared")


# -- 10 ------------------------------------------------------------------------------


@pytest.mark.slow
@crit(10, "full model within 0.02 of every single ablation on the toy task")
def test_ablation_ordering(toy_runs, measured):
    full = toy_runs("full")[0].final("val").accuracy
    scores = {v: toy_runs(v)[0].final("val").accuracy for v in ABLATIONS}
    measured(f"full={full:.3f}, " + ", ".join(f"{k}={v:.3f}" for k, v in scores.items()))
    for variant, acc in scores.items():
        assert full >= acc - 0.02, (variant, full, acc)
