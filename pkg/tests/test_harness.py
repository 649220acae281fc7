import csv
import json

import numpy as np
import pytest

from wersa.harness import (
    APPROX_HEADER,
    BENCH_HEADER,
    FLOPS_HEADER,
    GRADCHECK_HEADER,
    PRESETS,
    TRAIN_HEADER,
    BenchRecord,
    FlopsModel,
    InsufficientDataError,
    bench,
    fit_scaling_slope,
    main,
)
from wersa.model import load_checkpoint

NS = [1024, 2048, 4096, 8192, 16384]


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.mark.parametrize("power", [1, 2])
def test_slope_of_exact_power_law(power):
    pts = [(n, 3e-7 * n ** power) for n in NS]
    assert abs(fit_scaling_slope(pts) - power) < 1e-6


def test_slope_accepts_records():
    recs = [BenchRecord("wersa", n, 5, 2e-6 * n, 0.0, 0.0) for n in NS]
    assert abs(fit_scaling_slope(recs) - 1.0) < 1e-6


def test_slope_needs_enough_points():
    with pytest.raises(InsufficientDataError):
        fit_scaling_slope([(1024, 1.0), (2048, 2.0), (8192, 8.0)])
    with pytest.raises(InsufficientDataError):
        fit_scaling_slope([(1024, 1.0), (1200, 1.1), (1500, 1.4), (2000, 2.0)])


@pytest.mark.parametrize("mechanism", ["wersa", "no_wavelet", "no_adaptive_filters", "no_scale_weights"])
def test_linear_mechanisms_are_affine_in_n(mechanism):
    model = FlopsModel(**{k: PRESETS["arxiv-like"][k] for k in ("d_model", "heads", "features", "levels")})
    gaps = [model.attention_flops(2 * n, mechanism) - 2 * model.attention_flops(n, mechanism) for n in NS]
    assert max(abs(g - gaps[0]) for g in gaps) <= 1e-6 * model.attention_flops(NS[-1], mechanism)


def test_quadratic_ratio_tends_to_four():
    model = FlopsModel(d_model=64, heads=4, features=64, levels=2)
    ratios = [model.attention_flops(2 * n, "standard") / model.attention_flops(n, "standard") for n in (2 ** 10, 2 ** 14, 2 ** 20)]
    assert ratios[0] < ratios[1] < ratios[2] < 4
    assert abs(ratios[2] - 4) < 1e-3


def test_arxiv_preset_ratio():
    model = FlopsModel(**{k: PRESETS["arxiv-like"][k] for k in ("d_model", "heads", "features", "levels")})
    ratio = lambda n: model.attention_flops(n, "standard") / model.attention_flops(n, "wersa")  # noqa: E731
    assert ratio(4096) == pytest.approx(1.80, abs=0.005)
    assert ratio(8192) > 2 and ratio(16384) > ratio(8192)


@pytest.mark.xfail(strict=True, reason="with m=1024 the cores only break even near n=2m; projections keep the ratio below 2 at 4096")
def test_arxiv_preset_ratio_exceeds_two_at_4096():
    model = FlopsModel(**{k: PRESETS["arxiv-like"][k] for k in ("d_model", "heads", "features", "levels")})
    assert model.attention_flops(4096, "standard") / model.attention_flops(4096, "wersa") > 2


def test_memory_model_orders_mechanisms():
    model = FlopsModel(d_model=32, heads=2, features=64, levels=2)
    assert model.mem_bytes(8192, "standard") > 8192 ** 2 * 8
    assert model.mem_bytes(8192, "wersa") < 8192 ** 2
    assert model.mem_bytes(8192, "no_random_features") > 8192 ** 2 * 8


def test_bench_requires_repetitions():
    with pytest.raises(ValueError):
        bench(["wersa"], [64], reps=3)
    with pytest.raises(ValueError):
        bench(["softmax"], [64])


def test_cli_unknown_flag_exits_two(capsys):
    assert main(["bench", "--bogus"]) == 2
    assert "usage" in capsys.readouterr().err
    assert main(["frobnicate"]) == 2
    assert main(["bench", "--mech", "fast"]) == 2
    assert main(["flops", "--config", "imagenet-like"]) == 2


def test_cli_bench_schema(tmp_path):
    out = tmp_path / "bench.csv"
    assert main(["bench", "--mech", "wersa,standard", "--n", "64,128,256,512", "--reps", "5", "--seed", "7",
                 "--out", str(out)]) == 0
    rows = read_csv(out)
    assert rows[0] == BENCH_HEADER
    assert [(r[0], int(r[1])) for r in rows[1:]] == [(m, n) for m in ("wersa", "standard") for n in (64, 128, 256, 512)]
    assert all(int(r[2]) == 5 and float(r[3]) > 0 for r in rows[1:])


def test_cli_flops_schema(tmp_path, capsys):
    out = tmp_path / "flops.csv"
    assert main(["flops", "--config", "arxiv-like", "--n", "4096", "--out", str(out)]) == 0
    rows = read_csv(out)
    assert rows[0] == FLOPS_HEADER
    by_mech = {r[0]: float(r[2]) for r in rows[1:]}
    assert by_mech["standard"] > by_mech["wersa"]
    assert "standard/wersa=1.80" in capsys.readouterr().out


def test_cli_flops_json_config(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"layers": 1, "d_model": 16, "heads": 2, "features": 8, "levels": 1}))
    out = tmp_path / "flops.csv"
    assert main(["flops", "--config", str(cfg), "--n", "64,128", "--out", str(out)]) == 0
    assert len(read_csv(out)) == 5


def test_cli_approx_schema(tmp_path):
    out = tmp_path / "approx.csv"
    assert main(["approx-error", "--m", "8,32", "--seeds", "3", "--n", "8", "--dh", "4", "--out", str(out)]) == 0
    rows = read_csv(out)
    assert rows[0] == APPROX_HEADER
    assert len(rows) == 1 + 6 + 2
    assert [r[1] for r in rows[-2:]] == ["median", "median"]
    assert np.isfinite([float(r[2]) for r in rows[1:]]).all()


def test_cli_gradcheck_schema(tmp_path):
    out = tmp_path / "grad.csv"
    assert main(["gradcheck", "--seed", "1", "--out", str(out)]) == 0
    rows = read_csv(out)
    assert rows[0] == GRADCHECK_HEADER
    assert {r[0].split("/")[0] for r in rows[1:]} == {"denominator", "layernorm"}
    assert all(float(r[1]) < 1e-3 for r in rows[1:])


def test_cli_train_and_checkpoint(tmp_path):
    out, ckpt = tmp_path / "train.csv", tmp_path / "m.ckpt"
    cfg = tmp_path / "enc.json"
    cfg.write_text(json.dumps({"d_model": 8, "heads": 2, "ffn_dim": 8, "features": 8, "batch_size": 8}))
    assert main(["train-toy", "--n", "32", "--size", "20", "--epochs", "2", "--config", str(cfg),
                 "--checkpoint", str(ckpt), "--out", str(out)]) == 0
    rows = read_csv(out)
    assert rows[0] == TRAIN_HEADER
    assert [r[:2] for r in rows[1:]] == [["1", "train"], ["1", "val"], ["2", "train"], ["2", "val"]]
    loaded_cfg, params, _ = load_checkpoint(ckpt)
    assert loaded_cfg.d_model == 8 and loaded_cfg.max_len == 32 and "head_W" in params


def test_cli_rejects_bad_encoder_config(tmp_path):
    cfg = tmp_path / "enc.json"
    cfg.write_text(json.dumps({"d_model": 10, "heads": 4}))
    assert main(["train-toy", "--config", str(cfg)]) == 2
    cfg.write_text(json.dumps({"colour": "red"}))
    assert main(["ablate", "--config", str(cfg)]) == 2
