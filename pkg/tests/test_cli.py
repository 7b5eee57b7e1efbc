import csv
import json
import subprocess
import sys
import time

import numpy as np
import pytest

from bne import data as bd
from bne.cli import main

FAST = ["--chains", "1", "--warmup", "100", "--samples", "100", "--n-anchor", "12", "--n-pins", "4"]


def run(args, cwd, monkeypatch):
    monkeypatch.chdir(cwd)
    return main([str(a) for a in args])


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def bne_fit(tmp_path_factory):
    """A small bne fit shared by the report tests."""
    d = tmp_path_factory.mktemp("bne")
    import os
    old = os.getcwd()
    os.chdir(d)
    try:
        assert main(["simulate", "--n", "60", "--seed", "3", "--tamed", "--out", "d.csv"]) == 0
        assert main(["fit", "--data", "d.csv", "--model", "bne", "--out", "b.csv", "--seed", "1"] + FAST) == 0
    finally:
        os.chdir(old)
    return d


def test_simulate_is_deterministic(tmp_path, monkeypatch):
    assert run(["simulate", "--n", 100, "--seed", 7, "--out", "a.csv"], tmp_path, monkeypatch) == 0
    assert run(["simulate", "--n", 100, "--seed", 7, "--out", "b.csv", "--truth", "a2.truth.json"],
               tmp_path, monkeypatch) == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.truth.json").read_bytes() == (tmp_path / "a2.truth.json").read_bytes()


def test_simulate_rejects_zero_n(tmp_path, monkeypatch, capsys):
    with pytest.raises(SystemExit) as exc:
        run(["simulate", "--n", 0, "--out", "a.csv"], tmp_path, monkeypatch)
    assert exc.value.code == 2
    assert "--n" in capsys.readouterr().err


def test_simulated_file_round_trips(tmp_path, monkeypatch):
    run(["simulate", "--n", 40, "--seed", 1, "--out", "a.csv"], tmp_path, monkeypatch)
    ds = bd.load_csv(tmp_path / "a.csv")
    ref, truth = bd.simulate(bd.SyntheticSpec(n=40, seed=1))
    assert np.array_equal(ds.X, ref.X) and np.array_equal(ds.y, ref.y)
    saved = bd.Truth.from_dict(json.loads((tmp_path / "a.truth.json").read_text(encoding="utf-8")))
    assert saved.spec == truth.spec


def test_seed_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("BNE_SEED", "7")
    run(["simulate", "--n", 30, "--out", "env.csv"], tmp_path, monkeypatch)
    monkeypatch.delenv("BNE_SEED")
    run(["simulate", "--n", 30, "--seed", 7, "--out", "flag.csv"], tmp_path, monkeypatch)
    assert (tmp_path / "env.csv").read_bytes() == (tmp_path / "flag.csv").read_bytes()


def _toy_with_base(path, n=20):
    rng = np.random.default_rng(0)
    x = np.sort(rng.uniform(-3, 3, n))
    f = np.column_stack([np.sin(x), 0.3 * x])
    bd.save_csv(bd.Dataset(x[:, None], np.sin(x) + 0.2 * rng.standard_normal(n), f), path)


def test_fit_original_fast_and_exact(tmp_path, monkeypatch):
    _toy_with_base(tmp_path / "toy.csv")
    t0 = time.perf_counter()
    assert run(["fit", "--data", "toy.csv", "--model", "original", "--out", "o.csv"], tmp_path, monkeypatch) == 0
    assert time.perf_counter() - t0 < 5
    meta = json.loads((tmp_path / "o.json").read_text(encoding="utf-8"))
    assert meta["acceptance_rate"] == 1.0 and meta["status"] == "ok"
    assert len(read_csv(tmp_path / "o.csv")) == 4000
    assert "fit_seconds" in json.loads((tmp_path / "o.timing.json").read_text(encoding="utf-8"))


def test_fit_bne_reproducible(tmp_path, monkeypatch):
    _toy_with_base(tmp_path / "toy.csv")
    for out in ("a.csv", "b.csv"):
        assert run(["fit", "--data", "toy.csv", "--model", "bne", "--samples", 200, "--warmup", 200,
                    "--chains", 1, "--n-anchor", 10, "--n-pins", 4, "--seed", 3, "--out", out],
                   tmp_path, monkeypatch) == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_negative_lambda_rejected(tmp_path, monkeypatch, capsys):
    _toy_with_base(tmp_path / "toy.csv")
    with pytest.raises(SystemExit) as exc:
        run(["fit", "--data", "toy.csv", "--lambda", -1, "--out", "o.csv"], tmp_path, monkeypatch)
    assert exc.value.code == 2
    assert "--lambda" in capsys.readouterr().err


def test_config_precedence(tmp_path, monkeypatch):
    _toy_with_base(tmp_path / "toy.csv")
    (tmp_path / "c.json").write_text(json.dumps({"model": "original", "samples": 7, "chains": 2}), encoding="utf-8")
    run(["fit", "--data", "toy.csv", "--config", "c.json", "--samples", 5, "--out", "o.csv"], tmp_path, monkeypatch)
    cfg = json.loads((tmp_path / "o.json").read_text(encoding="utf-8"))["config"]
    assert cfg["model"] == "original" and cfg["samples"] == 5 and cfg["chains"] == 2
    (tmp_path / "bad.json").write_text(json.dumps({"bogus": 1}), encoding="utf-8")
    assert run(["fit", "--data", "toy.csv", "--config", "bad.json", "--out", "o.csv"], tmp_path, monkeypatch) == 2


def test_fit_bad_data_exits_2(tmp_path, monkeypatch):
    (tmp_path / "bad.csv").write_text("x1,z\n1,2\n", encoding="utf-8")
    assert run(["fit", "--data", "bad.csv", "--out", "o.csv"], tmp_path, monkeypatch) == 2


def test_fit_stacking_writes_weights(tmp_path, monkeypatch):
    run(["simulate", "--n", 60, "--seed", 2, "--tamed", "--out", "d.csv"], tmp_path, monkeypatch)
    assert run(["fit", "--data", "d.csv", "--model", "stacking", "--out", "w.csv"], tmp_path, monkeypatch) == 0
    rows = read_csv(tmp_path / "w.csv")
    assert len(rows) == 1 and sum(float(rows[0][f"pi_{k}"]) for k in (1, 2, 3)) == pytest.approx(1.0)
    run(["simulate", "--n", 30, "--seed", 9, "--tamed", "--out", "t.csv"], tmp_path, monkeypatch)
    assert run(["report", "--draws", "w.csv", "--what", "metrics", "--test", "t.csv", "--truth", "d.truth.json",
                "--out", "m.csv"], tmp_path, monkeypatch) == 0
    q = {r["quantity"] for r in read_csv(tmp_path / "m.csv")}
    assert {"rmse_empirical", "coverage_index", "cvm", "rmse_vs_truth", "l1_vs_truth"} <= q


def test_report_missing_draws(tmp_path, monkeypatch):
    assert run(["report", "--draws", "nope.csv", "--what", "bias", "--out", "r.csv"], tmp_path, monkeypatch) == 2


def test_bias_schema_depends_on_model(tmp_path, monkeypatch, bne_fit):
    (tmp_path / "d.csv").write_bytes((bne_fit / "d.csv").read_bytes())
    assert run(["fit", "--data", "d.csv", "--model", "bae", "--out", "a.csv", "--seed", "1"] + FAST,
               tmp_path, monkeypatch) == 0
    assert run(["report", "--draws", "a.csv", "--what", "bias", "--grid-points", 8, "--out", "r.csv"],
               tmp_path, monkeypatch) == 0
    cols = read_csv(tmp_path / "r.csv")[0].keys()
    assert "D_delta" in cols and "D_G" not in cols
    assert run(["report", "--draws", bne_fit / "b.csv", "--what", "bias", "--grid-points", 8,
                "--out", "rb.csv"], tmp_path, monkeypatch) == 0
    rows = read_csv(tmp_path / "rb.csv")
    assert len(rows) == 8 and {"D_delta", "P_delta_pos", "D_G", "P_G_pos"} <= set(rows[0])
    long = read_csv(tmp_path / "rb.long.csv")
    assert set(long[0]) == {"x1", "quantity", "value", "mc_se"} and len(long) == 8 * 4


def test_decompose_checks_pass(tmp_path, monkeypatch, bne_fit):
    assert run(["report", "--draws", bne_fit / "b.csv", "--what", "decompose", "--decomposition", "entropy",
                "--grid-points", 6, "--n-boot", 50, "--out", "e.csv"], tmp_path, monkeypatch) == 0
    meta = json.loads((tmp_path / "e.json").read_text(encoding="utf-8"))
    assert meta["checks"] and all(meta["checks"].values())
    rows = read_csv(tmp_path / "e.long.csv")
    assert {r["quantity"] for r in rows} == {"total_entropy", "aleatoric", "epistemic_total", "structural_G",
                                             "structural_delta", "parametric"}


def test_variance_needs_bne(tmp_path, monkeypatch):
    _toy_with_base(tmp_path / "toy.csv")
    run(["fit", "--data", "toy.csv", "--model", "original", "--samples", 50, "--out", "o.csv"], tmp_path, monkeypatch)
    assert run(["report", "--draws", "o.csv", "--what", "decompose", "--decomposition", "variance",
                "--test", "toy.csv", "--out", "v.csv"], tmp_path, monkeypatch) == 2


def test_report_is_byte_identical(tmp_path, monkeypatch, bne_fit):
    for out in ("a.csv", "b.csv"):
        assert run(["report", "--draws", bne_fit / "b.csv", "--what", "bias", "--grid-points", 5,
                    "--statistics", "variance", "--out", out], tmp_path, monkeypatch) == 0
    for suffix in (".csv", ".long.csv", ".json"):
        assert (tmp_path / f"a{suffix}").read_bytes() == (tmp_path / f"b{suffix}").read_bytes()


def test_benchmark_row_count(tmp_path, monkeypatch):
    args = ["benchmark", "--n", 100, 200, 400, "--seeds", 5, "--models", "stacking", "original",
            "--n-test", 30, "--out", "bench.csv"]
    assert run(args, tmp_path, monkeypatch) == 0
    rows = read_csv(tmp_path / "bench.csv")
    keys = {(r["model"], r["n"], r["seed"], r["metric"]) for r in rows}
    assert len(rows) == len(keys) == 2 * 3 * 5 * 5
    summary = read_csv(tmp_path / "bench.summary.csv")
    assert len(summary) == 2 * 3 * 5


def test_benchmark_parallel_matches_serial(tmp_path, monkeypatch):
    base = ["benchmark", "--n", 40, "--seeds", 2, "--models", "stacking", "original", "--n-test", 20]
    assert run(base + ["--out", "s.csv"], tmp_path, monkeypatch) == 0
    assert run(base + ["--jobs", 2, "--out", "p.csv"], tmp_path, monkeypatch) == 0
    assert (tmp_path / "s.csv").read_bytes() == (tmp_path / "p.csv").read_bytes()


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "bne.cli", "--help"], capture_output=True, text=True, cwd=tmp_path)
    assert res.returncode == 0 and "simulate" in res.stdout and "Exit codes" in res.stdout
