import json

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lfl import cli, io


def _cfg(path, **kv):
    path.write_text("".join(f"{k} = {v}\n" for k, v in kv.items()))
    return str(path)


def _run(*args):
    return cli.main([str(a) for a in args])


@pytest.fixture
def generated(tmp_path):
    out = tmp_path / "data"
    assert _run("generate", "--config", _cfg(tmp_path / "g.cfg", N=120, D=8, K=4, seed=5), "--out", out) == 0
    return out


# ---------------------------------------------------------------------------
# io


def test_parse_config_types_and_comments():
    c = io.parse_config_text("# comment\nmodels = fa, afa-em\nKs=10,20\nseeds = 2  # trailing\n", "benchmark")
    assert c["models"] == ["fa", "afa-em"] and c["Ks"] == [10, 20] and c["seeds"] == 2
    c = io.parse_config_text("data = x.csv\nK = 3\ncenter = yes\nL = auto\n", "fit")
    assert c["center"] is True and c["L"] is None


@pytest.mark.parametrize("text,match", [
    ("bogus = 1\n", "unknown key"),
    ("K = three\ndata = a\n", "bad value"),
    ("K 3\n", "expected"),
    ("K = 3\n", "missing required"),
    ("data = a\nK = 2\ncenter = maybe\n", "bad value"),
])
def test_parse_config_rejects(text, match):
    with pytest.raises(io.ConfigError, match=match):
        io.parse_config_text(text, "fit")


def test_format_config_round_trips():
    c = io.parse_config_text("patterns = sparse,dense\nKs = 4\n", "benchmark")
    assert io.parse_config_text(io.format_config(c), "benchmark") == c


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)),
              elements=st.floats(allow_nan=False, allow_infinity=False, width=64)))
def test_csv_round_trip_lossless(tmp_path_factory, M):
    p = tmp_path_factory.mktemp("csv") / "m.csv"
    io.write_csv(p, M)
    assert np.array_equal(io.read_csv(p), M)


def test_csv_integers_and_errors(tmp_path):
    io.write_csv(tmp_path / "z.csv", np.array([[1, 0], [0, 1]], np.int8))
    assert (tmp_path / "z.csv").read_text() == "1,0\n0,1\n"
    with pytest.raises(OSError):
        io.read_csv(tmp_path / "missing.csv")


def test_json_nan_becomes_null(tmp_path):
    io.write_json(tmp_path / "a.json", {"x": float("nan"), "y": np.float32(1.5), "z": [np.int64(2)]})
    assert json.loads((tmp_path / "a.json").read_text()) == {"x": None, "y": 1.5, "z": [2]}


# ---------------------------------------------------------------------------
# generate


def test_generate_outputs(tmp_path):
    out = tmp_path / "g"
    assert _run("generate", "--config", _cfg(tmp_path / "g.cfg", N=1000, D=50, pattern="balanced"), "--out", out) == 0
    Y = io.read_csv(out / "data.csv")
    assert Y.shape == (1000, 50)
    assert io.read_csv(out / "truth_W.csv").shape == (50, 10)
    assert io.read_csv(out / "truth_Z.csv").shape == (1000, 10)
    meta = json.loads((out / "meta.json").read_text())
    assert meta["seed"] == 0 and meta["pattern"] == "balanced" and meta["D"] == 50
    assert "pattern = balanced" in (out / "config.resolved").read_text()


def test_generate_deterministic_and_lossless(tmp_path):
    from lfl.synth import GenConfig, generate_dataset

    cfg = _cfg(tmp_path / "g.cfg", N=50, D=6, K=3, pattern="sparse")
    for d in ("a", "b"):
        assert _run("generate", "--config", cfg, "--out", tmp_path / d, "--seed", 11) == 0
    for f in ("data.csv", "truth_W.csv", "truth_X.csv", "truth_Z.csv", "meta.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    ds, _ = generate_dataset(GenConfig("sparse", N=50, D=6, K=3, seed=11), np.random.default_rng(11))
    assert np.array_equal(io.read_csv(tmp_path / "a" / "data.csv"), ds.Y.T)


def test_generate_scene(tmp_path):
    out = tmp_path / "s"
    assert _run("generate", "--config", _cfg(tmp_path / "g.cfg", pattern="three_subspace", N=90, sigma=0.02),
                "--out", out) == 0
    assert io.read_csv(out / "data.csv").shape == (90, 3)
    assert np.all(io.read_csv(out / "truth_Z.csv").sum(axis=1) == 2)


def test_generate_config_errors(tmp_path, capsys):
    assert _run("generate", "--config", _cfg(tmp_path / "g.cfg", pattern="zigzag")) == 1
    assert _run("generate", "--config", _cfg(tmp_path / "g.cfg", K=3, L=5)) == 1
    assert _run("generate", "--config", _cfg(tmp_path / "g.cfg", pattern="three_subspace", N=10)) == 1
    assert _run("generate", "--config", tmp_path / "nope.cfg") == 1
    assert _run("generate", "--config", _cfg(tmp_path / "g.cfg", N=10), "--seed", -1) == 1
    assert "config error" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# fit


@pytest.mark.parametrize("model", cli.MODELS)
def test_fit_every_model(tmp_path, generated, model):
    out = tmp_path / model
    cfg = _cfg(tmp_path / "f.cfg", data=generated / "data.csv", model=model, K=4, L=2, iters=5)
    assert _run("fit", "--config", cfg, "--out", out) == 0
    report = json.loads((out / "report.json").read_text())
    jsonschema.validate(report, io.REPORT_SCHEMA)
    W, X, Z = (io.read_csv(out / f"model_{m}.csv") for m in "WXZ")
    assert W.shape[0] == 8 and X.shape == Z.shape and X.shape[0] == 120
    assert len(report["popularity"]) == W.shape[1] == Z.shape[1]
    if model == "pca":
        assert report["loglik_trace"] == [] and len(report["eigvals"]) == 4
    if model in ("afa-em", "afa-gibbs", "appca"):
        assert np.all(Z.sum(axis=1) == 2)


def test_fit_afa_em_rerun_identical(tmp_path, generated):
    cfg = _cfg(tmp_path / "f.cfg", data=generated / "data.csv", model="afa-em", K=4, L=2, iters=20)
    reports = []
    for d in ("a", "b"):
        assert _run("fit", "--config", cfg, "--out", tmp_path / d) == 0
        r = json.loads((tmp_path / d / "report.json").read_text())
        r.pop("wall_seconds")
        r["config"].pop("out")
        reports.append(r)
    assert reports[0] == reports[1]
    assert (tmp_path / "a" / "model_W.csv").read_bytes() == (tmp_path / "b" / "model_W.csv").read_bytes()


def test_fit_appca_scene_column_sums(tmp_path):
    _run("generate", "--config", _cfg(tmp_path / "g.cfg", pattern="three_subspace", N=150), "--out", tmp_path / "s")
    cfg = _cfg(tmp_path / "f.cfg", data=tmp_path / "s" / "data.csv", model="appca", K=3, L=2, iters=20)
    assert _run("fit", "--config", cfg, "--out", tmp_path / "m") == 0
    assert np.all(io.read_csv(tmp_path / "m" / "model_Z.csv").sum(axis=1) == 2)


def test_fit_errors(tmp_path, generated):
    data = generated / "data.csv"
    assert _run("fit", "--config", _cfg(tmp_path / "a.cfg", data=tmp_path / "none.csv", K=2)) == 2
    assert _run("fit", "--config", _cfg(tmp_path / "b.cfg", data=data, K=2, model="zzz")) == 1
    assert _run("fit", "--config", _cfg(tmp_path / "c.cfg", data=data, K=3, L=4)) == 1
    assert _run("fit", "--config", _cfg(tmp_path / "d.cfg", data=data, K=9, model="appca", L=2)) == 1
    assert _run("fit", "--config", _cfg(tmp_path / "e.cfg", data=data, K=2, L=1, score="bogus")) == 1


# ---------------------------------------------------------------------------
# project


def test_project_partitions_points(tmp_path):
    _run("generate", "--config", _cfg(tmp_path / "g.cfg", pattern="three_subspace", N=60), "--out", tmp_path / "s")
    _run("fit", "--config", _cfg(tmp_path / "f.cfg", data=tmp_path / "s" / "data.csv", model="appca", K=3, L=2,
                                 iters=10), "--out", tmp_path / "m")
    assert _run("project", "--config", _cfg(tmp_path / "p.cfg", model_dir=tmp_path / "m"), "--out", tmp_path / "p") == 0
    files = sorted((tmp_path / "p").glob("subset_*.csv"))
    assert 1 <= len(files) <= 3
    ids = []
    for f in files:
        lines = f.read_text().splitlines()
        assert lines[0].startswith("point,") and len(lines[0].split(",")) == 4
        ids += [int(line.split(",")[0]) for line in lines[1:]]
    assert sorted(ids) == list(range(60))


def test_project_missing_files(tmp_path):
    assert _run("project", "--config", _cfg(tmp_path / "p.cfg", model_dir=tmp_path / "none")) == 2
    assert _run("project", "--config", _cfg(tmp_path / "p.cfg", model_dir=tmp_path), "--seed", 3) == 1


# ---------------------------------------------------------------------------
# benchmark


def _bench_cfg(tmp_path):
    return _cfg(tmp_path / "b.cfg", patterns="sparse,balanced", Ks="4", models="fa,afa-em", seeds=2, N=80, D=8,
                iters_em=10, iters_gibbs=10)


def test_benchmark_table_and_resume(tmp_path):
    out = tmp_path / "bench"
    assert _run("benchmark", "--config", _bench_cfg(tmp_path), "--out", out) == 0
    lines = (out / "table.csv").read_text().splitlines()
    assert lines[0] == "pattern,K,fa,afa-em,seeds,rank"
    assert len(lines) == 3
    assert all(row.split(",")[4] == "2" for row in lines[1:])
    assert len(list((out / "cells").glob("*.json"))) == 8
    assert json.loads((out / "benchmark.json").read_text())["ran"] == 8
    before = (out / "table.csv").read_text()
    assert _run("benchmark", "--config", _bench_cfg(tmp_path), "--out", out) == 0
    assert json.loads((out / "benchmark.json").read_text())["ran"] == 0
    assert (out / "table.csv").read_text() == before


def test_benchmark_records_failures(tmp_path, monkeypatch):
    real = cli.fit_model

    def flaky(model, ds, cfg):
        if model == "fa":
            raise RuntimeError("boom")
        return real(model, ds, cfg)

    monkeypatch.setattr(cli, "fit_model", flaky)
    out = tmp_path / "bench"
    assert _run("benchmark", "--config", _bench_cfg(tmp_path), "--out", out) == 0
    cell = json.loads(next((out / "cells").glob("*_fa_s0.json")).read_text())
    assert cell["mae"] is None and "boom" in cell["error"]
    row = (out / "table.csv").read_text().splitlines()[1].split(",")
    assert row[2] == "nan" and row[5] == "afa-em"


def test_benchmark_seeds_independent_of_threads(tmp_path):
    cfg = io.parse_config_text("patterns = sparse\nKs = 4\nmodels = fa,afa-em\nseeds = 2\n", "benchmark")
    cells = cli.benchmark_cells(cfg)
    assert cells[0]["data_seed"] == cells[1]["data_seed"] != cells[2]["data_seed"]
    assert len({c["fit_seed"] for c in cells}) == len(cells)
    assert cli.benchmark_cells(cfg) == cells


def test_benchmark_rejects_unknown_names(tmp_path):
    assert _run("benchmark", "--config", _cfg(tmp_path / "b.cfg", patterns="wavy"), "--out", tmp_path / "o") == 1
    assert _run("benchmark", "--config", _cfg(tmp_path / "b.cfg", models="lda"), "--out", tmp_path / "o") == 1
    assert _run("benchmark", "--config", _cfg(tmp_path / "b.cfg"), "--threads", 0) == 1


def test_log_level_env(tmp_path, monkeypatch, generated):
    monkeypatch.setenv("LFL_LOG", "debug")
    cfg = _cfg(tmp_path / "f.cfg", data=generated / "data.csv", model="pca", K=2)
    assert _run("fit", "--config", cfg, "--out", tmp_path / "o") == 0
