"""Command-line entry point: generate, fit, benchmark and project."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from lfl import allocation, io
from lfl.afa import SCORES, AfaConfig, fit_afa
from lfl.baselines import SparseFaConfig, fit_sparse_fa, pca_fit, ppca_ml
from lfl.core import Dataset, FitReport, Hyperpriors, LatentState, center, mae, rmse_per_row
from lfl.io import ConfigError
from lfl.subspace import AppcaConfig, BnpConfig, fit_appca, fit_bnp_ppca
from lfl.synth import PATTERNS, GenConfig, generate_dataset, generate_three_subspace_scene

log = logging.getLogger("lfl")

MODELS = ("afa-em", "afa-gibbs", "appca", "bnp-ppca", "fa", "fsfa", "isfa", "pca", "ppca")
SCENE = "three_subspace"


# ---------------------------------------------------------------------------
# generate


def cmd_generate(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg["seed"])
    if cfg["pattern"] == SCENE:
        if cfg["N"] % 3:
            raise ConfigError("three_subspace needs N divisible by 3")
        ds, truth = generate_three_subspace_scene(cfg["N"], rng, sigma=cfg["sigma"])
        W, X, Z = truth.directions, truth.X, truth.Z
        meta = {"pattern": SCENE, "N": cfg["N"], "D": 3, "K": 3, "L": 2, "sigma": cfg["sigma"], "seed": cfg["seed"]}
    else:
        if cfg["pattern"] not in PATTERNS:
            raise ConfigError(f"unknown pattern {cfg['pattern']!r}; expected one of {PATTERNS + (SCENE,)}")
        try:
            gen = GenConfig(**{k: cfg[k] for k in ("pattern", "N", "D", "K", "L", "sigma", "sigma_W", "seed",
                                                    "alpha", "dense_rate", "n_blocks", "single_state")})
        except ValueError as e:
            raise ConfigError(str(e)) from None
        ds, truth = generate_dataset(gen, rng)
        W, X, Z = truth.W, truth.X, truth.Z
        meta = gen.resolved()
    io.write_csv(out / "data.csv", ds.Y.T)
    io.write_csv(out / "truth_W.csv", W)
    io.write_csv(out / "truth_X.csv", X.T)
    io.write_csv(out / "truth_Z.csv", Z.T.astype(int))
    io.write_json(out / "meta.json", meta)
    (out / "config.resolved").write_text(io.format_config(cfg))
    return out


# ---------------------------------------------------------------------------
# fit


def _hyper(cfg) -> Hyperpriors:
    return Hyperpriors(cfg["gamma"], cfg["vartheta"], cfg["lam"], cfg["mu_alpha"])


def _closed_form_report(ds: Dataset, W, X, sigma2, t0, **extra) -> tuple[LatentState, FitReport]:
    data = center(ds)
    state = LatentState(W, X, np.ones(X.shape, np.int8), sigma2)
    Yhat = W @ X
    rmse_mean, rmse_std = rmse_per_row(data.Y, Yhat)
    rep = FitReport(mae=mae(data.Y, Yhat), rmse_mean=rmse_mean, rmse_std=rmse_std,
                    popularity=allocation.popularity_histogram(state.Z).tolist(),
                    wall_seconds=time.perf_counter() - t0, extra={"mu": data.mu.tolist(), **extra})
    return state, rep


def fit_model(model: str, ds: Dataset, cfg: dict) -> tuple[LatentState, FitReport]:
    """Dispatch one model by name; ``cfg`` uses the fit config keys."""
    if model not in MODELS:
        raise ConfigError(f"unknown model {model!r}; expected one of {MODELS}")
    K, L, seed, iters = cfg["K"], cfg.get("L"), cfg["seed"], cfg["iters"]
    if K < 1 or K > ds.D and model in ("appca", "bnp-ppca", "pca", "ppca"):
        raise ConfigError(f"K={K} is incompatible with D={ds.D} for {model}")
    if L is not None and not 1 <= L <= K:
        raise ConfigError(f"need 1 <= L <= K, got L={L}, K={K}")
    t0 = time.perf_counter()
    if model == "pca":
        W, evals = pca_fit(ds, K)
        Yc = center(ds).Y
        resid = float(np.mean((Yc - W @ (W.T @ Yc)) ** 2))
        return _closed_form_report(ds, W, W.T @ Yc, resid, t0, eigvals=evals.tolist())
    if model == "ppca":
        if K >= ds.D:
            raise ConfigError(f"ppca needs K < D={ds.D}")
        W, s2 = ppca_ml(ds, K)
        M = W.T @ W + s2 * np.eye(K)
        return _closed_form_report(ds, W, np.linalg.solve(M, W.T @ center(ds).Y), s2, t0, ml_sigma2=s2)
    fit, conf = _model_config(model, cfg)
    return fit(ds, conf)


def _model_config(model: str, cfg: dict):
    K, L = cfg["K"], cfg.get("L")
    for key, allowed in (("score", SCORES), ("z_mode", ("icm", "sample")), ("init", ("pca", "random"))):
        if cfg[key] not in allowed:
            raise ConfigError(f"{key} must be one of {allowed}, got {cfg[key]!r}")
    common = dict(iters=cfg["iters"], seed=cfg["seed"], hyperpriors=_hyper(cfg), center=cfg["center"])
    try:
        if model in ("afa-em", "afa-gibbs", "fa"):
            return fit_afa, AfaConfig(
                K=K, L=L if L is not None else K, prior="all_ones" if model == "fa" else "hypergeometric",
                mode="gibbs" if model == "afa-gibbs" else "em", z_mode=cfg["z_mode"], score=cfg["score"],
                sigma2_w=cfg["sigma2_w"], tol=cfg["tol"], update_sigma2=cfg["update_sigma2"], **common)
        if model == "appca":
            if L is None:
                raise ConfigError("appca needs L")
            score = cfg["score"] if cfg["score"] != "marginal" else "tempered"  # orthonormal W: tempered is exact
            return fit_appca, AppcaConfig(K=K, L=L, score=score, init=cfg["init"], sigma2=cfg["sigma2"],
                                          update_sigma2=cfg["update_sigma2"], **common)
        if model == "bnp-ppca":
            K_max = cfg["K_max"] if cfg["K_max"] is not None else K
            return fit_bnp_ppca, BnpConfig(K_max=K_max, alpha0=cfg["alpha"], squared=cfg["squared"],
                                           sigma2=cfg["sigma2"], update_sigma2=cfg["update_sigma2"], **common)
        prior = "ibp" if model == "isfa" else "beta_bernoulli"
        return fit_sparse_fa, SparseFaConfig(K=K, prior=prior, alpha=cfg["alpha"], K_max=cfg["K_max"],
                                             sigma2_w=cfg["sigma2_w"], **common)
    except (ValueError, TypeError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e)) from None


def cmd_fit(cfg: dict) -> Path:
    try:
        rows = io.read_csv(cfg["data"])
    except OSError as e:
        raise RuntimeError(str(e)) from None
    ds = Dataset.from_rows(rows)
    state, rep = fit_model(cfg["model"], ds, cfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    io.write_csv(out / "model_W.csv", state.W)
    io.write_csv(out / "model_X.csv", state.X.T)
    io.write_csv(out / "model_Z.csv", state.Z.T.astype(int))
    report = {"model": cfg["model"], "config": cfg, **rep.to_dict()}
    if "eigvals" in rep.extra:
        report["eigvals"] = rep.extra["eigvals"]
    io.write_json(out / "report.json", report)
    (out / "config.resolved").write_text(io.format_config(cfg))
    return out


# ---------------------------------------------------------------------------
# benchmark


def fit_L(pattern: str, Z_true: np.ndarray, gen: GenConfig) -> int:
    """Active-feature count handed to aFA: the generating L when there is one, else the 99% column-sum quantile."""
    if pattern == "balanced":
        return gen.resolved_L
    q = int(np.quantile(Z_true.sum(axis=0), 0.99))
    return int(min(max(q, 1), gen.K))


def _seed(master: int, *key) -> int:
    return int(np.random.SeedSequence(master, spawn_key=key).generate_state(1)[0])


def benchmark_cells(cfg: dict) -> list[dict]:
    cells = []
    for pi, pattern in enumerate(cfg["patterns"]):
        for K in cfg["Ks"]:
            for rep in range(cfg["seeds"]):
                data_seed = _seed(cfg["seed"], 0, pi, K, rep)
                for model in cfg["models"]:
                    idx = len(cells)
                    cells.append({"index": idx, "pattern": pattern, "K": K, "rep": rep, "model": model,
                                  "data_seed": data_seed, "fit_seed": _seed(cfg["seed"], 1, idx)})
    return cells


def cell_path(out: Path, cell: dict) -> Path:
    return out / "cells" / f"{cell['pattern']}_K{cell['K']}_{cell['model']}_s{cell['rep']}.json"


def run_cell(cell: dict, cfg: dict) -> dict:
    t0 = time.perf_counter()
    res = dict(cell)
    try:
        gen = GenConfig(pattern=cell["pattern"], N=cfg["N"], D=cfg["D"], K=cell["K"], sigma=cfg["sigma"],
                        sigma_W=cfg["sigma_W"], seed=cell["data_seed"])
        ds, truth = generate_dataset(gen, np.random.default_rng(cell["data_seed"]))
        L = fit_L(cell["pattern"], truth.Z, gen)
        gibbs = cell["model"] in ("afa-gibbs", "fsfa", "isfa")
        fcfg = dict(io.DEFAULTS["fit"], K=cell["K"], L=L, seed=cell["fit_seed"], score=cfg["score"],
                    iters=cfg["iters_gibbs"] if gibbs else cfg["iters_em"])
        state, rep = fit_model(cell["model"], ds, fcfg)
        est = rep.map_state if rep.map_state is not None else state
        Yhat = est.W @ (est.X * est.Z) + np.asarray(rep.extra.get("mu", np.zeros(ds.D)))[:, None]
        res.update(mae=mae(truth.signal, Yhat), mae_vs_data=mae(ds.Y, Yhat), L=L,
                   iterations=rep.iterations, loglik_trace=rep.loglik_trace)
        if rep.map_state is not None:  # the last sweep, for comparison with the MAP-over-trace estimate
            mu = np.asarray(rep.extra.get("mu", np.zeros(ds.D)))[:, None]
            res["mae_final_sweep"] = mae(truth.signal, state.W @ (state.X * state.Z) + mu)
        if rep.loglik_trace:
            steps = np.diff(np.asarray(rep.loglik_trace, float))
            res["min_step"] = float(steps.min()) if steps.size else 0.0
    except Exception as e:  # recorded, the grid keeps going
        log.warning("cell %s failed: %s", cell["index"], e)
        res.update(mae=float("nan"), error=f"{type(e).__name__}: {e}")
    res["seconds"] = time.perf_counter() - t0
    return res


def _valid_cell(path: Path) -> bool:
    try:
        d = json.loads(path.read_text())
    except (OSError, ValueError):
        return False
    return "error" not in d and isinstance(d.get("mae"), (int, float))


def _run_and_store(args):
    cell, cfg, out = args
    res = run_cell(cell, cfg)
    io.write_json(cell_path(Path(out), cell), res)
    return res


def summarize(cfg: dict, out: Path) -> list[dict]:
    rows = []
    for pattern in cfg["patterns"]:
        for K in cfg["Ks"]:
            row = {"pattern": pattern, "K": K}
            n_ok = []
            for model in cfg["models"]:
                vals = []
                for rep in range(cfg["seeds"]):
                    p = cell_path(out, {"pattern": pattern, "K": K, "model": model, "rep": rep})
                    try:
                        v = json.loads(p.read_text()).get("mae")
                    except (OSError, ValueError):
                        v = None
                    if isinstance(v, (int, float)):
                        vals.append(v)
                row[model] = float(np.mean(vals)) if vals else float("nan")
                n_ok.append(len(vals))
            row["seeds"] = min(n_ok) if n_ok else 0
            ranked = sorted((m for m in cfg["models"] if np.isfinite(row[m])), key=lambda m: row[m])
            row["rank"] = "<".join(ranked)
            rows.append(row)
    return rows


def write_table(path: Path, rows: list[dict], models) -> None:
    cols = ["pattern", "K", *models, "seeds", "rank"]
    with open(path, "w", newline="") as fh:
        fh.write(",".join(cols) + "\n")
        for r in rows:
            vals = []
            for c in cols:
                v = r[c]
                vals.append(repr(float(v)) if isinstance(v, float) else str(v))
            fh.write(",".join(vals) + "\n")


def cmd_benchmark(cfg: dict) -> Path:
    out = Path(cfg["out"])
    (out / "cells").mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(io.format_config(cfg))
    for p in cfg["patterns"]:
        if p not in PATTERNS:
            raise ConfigError(f"unknown pattern {p!r}")
    for m in cfg["models"]:
        if m not in MODELS:
            raise ConfigError(f"unknown model {m!r}")
    t0 = time.perf_counter()
    cells = benchmark_cells(cfg)
    todo = [c for c in cells if not _valid_cell(cell_path(out, c))]
    log.info("benchmark: %d cells, %d to run", len(cells), len(todo))
    jobs = [(c, cfg, str(out)) for c in todo]
    if cfg["threads"] > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg["threads"]) as pool:
            for res in pool.map(_run_and_store, jobs):
                log.debug("cell %d done in %.1fs", res["index"], res["seconds"])
    else:
        for job in jobs:
            _run_and_store(job)
    rows = summarize(cfg, out)
    write_table(out / "table.csv", rows, cfg["models"])
    io.write_json(out / "benchmark.json", {"cells": len(cells), "ran": len(todo),
                                           "wall_seconds": time.perf_counter() - t0})
    return out / "table.csv"


# ---------------------------------------------------------------------------
# project


def cmd_project(cfg: dict) -> list[Path]:
    mdir = Path(cfg["model_dir"])
    try:
        X = io.read_csv(mdir / "model_X.csv")
        Z = io.read_csv(mdir / "model_Z.csv").astype(int)
    except OSError as e:
        raise RuntimeError(f"missing model files in {mdir}: {e}") from None
    if X.shape != Z.shape:
        raise RuntimeError(f"model_X.csv {X.shape} and model_Z.csv {Z.shape} disagree")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    groups: dict[tuple, list[int]] = {}
    for n, z in enumerate(Z):
        groups.setdefault(tuple(np.flatnonzero(z)), []).append(n)
    paths = []
    for active, idx in sorted(groups.items()):
        label = "-".join(str(k) for k in active) or "none"
        p = out / f"subset_{label}.csv"
        with open(p, "w", newline="") as fh:
            fh.write(",".join(["point", *(f"x{k}" for k in active), "subset"]) + "\n")
            for n in idx:
                fh.write(",".join([str(n), *(repr(float(X[n, k])) for k in active), label]) + "\n")
        paths.append(p)
    return paths


# ---------------------------------------------------------------------------


COMMANDS = {"generate": cmd_generate, "fit": cmd_fit, "benchmark": cmd_benchmark, "project": cmd_project}


def _setup_logging():
    level = os.environ.get("LFL_LOG", "warn").lower()
    levels = {"error": logging.ERROR, "warn": logging.WARNING, "warning": logging.WARNING,
              "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    if level not in levels:
        log.warning("LFL_LOG=%r not recognised; using warn", level)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="lfl", description=__doc__)
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="key = value run configuration")
    parser.add_argument("--out", help="output directory (overrides the config)")
    parser.add_argument("--seed", type=int, help="seed (overrides the config)")
    parser.add_argument("--threads", type=int, help="benchmark worker processes")
    args = parser.parse_args(argv)
    _setup_logging()
    try:
        cfg = io.load_config(args.config, args.command)
        if args.out is not None:
            cfg["out"] = args.out
        if args.seed is not None:
            if args.seed < 0 or args.seed >= 2**64:
                raise ConfigError("--seed must fit in an unsigned 64-bit integer")
            if args.command == "project":
                raise ConfigError("project takes no seed")
            cfg["seed"] = args.seed
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("--threads must be >= 1")
            cfg["threads"] = args.threads
        result = COMMANDS[args.command](cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    if isinstance(result, list):
        for p in result:
            print(p)
    else:
        print(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
