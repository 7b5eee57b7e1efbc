"""Command-line driver: ``bne simulate | fit | report | benchmark``.

Exit codes: 0 success, 2 usage or validation error, 3 numerical failure,
4 failed internal consistency check.  Every output is UTF-8 CSV or JSON
written with 17 significant digits, so repeated runs with equal flags and
seeds produce identical bytes.  Wall-clock timings go to separate
``*.timing.json`` files for that reason.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import multiprocessing
import os
import sys
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from bne import baselines as bl
from bne import data as bd
from bne import gp
from bne import io as bio
from bne import pipeline as pl
from bne import uncertainty as unc
from bne.inference import PosteriorDraws
from bne.metrics import evaluate_distribution
from bne.model import Hyperparams, ModelError, ModelState

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_CHECK = 0, 2, 3, 4
SEED_ENV = "BNE_SEED"
FIT_KEYS = ("model", "chains", "warmup", "samples", "leapfrog", "target_accept", "seed", "calibrated", "lam",
            "n_anchor", "n_pins", "eb_sweeps")
TAMED = {"shape_floor": 0.8, "shape_amp": 2.2}


class UsageError(Exception):
    pass


class CheckFailure(Exception):
    pass


# -- argument types -----------------------------------------------------------------------------------


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {v}")
    return v


def _nonneg_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be nonnegative, got {v}")
    return v


def _nonneg_float(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not (math.isfinite(v) and v >= 0):
        raise argparse.ArgumentTypeError(f"must be a nonnegative number, got {text}")
    return v


def _probability(text):
    v = _nonneg_float(text)
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1), got {text}")
    return v


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


# -- small I/O helpers ----------------------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    if isinstance(v, np.integer):
        return int(v)
    return v


def write_rows(path, rows, fieldnames=None) -> None:
    fieldnames = fieldnames or (list(rows[0]) if rows else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) for k, v in r.items()})


def _with_tag(path, tag: str, suffix: str = ".csv") -> Path:
    """``out.csv`` -> ``out.<tag><suffix>``."""
    p = Path(path)
    return p.with_name(f"{p.stem}.{tag}{suffix}")


def _rel(target, start_file) -> str:
    return os.path.relpath(Path(target).resolve(), Path(start_file).resolve().parent)


def _resolve(stored: str, sidecar_file) -> Path:
    p = Path(stored)
    return p if p.is_absolute() else Path(sidecar_file).resolve().parent / p


# -- configuration -----------------------------------------------------------------------------------


def fit_config(args) -> pl.FitConfig:
    """Flags override the JSON ``--config`` file, which overrides defaults."""
    settings = {"seed": _default_seed()}
    if getattr(args, "config", None):
        try:
            cfg = bio.read_json(args.config)
        except (OSError, json.JSONDecodeError) as err:
            raise UsageError(f"--config: cannot read {args.config}: {err}") from None
        if "lambda" in cfg:
            cfg["lam"] = cfg.pop("lambda")
        unknown = sorted(set(cfg) - set(FIT_KEYS))
        if unknown:
            raise UsageError(f"--config: unknown keys {unknown}")
        settings.update(cfg)
    for key in FIT_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            settings[key] = v
    if settings.get("calibrated") is False:
        settings.pop("calibrated")
    try:
        return pl.FitConfig(**settings)
    except (TypeError, ValueError) as err:
        raise UsageError(str(err)) from None


def _add_fit_flags(p, with_model=True):
    if with_model:
        p.add_argument("--model", choices=pl.MODELS, help="model to fit (default bne)")
    p.add_argument("--calibrated", action="store_true", default=None,
                   help="calibrated inference with the CvM penalty (lambda defaults to 1)")
    p.add_argument("--lambda", dest="lam", type=_nonneg_float, help="CvM penalty weight; 0 is the plain posterior")
    p.add_argument("--chains", type=_positive_int, help="HMC chains (default 4)")
    p.add_argument("--warmup", type=_positive_int, help="adaptation iterations per chain (default 500)")
    p.add_argument("--samples", type=_positive_int, help="kept draws per chain (default 1000)")
    p.add_argument("--leapfrog", type=_positive_int, help="leapfrog steps per proposal (default 16)")
    p.add_argument("--target-accept", dest="target_accept", type=_probability,
                   help="dual-averaging acceptance target (default 0.75)")
    p.add_argument("--n-anchor", dest="n_anchor", type=_positive_int, help="calibration anchor points (default 30)")
    p.add_argument("--n-pins", dest="n_pins", type=_nonneg_int, help="boundary pins per end (default 10)")
    p.add_argument("--eb-sweeps", dest="eb_sweeps", type=_positive_int, help="empirical Bayes sweeps (default 3)")
    p.add_argument("--seed", type=_nonneg_int, help=f"random seed (default ${SEED_ENV} or 0)")
    p.add_argument("--config", help="JSON file with any of: " + ", ".join(k if k != "lam" else "lambda"
                                                                             for k in FIT_KEYS))


# -- simulate -------------------------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    seed = args.seed if args.seed is not None else _default_seed()
    extra = dict(TAMED) if args.tamed else {}
    for key in ("shape_floor", "shape_amp", "shape_rate"):
        v = getattr(args, key)
        if v is not None:
            extra[key] = v
    try:
        spec = bd.SyntheticSpec(n=args.n, seed=seed, **extra)
    except bd.DataError as err:
        raise UsageError(str(err)) from None
    dataset, truth = bd.simulate(spec)
    bd.save_csv(dataset, args.out)
    truth_path = args.truth or _with_tag(args.out, "truth", ".json")
    bio.write_json(truth.to_dict(), truth_path)
    return EXIT_OK


# -- fit ---------------------------------------------------------------------------------------------------


def _load(path, what="--data") -> bd.Dataset:
    try:
        return bd.load_csv(path)
    except bd.DataError as err:
        raise UsageError(f"{what}: {err}") from None


def prepare_training(data_path, out, seed):
    """Ensemble training set; base models are fitted first when the file has no f columns."""
    ds = _load(data_path)
    info = {}
    loo = None
    if ds.K == 0:
        held, ens = bd.fit_base_models(ds, seed=seed)
        base_path = _with_tag(out, "base", ".json")
        bio.write_json(bio.base_models_to_dict(ens), base_path)
        train_path = _with_tag(out, "data")
        bd.save_csv(held, train_path)
        loo = bl.loo_base_dataset(ds.subset(ens.train_index), ens)
        info.update(base_models=_rel(base_path, out), train_data=_rel(train_path, out))
        ds = held
    else:
        info.update(train_data=_rel(data_path, out))
    return ds, loo, info


def cmd_fit(args) -> int:
    cfg = fit_config(args)
    t0 = time.perf_counter()
    train, loo, info = prepare_training(args.data, args.out, cfg.seed)
    meta = {"model": cfg.model, "config": cfg.to_dict(), **info, "n_train": train.N, "K": train.K}
    try:
        fit = pl.fit_model(train, cfg, loo_train=loo)
    except pl.NumericalFailure as err:
        meta.update(status="failed", error=str(err), diagnostics=err.meta)
        bio.write_json(meta, bio.sidecar(args.out))
        print(f"error: sampler failed: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    if fit.kind == "stacking":
        fit.stacking.write_csv(args.out)
        meta.update(status="ok", stacking=fit.meta)
        bio.write_json(meta, bio.sidecar(args.out))
    else:
        acc = fit.meta.get("acceptance_rate")
        meta.update(status=fit.meta.get("status", "ok"), acceptance_rate=acc,
                    divergences=fit.meta.get("divergences", 0))
        bio.save_draws(fit.draws, args.out, meta)
    bio.write_json({"fit_seconds": fit.seconds, "total_seconds": time.perf_counter() - t0},
                   _with_tag(args.out, "timing", ".json"))
    return EXIT_OK


# -- report -------------------------------------------------------------------------------------------------


class LoadedFit:
    """A fit rebuilt from its files: draws CSV (or stacking weights) plus sidecar."""

    def __init__(self, path):
        path = Path(path)
        side = bio.sidecar(path)
        if not path.exists() or not side.exists():
            raise UsageError(f"--draws: {path} or its metadata {side.name} is missing")
        self.path = path
        self.info = bio.read_json(side)
        if self.info.get("status") == "failed":
            raise UsageError(f"--draws: the fit in {path} failed; nothing to report")
        self.kind = self.info["model"]
        self.config = pl.FitConfig(**self.info["config"])
        self.train = _load(_resolve(self.info["train_data"], side), "training data")
        self.base_models = None
        if self.info.get("base_models"):
            self.base_models = bio.base_models_from_dict(bio.read_json(_resolve(self.info["base_models"], side)))
        if self.kind == "stacking":
            with open(path, newline="", encoding="utf-8") as fh:
                rows = list(csv.reader(fh))
            K = len(rows[0]) // 2
            vals = np.array(rows[1], dtype=float)
            st = self.info["stacking"]
            res = bl.StackingResult(vals[:K], vals[K:], st["iterations"], st["converged"], float("nan"))
            self.fit = pl.FitResult("stacking", self.config, stacking=res, meta=st)
        else:
            try:
                draws, side_info = bio.load_draws(path)
            except bio.FormatError as err:
                raise UsageError(f"--draws: {err}") from None
            cfg = self.config
            state = ModelState(self.train.X, self.train.y, self.train.base, draws.hyper, kind=self.kind,
                               n_anchor=cfg.n_anchor, n_pins=cfg.n_pins)
            self.fit = pl.FitResult(self.kind, cfg, state, draws, meta=side_info.get("sampler", {}))

    def base_at(self, X) -> np.ndarray:
        if self.base_models is None:
            raise UsageError("base predictions are needed at new inputs but no base models were saved; "
                             "give a --test file with f columns")
        return self.base_models.predict(X)

    def reduced(self, kind: str) -> pl.FitResult:
        """The same data and settings refitted with a reduced model."""
        if kind == self.kind:
            return self.fit
        cfg = replace(self.config, model=kind, calibrated=False, lam=None)
        return pl.fit_model(self.train, cfg)


def report_locations(fit: LoadedFit, args):
    """Locations and base predictions: the --test inputs, else a grid over the training inputs."""
    if args.test:
        test = _load(args.test, "--test")
        f = test.base if test.K else fit.base_at(test.X)
        return test.X, f, test
    X = fit.train.X
    Q = args.grid_points
    if X.shape[1] == 1 and fit.base_models is not None:
        lo, hi = X[:, 0].min(), X[:, 0].max()
        xs = np.linspace(lo, hi, Q)[:, None]
        return xs, fit.base_at(xs), None
    idx = np.unique(np.linspace(0, fit.train.N - 1, min(Q, fit.train.N)).round().astype(int))
    order = np.argsort(X[:, 0], kind="stable")[idx]
    return X[order], fit.train.base[order], None


def _report_metrics(fit: LoadedFit, args):
    if not args.test:
        raise UsageError("--what metrics needs --test")
    X, f, test = report_locations(fit, args)
    test = test.with_base(f)
    truth = None
    if args.truth:
        try:
            truth = bd.Truth.from_dict(bio.read_json(args.truth))
        except (OSError, KeyError, json.JSONDecodeError, bd.DataError) as err:
            raise UsageError(f"--truth: cannot read {args.truth}: {err}") from None
    rep = pl.evaluate(fit.fit, test, truth, max_draws=args.max_draws, seed=fit.config.seed)
    rows = [{"quantity": k, "value": v} for k, v in rep.row().items() if k not in ("model", "n", "seed")]
    rows += [{"quantity": f"coverage_{p:.1f}", "value": float(c)} for p, c in zip(np.arange(1, 10) / 10,
                                                                                   rep.coverage)]
    return rows, rows, {"model": fit.kind, "n": rep.n, "seed": rep.seed}


def _shared_grid(fit: LoadedFit, X, f, args):
    dist = pl.predictive(fit.fit, X, f, n_grid=args.y_points, max_draws=args.max_draws, seed=fit.config.seed)
    return dist


def _report_decompose(fit: LoadedFit, args):
    X, f, _ = report_locations(fit, args)
    seed = fit.config.seed
    full = _shared_grid(fit, X, f, args)
    kw = dict(y_grid=full.y_grid, max_draws=args.max_draws, seed=seed)
    if args.decomposition == "entropy" and fit.kind != "bne":
        rep = unc.entropy_decompose(full, n_boot=args.n_boot, seed=seed)
    else:
        if fit.kind != "bne":
            raise UsageError("the variance decomposition needs a bne fit")
        bae = pl.predictive(fit.reduced("bae"), X, f, **kw)
        orig = pl.predictive(fit.reduced("original"), X, f, **kw)
        decomp = unc.epistemic_split if args.decomposition == "entropy" else unc.variance_decompose
        rep = decomp(full, bae, orig, n_boot=args.n_boot, seed=seed)
    checks = rep.check()
    return rep.wide_rows(), rep.rows(), {"model": fit.kind, "kind": rep.kind, "checks": checks,
                                         "warnings": list(rep.warnings)}


def _report_bias(fit: LoadedFit, args):
    if fit.kind not in ("bne", "bae"):
        raise UsageError(f"bias detection needs a bne or bae fit, not {fit.kind}")
    X, f, _ = report_locations(fit, args)
    dist = _shared_grid(fit, X, f, args)
    rep = unc.bias_report(dist, statistics=tuple(args.statistics or ()))
    return rep.rows(), rep.long_rows(), {"model": fit.kind, "n_draws": dist.n_draws}


def cmd_report(args) -> int:
    fit = LoadedFit(args.draws)
    handler = {"metrics": _report_metrics, "decompose": _report_decompose, "bias": _report_bias}[args.what]
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        wide, long, meta = handler(fit, args)
    meta["warnings"] = sorted(set(meta.get("warnings", [])) | {str(w.message) for w in caught
                                                               if issubclass(w.category, RuntimeWarning)})
    write_rows(args.out, wide)
    write_rows(_with_tag(args.out, "long"), long)
    bio.write_json(meta, bio.sidecar(args.out))
    failed = [k for k, ok in meta.get("checks", {}).items() if not ok]
    if failed:
        raise CheckFailure(f"consistency checks failed: {', '.join(failed)}")
    return EXIT_OK


# -- benchmark ----------------------------------------------------------------------------------------------


def _cell(job):
    cell, cfg, overrides, n_test, max_draws = job
    try:
        rows, timing = pl.run_cell(cell, cfg, overrides, n_test=n_test, max_draws=max_draws)
        return rows, timing, None
    except (pl.NumericalFailure, ModelError, gp.GPError, np.linalg.LinAlgError, bd.DataError) as err:
        rows = [{"model": cell.model, "n": cell.n, "seed": cell.seed, "metric": m, "value": float("nan")}
                for m in ("rmse_empirical", "coverage_index", "cvm", "rmse_vs_truth", "l1_vs_truth")]
        return rows, {"model": cell.model, "n": cell.n, "seed": cell.seed}, f"{type(err).__name__}: {err}"


def summarize(rows) -> list[dict]:
    """Mean and standard error per (model, n, metric) over seeds."""
    groups = {}
    for r in rows:
        groups.setdefault((r["model"], r["n"], r["metric"]), []).append(r["value"])
    out = []
    for (model, n, metric), vals in groups.items():
        v = np.asarray(vals, dtype=float)
        ok = v[np.isfinite(v)]
        se = float(ok.std(ddof=1) / math.sqrt(ok.size)) if ok.size > 1 else float("nan")
        out.append({"model": model, "n": n, "metric": metric, "mean": float(ok.mean()) if ok.size else float("nan"),
                    "se": se, "n_seeds": int(ok.size), "n_failed": int(v.size - ok.size)})
    return out


def cmd_benchmark(args) -> int:
    cfg = fit_config(args)
    base_seed = cfg.seed
    overrides = dict(TAMED) if args.tamed else {}
    models = args.models or list(pl.MODELS)
    seeds = [base_seed + i for i in range(args.seeds)]
    jobs = [(pl.BenchmarkCell(m, n, s), replace(cfg, model=m), overrides, args.n_test, args.max_draws)
            for n in args.n for s in seeds for m in models]
    if args.jobs > 1:
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=args.jobs, mp_context=ctx) as pool:
            results = list(pool.map(_cell, jobs))
    else:
        results = [_cell(j) for j in jobs]
    rows = [r for res in results for r in res[0]]
    write_rows(args.out, rows, ["model", "n", "seed", "metric", "value"])
    write_rows(_with_tag(args.out, "summary"), summarize(rows),
               ["model", "n", "metric", "mean", "se", "n_seeds", "n_failed"])
    failures = [{"model": j[0].model, "n": j[0].n, "seed": j[0].seed, "error": res[2]}
                for j, res in zip(jobs, results) if res[2]]
    bio.write_json({"config": cfg.to_dict(), "models": models, "n": args.n, "seeds": seeds,
                    "spec_overrides": overrides, "failures": failures}, bio.sidecar(args.out))
    bio.write_json([res[1] for res in results], _with_tag(args.out, "timing", ".json"))
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bne", description=__doc__.split("\n\n")[0],
        epilog=f"Exit codes: 0 ok, 2 usage, 3 numerical failure, 4 failed check. ${SEED_ENV} sets the default seed.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="draw a synthetic dataset",
                       description="Writes a CSV (x1, y) and a truth JSON with the process parameters.")
    p.add_argument("--n", type=_positive_int, required=True, help="number of points")
    p.add_argument("--seed", type=_nonneg_int, help=f"random seed (default ${SEED_ENV} or 0)")
    p.add_argument("--out", required=True, help="dataset CSV")
    p.add_argument("--truth", help="truth JSON (default <out>.truth.json)")
    p.add_argument("--tamed", action="store_true",
                   help="bounded Weibull shape (floor 0.8, amplitude 2.2) so every moment stays finite")
    p.add_argument("--shape-floor", dest="shape_floor", type=_nonneg_float)
    p.add_argument("--shape-amp", dest="shape_amp", type=_nonneg_float)
    p.add_argument("--shape-rate", dest="shape_rate", type=_nonneg_float)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser(
        "fit", help="fit a model",
        description="Without f columns in --data, kernel ridge base models are fitted on half the rows "
                    "(saved to <out>.base.json) and the ensemble is trained on the other half "
                    "(<out>.data.csv). Writes draws (chain, step, omega_*, delta_*, F_*, f_*) to --out with "
                    "metadata in the .json sidecar; stacking writes its weights row (pi_*, sigma_*) instead.")
    p.add_argument("--data", required=True, help="CSV with x1..xp, y and optional f1..fK")
    p.add_argument("--out", required=True, help="draws CSV")
    _add_fit_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser(
        "report", help="metrics, uncertainty decomposition or bias detection from a fit",
        description="Writes --out (wide, one row per location or metric), <out>.long.csv with columns "
                    "x*, quantity, value, mc_se, and a .json sidecar. Decomposition columns: total_entropy, "
                    "aleatoric, epistemic_total, structural_G, structural_delta, parametric (entropy) or "
                    "total_variance, structural_G, structural_delta, parametric, aleatoric (variance). Bias "
                    "columns: D_delta, P_delta_pos, D_G, P_G_pos, D_G_<stat>, P_G_<stat>_pos; the G "
                    "columns appear for bne only.")
    p.add_argument("--draws", required=True, help="draws CSV written by fit")
    p.add_argument("--what", choices=("metrics", "decompose", "bias"), required=True)
    p.add_argument("--decomposition", choices=("entropy", "variance"), default="entropy")
    p.add_argument("--grid-points", dest="grid_points", type=_positive_int, default=50,
                   help="locations when no --test is given (default 50)")
    p.add_argument("--y-points", dest="y_points", type=_positive_int, default=801,
                   help="y grid size per location (default 801)")
    p.add_argument("--max-draws", dest="max_draws", type=_positive_int, default=100)
    p.add_argument("--n-boot", dest="n_boot", type=_positive_int, default=unc.DEFAULT_BOOTSTRAP,
                   help="bootstrap replicates for Monte Carlo errors")
    p.add_argument("--statistics", nargs="*", choices=unc.STATISTICS, help="extra bias statistics (bne)")
    p.add_argument("--test", help="CSV of evaluation points (x1..xp, y, optional f1..fK)")
    p.add_argument("--truth", help="truth JSON from simulate, for truth-based metrics")
    p.add_argument("--out", required=True, help="output CSV")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser(
        "benchmark", help="run the synthetic benchmark matrix",
        description="One row per (model, n, seed, metric) in --out; <out>.summary.csv holds means and "
                    "standard errors over seeds.")
    p.add_argument("--n", type=_positive_int, nargs="+", default=[100, 200, 400])
    p.add_argument("--seeds", type=_positive_int, default=5, help="number of seeds, counting up from --seed")
    p.add_argument("--models", nargs="+", choices=pl.MODELS)
    p.add_argument("--jobs", type=_positive_int, default=1, help="concurrent cells")
    p.add_argument("--n-test", dest="n_test", type=_positive_int, default=100)
    p.add_argument("--max-draws", dest="max_draws", type=_positive_int, default=50)
    p.add_argument("--tamed", action="store_true", help="use the bounded-shape process")
    p.add_argument("--out", required=True, help="long-format metrics CSV")
    _add_fit_flags(p, with_model=False)
    p.set_defaults(func=cmd_benchmark)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as err:
        print(f"bne {args.command}: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (bd.DataError, bio.FormatError, bl.BaselineError, unc.DecompositionError) as err:
        print(f"bne {args.command}: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except CheckFailure as err:
        print(f"bne {args.command}: {err}", file=sys.stderr)
        return EXIT_CHECK
    except (pl.NumericalFailure, ModelError, gp.GPError, np.linalg.LinAlgError) as err:
        print(f"bne {args.command}: numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
