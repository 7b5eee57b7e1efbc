"""End-to-end helpers shared by the CLI, the benchmark and the tutorials."""

from __future__ import annotations

import time
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from bne import baselines as bl
from bne import data as bd
from bne import inference as inf
from bne.metrics import MetricReport, evaluate_distribution
from bne.model import DEFAULT_ANCHORS, DEFAULT_PINS, Hyperparams, ModelState, PredictiveDistribution, predict

MODELS = ("bne", "bae", "original", "stacking")
L1_WINDOW = (-25.0, 25.0)


class NumericalFailure(RuntimeError):
    """Sampling or optimization produced unusable output; ``meta`` carries diagnostics."""

    def __init__(self, message, meta=None):
        super().__init__(message)
        self.meta = meta or {}


@dataclass(frozen=True)
class FitConfig:
    model: str = "bne"
    chains: int = 4
    warmup: int = 500
    samples: int = 1000
    leapfrog: int = 16
    target_accept: float = 0.75
    seed: int = 0
    calibrated: bool = False
    lam: float | None = None
    n_anchor: int = DEFAULT_ANCHORS
    n_pins: int = DEFAULT_PINS
    eb_sweeps: int = 3

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"unknown model {self.model!r}; expected one of {MODELS}")
        if self.lam is not None and self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        for name in ("chains", "warmup", "samples", "leapfrog", "n_anchor", "eb_sweeps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.n_pins < 0:
            raise ValueError("n_pins must be nonnegative")

    @property
    def effective_lam(self) -> float:
        if self.lam is not None:
            return float(self.lam)
        return 1.0 if self.calibrated else 0.0

    def hmc(self) -> inf.HmcConfig:
        return inf.HmcConfig(n_chains=self.chains, n_warmup=self.warmup, n_samples=self.samples,
                             leapfrog_steps=self.leapfrog, target_accept=self.target_accept, seed=self.seed)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FitResult:
    kind: str
    config: FitConfig
    state: ModelState | None = None
    draws: inf.PosteriorDraws | None = None
    stacking: bl.StackingResult | None = None
    meta: dict = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def hyper(self) -> Hyperparams | None:
        return None if self.state is None else self.state.hyper


def fit_model(train: bd.Dataset, cfg: FitConfig, loo_train: bd.Dataset | None = None,
              hyper: Hyperparams | None = None) -> FitResult:
    """Fit one model on an ensemble training set (base predictions attached).

    Hyperparameters come from empirical Bayes unless ``hyper`` is given.
    Stacking weights use ``loo_train`` (leave-one-out base predictions) when
    available, else the held-out predictions in ``train``.
    """
    t0 = time.perf_counter()
    kind = cfg.model
    if kind == "stacking":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = bl.fit_stacking(loo_train if loo_train is not None else train)
        meta = {"weights": res.weights, "sigmas": res.sigmas, "iterations": res.iterations,
                "converged": res.converged, "status": "ok"}
        return FitResult(kind, cfg, stacking=res, meta=meta, seconds=time.perf_counter() - t0)
    if kind == "original":
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", RuntimeWarning)
            state, draws = bl.fit_original_ensemble(train, hyper, n_draws=cfg.chains * cfg.samples, seed=cfg.seed)
        meta = dict(draws.meta)
        meta["warnings"] = [str(w.message) for w in caught]
        return FitResult(kind, cfg, state, draws, meta=meta, seconds=time.perf_counter() - t0)
    lam = cfg.effective_lam
    state = ModelState(train.X, train.y, train.base, replace(hyper or Hyperparams(), lam=lam), kind=kind,
                       n_anchor=cfg.n_anchor, n_pins=cfg.n_pins)
    eb_info = {}
    if hyper is None:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", RuntimeWarning)
            h, eb_info = inf.empirical_bayes_fit(state, sweeps=cfg.eb_sweeps, return_info=True)
        eb_info["warnings"] = [str(w.message) for w in caught]
        state = state.with_hyper(replace(h, lam=lam))
    grid = inf.CvmGrid.from_data(train.y) if lam > 0 else None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        draws = inf.sample_posterior(state, cfg.hmc(), grid)
    meta = dict(draws.meta)
    meta["empirical_bayes"] = eb_info
    if meta.get("status") == "failed":
        raise NumericalFailure("; ".join(meta.get("messages", [])) or "sampler failed", meta)
    return FitResult(kind, cfg, state, draws, meta=meta, seconds=time.perf_counter() - t0)


def predictive(fit: FitResult, x, f, y_grid=None, n_grid: int = 801, max_draws: int = 100,
               seed: int = 0, with_pdf: bool = True) -> PredictiveDistribution:
    if fit.kind == "stacking":
        return fit.stacking.predictive(x, f, y_grid=y_grid, n_grid=n_grid)
    return predict(fit.state, fit.draws, x, f, y_grid=y_grid, n_grid=n_grid, max_draws=max_draws,
                   seed=seed, with_pdf=with_pdf)


def _child_seed(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, stream]).generate_state(1)[0])


def prepare_synthetic(spec: bd.SyntheticSpec, n_test: int = 100, base_specs=bd.DEFAULT_BASE_SPECS) -> bd.SplitData:
    """Simulate, fit base models on half the data, and draw an independent test set."""
    full, truth = bd.simulate(spec)
    held, ens = bd.fit_base_models(full, base_specs, seed=spec.seed)
    test, _ = bd.simulate(replace(spec, n=n_test, seed=_child_seed(spec.seed, 1)))
    test = test.with_base(ens.predict(test.X))
    loo = bl.loo_base_dataset(full.subset(ens.train_index), ens)
    return bd.SplitData(held, ens, test, base_train=loo, truth=truth,
                        meta={"spec": spec.to_dict(), "n_test": n_test})


def evaluate(fit: FitResult, test: bd.Dataset, truth=None, l1_window=L1_WINDOW, n_l1: int = 801,
             n_grid: int = 801, max_draws: int = 50, seed: int = 0) -> MetricReport:
    """Held-out metrics; truth-based ones use a fixed y window shared by all models."""
    dist = predictive(fit, test.X, test.base, n_grid=n_grid, max_draws=max_draws, seed=seed, with_pdf=False)
    l1_grid = l1_dist = None
    if truth is not None:
        l1_grid = np.linspace(*l1_window, n_l1)
        l1_dist = predictive(fit, test.X, test.base, y_grid=l1_grid, max_draws=max_draws, seed=seed,
                             with_pdf=False)
    return evaluate_distribution(dist, test.y, seed=fit.config.seed, truth=truth, l1_grid=l1_grid,
                                 l1_dist=l1_dist, model=fit.kind)


@dataclass(frozen=True)
class BenchmarkCell:
    model: str
    n: int
    seed: int


def run_cell(cell: BenchmarkCell, cfg: FitConfig, spec_overrides: dict | None = None, n_test: int = 100,
             max_draws: int = 50) -> tuple[list[dict], dict]:
    """One (model, n, seed) benchmark cell; returns long-format metric rows and timing."""
    spec = bd.SyntheticSpec(n=cell.n, seed=cell.seed, **(spec_overrides or {}))
    split = prepare_synthetic(spec, n_test=n_test)
    t0 = time.perf_counter()
    fit = fit_model(split.ensemble_train, replace(cfg, model=cell.model, seed=cell.seed), split.base_train)
    rep = evaluate(fit, split.test, split.truth, max_draws=max_draws, seed=cell.seed)
    rows = []
    for metric, value in rep.row().items():
        if metric in ("n", "seed", "model"):
            continue
        rows.append({"model": cell.model, "n": cell.n, "seed": cell.seed, "metric": metric, "value": value})
    timing = {"model": cell.model, "n": cell.n, "seed": cell.seed, "fit_seconds": fit.seconds,
              "total_seconds": time.perf_counter() - t0}
    return rows, timing


def run_cell_star(args):
    return run_cell(*args)
