"""Reference models: the original Bayesian ensemble, BAE and stacking."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy import stats
from scipy.special import logsumexp, ndtr

from bne import inference as inf
from bne.data import Dataset, krr_loo
from bne.model import Hyperparams, ModelState, PredictiveDistribution

STACKING_ITERATIONS = 500
STACKING_TOL = 1e-8


class BaselineError(ValueError):
    pass


def _require_base(dataset: Dataset) -> np.ndarray:
    if dataset.base is None or dataset.K == 0:
        raise BaselineError("the dataset has no base-model predictions (K = 0)")
    return dataset.base


# -- original ensemble: exact conjugate posterior -------------------------------------------------

conjugate_posterior = inf.conjugate_posterior


def _profile_sigma_eps(state: ModelState) -> float:
    h = state.hyper

    def obj(s):
        hh = replace(h, sigma_eps=s)
        return inf.gaussian_log_evidence(state, hh, use_delta=False) + inf.log_halfnormal(s)

    return inf._golden_log(obj, h.sigma_eps, 1e-4, 1e4, "sigma_eps")


def fit_original_ensemble(dataset: Dataset, hyper: Hyperparams | None = None, n_draws: int = 1000,
                          seed: int = 0, profile: bool = True) -> tuple[ModelState, inf.PosteriorDraws]:
    """Exact posterior draws of the ensemble weights (no residual process, identity calibration).

    ``sigma_eps`` is profiled by maximizing its regularized evidence unless
    ``profile`` is false; with no data the draws come from the prior.
    """
    B = _require_base(dataset)
    hyper = hyper or Hyperparams(sigma_eps=max(float(np.std(dataset.y)), 1e-3) if dataset.N else 1.0)
    state = ModelState(dataset.X, dataset.y, B, hyper, kind="original")
    if profile and dataset.N:
        state = state.with_hyper(replace(hyper, sigma_eps=_profile_sigma_eps(state)))
    h = state.hyper
    if dataset.N:
        mean, cov = conjugate_posterior(B, dataset.y, h.sigma_eps, h.sigma_omega)
    else:
        mean, cov = np.zeros(state.K), h.sigma_omega ** 2 * np.eye(state.K)
    rng = np.random.default_rng(seed)
    omega = rng.multivariate_normal(mean, cov, size=n_draws, method="eigh")
    ident = state.identity_draw(np.zeros(state.K))
    draws = inf.PosteriorDraws(
        omega=omega[None],
        delta=np.zeros((1, n_draws, state.N)),
        F_latent=np.broadcast_to(ident.F_latent, (1, n_draws, state.n_anchor)).copy(),
        f_latent=np.broadcast_to(ident.f_latent, (1, n_draws, state.n_anchor)).copy(),
        kind="original", hyper=h,
        meta={"sampler": "conjugate", "seed": seed, "acceptance_rate": 1.0, "divergences": 0, "status": "ok",
              "posterior_mean": mean.tolist(), "posterior_cov": cov.tolist()},
    )
    return state, draws


# -- BAE ----------------------------------------------------------------------------------------------------


def fit_bae(dataset: Dataset, hyper: Hyperparams | None, cfg: inf.HmcConfig, grid=None,
            eb: bool = True, **state_kw) -> tuple[ModelState, inf.PosteriorDraws]:
    """HMC over (omega, delta) with the calibration map fixed at the identity."""
    B = _require_base(dataset)
    state = ModelState(dataset.X, dataset.y, B, hyper or Hyperparams(), kind="bae", **state_kw)
    if eb:
        state = state.with_hyper(replace(inf.empirical_bayes_fit(state), lam=state.hyper.lam))
    return state, inf.sample_posterior(state, cfg, grid)


# -- stacking --------------------------------------------------------------------------------------------------


@dataclass
class StackingResult:
    """Simplex weights of a Gaussian mixture ``sum_k pi_k N(f_k(x), sigma_k^2)``."""

    weights: np.ndarray
    sigmas: np.ndarray
    iterations: int
    converged: bool
    objective: float

    def logpdf(self, y, F) -> np.ndarray:
        F = np.atleast_2d(F)
        z = stats.norm.logpdf(np.asarray(y, dtype=float)[..., None], F, self.sigmas)
        with np.errstate(divide="ignore"):
            return logsumexp(z + np.log(self.weights), axis=-1)

    def predictive(self, x, F, y_grid=None, n_grid: int = 801) -> PredictiveDistribution:
        """The mixture as a single-draw predictive distribution at locations ``x``."""
        x = np.asarray(x, dtype=float).reshape(len(F), -1)
        F = np.asarray(F, dtype=float)
        Q = F.shape[0]
        mix_mean = F @ self.weights
        if y_grid is None:
            lo = (F - 8 * self.sigmas).min(axis=1)
            hi = (F + 8 * self.sigmas).max(axis=1)
            grid = np.linspace(lo, hi, n_grid, axis=1)
        else:
            grid = np.broadcast_to(np.asarray(y_grid, dtype=float), (Q, np.shape(y_grid)[-1])).copy()
        t = (grid[:, :, None] - F[:, None, :]) / self.sigmas
        cdf = ndtr(t) @ self.weights
        pdf = (stats.norm.pdf(t) / self.sigmas) @ self.weights
        zeros = np.zeros((1, Q))
        return PredictiveDistribution(
            x=x, base=F, y_grid=grid, cdf=cdf[None], pdf=pdf[None], mu=mix_mean[None], delta=zeros,
            ensemble=mix_mean[None], sigma_eps=float(self.sigmas @ self.weights), kind="stacking")

    def write_csv(self, path) -> None:
        K = self.weights.size
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"pi_{k + 1}" for k in range(K)] + [f"sigma_{k + 1}" for k in range(K)])
            w.writerow([format(float(v), ".17g") for v in list(self.weights) + list(self.sigmas)])


def fit_stacking(dataset: Dataset, max_iter: int = STACKING_ITERATIONS, tol: float = STACKING_TOL) -> StackingResult:
    """Mixture weights maximizing the log score of out-of-sample base predictions.

    ``dataset.base`` must hold predictions each model made without seeing the
    corresponding point (leave-one-out or held-out).  Weights start uniform
    and follow the multiplicative EM update ``pi_k <- mean_i r_ik``.
    """
    F = _require_base(dataset)
    N, K = F.shape
    if N < K + 1:
        raise BaselineError(f"stacking needs N >= K + 1 points (N = {N}, K = {K})")
    resid = dataset.y[:, None] - F
    sigmas = np.maximum(np.sqrt(np.mean(resid ** 2, axis=0)), 1e-12)
    logphi = stats.norm.logpdf(resid / sigmas) - np.log(sigmas)
    pi = np.full(K, 1.0 / K)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        with np.errstate(divide="ignore"):
            logr = logphi + np.log(pi)
        logr -= logsumexp(logr, axis=1, keepdims=True)
        new = np.exp(logr).mean(axis=0)
        new /= new.sum()
        step = np.abs(new - pi).max()
        pi = new
        if step < tol:
            converged = True
            break
    if not converged:
        warnings.warn(f"stacking weights still moving after {max_iter} iterations (last change {step:.2e})",
                      RuntimeWarning, stacklevel=2)
    with np.errstate(divide="ignore"):
        obj = float(np.sum(logsumexp(logphi + np.log(pi), axis=1)))
    return StackingResult(pi, sigmas, it, converged, obj)


def stacking_objective(dataset: Dataset, weights, sigmas=None) -> float:
    F = _require_base(dataset)
    resid = dataset.y[:, None] - F
    sig = np.sqrt(np.mean(resid ** 2, axis=0)) if sigmas is None else np.asarray(sigmas)
    with np.errstate(divide="ignore"):
        return float(np.sum(logsumexp(stats.norm.logpdf(resid / sig) - np.log(sig) + np.log(weights), axis=1)))


def loo_base_dataset(train: Dataset, base_models) -> Dataset:
    """Training data of the base models with their leave-one-out predictions attached."""
    loo = np.column_stack([krr_loo(m.X, train.y, m.kernel, m.ridge) for m in base_models.models])
    return train.with_base(loo)
