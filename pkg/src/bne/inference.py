"""Posterior computation: HMC, empirical Bayes, calibrated objectives and variational fits."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from functools import lru_cache, partial
from typing import Callable, Iterator

import jax
import jax.numpy as jnp
import numpy as np
import optax
import scipy.linalg
import scipy.optimize
from scipy import stats

from bne import gp
from bne import model as bm
from bne.model import Hyperparams, ModelState, ParamDraw

logger = logging.getLogger(__name__)

DIVERGENCE_THRESHOLD = 1000.0
DIVERGENCE_WARN_FRACTION = 0.2
STEP_JITTER = 0.3
LENGTH_SCALE_WINDOW = (2.0, 10.0)
LENGTH_SCALE_MASS = 0.98
HALF_NORMAL_SCALE = 5.0


class InferenceError(RuntimeError):
    pass


# -- calibrated divergence --------------------------------------------------------


@dataclass(frozen=True)
class CvmGrid:
    y_points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.y_points, dtype=float).ravel()
        if pts.size < 2:
            raise ValueError("a CvM grid needs at least two points")
        if not np.all(np.diff(pts) > 0):
            raise ValueError("CvM grid points must be strictly increasing")
        object.__setattr__(self, "y_points", pts)

    @classmethod
    def from_data(cls, y, m: int = 20, pad: float = 2.0) -> "CvmGrid":
        """Equispaced points over ``[min(y) - pad*sd, max(y) + pad*sd]``."""
        y = np.asarray(y, dtype=float)
        sd = float(np.std(y)) if y.size > 1 else 1.0
        sd = sd if sd > 0 else 1.0
        return cls(np.linspace(y.min() - pad * sd, y.max() + pad * sd, m))

    @property
    def M(self) -> int:
        return self.y_points.size


def cvm_score(cdf_values, y, y_points) -> float:
    """Mean of ``(F_i(y_j) - 1[y_i < y_j])**2`` over observations i and points j.

    ``cdf_values`` is (N, M): each observation's predictive CDF at the points.
    """
    F = np.asarray(cdf_values, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    pts = np.asarray(y_points, dtype=float).ravel()
    if F.shape != (y.size, pts.size):
        raise ValueError(f"cdf values must have shape {(y.size, pts.size)}, got {F.shape}")
    if y.size == 0:
        raise ValueError("empty dataset")
    ind = (y[:, None] < pts[None, :]).astype(float)
    return float(np.mean((F - ind) ** 2))


@partial(jax.jit, static_argnames=("use_G",))
def _cvm_natural(arr, omega, delta, F_latent, f_latent, y_points, use_G):
    r, d = bm._natural_to_rd(arr, F_latent, f_latent)
    return bm.cvm_value(arr, omega, delta, r, d, y_points, use_G)


def cvm_empirical(state: ModelState, draw: ParamDraw, grid: CvmGrid) -> float:
    """CvM estimator of one draw on the training data of ``state``."""
    if state.N == 0:
        raise InferenceError("cvm_empirical needs a non-empty dataset")
    o, dl, F, f = state.jax_draw(draw)
    if not state.use_delta:
        dl = jnp.zeros_like(dl)
    return float(_cvm_natural(state.arrays, o, dl, F, f, jnp.asarray(grid.y_points), use_G=state.use_G))


def calibrated_divergence(state: ModelState, draw: ParamDraw, grid: CvmGrid, lam: float | None = None) -> float:
    """Negative mean log density plus ``lam`` times the CvM estimator."""
    lam = state.hyper.lam if lam is None else lam
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    _, terms = bm.log_posterior(state, draw, return_terms=True)
    value = -terms["loglik"] / state.N
    if lam > 0:
        value += lam * cvm_empirical(state, draw, grid)
    return float(value)


def calibrated_log_posterior(state: ModelState, draw: ParamDraw, grid: CvmGrid) -> float:
    """Generalized log posterior ``-N * divergence + log prior`` with ``lam`` from the hyperparameters."""
    total, terms = bm.log_posterior(state, draw, return_terms=True)
    lam = state.hyper.lam
    value = total
    if lam > 0:
        value -= lam * state.N * cvm_empirical(state, draw, grid)
    if not np.isfinite(value):
        raise InferenceError("calibrated log posterior is not finite")
    return float(value)


# -- HMC ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HmcConfig:
    n_chains: int = 4
    n_warmup: int = 500
    n_samples: int = 1000
    leapfrog_steps: int = 16
    target_accept: float = 0.75
    seed: int = 0
    adapt_mass: bool = True

    def __post_init__(self):
        for name in ("n_chains", "n_warmup", "n_samples", "leapfrog_steps"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be at least 1")
        if not 0 < self.target_accept < 1:
            raise ValueError("target_accept must lie in (0, 1)")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")


@dataclass
class HmcResult:
    """Raw sampler output in the coordinates the target was written in."""

    samples: np.ndarray  # (chains, draws, dim)
    accept_prob: np.ndarray  # (chains, draws)
    divergent: np.ndarray  # (chains, draws)
    step_size: np.ndarray  # (chains,)
    inv_mass: np.ndarray  # (chains, dim)
    status: str = "ok"
    messages: list = field(default_factory=list)

    @property
    def acceptance_rate(self) -> float:
        return float(self.accept_prob.mean())

    @property
    def divergence_rate(self) -> float:
        return float(self.divergent.mean())

    def summary(self) -> dict:
        return {
            "status": self.status,
            "messages": list(self.messages),
            "acceptance_rate": self.acceptance_rate,
            "acceptance_by_chain": self.accept_prob.mean(axis=1).tolist(),
            "divergences": int(self.divergent.sum()),
            "divergence_rate": self.divergence_rate,
            "step_size": self.step_size.tolist(),
        }


_DA_GAMMA, _DA_T0, _DA_KAPPA = 0.05, 10.0, 0.75
_LOG_EPS_RANGE = (-30.0, 30.0)


def _value_and_grad(logp, args):
    vg = jax.value_and_grad(logp)

    def f(theta):
        lp, g = vg(theta, *args)
        ok = jnp.isfinite(lp) & jnp.all(jnp.isfinite(g))
        return jnp.where(ok, lp, -jnp.inf), jnp.where(ok, g, 0.0)

    return f


def _transition(vg, key, theta, lp, g, eps, inv_mass, n_leap):
    k_mom, k_acc, k_jit = jax.random.split(key, 3)
    # jittered step breaks the resonance of a fixed trajectory length
    eps = eps * jax.random.uniform(k_jit, minval=1.0 - STEP_JITTER, maxval=1.0 + STEP_JITTER)
    p0 = jax.random.normal(k_mom, theta.shape) / jnp.sqrt(inv_mass)
    h0 = -lp + 0.5 * jnp.sum(inv_mass * p0 * p0)

    def step(carry, _):
        th, p, gr, _ = carry
        p = p + 0.5 * eps * gr
        th = th + eps * inv_mass * p
        lp_new, gr = vg(th)
        p = p + 0.5 * eps * gr
        return (th, p, gr, lp_new), None

    (th1, p1, g1, lp1), _ = jax.lax.scan(step, (theta, p0, g, lp), None, length=n_leap)
    h1 = -lp1 + 0.5 * jnp.sum(inv_mass * p1 * p1)
    dh = h1 - h0
    dh = jnp.where(jnp.isnan(dh), jnp.inf, dh)
    acc = jnp.minimum(1.0, jnp.exp(-dh))
    take = jax.random.uniform(k_acc) < acc
    divergent = jnp.abs(dh) > DIVERGENCE_THRESHOLD
    theta = jnp.where(take, th1, theta)
    lp = jnp.where(take, lp1, lp)
    g = jnp.where(take, g1, g)
    return theta, lp, g, acc, divergent


def _initial_step(vg, key, theta, lp, g, inv_mass):
    """Double or halve a trial step until one leapfrog step crosses acceptance 0.5."""
    p = jax.random.normal(key, theta.shape) / jnp.sqrt(inv_mass)
    h0 = -lp + 0.5 * jnp.sum(inv_mass * p * p)

    def log_ratio(eps):
        p1 = p + 0.5 * eps * g
        th = theta + eps * inv_mass * p1
        lp1, g1 = vg(th)
        p1 = p1 + 0.5 * eps * g1
        r = h0 - (-lp1 + 0.5 * jnp.sum(inv_mass * p1 * p1))
        return jnp.where(jnp.isnan(r), -jnp.inf, r)

    eps0 = 1.0
    direction = jnp.where(log_ratio(eps0) > math.log(0.5), 1.0, -1.0)

    def cond(c):
        eps, it = c
        return (direction * log_ratio(eps) > direction * math.log(0.5)) & (it < 60)

    def body(c):
        eps, it = c
        return eps * 2.0 ** direction, it + 1

    eps, _ = jax.lax.while_loop(cond, body, (eps0, 0))
    return eps


@partial(jax.jit, static_argnames=("logp", "n_warmup", "n_samples", "n_leap", "window"))
def _run_chain(logp, theta0, key, args, target, *, n_warmup, n_samples, n_leap, window):
    vg = _value_and_grad(logp, args)
    dim = theta0.shape[0]
    lp0, g0 = vg(theta0)
    inv_mass0 = jnp.ones(dim)
    key, k_init = jax.random.split(key)
    eps0 = _initial_step(vg, k_init, theta0, lp0, g0, inv_mass0)
    w0, w1 = window

    def warm(carry, i):
        (key, th, lp, g, log_eps, log_eps_bar, h_bar, t, mu, inv_mass, wn, wmean, wm2) = carry
        key, sub = jax.random.split(key)
        th, lp, g, acc, _ = _transition(vg, sub, th, lp, g, jnp.exp(log_eps), inv_mass, n_leap)
        t = t + 1.0
        h_bar = (1.0 - 1.0 / (t + _DA_T0)) * h_bar + (target - acc) / (t + _DA_T0)
        log_eps = jnp.clip(mu - jnp.sqrt(t) / _DA_GAMMA * h_bar, *_LOG_EPS_RANGE)
        eta = t ** (-_DA_KAPPA)
        log_eps_bar = eta * log_eps + (1.0 - eta) * log_eps_bar
        # Welford accumulation of the draw variance inside the adaptation window
        inside = (i >= w0) & (i < w1)
        wn_new = wn + 1.0
        delta = th - wmean
        wmean_new = wmean + delta / wn_new
        wm2_new = wm2 + delta * (th - wmean_new)
        wn = jnp.where(inside, wn_new, wn)
        wmean = jnp.where(inside, wmean_new, wmean)
        wm2 = jnp.where(inside, wm2_new, wm2)
        close = (i == w1 - 1) & (w1 > w0)
        var = wm2 / jnp.maximum(wn - 1.0, 1.0)
        reg = (wn / (wn + 5.0)) * var + 1e-3 * (5.0 / (wn + 5.0))
        inv_mass = jnp.where(close, reg, inv_mass)
        # restart step-size adaptation under the new metric
        mu = jnp.where(close, jnp.log(10.0) + log_eps, mu)
        h_bar = jnp.where(close, 0.0, h_bar)
        t = jnp.where(close, 0.0, t)
        log_eps_bar = jnp.where(close, 0.0, log_eps_bar)
        carry = (key, th, lp, g, log_eps, log_eps_bar, h_bar, t, mu, inv_mass, wn, wmean, wm2)
        return carry, None

    log_eps0 = jnp.log(eps0)
    carry = (key, theta0, lp0, g0, log_eps0, 0.0, 0.0, 0.0, jnp.log(10.0) + log_eps0, inv_mass0,
             0.0, jnp.zeros(dim), jnp.zeros(dim))
    carry, _ = jax.lax.scan(warm, carry, jnp.arange(n_warmup))
    (key, th, lp, g, log_eps, log_eps_bar, _, t, _, inv_mass, _, _, _) = carry
    # if the last adaptation restart left no time to average, fall back to the running value
    eps = jnp.where(t > 0, jnp.exp(log_eps_bar), jnp.exp(log_eps))

    def draw(carry, _):
        key, th, lp, g = carry
        key, sub = jax.random.split(key)
        th, lp, g, acc, div = _transition(vg, sub, th, lp, g, eps, inv_mass, n_leap)
        return (key, th, lp, g), (th, acc, div)

    _, (ths, accs, divs) = jax.lax.scan(draw, (key, th, lp, g), None, length=n_samples)
    return ths, accs, divs, eps, inv_mass


def _adapt_window(cfg: HmcConfig) -> tuple[int, int]:
    if not cfg.adapt_mass:
        return (0, 0)
    w0, w1 = int(0.15 * cfg.n_warmup), int(0.75 * cfg.n_warmup)
    return (w0, w1) if w1 - w0 >= 20 else (0, 0)


def hmc_sample(log_density: Callable, init, cfg: HmcConfig, args: tuple = ()) -> HmcResult:
    """Hamiltonian Monte Carlo with dual-averaged step size and a diagonal metric.

    ``log_density(theta, *args)`` must be a JAX-traceable scalar function;
    pass data through ``args`` so repeated calls reuse the compiled sampler.
    ``init`` is a flat vector shared by all chains or a (n_chains, dim) array.
    Chain ``c`` uses the random stream ``seed + c``.
    """
    init = np.asarray(init, dtype=float)
    if init.ndim == 1:
        init = np.broadcast_to(init, (cfg.n_chains, init.size))
    if init.shape[0] != cfg.n_chains:
        raise ValueError(f"init has {init.shape[0]} rows for {cfg.n_chains} chains")
    args = tuple(args)
    for c in range(cfg.n_chains):
        lp0 = float(log_density(jnp.asarray(init[c]), *args))
        if not np.isfinite(lp0):
            raise InferenceError(f"log density is not finite at the initial point of chain {c}")
    outs = []
    for c in range(cfg.n_chains):
        key = jax.random.PRNGKey(cfg.seed + c)
        outs.append(_run_chain(
            log_density, jnp.asarray(init[c]), key, args, cfg.target_accept,
            n_warmup=cfg.n_warmup, n_samples=cfg.n_samples, n_leap=cfg.leapfrog_steps,
            window=_adapt_window(cfg)))
    res = HmcResult(
        samples=np.stack([np.asarray(o[0]) for o in outs]),
        accept_prob=np.stack([np.asarray(o[1]) for o in outs]),
        divergent=np.stack([np.asarray(o[2]) for o in outs]),
        step_size=np.array([float(o[3]) for o in outs]),
        inv_mass=np.stack([np.asarray(o[4]) for o in outs]),
    )
    if not np.all(np.isfinite(res.samples)):
        res.status = "failed"
        res.messages.append("non-finite values in the sampled chain")
    elif res.divergence_rate > DIVERGENCE_WARN_FRACTION:
        res.status = "warning"
        res.messages.append(f"{res.divergence_rate:.0%} of post-warmup transitions diverged")
    return res


# -- posterior draws for the model ---------------------------------------------------


@dataclass
class PosteriorDraws:
    """Posterior draws in natural coordinates, indexed by (chain, step)."""

    omega: np.ndarray
    delta: np.ndarray
    F_latent: np.ndarray
    f_latent: np.ndarray
    kind: str = "bne"
    hyper: Hyperparams | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_chains(self) -> int:
        return self.omega.shape[0]

    @property
    def n_samples(self) -> int:
        return self.omega.shape[1]

    def __len__(self) -> int:
        return self.n_chains * self.n_samples

    @property
    def chain_index(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_chains), self.n_samples)

    @property
    def step_index(self) -> np.ndarray:
        return np.tile(np.arange(self.n_samples), self.n_chains)

    def flat(self, name: str) -> np.ndarray:
        a = getattr(self, name)
        return a.reshape(len(self), *a.shape[2:])

    def draw(self, i: int) -> ParamDraw:
        c, s = divmod(int(i), self.n_samples)
        return ParamDraw(self.omega[c, s].copy(), self.delta[c, s].copy(),
                         self.F_latent[c, s].copy(), self.f_latent[c, s].copy())

    def __iter__(self) -> Iterator[ParamDraw]:
        for i in range(len(self)):
            yield self.draw(i)

    def thin(self, max_draws: int) -> "PosteriorDraws":
        """Evenly thin every chain so that at most ``max_draws`` remain."""
        if len(self) <= max_draws:
            return self
        keep = max(1, max_draws // self.n_chains)
        idx = np.unique(np.linspace(0, self.n_samples - 1, keep).round().astype(int))
        return replace(self, omega=self.omega[:, idx], delta=self.delta[:, idx],
                       F_latent=self.F_latent[:, idx], f_latent=self.f_latent[:, idx])

    @classmethod
    def from_white(cls, state: ModelState, samples: np.ndarray, meta=None) -> "PosteriorDraws":
        C, S, _ = samples.shape
        flat = samples.reshape(C * S, -1)
        K, N, M = state.K, state.N, state.n_anchor
        omega = flat[:, :K]
        pos = K
        if state.use_delta:
            delta = flat[:, pos:pos + N] @ np.asarray(state.arrays.delta_chol).T
            pos += N
        else:
            delta = np.zeros((C * S, N))
        if state.use_G:
            rd = flat[:, pos:pos + 2 * M] @ np.asarray(state.arrays.G_prior_chol).T
            F = state.anchor_u[None, :] + rd[:, :M]
            f = 1.0 + state.u_scale * rd[:, M:]
        else:
            F = np.broadcast_to(state.anchor_u, (C * S, M)).copy()
            f = np.ones((C * S, M))
        shape = lambda a: a.reshape(C, S, -1)
        return cls(shape(omega), shape(delta), shape(F), shape(f), kind=state.kind,
                   hyper=state.hyper, meta=dict(meta or {}))


@lru_cache(maxsize=None)
def model_target(use_delta: bool, use_G: bool, calibrated: bool) -> Callable:
    """Stable (hashable) log target for a model variant; arguments ``(theta, arr, y_points)``."""

    def target(theta, arr, y_points):
        return bm.white_log_density(theta, arr, y_points, use_delta, use_G, calibrated)

    return target


def conjugate_posterior(F, y, sigma_eps: float, sigma_omega: float) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of ``omega`` under ``y ~ N(F omega, sigma_eps^2)``, ``omega ~ N(0, sigma_omega^2)``.

    Uses the SVD of ``F`` so that collinear or badly scaled base predictions
    leave the unidentified directions at their prior variance.
    """
    F = np.asarray(F, dtype=float)
    K = F.shape[1]
    # full V only when it is wider than the economy one
    U, s, Vt = np.linalg.svd(F, full_matrices=F.shape[0] < K)
    U = U[:, :s.size]
    s_full = np.zeros(K)
    s_full[:s.size] = s
    prec = s_full ** 2 / sigma_eps ** 2 + 1.0 / sigma_omega ** 2
    cov = (Vt.T / prec) @ Vt
    proj = np.zeros(K)
    proj[:s.size] = s * (U.T @ np.asarray(y, dtype=float))
    mean = Vt.T @ (proj / (sigma_eps ** 2 * prec))
    return mean, 0.5 * (cov + cov.T)


def default_init(state: ModelState) -> ParamDraw:
    """Ridge-regression weights, zero residual and identity calibration."""
    B, y = state.base, state.y
    if state.N:
        omega = conjugate_posterior(B, y, state.hyper.sigma_eps, state.hyper.sigma_omega)[0]
    else:
        omega = np.zeros(state.K)
    return state.identity_draw(omega)


def sample_posterior(state: ModelState, cfg: HmcConfig, grid: CvmGrid | None = None,
                     init: ParamDraw | None = None) -> PosteriorDraws:
    """Run HMC on the (generalized, when ``lam > 0``) posterior of ``state``."""
    calibrated = state.hyper.lam > 0
    if calibrated and grid is None:
        grid = CvmGrid.from_data(state.y)
    y_points = jnp.asarray(grid.y_points if grid is not None else np.zeros(2))
    theta0 = state.to_white(init if init is not None else default_init(state))
    rng = np.random.default_rng(cfg.seed)
    inits = theta0[None, :] + 0.05 * rng.standard_normal((cfg.n_chains, theta0.size))
    inits[0] = theta0
    target = model_target(state.use_delta, state.use_G, calibrated)
    res = hmc_sample(target, inits, cfg, args=(state.arrays, y_points))
    meta = {"sampler": "hmc", "seed": cfg.seed, "config": cfg.__dict__.copy(), **res.summary()}
    if res.status == "warning":
        warnings.warn(res.messages[-1], RuntimeWarning, stacklevel=2)
    return PosteriorDraws.from_white(state, res.samples, meta)


# -- empirical Bayes ----------------------------------------------------------------------


@lru_cache(maxsize=None)
def invgamma_params(lower: float = LENGTH_SCALE_WINDOW[0], upper: float = LENGTH_SCALE_WINDOW[1],
                    mass: float = LENGTH_SCALE_MASS) -> tuple[float, float]:
    """Shape and scale of the inverse-gamma prior putting ``mass`` on ``[lower, upper]``.

    The remaining probability is split equally between the two tails.
    """
    tail = 0.5 * (1.0 - mass)

    def eqs(v):
        a, b = np.exp(v)
        return [stats.invgamma.logcdf(lower, a, scale=b) - math.log(tail),
                stats.invgamma.logsf(upper, a, scale=b) - math.log(tail)]

    sol = scipy.optimize.root(eqs, x0=np.log([8.0, 35.0]), method="hybr")
    if not sol.success:
        raise InferenceError(f"could not solve for the inverse-gamma prior: {sol.message}")
    a, b = np.exp(sol.x)
    return float(a), float(b)


def log_halfnormal(sigma: float, scale: float = HALF_NORMAL_SCALE) -> float:
    return float(stats.halfnorm.logpdf(sigma, scale=scale))


def log_hyperprior(h: Hyperparams, kind: str = "bne") -> float:
    a, b = invgamma_params()
    lp = log_halfnormal(h.sigma_omega) + log_halfnormal(h.sigma_eps)
    if kind in ("bne", "bae"):
        lp += stats.invgamma.logpdf(h.l_delta, a, scale=b)
    if kind == "bne":
        lp += stats.invgamma.logpdf(h.l_G, a, scale=b)
    return float(lp)


def _gaussian_cov(state: ModelState, h: Hyperparams, use_delta: bool) -> np.ndarray:
    C = h.sigma_omega ** 2 * state.base @ state.base.T + h.sigma_eps ** 2 * np.eye(state.N)
    if use_delta:
        L = bm.delta_prior_factor(state.X, state.base, h.l_delta)
        C = C + L @ L.T
    return C


def _cov_factor(C):
    # the noise term usually makes C positive definite; jitter only as a fallback
    try:
        return np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        return gp.stable_cholesky(C)[0]


def gaussian_log_evidence(state: ModelState, h: Hyperparams, use_delta: bool = True) -> float:
    """Exact log marginal likelihood of the model with G fixed at the identity."""
    C = _gaussian_cov(state, h, use_delta)
    try:
        L = _cov_factor(C)
    except gp.GPError:
        return -np.inf
    a = scipy.linalg.solve_triangular(L, state.y, lower=True)
    return float(-0.5 * a @ a - np.sum(np.log(np.diag(L))) - 0.5 * state.N * bm.LOG_2PI)


def gaussian_posterior_mean(state: ModelState, h: Hyperparams, use_delta: bool = True):
    """Posterior means of ``omega`` and ``delta`` under the Gaussian (G = identity) model."""
    C = _gaussian_cov(state, h, use_delta)
    L_C = _cov_factor(C)
    alpha = scipy.linalg.cho_solve((L_C, True), state.y)
    omega = h.sigma_omega ** 2 * state.base.T @ alpha
    if use_delta:
        L = bm.delta_prior_factor(state.X, state.base, h.l_delta)
        delta = L @ (L.T @ alpha)
    else:
        delta = np.zeros(state.N)
    return omega, delta


def _golden_log(objective, value: float, lo: float, hi: float, name: str) -> float:
    """Maximize ``objective`` over ``[lo, hi]`` on a log scale; warn when stuck at a bound."""
    res = scipy.optimize.minimize_scalar(
        lambda v: -objective(math.exp(v)), bounds=(math.log(lo), math.log(hi)),
        method="bounded", options={"xatol": 1e-3})
    best = math.exp(res.x)
    if -res.fun < objective(value):
        best = value
    if min(abs(math.log(best / lo)), abs(math.log(best / hi))) < 1e-2:
        warnings.warn(f"empirical Bayes: {name} reached its search bound {best:.3g}", RuntimeWarning, stacklevel=3)
    return best


@partial(jax.jit, static_argnames=())
def _g_block_objective(eta, arr, omega, delta):
    M = arr.anchor_u.shape[0]
    rd = arr.G_prior_chol @ eta
    r, d = rd[:M], rd[M:]
    ll = jnp.sum(bm._loglik_terms(arr, omega, delta, r, d, True))
    con = bm._constraint(arr, arr.anchor_u + r, 1.0 + arr.u_scale * d)
    return ll + con - 0.5 * jnp.sum(eta * eta)


_g_block_grad = jax.jit(jax.value_and_grad(_g_block_objective))
_g_block_hess = jax.jit(jax.hessian(_g_block_objective))


def laplace_G_evidence(state: ModelState, omega, delta) -> tuple[float, np.ndarray]:
    """Laplace approximation to the evidence of the calibration block with (omega, delta) fixed."""
    arr = state.arrays
    om, dl = jnp.asarray(omega), jnp.asarray(delta)
    dim = 2 * state.n_anchor

    def f(eta):
        v, g = _g_block_grad(jnp.asarray(eta), arr, om, dl)
        return -float(v), -np.asarray(g)

    res = scipy.optimize.minimize(f, np.zeros(dim), jac=True, method="L-BFGS-B",
                                  options={"maxiter": 500})
    H = -np.asarray(_g_block_hess(jnp.asarray(res.x), arr, om, dl))
    ev = np.linalg.eigvalsh(0.5 * (H + H.T))
    logdet = float(np.sum(np.log(np.maximum(ev, 1e-10))))
    return float(-res.fun - 0.5 * logdet), res.x


def empirical_bayes_fit(state: ModelState, sweeps: int = 3, return_info: bool = False):
    """Hyperparameters maximizing hyperprior-regularized evidence.

    Length-scale ``l_delta`` and the two scales are fitted on the exact
    evidence of the model with G fixed at the identity (coordinate-wise,
    log-scale bounded search).  For the full model ``l_G`` is then chosen on a
    Laplace approximation of the calibration block's evidence.
    """
    if state.N == 0:
        raise InferenceError("empirical Bayes needs a non-empty dataset")
    use_delta = state.use_delta
    h = state.hyper
    sd = float(np.std(state.y)) or 1.0
    h = replace(h, sigma_eps=min(max(0.5 * sd, 1e-3), 1e3), sigma_omega=1.0)

    def obj1(hh):
        return gaussian_log_evidence(state, hh, use_delta) + log_hyperprior(hh, "bae" if use_delta else "original")

    coords = [("sigma_omega", 1e-3, 1e3), ("sigma_eps", 1e-4, 1e4)]
    if use_delta:
        coords.insert(0, ("l_delta", 0.2, 50.0))
    for _ in range(sweeps):
        for name, lo, hi in coords:
            best = _golden_log(lambda v: obj1(replace(h, **{name: v})), getattr(h, name), lo, hi, name)
            h = replace(h, **{name: best})
    info = {"stage1_objective": obj1(h)}
    if state.use_G:
        omega, delta = gaussian_posterior_mean(state, h, use_delta)
        a, b = invgamma_params()

        def obj2(l):
            st = state.with_hyper(replace(h, l_G=l))
            ev, _ = laplace_G_evidence(st, omega, delta)
            return ev + stats.invgamma.logpdf(l, a, scale=b)

        h = replace(h, l_G=_golden_log(obj2, h.l_G, 0.5, 30.0, "l_G"))
        info["stage2_objective"] = obj2(h.l_G)
    return (h, info) if return_info else h


# -- calibrated variational inference --------------------------------------------------


@dataclass
class VariationalState:
    """Fully factorized Gaussian over the whitened sampler coordinates."""

    mean: np.ndarray
    log_sd: np.ndarray
    mc_samples: int = 8
    lr_decay: float = 0.0  # step size lr / (1 + lr_decay * t)
    trace: list = field(default_factory=list)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.log_sd = np.asarray(self.log_sd, dtype=float)
        if self.mean.shape != self.log_sd.shape:
            raise ValueError("mean and log_sd must have equal shapes")
        if not np.all(np.isfinite(self.log_sd)):
            raise ValueError("log_sd must be finite")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be at least 1")

    @classmethod
    def prior(cls, state: ModelState, **kw) -> "VariationalState":
        log_sd = np.zeros(state.dim)
        log_sd[:state.K] = math.log(state.hyper.sigma_omega)
        return cls(np.zeros(state.dim), log_sd, **kw)

    @classmethod
    def around(cls, state: ModelState, draw: ParamDraw, log_sd: float = -2.0, **kw) -> "VariationalState":
        mean = state.to_white(draw)
        return cls(mean, np.full(mean.size, log_sd), **kw)

    def copy(self) -> "VariationalState":
        return replace(self, mean=self.mean.copy(), log_sd=self.log_sd.copy(), trace=list(self.trace))

    def sample(self, state: ModelState, n: int, seed: int = 0) -> PosteriorDraws:
        rng = np.random.default_rng(seed)
        eps = rng.standard_normal((n, self.mean.size))
        theta = self.mean + np.exp(self.log_sd) * eps
        return PosteriorDraws.from_white(state, theta[None], {"sampler": "cvi", "seed": seed})


def _kl(mean, log_sd, K, sigma_omega):
    s2 = jnp.exp(2.0 * log_sd)
    prior_var = jnp.concatenate([jnp.full(K, sigma_omega ** 2), jnp.ones(mean.shape[0] - K)])
    return jnp.sum(0.5 * jnp.log(prior_var) - log_sd + (s2 + mean ** 2) / (2.0 * prior_var) - 0.5)


@lru_cache(maxsize=None)
def _elbo_fns(use_delta: bool, use_G: bool, calibrated: bool):
    def per_sample(eps, mean, log_sd, arr, y_points):
        theta = mean + jnp.exp(log_sd) * eps
        t = bm.white_terms(theta, arr, y_points, use_delta, use_G, calibrated)
        N = arr.y.shape[0]
        return -t["loglik"] - t["constraint"] + arr.lam * N * t["cvm"]

    batched = jax.vmap(per_sample, in_axes=(0, None, None, None, None))

    def loss(params, eps, arr, y_points):
        mean, log_sd = params
        K = arr.base.shape[1]
        return jnp.mean(batched(eps, mean, log_sd, arr, y_points)) + _kl(mean, log_sd, K, arr.sigma_omega)

    return jax.jit(batched), jax.jit(loss), jax.jit(jax.value_and_grad(loss))


def _grid_points(grid: CvmGrid | None):
    return jnp.asarray(grid.y_points if grid is not None else np.zeros(2))


def elbo_samples(state: ModelState, vstate: VariationalState, grid: CvmGrid | None = None, seed: int = 0,
                 n: int | None = None) -> tuple[np.ndarray, float]:
    """Per-sample data terms of the calibrated ELBO and the closed-form KL."""
    n = vstate.mc_samples if n is None else n
    batched, _, _ = _elbo_fns(state.use_delta, state.use_G, state.hyper.lam > 0)
    eps = jax.random.normal(jax.random.PRNGKey(seed), (n, vstate.mean.size))
    vals = np.asarray(batched(eps, jnp.asarray(vstate.mean), jnp.asarray(vstate.log_sd), state.arrays,
                              _grid_points(grid)))
    bad = ~np.isfinite(vals)
    if bad.any():
        eps2 = jax.random.normal(jax.random.PRNGKey(seed + 7919), (int(bad.sum()), vstate.mean.size))
        redo = np.asarray(batched(eps2, jnp.asarray(vstate.mean), jnp.asarray(vstate.log_sd), state.arrays,
                                  _grid_points(grid)))
        if not np.all(np.isfinite(redo)):
            raise InferenceError("non-finite ELBO sample after resampling")
        vals[bad] = redo
    return vals, kl_divergence(state, vstate)


def kl_divergence(state: ModelState, vstate: VariationalState) -> float:
    return float(_kl(jnp.asarray(vstate.mean), jnp.asarray(vstate.log_sd), state.K, state.hyper.sigma_omega))


def calibrated_elbo(state: ModelState, vstate: VariationalState, grid: CvmGrid | None = None, seed: int = 0) -> float:
    """Monte Carlo calibrated ELBO in loss orientation (lower is better).

    Expected negative log likelihood (constraint factor included) plus KL to
    the prior plus ``lam * N`` times the expected CvM estimator.
    """
    vals, kl = elbo_samples(state, vstate, grid, seed)
    return float(vals.mean() + kl)


def cvi_optimize(state: ModelState, vstate: VariationalState, grid: CvmGrid | None = None, steps: int = 1000,
                 lr: float = 0.01, seed: int = 0, max_restarts: int = 3) -> VariationalState:
    """Reparameterization-gradient Adam on the calibrated ELBO."""
    if lr < 0:
        raise ValueError("lr must be nonnegative")
    out = vstate.copy()
    if lr == 0 or steps == 0:
        return out
    _, _, vg = _elbo_fns(state.use_delta, state.use_G, state.hyper.lam > 0)
    y_points = _grid_points(grid)
    params = (jnp.asarray(out.mean), jnp.asarray(out.log_sd))
    base_key = jax.random.PRNGKey(seed)
    restarts = 0
    step = 0

    def make_opt(rate):
        sched = (lambda t: rate / (1.0 + out.lr_decay * t)) if out.lr_decay else rate
        return optax.adam(sched)

    opt = make_opt(lr)
    opt_state = opt.init(params)

    @jax.jit
    def update(params, opt_state, eps):
        value, grads = vg(params, eps, state.arrays, y_points)
        upd, opt_state = opt.update(grads, opt_state, params)
        return optax.apply_updates(params, upd), opt_state, value

    last_good = params
    while step < steps:
        eps = jax.random.normal(jax.random.fold_in(base_key, step), (out.mc_samples, out.mean.size))
        new_params, new_opt_state, value = update(params, opt_state, eps)
        finite = np.isfinite(float(value)) and all(bool(jnp.all(jnp.isfinite(p))) for p in new_params)
        if not finite:
            if restarts >= max_restarts:
                raise InferenceError(f"ELBO became non-finite after {max_restarts} step-size halvings")
            restarts += 1
            lr *= 0.5
            logger.warning("non-finite ELBO at step %d, restarting with lr=%g", step, lr)
            params = last_good
            opt = make_opt(lr)
            opt_state = opt.init(params)

            @jax.jit
            def update(params, opt_state, eps, opt=opt):
                value, grads = vg(params, eps, state.arrays, y_points)
                upd, opt_state = opt.update(grads, opt_state, params)
                return optax.apply_updates(params, upd), opt_state, value

            continue
        out.trace.append(float(value))
        last_good = params
        params, opt_state = new_params, new_opt_state
        step += 1
    out.mean = np.asarray(params[0])
    out.log_sd = np.asarray(params[1])
    return out
