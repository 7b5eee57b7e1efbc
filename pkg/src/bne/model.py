"""The BNE probability model.

The ensemble mean ``sum_k f_k(x) omega_k`` is corrected by a residual process
``delta`` (a GP anchored at the training inputs) and the resulting Gaussian
CDF ``u = Phi((y - mu) / sigma_eps)`` is passed through a calibration function
``G(u, x)``.  ``G`` is a GP with identity prior mean, represented by its values
``F_latent`` and its u-derivative ``f_latent`` at a fixed set of anchor points
and softly constrained to be monotone and to stay inside ``[0, 1]``.

Everything that is evaluated inside samplers or optimizers is written as pure
JAX functions over a :class:`ModelArrays` bundle, so changing hyperparameters
does not trigger recompilation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import partial
from typing import NamedTuple

import jax

jax.config.update("jax_enable_x64", True)

import jax.numpy as jnp  # noqa: E402
import numpy as np  # noqa: E402
import scipy.linalg  # noqa: E402
from jax.scipy.linalg import cho_solve, solve_triangular  # noqa: E402
from jax.scipy.special import log_ndtr, ndtr  # noqa: E402

from bne import gp  # noqa: E402

LOG_2PI = math.log(2.0 * math.pi)
PDF_FLOOR = 1e-12
DEFAULT_ANCHORS = 30
DEFAULT_PINS = 10
# u in [0, 1] is stretched to [0, U_SCALE] before entering k_G so that one
# length-scale is meaningful on both the u axis and raw x.
U_SCALE = 4.0

KINDS = ("bne", "bae", "original")


class ModelError(RuntimeError):
    pass


@dataclass(frozen=True)
class Hyperparams:
    l_delta: float = 4.0
    l_G: float = 4.0
    sigma_omega: float = 1.0
    sigma_eps: float = 1.0
    sigma_c: float = 0.01
    lam: float = 0.0

    def __post_init__(self):
        for name in ("l_delta", "l_G", "sigma_omega", "sigma_eps", "sigma_c"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be a positive finite number, got {v!r}")
        if not (np.isfinite(self.lam) and self.lam >= 0):
            raise ValueError(f"lam must be nonnegative, got {self.lam!r}")


@dataclass
class ParamDraw:
    """One joint state of the model parameters (natural coordinates)."""

    omega: np.ndarray
    delta: np.ndarray
    F_latent: np.ndarray
    f_latent: np.ndarray

    def copy(self) -> "ParamDraw":
        return ParamDraw(*(np.array(a, dtype=float, copy=True) for a in self.astuple()))

    def astuple(self):
        return (self.omega, self.delta, self.F_latent, self.f_latent)


class ModelArrays(NamedTuple):
    y: jnp.ndarray
    X: jnp.ndarray
    base: jnp.ndarray
    delta_chol: jnp.ndarray  # prior factor of the orthogonalized delta kernel
    delta_logdet: jnp.ndarray
    anchor_u: jnp.ndarray
    anchor_z: jnp.ndarray
    pin_z: jnp.ndarray  # points where G is held at its boundary value (u = 0 or 1)
    G_prior_chol: jnp.ndarray  # prior factor, (r, d) coordinates, orthogonalized
    G_prior_logdet: jnp.ndarray
    G_cond_chol: jnp.ndarray  # factor used to condition G away from anchors
    sigma_omega: jnp.ndarray
    sigma_eps: jnp.ndarray
    sigma_c: jnp.ndarray
    l_G: jnp.ndarray
    lam: jnp.ndarray
    u_scale: jnp.ndarray


def _as_matrix(a, n: int) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim <= 1:
        a = a.reshape(n, -1) if n else a.reshape(0, max(a.size, 1))
    if a.shape[0] != n:
        raise ModelError(f"expected {n} rows, got {a.shape[0]}")
    return a


def _coprime_near(m: int, target: float) -> int:
    best = 1
    for g in range(1, max(m, 2)):
        if math.gcd(g, m) == 1 and abs(g - target) < abs(best - target):
            best = g
    return best


def anchor_layout(X: np.ndarray, n_anchor: int = DEFAULT_ANCHORS) -> tuple[np.ndarray, np.ndarray]:
    """Anchor points for G: u at quantile midpoints paired with training inputs.

    Inputs are sorted on their first coordinate and subsampled uniformly; the
    u-levels are assigned through a rank-1 lattice so the anchors fill the
    (u, x) rectangle instead of lying on a diagonal.
    """
    X = _as_matrix(X, len(X))
    m = int(n_anchor)
    levels = (np.arange(m) + 0.5) / m
    if len(X) == 0:
        return levels, np.zeros((m, X.shape[1]))
    order = np.argsort(X[:, 0], kind="stable")
    idx = np.round(np.linspace(0, len(X) - 1, m)).astype(int)
    ax = X[order[idx]]
    g = _coprime_near(m, m / ((1 + math.sqrt(5)) / 2))
    au = levels[(np.arange(m) * g) % m]
    return au, ax


def delta_prior_factor(X, base, l_delta: float) -> np.ndarray:
    """Cholesky factor of the residual-process prior covariance at ``X``.

    The Matérn kernel is projected onto the complement of the base-prediction
    columns (dropped when there are too few rows to keep any residual space;
    duplicated or collinear columns span the same space and are skipped).
    """
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    if n == 0:
        return np.zeros((0, 0))
    K_delta = gp.kernel_matrix(gp.KernelSpec("matern32", l_delta), X)
    basis = base[:, gp.independent_columns(base)] if n > base.shape[1] else np.zeros((n, 0))
    _, K_orth = gp.orthogonalize(K_delta, basis)
    L, _ = gp.stable_cholesky(K_orth + 1e-8 * np.eye(n))
    return L


@dataclass
class ModelState:
    """Dataset, hyperparameters and precomputed kernel factors of one model.

    ``kind`` selects the model variant: ``"bne"`` (delta and G), ``"bae"``
    (G pinned to the identity) or ``"original"`` (delta fixed at zero as well).
    """

    X: np.ndarray
    y: np.ndarray
    base: np.ndarray
    hyper: Hyperparams
    kind: str = "bne"
    n_anchor: int = DEFAULT_ANCHORS
    u_scale: float = U_SCALE
    anchor_u: np.ndarray | None = None
    anchor_x: np.ndarray | None = None
    n_pins: int = DEFAULT_PINS
    arrays: ModelArrays = field(init=False, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        self.y = np.asarray(self.y, dtype=float).ravel()
        n = self.y.size
        self.X = _as_matrix(self.X, n)
        self.base = _as_matrix(self.base, n)
        if self.base.shape[1] == 0:
            raise ModelError("at least one base model is required")
        if self.anchor_u is None or self.anchor_x is None:
            self.anchor_u, self.anchor_x = anchor_layout(self.X, self.n_anchor)
        self.anchor_u = np.asarray(self.anchor_u, dtype=float)
        self.anchor_x = np.asarray(self.anchor_x, dtype=float).reshape(self.anchor_u.size, -1)
        self.n_anchor = self.anchor_u.size
        self.arrays = self._build_arrays()

    # -- construction -------------------------------------------------------

    @property
    def use_delta(self) -> bool:
        return self.kind in ("bne", "bae")

    @property
    def use_G(self) -> bool:
        return self.kind == "bne"

    @property
    def N(self) -> int:
        return self.y.size

    @property
    def K(self) -> int:
        return self.base.shape[1]

    @property
    def anchor_z(self) -> np.ndarray:
        return np.column_stack([self.u_scale * self.anchor_u, self.anchor_x])

    @property
    def pin_z(self) -> np.ndarray:
        """G(0, x) = 0 and G(1, x) = 1 are enforced at these points."""
        p = self.X.shape[1]
        if self.n_pins == 0:
            return np.zeros((0, 1 + p))
        if self.N:
            order = np.argsort(self.X[:, 0], kind="stable")
            px = self.X[order[np.round(np.linspace(0, self.N - 1, self.n_pins)).astype(int)]]
        else:
            px = np.zeros((self.n_pins, p))
        ends = np.repeat([0.0, self.u_scale], len(px))
        return np.column_stack([ends, np.vstack([px, px])])

    def with_hyper(self, hyper: Hyperparams) -> "ModelState":
        return replace(self, hyper=hyper)

    def with_kind(self, kind: str) -> "ModelState":
        return replace(self, kind=kind)

    def delta_kernel(self) -> gp.KernelSpec:
        return gp.KernelSpec("matern32", self.hyper.l_delta)

    def G_kernel(self) -> gp.KernelSpec:
        return gp.KernelSpec("matern32", self.hyper.l_G)

    def _build_arrays(self) -> ModelArrays:
        n, h = self.N, self.hyper
        L_delta = delta_prior_factor(self.X, self.base, h.l_delta)
        blocks = gp.derivative_kernels(self.G_kernel(), self.anchor_z)
        A = blocks.joint(with_jitter=False)
        Zp = self.pin_z
        if len(Zp):
            k_fp, _, k_dp, _ = gp.matern32_blocks(self.anchor_z, Zp, h.l_G)
            B = np.vstack([k_fp, k_dp])
            K_pp = gp.kernel_matrix(self.G_kernel(), Zp)
            A_all = np.block([[A, B], [B.T, K_pp]])
            # prior of the free anchors given the boundary pins
            L_pp, _ = gp.stable_cholesky(K_pp)
            V = scipy.linalg.solve_triangular(L_pp, B.T, lower=True)
            A_free = A - V.T @ V
        else:
            A_all, A_free = A, A
        L_cond, _ = gp.stable_cholesky(A_all)
        # identity mean function in (r, d) coordinates: values u, slope 1 / u_scale
        ident = np.concatenate([self.anchor_u, np.full(self.n_anchor, 1.0 / self.u_scale)])
        _, A_orth = gp.orthogonalize(A_free, ident[:, None])
        L_prior, _ = gp.stable_cholesky(A_orth + blocks.jitter * np.eye(A.shape[0]))
        return ModelArrays(
            y=jnp.asarray(self.y),
            X=jnp.asarray(self.X),
            base=jnp.asarray(self.base),
            delta_chol=jnp.asarray(L_delta),
            delta_logdet=jnp.asarray(2.0 * np.sum(np.log(np.diag(L_delta))) if n else 0.0),
            anchor_u=jnp.asarray(self.anchor_u),
            anchor_z=jnp.asarray(self.anchor_z),
            pin_z=jnp.asarray(Zp),
            G_prior_chol=jnp.asarray(L_prior),
            G_prior_logdet=jnp.asarray(2.0 * np.sum(np.log(np.diag(L_prior)))),
            G_cond_chol=jnp.asarray(L_cond),
            sigma_omega=jnp.asarray(h.sigma_omega),
            sigma_eps=jnp.asarray(h.sigma_eps),
            sigma_c=jnp.asarray(h.sigma_c),
            l_G=jnp.asarray(h.l_G),
            lam=jnp.asarray(h.lam),
            u_scale=jnp.asarray(self.u_scale),
        )

    # -- parameter layout ---------------------------------------------------

    def identity_draw(self, omega=None) -> ParamDraw:
        """Draw with delta = 0 and G pinned to the identity."""
        omega = np.full(self.K, 1.0 / self.K) if omega is None else np.asarray(omega, float)
        return ParamDraw(
            omega=omega.copy(),
            delta=np.zeros(self.N),
            F_latent=self.anchor_u.copy(),
            f_latent=np.ones(self.n_anchor),
        )

    @property
    def dim(self) -> int:
        """Number of free coordinates sampled for this model kind."""
        return self.K + (self.N if self.use_delta else 0) + (2 * self.n_anchor if self.use_G else 0)

    def to_white(self, draw: ParamDraw) -> np.ndarray:
        """Map a draw to the whitened coordinates used by samplers."""
        parts = [np.asarray(draw.omega, float)]
        if self.use_delta:
            L = np.asarray(self.arrays.delta_chol)
            parts.append(scipy.linalg.solve_triangular(L, draw.delta, lower=True))
        if self.use_G:
            rd = np.concatenate(
                [draw.F_latent - self.anchor_u, (draw.f_latent - 1.0) / self.u_scale]
            )
            L = np.asarray(self.arrays.G_prior_chol)
            parts.append(scipy.linalg.solve_triangular(L, rd, lower=True))
        return np.concatenate(parts)

    def from_white(self, theta) -> ParamDraw:
        omega, delta, r, d = (np.asarray(a) for a in _white_fields(
            self.arrays, jnp.asarray(theta), self.use_delta, self.use_G))
        return ParamDraw(
            omega=omega,
            delta=delta,
            F_latent=np.asarray(self.anchor_u) + r,
            f_latent=1.0 + self.u_scale * d,
        )

    def jax_draw(self, draw: ParamDraw):
        return tuple(jnp.asarray(a, dtype=float) for a in draw.astuple())


# -- pure JAX core --------------------------------------------------------------


def _white_fields(arr: ModelArrays, theta, use_delta, use_G):
    K = arr.base.shape[1]
    N = arr.y.shape[0]
    M = arr.anchor_u.shape[0]
    omega = theta[:K]
    pos = K
    if use_delta:
        delta = arr.delta_chol @ theta[pos:pos + N]
        pos += N
    else:
        delta = jnp.zeros(N)
    if use_G:
        rd = arr.G_prior_chol @ theta[pos:pos + 2 * M]
        r, d = rd[:M], rd[M:]
    else:
        r, d = jnp.zeros(M), jnp.zeros(M)
    return omega, delta, r, d


def _natural_to_rd(arr: ModelArrays, F_latent, f_latent):
    return F_latent - arr.anchor_u, (f_latent - 1.0) / arr.u_scale


def g_weights(arr: ModelArrays, r, d):
    pins = jnp.zeros(arr.pin_z.shape[0])
    return cho_solve((arr.G_cond_chol, True), jnp.concatenate([r, d, pins]))


def _calibrate_raw(arr: ModelArrays, w, u, x):
    M = arr.anchor_u.shape[0]
    z = jnp.concatenate([arr.u_scale * u[:, None], x], axis=1)
    k, k_dzp, k_dz, k_dzdzp = gp.matern32_blocks(z, arr.anchor_z, arr.l_G, 1.0, xp=jnp)
    w_r, w_d, w_p = w[:M], w[M:2 * M], w[2 * M:]
    G = u + k @ w_r + k_dzp @ w_d
    g = k_dz @ w_r + k_dzdzp @ w_d
    if arr.pin_z.shape[0]:
        kp, _, kp_dz, _ = gp.matern32_blocks(z, arr.pin_z, arr.l_G, 1.0, xp=jnp)
        G = G + kp @ w_p
        g = g + kp_dz @ w_p
    return G, 1.0 + arr.u_scale * g


def calibration_ends(arr: ModelArrays, w, x):
    """Raw G at u = 0 and u = 1 for each row of ``x``."""
    n = x.shape[0]
    G, _ = _calibrate_raw(arr, w, jnp.concatenate([jnp.zeros(n), jnp.ones(n)]), jnp.concatenate([x, x]))
    return G[:n], G[n:]


def calibrate(arr: ModelArrays, w, u, x, ends=None):
    """Calibrated CDF value and its u-derivative at points ``(u, x)``.

    ``u`` has shape (n,), ``x`` shape (n, p).  The GP conditional mean of G is
    rescaled per x so that it maps 0 to 0 and 1 to 1; ``ends`` may carry the
    precomputed raw values at u = 0 and u = 1.
    """
    G, g = _calibrate_raw(arr, w, u, x)
    G0, G1 = calibration_ends(arr, w, x) if ends is None else ends
    width = jnp.maximum(G1 - G0, 1e-6)
    return (G - G0) / width, g / width


def _loglik_terms(arr: ModelArrays, omega, delta, r, d, use_G):
    mu = arr.base @ omega + delta
    t = (arr.y - mu) / arr.sigma_eps
    log_fs = -0.5 * t * t - 0.5 * LOG_2PI - jnp.log(arr.sigma_eps)
    if not use_G:
        return log_fs
    u = ndtr(t)
    _, g = calibrate(arr, g_weights(arr, r, d), u, arr.X)
    return jnp.log(jnp.maximum(g, PDF_FLOOR)) + log_fs


def _constraint(arr: ModelArrays, F_latent, f_latent):
    s = arr.sigma_c
    return jnp.sum(log_ndtr(f_latent / s) + log_ndtr(F_latent / s) + log_ndtr((1.0 - F_latent) / s))


def _prior_omega(arr: ModelArrays, omega):
    s2 = arr.sigma_omega ** 2
    return -0.5 * jnp.sum(omega ** 2) / s2 - 0.5 * omega.shape[0] * (LOG_2PI + jnp.log(s2))


def _prior_delta(arr: ModelArrays, delta):
    v = solve_triangular(arr.delta_chol, delta, lower=True)
    return -0.5 * jnp.sum(v * v) - 0.5 * arr.delta_logdet - 0.5 * delta.shape[0] * LOG_2PI


def _prior_G(arr: ModelArrays, r, d):
    rd = jnp.concatenate([r, d])
    v = solve_triangular(arr.G_prior_chol, rd, lower=True)
    M = r.shape[0]
    # density of (F, f) = (u + r, 1 + c d); the Jacobian contributes -M log c
    return (-0.5 * jnp.sum(v * v) - 0.5 * arr.G_prior_logdet - M * LOG_2PI
            - M * jnp.log(arr.u_scale))


def log_posterior_terms(arr: ModelArrays, omega, delta, F_latent, f_latent, use_delta, use_G):
    r, d = _natural_to_rd(arr, F_latent, f_latent)
    if not use_delta:
        delta = jnp.zeros_like(delta)
    terms = {
        "loglik": jnp.sum(_loglik_terms(arr, omega, delta, r, d, use_G)),
        "prior_omega": _prior_omega(arr, omega),
    }
    if use_delta:
        terms["prior_delta"] = _prior_delta(arr, delta)
    if use_G:
        terms["constraint"] = _constraint(arr, F_latent, f_latent)
        terms["prior_G"] = _prior_G(arr, r, d)
    return terms


@partial(jax.jit, static_argnames=("use_delta", "use_G"))
def _log_posterior_natural(arr, omega, delta, F_latent, f_latent, use_delta, use_G):
    terms = log_posterior_terms(arr, omega, delta, F_latent, f_latent, use_delta, use_G)
    return sum(terms.values()), terms


_log_posterior_natural_grad = jax.jit(
    jax.grad(lambda arr, o, dl, F, f, use_delta, use_G:
             sum(log_posterior_terms(arr, o, dl, F, f, use_delta, use_G).values()),
             argnums=(1, 2, 3, 4)),
    static_argnames=("use_delta", "use_G"),
)


def cdf_on_grid(arr: ModelArrays, w, mu, x, y_grid, use_G, monotone=True):
    """Model CDF at ``y_grid`` (n, m) for n locations with means ``mu`` and inputs ``x``."""
    n, m = y_grid.shape
    u = ndtr((y_grid - mu[:, None]) / arr.sigma_eps)
    if not use_G:
        return u
    xr = jnp.repeat(x, m, axis=0)
    G0, G1 = calibration_ends(arr, w, x)
    G, _ = calibrate(arr, w, u.reshape(-1), xr, (jnp.repeat(G0, m), jnp.repeat(G1, m)))
    F = jnp.clip(G.reshape(n, m), 0.0, 1.0)
    if monotone:
        F = jax.lax.cummax(F, axis=1)
    return F


def cvm_value(arr: ModelArrays, omega, delta, r, d, y_points, use_G):
    """Mean over data and grid of the squared gap between model CDF and indicator."""
    mu = arr.base @ omega + delta
    N = arr.y.shape[0]
    grid = jnp.broadcast_to(y_points, (N, y_points.shape[0]))
    w = g_weights(arr, r, d) if use_G else None
    F = cdf_on_grid(arr, w, mu, arr.X, grid, use_G)
    ind = (arr.y[:, None] < grid).astype(F.dtype)
    return jnp.mean((F - ind) ** 2)


def white_terms(theta, arr: ModelArrays, y_points, use_delta, use_G, calibrated):
    """Pieces of the log target in whitened coordinates.

    ``prior`` is the omega prior plus the standard-normal density of the
    whitened delta and G coordinates (without normalizing constants).
    """
    omega, delta, r, d = _white_fields(arr, theta, use_delta, use_G)
    K = omega.shape[0]
    eta = theta[K:]
    out = {
        "loglik": jnp.sum(_loglik_terms(arr, omega, delta, r, d, use_G)),
        "prior": _prior_omega(arr, omega) - 0.5 * jnp.sum(eta * eta),
        "constraint": jnp.zeros(()),
        "cvm": jnp.zeros(()),
    }
    if use_G:
        out["constraint"] = _constraint(arr, arr.anchor_u + r, 1.0 + arr.u_scale * d)
    if calibrated:
        out["cvm"] = cvm_value(arr, omega, delta, r, d, y_points, use_G)
    return out


def white_log_density(theta, arr: ModelArrays, y_points, use_delta, use_G, calibrated):
    """Log target in whitened coordinates (equals the log posterior up to a constant).

    With ``calibrated`` the CvM penalty ``lam * N * cvm`` is subtracted, giving
    the generalized posterior of the calibrated divergence.
    """
    t = white_terms(theta, arr, y_points, use_delta, use_G, calibrated)
    N = arr.y.shape[0]
    return t["loglik"] + t["prior"] + t["constraint"] - arr.lam * N * t["cvm"]


# -- public numpy-facing operations ----------------------------------------------


def _location_inputs(state: ModelState, x, f):
    x = np.asarray(x, dtype=float).reshape(-1, state.X.shape[1])
    f = np.asarray(f, dtype=float).reshape(x.shape[0], state.K)
    return x, f


def delta_at(state: ModelState, draw: ParamDraw, x, rng: np.random.Generator | None = None):
    """Residual process at new inputs, conditioned on its training-input values.

    Returns the conditional mean, or a conditional sample when ``rng`` is given.
    """
    x = np.asarray(x, dtype=float).reshape(-1, state.X.shape[1])
    if not state.use_delta or state.N == 0:
        if rng is None or not state.use_delta:
            return np.zeros(len(x))
    spec = state.delta_kernel()
    K_train = gp.kernel_matrix(spec, state.X)
    K_cross = gp.kernel_matrix(spec, state.X, x)
    K_test = gp.kernel_matrix(spec, x)
    mean, cov = gp.gp_condition(K_train, K_cross, K_test, draw.delta)
    if rng is None:
        return mean
    L, _ = gp.stable_cholesky(cov)
    return mean + L @ rng.standard_normal(len(x))


def systematic_mean(state: ModelState, draw: ParamDraw, x, f, rng=None) -> np.ndarray:
    x, f = _location_inputs(state, x, f)
    return f @ np.asarray(draw.omega) + delta_at(state, draw, x, rng)


def systematic_cdf(state: ModelState, draw: ParamDraw, x, y, f):
    """Gaussian CDF of the delta-augmented ensemble at ``y`` for one location ``x``."""
    mu = systematic_mean(state, draw, x, f)[0]
    t = (np.asarray(y, dtype=float) - mu) / state.hyper.sigma_eps
    return np.asarray(ndtr(jnp.asarray(t)))


def _G_at(state: ModelState, draw: ParamDraw, u, x):
    arr = state.arrays
    r, d = _natural_to_rd(arr, jnp.asarray(draw.F_latent), jnp.asarray(draw.f_latent))
    w = g_weights(arr, r, d)
    u = jnp.atleast_1d(jnp.asarray(u, dtype=float))
    xr = jnp.broadcast_to(jnp.asarray(x, dtype=float).reshape(1, -1), (u.shape[0], state.X.shape[1]))
    G, g = calibrate(arr, w, u, xr)
    return np.asarray(G), np.asarray(g)


def calibrated_cdf(state: ModelState, draw: ParamDraw, x, y, f):
    """Model CDF ``G(Phi(y))`` at one location.

    ``y`` may be a scalar or an increasing grid; on a grid the values are
    made nondecreasing by a running maximum.  Output is clipped to [0, 1].
    """
    u = np.atleast_1d(systematic_cdf(state, draw, x, y, f))
    if not state.use_G:
        F = u
    else:
        F = np.clip(_G_at(state, draw, u, x)[0], 0.0, 1.0)
        if F.size > 1:
            F = np.maximum.accumulate(F)
    return F[0] if np.ndim(y) == 0 else F


def calibration_slope(state: ModelState, draw: ParamDraw, u, x):
    """Derivative ``g`` of the calibration map at ``(u, x)``."""
    return _G_at(state, draw, u, x)[1]


def model_pdf(state: ModelState, draw: ParamDraw, x, y, f):
    """Density ``g(u) * f_S(y)`` with ``g`` floored at 1e-12."""
    mu = systematic_mean(state, draw, x, f)[0]
    sig = state.hyper.sigma_eps
    t = (np.asarray(y, dtype=float) - mu) / sig
    fs = np.exp(-0.5 * t * t) / (sig * math.sqrt(2 * math.pi))
    if not state.use_G:
        return fs
    u = np.atleast_1d(np.asarray(ndtr(jnp.asarray(t))))
    g = _G_at(state, draw, u, x)[1]
    out = np.maximum(g, PDF_FLOOR) * np.atleast_1d(fs)
    return out[0] if np.ndim(y) == 0 else out


def constraint_loglik(draw: ParamDraw, sigma_c: float) -> float:
    if not sigma_c > 0:
        raise ValueError("sigma_c must be positive")
    F = jnp.asarray(draw.F_latent, dtype=float)
    f = jnp.asarray(draw.f_latent, dtype=float)
    s = sigma_c
    return float(jnp.sum(log_ndtr(f / s) + log_ndtr(F / s) + log_ndtr((1.0 - F) / s)))


def log_posterior(state: ModelState, draw: ParamDraw, return_terms: bool = False):
    """Joint log posterior density of a draw (natural coordinates)."""
    total, terms = _log_posterior_natural(
        state.arrays, *state.jax_draw(draw), use_delta=state.use_delta, use_G=state.use_G)
    terms = {k: float(v) for k, v in terms.items()}
    for name, v in terms.items():
        if not np.isfinite(v):
            raise ModelError(f"log posterior term {name!r} is not finite ({v})")
    total = float(total)
    return (total, terms) if return_terms else total


def log_posterior_grad(state: ModelState, draw: ParamDraw) -> ParamDraw:
    grads = _log_posterior_natural_grad(
        state.arrays, *state.jax_draw(draw), use_delta=state.use_delta, use_G=state.use_G)
    out = ParamDraw(*(np.asarray(g) for g in grads))
    for name, g in zip(("omega", "delta", "F_latent", "f_latent"), out.astuple()):
        if not np.all(np.isfinite(g)):
            raise ModelError(f"gradient of {name!r} is not finite")
    return out


# -- posterior predictive ------------------------------------------------------------


@dataclass
class PredictiveDistribution:
    """Per-draw model CDFs (and densities) on a per-location y grid.

    Arrays are indexed ``[draw, location, grid point]``; ``mu``, ``delta`` and
    ``ensemble`` are ``[draw, location]``.
    """

    x: np.ndarray
    base: np.ndarray
    y_grid: np.ndarray
    cdf: np.ndarray
    pdf: np.ndarray | None
    mu: np.ndarray
    delta: np.ndarray
    ensemble: np.ndarray
    sigma_eps: float
    kind: str = "bne"

    def __post_init__(self):
        if np.any(np.diff(self.y_grid, axis=-1) <= 0):
            raise ValueError("y grid must be strictly increasing at every location")

    @property
    def n_draws(self) -> int:
        return self.cdf.shape[0]

    @property
    def n_locations(self) -> int:
        return self.cdf.shape[1]

    def mean_cdf(self) -> np.ndarray:
        return self.cdf.mean(axis=0)

    def mean_pdf(self) -> np.ndarray:
        if self.pdf is None:
            raise ValueError("densities were not computed for this distribution")
        return self.pdf.mean(axis=0)

    def systematic_cdf(self) -> np.ndarray:
        """Gaussian CDF ``Phi((y - mu) / sigma)`` per draw, before calibration."""
        t = (self.y_grid[None] - self.mu[:, :, None]) / self.sigma_eps
        return np.asarray(ndtr(jnp.asarray(t)))

    def select(self, locations) -> "PredictiveDistribution":
        idx = np.atleast_1d(locations)
        pick = lambda a: None if a is None else a[:, idx]
        return replace(self, x=self.x[idx], base=self.base[idx], y_grid=self.y_grid[idx],
                       cdf=pick(self.cdf), pdf=pick(self.pdf), mu=pick(self.mu),
                       delta=pick(self.delta), ensemble=pick(self.ensemble))


@partial(jax.jit, static_argnames=("use_G", "with_pdf"))
def _predict_core(arr, w, mu, x, grid, use_G, with_pdf):
    Q, M = grid.shape
    xr = jnp.repeat(x, M, axis=0)

    def one(args):
        w_s, mu_s = args
        t = (grid - mu_s[:, None]) / arr.sigma_eps
        u = ndtr(t)
        dens = jnp.exp(-0.5 * t * t - 0.5 * LOG_2PI) / arr.sigma_eps
        if not use_G:
            return u, dens
        G0, G1 = calibration_ends(arr, w_s, x)
        ends = (jnp.repeat(G0, M), jnp.repeat(G1, M))
        G, g = calibrate(arr, w_s, u.reshape(-1), xr, ends)
        F = jax.lax.cummax(jnp.clip(G.reshape(Q, M), 0.0, 1.0), axis=1)
        pdf = jnp.maximum(g.reshape(Q, M), PDF_FLOOR) * dens if with_pdf else dens
        return F, pdf

    return jax.lax.map(one, (w, mu))


def default_grid(mu: np.ndarray, delta: np.ndarray, sigma: float, n_grid: int = 801, width: float = 8.0):
    """Per-location grid covering every draw's Gaussian out to ``width`` sd plus the spread of delta."""
    span = delta.max(axis=0) - delta.min(axis=0)
    lo = mu.min(axis=0) - width * sigma - span
    hi = mu.max(axis=0) + width * sigma + span
    # keep adjacent grid points distinct in floating point when |mu| dwarfs sigma
    floor = 4 * n_grid * np.finfo(float).eps * np.maximum(np.abs(lo), np.abs(hi))
    pad = np.maximum(floor - (hi - lo), 0.0) / 2
    return np.linspace(lo - pad, hi + pad, n_grid, axis=1)


def predict(state: ModelState, draws, x, f, y_grid=None, n_grid: int = 801, max_draws: int | None = 100,
            seed: int = 0, with_pdf: bool = True) -> PredictiveDistribution:
    """Posterior predictive CDFs at new inputs ``x`` with base predictions ``f``.

    ``draws`` is any draw collection with ``flat(name)`` and ``thin``; the
    residual process at ``x`` is sampled from its conditional given each
    draw's training values.  ``y_grid`` may be shared (M,) or per location (Q, M).
    """
    x, f = _location_inputs(state, x, f)
    if max_draws is not None:
        draws = draws.thin(max_draws)
    omega = draws.flat("omega")
    S, Q = omega.shape[0], x.shape[0]
    ens = omega @ f.T
    if state.use_delta and state.N:
        spec = state.delta_kernel()
        K_train = gp.kernel_matrix(spec, state.X)
        L, _ = gp.stable_cholesky(K_train)
        K_cross = gp.kernel_matrix(spec, state.X, x)
        V = scipy.linalg.solve_triangular(L, K_cross, lower=True)
        coef = scipy.linalg.cho_solve((L, True), draws.flat("delta").T)
        cov = gp._psd_clip(gp.kernel_matrix(spec, x) - V.T @ V)
        Lc, _ = gp.stable_cholesky(cov)
        rng = np.random.default_rng(seed)
        delta = (K_cross.T @ coef + Lc @ rng.standard_normal((Q, S))).T
    else:
        delta = np.zeros((S, Q))
    mu = ens + delta
    sigma = state.hyper.sigma_eps
    if y_grid is None:
        grid = default_grid(mu, delta, sigma, n_grid)
    else:
        grid = np.asarray(y_grid, dtype=float)
        grid = np.broadcast_to(grid, (Q, grid.shape[-1])).copy() if grid.ndim == 1 else grid
    arr = state.arrays
    if state.use_G:
        r = draws.flat("F_latent") - state.anchor_u[None, :]
        d = (draws.flat("f_latent") - 1.0) / state.u_scale
        rhs = np.concatenate([r, d, np.zeros((S, state.pin_z.shape[0]))], axis=1).T
        w = scipy.linalg.cho_solve((np.asarray(arr.G_cond_chol), True), rhs).T
    else:
        w = np.zeros((S, 2 * state.n_anchor))
    F, pdf = _predict_core(arr, jnp.asarray(w), jnp.asarray(mu), jnp.asarray(x), jnp.asarray(grid),
                           use_G=state.use_G, with_pdf=with_pdf)
    return PredictiveDistribution(
        x=x, base=f, y_grid=grid, cdf=np.asarray(F), pdf=np.asarray(pdf) if with_pdf else None,
        mu=mu, delta=delta, ensemble=ens, sigma_eps=sigma, kind=state.kind)
