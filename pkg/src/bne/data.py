"""Datasets, the heteroscedastic synthetic benchmark and kernel ridge base models."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.linalg
from scipy import special, stats
from sklearn.model_selection import KFold

from bne import gp


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    """Inputs ``X`` (N, p), response ``y`` (N,) and optional base predictions (N, K)."""

    X: np.ndarray
    y: np.ndarray
    base: np.ndarray | None = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        X = X.reshape(-1, 1) if X.ndim == 1 else X
        y = np.asarray(self.y, dtype=float).ravel()
        if X.shape[0] != y.size:
            raise DataError(f"X has {X.shape[0]} rows but y has {y.size}")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        if self.base is not None:
            B = np.asarray(self.base, dtype=float)
            B = B.reshape(-1, 1) if B.ndim == 1 else B
            if B.shape[0] != y.size:
                raise DataError(f"base predictions have {B.shape[0]} rows but y has {y.size}")
            object.__setattr__(self, "base", B)
        for name in ("X", "y", "base"):
            a = getattr(self, name)
            if a is not None and not np.all(np.isfinite(a)):
                raise DataError(f"{name} contains non-finite values")

    @property
    def N(self) -> int:
        return self.y.size

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def K(self) -> int:
        return 0 if self.base is None else self.base.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.y[idx], None if self.base is None else self.base[idx])

    def with_base(self, base) -> "Dataset":
        return replace(self, base=np.asarray(base, dtype=float))


# -- synthetic benchmark ---------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Heteroscedastic 1-D process ``y = amp*sin(x) + noise_amp*cos(x/2) * eps``.

    ``eps ~ Weibull(alpha(x), scale)`` with
    ``alpha(x) = shape_floor + shape_amp * exp(-shape_rate * |x|)``;
    x comes from an equal-weight Gaussian mixture (``sds`` are standard deviations).
    """

    n: int = 200
    seed: int = 0
    means: tuple = (-4.0, 0.0, 4.0)
    sds: tuple = (0.4, 1.0, 0.4)
    weights: tuple | None = None
    amp: float = 7.0
    noise_amp: float = 3.0
    shape_floor: float = 0.0
    shape_amp: float = 3.0
    shape_rate: float = 1.0
    scale: float = 1.0

    def __post_init__(self):
        if int(self.n) < 1:
            raise DataError("n must be at least 1")
        if len(self.means) != len(self.sds) or (self.weights is not None and len(self.weights) != len(self.means)):
            raise DataError("mixture means, sds and weights must have equal lengths")
        if min(self.sds) <= 0 or self.scale <= 0:
            raise DataError("mixture sds and the Weibull scale must be positive")
        if self.shape_floor < 0 or self.shape_amp < 0 or self.shape_floor + self.shape_amp <= 0:
            raise DataError("Weibull shape must be positive everywhere")
        if self.shape_floor == 0 and self.shape_rate < 0:
            raise DataError("Weibull shape must be positive everywhere")

    @property
    def mixture_weights(self) -> np.ndarray:
        if self.weights is None:
            return np.full(len(self.means), 1.0 / len(self.means))
        w = np.asarray(self.weights, dtype=float)
        return w / w.sum()

    def alpha(self, x) -> np.ndarray:
        return self.shape_floor + self.shape_amp * np.exp(-self.shape_rate * np.abs(np.asarray(x, dtype=float)))

    def location(self, x) -> np.ndarray:
        return self.amp * np.sin(np.asarray(x, dtype=float))

    def noise_scale(self, x) -> np.ndarray:
        return self.noise_amp * np.cos(np.asarray(x, dtype=float) / 2.0)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("means", "sds", "weights"):
            if d[k] is not None:
                d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        for k in ("means", "sds", "weights"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass(frozen=True)
class Truth:
    """Analytic conditional law of a :class:`SyntheticSpec` process."""

    spec: SyntheticSpec

    def true_mean(self, x) -> np.ndarray:
        x = _flat_x(x)
        s = self.spec
        # gammaln avoids overflow of Gamma(1 + 1/alpha) only up to float range; inf is the honest answer beyond
        with np.errstate(over="ignore"):
            m_eps = s.scale * np.exp(special.gammaln(1.0 + 1.0 / s.alpha(x)))
        return s.location(x) + s.noise_scale(x) * m_eps

    def true_cdf(self, y, x) -> np.ndarray:
        """``P(Y <= y | x)``; broadcasts ``y`` (..., ) against ``x`` (...)."""
        x = _flat_x(x)
        s = self.spec
        y = np.asarray(y, dtype=float)
        m, sc, a = s.location(x), s.noise_scale(x), s.alpha(x)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (y - m) / np.where(sc == 0, 1.0, sc)
        Fw = stats.weibull_min.cdf(t, a, scale=s.scale)
        # negative scale reflects the noise: P(m + s*eps <= y) = P(eps >= t)
        out = np.where(sc > 0, Fw, 1.0 - stats.weibull_min.cdf(t, a, scale=s.scale))
        return np.where(sc == 0, (y >= m).astype(float), out)

    def true_quantile(self, p, x) -> np.ndarray:
        x = _flat_x(x)
        s = self.spec
        p = np.asarray(p, dtype=float)
        m, sc, a = s.location(x), s.noise_scale(x), s.alpha(x)
        q = np.where(sc >= 0, p, 1.0 - p)
        return m + sc * stats.weibull_min.ppf(q, a, scale=s.scale)

    def to_dict(self) -> dict:
        return {
            "process": "y = amp*sin(x) + noise_amp*cos(x/2)*eps, eps ~ Weibull(alpha(x), scale)",
            "alpha": "shape_floor + shape_amp*exp(-shape_rate*|x|)",
            "spec": self.spec.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "Truth":
        return cls(SyntheticSpec.from_dict(d["spec"]))


def _flat_x(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 2:
        if x.shape[1] != 1:
            raise DataError("the synthetic process is one-dimensional")
        x = x[:, 0]
    return x


def sample_inputs(spec: SyntheticSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    comp = rng.choice(len(spec.means), size=n, p=spec.mixture_weights)
    return np.asarray(spec.means)[comp] + np.asarray(spec.sds)[comp] * rng.standard_normal(n)


def simulate(spec: SyntheticSpec) -> tuple[Dataset, Truth]:
    """Draw ``spec.n`` points from the synthetic process; returns the data and its truth."""
    rng = np.random.default_rng(spec.seed)
    x = sample_inputs(spec, spec.n, rng)
    eps = spec.scale * rng.weibull(spec.alpha(x))
    y = spec.location(x) + spec.noise_scale(x) * eps
    return Dataset(x[:, None], y), Truth(spec)


# -- kernel ridge base models -----------------------------------------------------------------


DEFAULT_RIDGE = 1e-3
CV_LENGTH_SCALES = tuple(np.logspace(-1, 1, 9))
CV_FOLDS = 5


@dataclass(frozen=True)
class BaseModelSpec:
    """Kernel ridge regression; ``length_scale=None`` selects it by cross-validation."""

    family: str = "rbf"
    length_scale: float | None = None
    period: float = 2 * math.pi
    ridge: float = DEFAULT_RIDGE
    split: float = 0.5

    def __post_init__(self):
        if self.family not in gp.FAMILIES:
            raise DataError(f"unknown kernel family {self.family!r}")
        if not self.ridge > 0:
            raise DataError("ridge must be positive")
        if not 0 < self.split < 1:
            raise DataError("split must lie in (0, 1)")
        if self.length_scale is not None and not self.length_scale > 0:
            raise DataError("length_scale must be positive")

    def kernel(self, length_scale: float | None = None) -> gp.KernelSpec:
        return gp.KernelSpec(self.family, length_scale or self.length_scale or 1.0, period=self.period)


DEFAULT_BASE_SPECS = (
    BaseModelSpec("periodic"),
    BaseModelSpec("rbf"),
    BaseModelSpec("rbf", length_scale=10.0),
)


@dataclass(frozen=True)
class KernelRidge:
    """A fitted kernel ridge predictor ``f(x) = k(x, X) c`` (no intercept)."""

    kernel: gp.KernelSpec
    ridge: float
    X: np.ndarray
    coef: np.ndarray

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float).reshape(-1, self.X.shape[1])
        return gp.kernel_matrix(self.kernel, X, self.X) @ self.coef


def _solve(K, ridge, y):
    A = K + ridge * np.eye(K.shape[0])
    try:
        # the ridge normally suffices; the jitter ladder is the fallback
        return scipy.linalg.cho_solve(scipy.linalg.cho_factor(A, lower=True), y)
    except np.linalg.LinAlgError:
        pass
    try:
        L, _ = gp.stable_cholesky(A)
    except gp.GPError as err:
        raise DataError(f"kernel ridge system is singular: {err}") from err
    return scipy.linalg.cho_solve((L, True), y)


def fit_krr(X, y, kernel: gp.KernelSpec, ridge: float) -> KernelRidge:
    X = np.asarray(X, dtype=float)
    X = X.reshape(-1, 1) if X.ndim == 1 else X
    y = np.asarray(y, dtype=float)
    coef = _solve(gp.kernel_matrix(kernel, X), ridge, y)
    return KernelRidge(kernel, ridge, X, coef)


def krr_loo(X, y, kernel: gp.KernelSpec, ridge: float) -> np.ndarray:
    """Leave-one-out predictions from the hat-matrix identity ``y_i - c_i / [A^-1]_ii``."""
    K = gp.kernel_matrix(kernel, X)
    A_inv = np.linalg.inv(K + ridge * np.eye(K.shape[0]))
    c = A_inv @ y
    return y - c / np.diag(A_inv)


def cv_length_scale(X, y, spec: BaseModelSpec, seed: int = 0, grid=CV_LENGTH_SCALES) -> float:
    folds = KFold(n_splits=min(CV_FOLDS, len(y)), shuffle=True, random_state=seed)
    best, best_err = None, np.inf
    for l in grid:
        k = spec.kernel(l)
        err = 0.0
        for tr, te in folds.split(X):
            model = fit_krr(X[tr], y[tr], k, spec.ridge)
            err += np.sum((model.predict(X[te]) - y[te]) ** 2)
        if err < best_err:
            best, best_err = float(l), err
    return best


@dataclass(frozen=True)
class BaseEnsemble:
    """Frozen base predictors; ``predict`` returns the (N, K) prediction matrix."""

    models: tuple
    specs: tuple
    train_index: np.ndarray
    ensemble_index: np.ndarray

    def predict(self, X) -> np.ndarray:
        return np.column_stack([m.predict(X) for m in self.models])

    def describe(self) -> list[dict]:
        return [{"family": m.kernel.family, "length_scale": m.kernel.length_scale, "period": m.kernel.period,
                 "ridge": m.ridge} for m in self.models]


def fit_base_models(dataset: Dataset, specs=DEFAULT_BASE_SPECS, seed: int = 0) -> tuple[Dataset, BaseEnsemble]:
    """Fit kernel ridge models on one part of the data and predict the other.

    Returns the held-out part with base predictions attached (the ensemble's
    training set) and the frozen predictors.
    """
    specs = tuple(specs)
    if len(specs) < 2:
        raise DataError("at least two base model specs are needed")
    split = specs[0].split
    rng = np.random.default_rng(seed)
    perm = rng.permutation(dataset.N)
    n_train = int(round(split * dataset.N))
    if n_train < 5 or dataset.N - n_train < 5:
        raise DataError(f"split leaves fewer than 5 points on one side (N = {dataset.N})")
    tr, ens = np.sort(perm[:n_train]), np.sort(perm[n_train:])
    Xt, yt = dataset.X[tr], dataset.y[tr]
    models = []
    for s in specs:
        l = s.length_scale if s.length_scale is not None else cv_length_scale(Xt, yt, s, seed)
        models.append(fit_krr(Xt, yt, s.kernel(l), s.ridge))
    ensemble = BaseEnsemble(tuple(models), specs, tr, ens)
    held = dataset.subset(ens)
    return held.with_base(ensemble.predict(held.X)), ensemble


# -- CSV ------------------------------------------------------------------------------------------


def _numbered(prefix: str, names) -> list[str]:
    cols = [c for c in names if c.startswith(prefix) and c[len(prefix):].isdigit()]
    return sorted(cols, key=lambda c: int(c[len(prefix):]))


def load_csv(path, x_cols=None, y_col: str = "y", base_cols=None) -> Dataset:
    """Read a dataset; feature columns default to ``x1..xp`` and base predictions to ``f1..fK``."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path} is empty")
        header = [h.strip() for h in header]
        rows = list(reader)
    x_cols = list(x_cols) if x_cols else _numbered("x", header)
    base_cols = list(base_cols) if base_cols is not None else _numbered("f", header)
    if not x_cols:
        raise DataError(f"{path} has no feature columns (x1, x2, ...)")
    for c in x_cols + [y_col] + base_cols:
        if c not in header:
            raise DataError(f"{path} is missing column {c!r}")
    pos = {c: header.index(c) for c in header}
    cols = x_cols + [y_col] + base_cols
    data = np.empty((len(rows), len(cols)))
    for r, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise DataError(f"{path}, row {r}: expected {len(header)} cells, found {len(row)}")
        for j, c in enumerate(cols):
            cell = row[pos[c]].strip()
            if cell == "":
                raise DataError(f"{path}, row {r}: missing value in column {c!r}")
            try:
                v = float(cell)
            except ValueError:
                raise DataError(f"{path}, row {r}: non-numeric value {cell!r} in column {c!r}") from None
            if not math.isfinite(v):
                raise DataError(f"{path}, row {r}: non-finite value in column {c!r}")
            data[r - 2, j] = v
    if not rows:
        raise DataError(f"{path} has a header but no rows")
    p = len(x_cols)
    base = data[:, p + 1:] if base_cols else None
    return Dataset(data[:, :p], data[:, p], base)


def save_csv(dataset: Dataset, path) -> None:
    header = [f"x{j + 1}" for j in range(dataset.p)] + ["y"] + [f"f{k + 1}" for k in range(dataset.K)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(dataset.N):
            vals = list(dataset.X[i]) + [dataset.y[i]] + ([] if dataset.base is None else list(dataset.base[i]))
            w.writerow([format(float(v), ".17g") for v in vals])


@dataclass
class SplitData:
    """Everything one benchmark cell needs: base-model fit, ensemble training set and test points."""

    ensemble_train: Dataset
    base_models: BaseEnsemble
    test: Dataset
    base_train: Dataset | None = None  # the base models' own half, with leave-one-out predictions
    truth: Truth | None = None
    meta: dict = field(default_factory=dict)
