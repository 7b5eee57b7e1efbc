"""Uncertainty decomposition and bias detection on posterior predictive distributions.

Expectations are taken from CDFs on a finite grid ``[a, b]`` through
``E[s(Y)] = s(b) - int_a^b s'(y) F(y) dy``, which is the integration-by-parts
form of the mean identity and needs no special handling of the origin.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import trapezoid

from bne.model import PredictiveDistribution, predict

TAIL_TOLERANCE = 1e-4
DENSITY_TOLERANCE = 1e-2
STATISTICS = ("variance", "skewness", "kurtosis")
DEFAULT_BOOTSTRAP = 200


class GridWarning(RuntimeWarning):
    """The quadrature grid does not cover the distribution."""


class DecompositionError(ValueError):
    pass


def _check_tails(F, what="CDF"):
    F = np.asarray(F)
    ok = (F[..., 0] <= TAIL_TOLERANCE) & (F[..., -1] >= 1 - TAIL_TOLERANCE)
    if not np.all(ok):
        warnings.warn(f"{what} grid misses probability mass in the tails at {int((~ok).sum())} "
                      "location(s)", GridWarning, stacklevel=3)
    return ok


def resolve(dist_or_state, draws=None, x=None, f=None, **predict_kw) -> PredictiveDistribution:
    """Pass a ready distribution through, or build one from a fitted state and its draws."""
    if isinstance(dist_or_state, PredictiveDistribution):
        return dist_or_state
    if draws is None or x is None or f is None:
        raise TypeError("need (state, draws, x, f) when no PredictiveDistribution is given")
    return predict(dist_or_state, draws, x, f, **predict_kw)


class _Rows:
    """CSV and JSON output for reports that expose ``rows()``."""

    def csv_rows(self) -> list[dict]:
        return self.rows()

    def write_csv(self, path, rows=None) -> None:
        rows = self.csv_rows() if rows is None else rows
        with open(path, "w", newline="", encoding="utf-8") as fh:
            if not rows:
                return
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({k: format(v, ".17g") if isinstance(v, float) else v for k, v in r.items()})

    def to_json(self) -> str:
        return json.dumps({"rows": self.rows(), **self._meta()}, indent=2, sort_keys=True)

    def _meta(self) -> dict:
        return {}


# -- quadrature primitives ----------------------------------------------------------


def cdf_mean(F, y_grid) -> np.ndarray:
    """Mean of a distribution from its CDF on an increasing grid (last axis)."""
    F = np.asarray(F, dtype=float)
    y = np.asarray(y_grid, dtype=float)
    return y[..., -1] - trapezoid(F, y, axis=-1)


def cdf_expectation(F, y_grid, s, ds) -> np.ndarray:
    """``E[s(Y)]`` from the CDF, given ``s`` and its derivative as callables of the grid."""
    y = np.asarray(y_grid, dtype=float)
    return s(y[..., -1:])[..., 0] - trapezoid(ds(y) * F, y, axis=-1)


def bias_integral(F_ref, F, y_grid, weight=None) -> np.ndarray:
    """``int w(y) (F_ref - F) dy``: the shift in ``E[s]`` when ``w = s'`` (``w = 1`` for the mean)."""
    diff = np.asarray(F_ref, dtype=float) - np.asarray(F, dtype=float)
    if weight is not None:
        diff = weight * diff
    return trapezoid(diff, np.asarray(y_grid, dtype=float), axis=-1)


def predictive_mean(dist: PredictiveDistribution, draw: int | None = None) -> np.ndarray:
    """Predictive mean per location, for one draw or for the draw-averaged CDF."""
    F = dist.mean_cdf() if draw is None else dist.cdf[draw]
    _check_tails(F)
    return cdf_mean(F, dist.y_grid)


def mean_decomposition(dist, draws=None, x=None, f=None, **predict_kw) -> dict:
    """Per-draw split of the predictive mean into ensemble, residual and calibration parts.

    Returns arrays of shape (draws, locations) under keys ``ensemble``,
    ``D_delta``, ``D_G`` and ``total``.
    """
    dist = resolve(dist, draws, x, f, **predict_kw)
    _check_tails(dist.cdf)
    Phi = dist.systematic_cdf()
    D_G = bias_integral(Phi, dist.cdf, dist.y_grid[None])
    return {
        "ensemble": dist.ensemble,
        "D_delta": dist.delta,
        "D_G": D_G,
        "total": cdf_mean(dist.cdf, dist.y_grid[None]),
    }


def bias_exceedance(draws) -> float | np.ndarray:
    """Posterior probability that the bias is positive; exact zeros count one half.

    Reduces over the first axis.
    """
    d = np.asarray(draws, dtype=float)
    if d.shape[0] < 2:
        raise ValueError("at least two draws are needed")
    halves = 2 * np.sum(d > 0, axis=0) + np.sum(d == 0, axis=0)
    p = halves / (2.0 * d.shape[0])
    return float(p) if np.ndim(p) == 0 else p


def _moment_fns(stat: str, mean, sd):
    m = mean[..., None]
    if stat == "variance":
        return lambda y: (y - m) ** 2, lambda y: 2.0 * (y - m)
    s = sd[..., None]
    if stat == "skewness":
        return lambda y: ((y - m) / s) ** 3, lambda y: 3.0 * (y - m) ** 2 / s ** 3
    if stat == "kurtosis":
        return lambda y: ((y - m) / s) ** 4, lambda y: 4.0 * (y - m) ** 3 / s ** 4
    raise ValueError(f"unknown statistic {stat!r}; expected one of {STATISTICS}")


def statistic_bias_arrays(Phi, F, y_grid, statistic: str) -> np.ndarray:
    """``int s'(y) (Phi - F) dy`` with ``s`` centred (and scaled) by the moments of ``F``."""
    mean = cdf_mean(F, y_grid)
    var = cdf_expectation(F, y_grid, *_moment_fns("variance", mean, None))
    if np.any(var < 1e-16):
        raise DecompositionError("predictive SD below 1e-8; standardized statistics are undefined")
    sd = np.sqrt(var)
    _, ds = _moment_fns(statistic, mean, sd)
    return bias_integral(Phi, F, y_grid, weight=ds(np.asarray(y_grid)))


def statistic_bias(dist, statistic: str, draws=None, x=None, f=None, **predict_kw) -> np.ndarray:
    """Per-draw calibration bias of a summary statistic, shape (draws, locations)."""
    dist = resolve(dist, draws, x, f, **predict_kw)
    return statistic_bias_arrays(dist.systematic_cdf(), dist.cdf, dist.y_grid[None], statistic)


# -- bias report --------------------------------------------------------------------------


@dataclass
class BiasReport(_Rows):
    x: np.ndarray
    D_delta_mean: np.ndarray | None
    P_delta: np.ndarray | None
    D_G_mean: np.ndarray | None
    P_G: np.ndarray | None
    statistics: dict = field(default_factory=dict)  # name -> (mean, P(>0))
    mc_se: dict = field(default_factory=dict)  # column name -> per-location Monte Carlo error

    def rows(self) -> list[dict]:
        out = []
        for q in range(len(self.x)):
            row = {f"x{j + 1}": float(v) for j, v in enumerate(np.atleast_1d(self.x[q]))}
            if self.D_delta_mean is not None:
                row["D_delta"] = float(self.D_delta_mean[q])
                row["P_delta_pos"] = float(self.P_delta[q])
            if self.D_G_mean is not None:
                row["D_G"] = float(self.D_G_mean[q])
                row["P_G_pos"] = float(self.P_G[q])
            for name, (m, p) in self.statistics.items():
                row[f"D_G_{name}"] = float(m[q])
                row[f"P_G_{name}_pos"] = float(p[q])
            out.append(row)
        return out

    def long_rows(self) -> list[dict]:
        """One record per (location, quantity) with its Monte Carlo error."""
        out = []
        for q, row in enumerate(self.rows()):
            xs = {k: v for k, v in row.items() if k.startswith("x")}
            for name, value in row.items():
                if name in xs:
                    continue
                se = self.mc_se.get(name)
                out.append({**xs, "quantity": name, "value": value,
                            "mc_se": float(se[q]) if se is not None else float("nan")})
        return out


def _mean_se(draws) -> np.ndarray:
    S = draws.shape[0]
    return draws.std(axis=0, ddof=1) / np.sqrt(S) if S > 1 else np.zeros(draws.shape[1:])


def _prob_se(p, S) -> np.ndarray:
    return np.sqrt(p * (1 - p) / S)


def bias_report(dist: PredictiveDistribution, statistics=()) -> BiasReport:
    """Bias summaries; calibration columns are absent for models without G."""
    has_delta = dist.kind in ("bne", "bae")
    has_G = dist.kind == "bne"
    dd = dist.delta if has_delta else None
    rep = BiasReport(
        x=dist.x,
        D_delta_mean=dd.mean(axis=0) if has_delta else None,
        P_delta=bias_exceedance(dd) if has_delta else None,
        D_G_mean=None,
        P_G=None,
    )
    S = dist.n_draws
    if has_delta:
        rep.mc_se.update(D_delta=_mean_se(dd), P_delta_pos=_prob_se(rep.P_delta, S))
    if has_G:
        D_G = mean_decomposition(dist)["D_G"]
        rep.D_G_mean, rep.P_G = D_G.mean(axis=0), bias_exceedance(D_G)
        rep.mc_se.update(D_G=_mean_se(D_G), P_G_pos=_prob_se(rep.P_G, S))
        for stat in statistics:
            v = statistic_bias(dist, stat)
            rep.statistics[stat] = (v.mean(axis=0), bias_exceedance(v))
            rep.mc_se[f"D_G_{stat}"] = _mean_se(v)
            rep.mc_se[f"P_G_{stat}_pos"] = _prob_se(rep.statistics[stat][1], S)
    return rep


# -- entropy decomposition ------------------------------------------------------------------


def _neg_xlogx(p):
    p = np.asarray(p, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(p > 0, -p * np.log(np.where(p > 0, p, 1.0)), 0.0)


def differential_entropy(pdf, y_grid) -> np.ndarray:
    return trapezoid(_neg_xlogx(pdf), y_grid, axis=-1)


def mutual_information(pdf, y_grid, idx=None) -> tuple[np.ndarray, np.ndarray]:
    """Mixture entropy and mean per-draw entropy of draws ``idx`` (all by default).

    ``pdf`` is (draws, locations, M).  The mutual information is their difference.
    """
    pdf = np.asarray(pdf)
    if idx is not None:
        pdf = pdf[idx]
    per_draw = differential_entropy(pdf, y_grid[None])
    total = differential_entropy(pdf.mean(axis=0), y_grid)
    return total, per_draw.mean(axis=0)


def _bootstrap(stat, n_draws: int, n_boot: int, rng) -> np.ndarray:
    reps = [stat(rng.integers(0, n_draws, n_draws)) for _ in range(n_boot)]
    return np.std(np.stack(reps), axis=0, ddof=1) if n_boot > 1 and n_draws > 1 else np.zeros_like(stat(None))


@dataclass
class DecompositionReport(_Rows):
    """Per-location entropy (nats) or variance components with Monte Carlo errors."""

    x: np.ndarray
    values: dict
    mc_se: dict
    kind: str = "entropy"
    warnings: list = field(default_factory=list)

    @property
    def terms(self) -> tuple[str, ...]:
        return tuple(self.values)

    def check(self, k: float = 3.0) -> dict:
        """Internal identities and sign conditions, each within ``k`` Monte Carlo errors."""
        v, se = self.values, self.mc_se
        out = {}
        if self.kind == "entropy":
            tol = k * np.maximum(se["total_entropy"], 1e-12) + 1e-9
            out["aleatoric_plus_epistemic"] = bool(np.all(
                np.abs(v["aleatoric"] + v["epistemic_total"] - v["total_entropy"]) <= tol))
            parts = ("structural_G", "structural_delta", "parametric")
            if all(p in v for p in parts):
                s = sum(v[p] for p in parts)
                tol = k * np.maximum(se["epistemic_total"], 1e-12) + 1e-9
                out["telescoping"] = bool(np.all(np.abs(s - v["epistemic_total"]) <= tol))
            for name in ("epistemic_total",) + tuple(p for p in parts if p in v):
                out[f"{name}_nonnegative"] = bool(np.all(v[name] >= -k * se[name] - 1e-9))
        else:
            s = sum(v[p] for p in ("structural_G", "structural_delta", "parametric", "aleatoric"))
            tol = k * np.maximum(se["total_variance"], 1e-12) + 1e-9
            out["sums_to_total"] = bool(np.all(np.abs(s - v["total_variance"]) <= tol))
            for name in ("structural_G", "structural_delta", "parametric", "aleatoric"):
                out[f"{name}_nonnegative"] = bool(np.all(v[name] >= -k * se[name] - 1e-9))
        return out

    def _meta(self) -> dict:
        return {"kind": self.kind, "warnings": list(self.warnings), "checks": self.check()}

    def csv_rows(self) -> list[dict]:
        return self.wide_rows()

    def wide_rows(self) -> list[dict]:
        """One row per location with a value and mc_se column per term."""
        out = []
        for q in range(len(self.x)):
            row = {f"x{j + 1}": float(c) for j, c in enumerate(np.atleast_1d(self.x[q]))}
            for name, val in self.values.items():
                row[name] = float(val[q])
                row[f"{name}_mc_se"] = float(self.mc_se[name][q])
            out.append(row)
        return out

    def rows(self) -> list[dict]:
        """Long format: one row per (location, quantity)."""
        out = []
        for q in range(len(self.x)):
            for name, val in self.values.items():
                row = {f"x{j + 1}": float(c) for j, c in enumerate(np.atleast_1d(self.x[q]))}
                row.update(quantity=name, value=float(val[q]), mc_se=float(self.mc_se[name][q]))
                out.append(row)
        return out


def _density_check(dist: PredictiveDistribution, name: str) -> list:
    mass = trapezoid(dist.mean_pdf(), dist.y_grid, axis=-1)
    bad = np.abs(mass - 1.0) > DENSITY_TOLERANCE
    if np.any(bad):
        msg = f"{name}: density integrates to {mass[bad].min():.4f}..{mass[bad].max():.4f} at {int(bad.sum())} location(s)"
        warnings.warn(msg, GridWarning, stacklevel=3)
        return [msg]
    return []


def entropy_decompose(dist: PredictiveDistribution, n_boot: int = DEFAULT_BOOTSTRAP, seed: int = 0) -> DecompositionReport:
    """Total predictive entropy split into aleatoric (expected) and epistemic (mutual information) parts."""
    if dist.pdf is None:
        raise DecompositionError("entropy decomposition needs predictive densities")
    total, alea = mutual_information(dist.pdf, dist.y_grid)
    rng = np.random.default_rng(seed)
    S = dist.n_draws

    def stat(idx):
        t, a = mutual_information(dist.pdf, dist.y_grid, idx)
        return np.stack([t, a, t - a])

    se = _bootstrap(stat, S, n_boot, rng)
    values = {"total_entropy": total, "aleatoric": alea, "epistemic_total": total - alea}
    mc = {"total_entropy": se[0], "aleatoric": se[1], "epistemic_total": se[2]}
    return DecompositionReport(dist.x, values, mc, "entropy", _density_check(dist, "full"))


def _require(dists: dict):
    for name, d in dists.items():
        if d is None or d.n_draws == 0:
            raise DecompositionError(f"draw set {name!r} is empty")
    ref = next(iter(dists.values()))
    for name, d in dists.items():
        if d.y_grid.shape != ref.y_grid.shape or not np.allclose(d.y_grid, ref.y_grid):
            raise DecompositionError(f"draw set {name!r} is not on the shared y grid")


def epistemic_split(full: PredictiveDistribution, bae: PredictiveDistribution, original: PredictiveDistribution,
                    n_boot: int = DEFAULT_BOOTSTRAP, seed: int = 0) -> DecompositionReport:
    """Entropy decomposition with the epistemic part split across calibration, residual and weights.

    The three distributions must share one y grid: the full model, the model
    with G fixed at the identity and the model that also drops delta.
    """
    sets = {"full": full, "bae": bae, "original": original}
    _require(sets)
    for name, d in sets.items():
        if d.pdf is None:
            raise DecompositionError(f"draw set {name!r} has no densities")
    y = full.y_grid

    def mi_all(idx_a=None, idx_b=None, idx_c=None):
        ta, aa = mutual_information(full.pdf, y, idx_a)
        tb, ab = mutual_information(bae.pdf, y, idx_b)
        tc, ac = mutual_information(original.pdf, y, idx_c)
        mi_a, mi_b, mi_c = ta - aa, tb - ab, tc - ac
        return np.stack([ta, aa, mi_a, mi_a - mi_b, mi_b - mi_c, mi_c])

    point = mi_all()
    rng = np.random.default_rng(seed)
    if n_boot > 1:
        reps = np.stack([
            mi_all(rng.integers(0, full.n_draws, full.n_draws),
                   rng.integers(0, bae.n_draws, bae.n_draws),
                   rng.integers(0, original.n_draws, original.n_draws))
            for _ in range(n_boot)])
        se = reps.std(axis=0, ddof=1)
    else:
        se = np.zeros_like(point)
    names = ("total_entropy", "aleatoric", "epistemic_total", "structural_G", "structural_delta", "parametric")
    values = dict(zip(names, point))
    mc = dict(zip(names, se))
    warn = []
    for name, d in sets.items():
        warn += _density_check(d, name)
    return DecompositionReport(full.x, values, mc, "entropy", warn)


def draw_moments(dist: PredictiveDistribution) -> tuple[np.ndarray, np.ndarray]:
    """Per-draw predictive mean and variance, each (draws, locations)."""
    y = dist.y_grid[None]
    mean = cdf_mean(dist.cdf, y)
    var = cdf_expectation(dist.cdf, y, *_moment_fns("variance", mean, None))
    return mean, np.maximum(var, 0.0)


def variance_decompose(full: PredictiveDistribution, bae: PredictiveDistribution, original: PredictiveDistribution,
                       n_boot: int = DEFAULT_BOOTSTRAP, seed: int = 0) -> DecompositionReport:
    """Law-of-total-variance split: calibration, residual, weights and noise."""
    sets = {"full": full, "bae": bae, "original": original}
    _require(sets)
    mom = {k: draw_moments(d) for k, d in sets.items()}

    def terms(ia=None, ib=None, ic=None):
        def spread(key, idx):
            m, v = mom[key]
            if idx is not None:
                m, v = m[idx], v[idx]
            return m.var(axis=0), v.mean(axis=0)

        ea, alea = spread("full", ia)
        eb, _ = spread("bae", ib)
        ec, _ = spread("original", ic)
        return np.stack([ea + alea, ea - eb, eb - ec, ec, alea])

    point = terms()
    rng = np.random.default_rng(seed)
    if n_boot > 1:
        reps = np.stack([terms(rng.integers(0, full.n_draws, full.n_draws),
                               rng.integers(0, bae.n_draws, bae.n_draws),
                               rng.integers(0, original.n_draws, original.n_draws)) for _ in range(n_boot)])
        se = reps.std(axis=0, ddof=1)
    else:
        se = np.zeros_like(point)
    names = ("total_variance", "structural_G", "structural_delta", "parametric", "aleatoric")
    return DecompositionReport(full.x, dict(zip(names, point)), dict(zip(names, se)), "variance")


# -- intervals ---------------------------------------------------------------------------------


def invert_cdf(F, y_grid, level) -> np.ndarray:
    """Smallest grid quantile of nondecreasing ``F`` at ``level`` with linear interpolation.

    ``F`` and ``y_grid`` are (locations, M).  Levels outside the range of ``F``
    are clamped to the grid ends.
    """
    F = np.asarray(F, dtype=float)
    y = np.asarray(y_grid, dtype=float)
    out = np.empty(F.shape[0])
    clamped = 0
    for q in range(F.shape[0]):
        Fq, yq = F[q], y[q]
        if level <= Fq[0]:
            out[q] = yq[0]
            clamped += level < Fq[0]
            continue
        if level > Fq[-1]:
            out[q] = yq[-1]
            clamped += 1
            continue
        j = int(np.searchsorted(Fq, level, side="left"))
        f0, f1 = Fq[j - 1], Fq[j]
        t = 0.0 if f1 == f0 else (level - f0) / (f1 - f0)
        out[q] = yq[j - 1] + t * (yq[j] - yq[j - 1])
    if clamped:
        warnings.warn(f"level {level:g} lies outside the CDF range at {clamped} location(s); clamped to the grid",
                      GridWarning, stacklevel=3)
    return out


def predictive_interval(dist: PredictiveDistribution, q: float) -> tuple[np.ndarray, np.ndarray]:
    """Central ``q`` interval of the draw-averaged predictive CDF."""
    if not 0 < q < 1:
        raise ValueError("q must lie in (0, 1)")
    F = dist.mean_cdf()
    return invert_cdf(F, dist.y_grid, 0.5 * (1 - q)), invert_cdf(F, dist.y_grid, 0.5 * (1 + q))
