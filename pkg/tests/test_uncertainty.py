import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from bne import uncertainty as unc
from bne.inference import PosteriorDraws
from bne.model import Hyperparams, ModelState, PredictiveDistribution, predict


def make_dist(cdf, grid, mu=None, pdf=None, delta=None, sigma=1.0, kind="bne"):
    """Wrap raw arrays (draws, locations, M) as a predictive distribution."""
    cdf = np.asarray(cdf, dtype=float)
    S, Q, M = cdf.shape
    grid = np.broadcast_to(np.asarray(grid, dtype=float), (Q, M)).copy()
    mu = np.zeros((S, Q)) if mu is None else np.asarray(mu, dtype=float).reshape(S, Q)
    delta = np.zeros((S, Q)) if delta is None else np.asarray(delta, dtype=float).reshape(S, Q)
    return PredictiveDistribution(
        x=np.arange(Q, dtype=float)[:, None], base=np.zeros((Q, 1)), y_grid=grid, cdf=cdf, pdf=pdf,
        mu=mu, delta=delta, ensemble=mu - delta, sigma_eps=sigma, kind=kind)


def gaussian_dist(means, sds, grid):
    """Draws ``i`` are N(means[i], sds[i]) at a single location, with G = identity."""
    means, sds = np.asarray(means, float), np.asarray(sds, float)
    y = np.asarray(grid)
    cdf = stats.norm.cdf(y[None], means[:, None], sds[:, None])[:, None, :]
    pdf = stats.norm.pdf(y[None], means[:, None], sds[:, None])[:, None, :]
    return make_dist(cdf, y, mu=means, pdf=pdf, sigma=float(sds[0]))


GRID = np.arange(-8.0, 12.0 + 1e-9, 0.01)


class TestPredictiveMean:
    def test_gaussian(self):
        dist = gaussian_dist([2.0], [1.0], GRID)
        assert unc.predictive_mean(dist, 0)[0] == pytest.approx(2.0, abs=1e-3)

    def test_point_mass_at_origin(self):
        y = np.linspace(-1, 1, 2001)
        dist = make_dist((y >= 0).astype(float)[None, None], y)
        assert abs(unc.predictive_mean(dist, 0)[0]) <= (y[1] - y[0])

    def test_translation(self):
        a = unc.predictive_mean(gaussian_dist([0.3], [0.7], GRID), 0)[0]
        b = unc.predictive_mean(gaussian_dist([1.8], [0.7], GRID + 1.5), 0)[0]
        assert b - a == pytest.approx(1.5, abs=1e-6)

    def test_uncovered_tail_warns(self):
        y = np.linspace(-1, 1, 201)
        with pytest.warns(unc.GridWarning):
            unc.predictive_mean(gaussian_dist([0.0], [1.0], y), 0)

    def test_indicator_form_agrees(self):
        # direct quadrature of 1(y > 0) - F; the jump at 0 costs the trapezoid rule half a step
        dist = gaussian_dist([-0.4], [1.3], GRID)
        ref = np.trapezoid((GRID > 0) - dist.cdf[0, 0], GRID)
        assert unc.predictive_mean(dist, 0)[0] == pytest.approx(ref, abs=0.01)

    def test_averaged(self):
        dist = gaussian_dist([0.0, 2.0], [1.0, 1.0], GRID)
        assert unc.predictive_mean(dist)[0] == pytest.approx(1.0, abs=1e-3)


class TestMeanDecomposition:
    def test_identity_calibration(self):
        dist = gaussian_dist([1.0, -0.5], [1.0, 1.0], GRID)
        out = unc.mean_decomposition(dist)
        assert np.abs(out["D_G"]).max() < 1e-9
        assert np.all(out["D_delta"] == 0.0)

    def test_shift_by_tenth_hand_quadrature(self):
        y = np.array([0.0, 0.5, 1.0])
        Phi = np.array([0.0, 0.5, 0.9])
        F = np.minimum(Phi + 0.1, 1.0)
        dist = make_dist(F[None, None], y, mu=[0.5])
        dist.systematic_cdf = lambda: Phi[None, None]
        # trapezoid by hand: 0.25 * (-0.1 - 0.1) + 0.25 * (-0.1 - 0.1); F(0) = 0.1 leaves the tail uncovered
        with pytest.warns(unc.GridWarning):
            out = unc.mean_decomposition(dist)
        assert out["D_G"][0, 0] == pytest.approx(-0.1, abs=1e-12)

    def test_three_terms_sum_on_fitted_state(self, toy_state, toy_draws):
        x = np.array([[-1.0], [0.2], [2.0]])
        f = np.column_stack([np.sin(x[:, 0]), 0.5 * x[:, 0]])
        dist = predict(toy_state, toy_draws, x, f, max_draws=20)
        out = unc.mean_decomposition(dist)
        gap = out["ensemble"] + out["D_delta"] + out["D_G"] - out["total"]
        assert np.abs(gap).max() <= 1e-3 * toy_state.hyper.sigma_eps
        assert np.abs(out["D_G"]).max() > 1e-6  # calibration is not the identity here

    def test_state_signature(self, toy_state, toy_draws):
        x = np.array([[0.1]])
        f = np.array([[0.1, 0.05]])
        a = unc.mean_decomposition(toy_state, toy_draws, x, f, max_draws=5)
        b = unc.mean_decomposition(predict(toy_state, toy_draws, x, f, max_draws=5))
        assert np.array_equal(a["D_G"], b["D_G"])


class TestExceedance:
    def test_symmetric(self):
        assert unc.bias_exceedance([-2.0, 2.0]) == 0.5

    def test_unanimous(self):
        assert unc.bias_exceedance([0.1, 3.0, 2.0]) == 1.0

    def test_tie_rule(self):
        assert unc.bias_exceedance([-1.0, 0.0, 1.0, 2.0]) == pytest.approx(0.625)

    def test_needs_two(self):
        with pytest.raises(ValueError):
            unc.bias_exceedance([1.0])

    @given(st.lists(st.sampled_from([-2.0, -1.0, 0.0, 0.5, 3.0]), min_size=2, max_size=30))
    def test_antisymmetric(self, d):
        # exact in rationals; 1 - x in binary floating point can differ by one ulp
        d = np.array(d)
        assert abs(unc.bias_exceedance(-d) - (1.0 - unc.bias_exceedance(d))) <= 2.0**-52

    def test_vectorized_over_locations(self):
        d = np.array([[1.0, -1.0], [2.0, 0.0]])
        assert np.allclose(unc.bias_exceedance(d), [1.0, 0.25])


def brute_moment(F, y, center, scale, power):
    """E[((Y - center)/scale)^power] from the grid density, no integration by parts."""
    p = np.gradient(F, y)
    return np.trapezoid(p * ((y - center) / scale) ** power, y)


class TestStatisticBias:
    y = np.linspace(-15, 15, 6001)

    @pytest.mark.parametrize("stat", unc.STATISTICS)
    def test_identity_vanishes(self, stat):
        dist = gaussian_dist([0.5], [1.2], self.y)
        assert abs(unc.statistic_bias(dist, stat)[0, 0]) < 1e-9

    def test_variance_under_pure_shift(self):
        c = 0.8
        Phi = stats.norm.cdf(self.y)
        F = stats.norm.cdf(self.y, c, 1.0)
        dist = make_dist(F[None, None], self.y, mu=[0.0])
        m_F = brute_moment(F, self.y, 0.0, 1.0, 1)
        oracle = brute_moment(F, self.y, m_F, 1.0, 2) - brute_moment(Phi, self.y, m_F, 1.0, 2)
        got = unc.statistic_bias(dist, "variance")[0, 0]
        assert got == pytest.approx(oracle, abs=1e-4)
        assert got == pytest.approx(-c * c, abs=1e-4)

    def test_symmetric_perturbation(self):
        F = stats.norm.cdf(self.y, 0.0, 1.3)
        dist = make_dist(F[None, None], self.y, mu=[0.0])
        skew = unc.statistic_bias(dist, "skewness")[0, 0]
        kurt = unc.statistic_bias(dist, "kurtosis")[0, 0]
        Phi = stats.norm.cdf(self.y)
        sd = math.sqrt(brute_moment(F, self.y, 0.0, 1.0, 2))
        oracle = brute_moment(F, self.y, 0.0, sd, 4) - brute_moment(Phi, self.y, 0.0, sd, 4)
        assert abs(skew) < 1e-6
        assert kurt == pytest.approx(oracle, abs=1e-3)
        assert abs(kurt) > 0.5

    def test_degenerate_sd(self):
        y = np.array([-1e-10, 0.0, 1e-10])
        dist = make_dist(np.array([0.0, 1.0, 1.0])[None, None], y)
        with pytest.raises(unc.DecompositionError, match="SD"):
            unc.statistic_bias(dist, "skewness")

    def test_unknown_statistic(self):
        with pytest.raises(ValueError):
            unc.statistic_bias(gaussian_dist([0.0], [1.0], self.y), "median")


def mixture_entropy_mc(n=10**6, seed=0):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(n) + 4.0 * (rng.random(n) < 0.5)
    logp = np.log(0.5 * stats.norm.pdf(z) + 0.5 * stats.norm.pdf(z, 4.0))
    return -logp.mean(), logp.std() / math.sqrt(n)


class TestEntropy:
    y = np.linspace(-10, 14, 4801)

    def test_single_draw(self):
        rep = unc.entropy_decompose(gaussian_dist([1.0], [1.0], self.y), n_boot=10)
        assert abs(rep.values["epistemic_total"][0]) < 1e-9
        assert rep.values["aleatoric"][0] == pytest.approx(0.5 * math.log(2 * math.pi * math.e), abs=1e-6)

    def test_identical_draws(self):
        rep = unc.entropy_decompose(gaussian_dist([1.0] * 5, [1.0] * 5, self.y), n_boot=10)
        assert abs(rep.values["epistemic_total"][0]) < 1e-9

    def test_two_component_mixture(self):
        rep = unc.entropy_decompose(gaussian_dist([0.0, 4.0], [1.0, 1.0], self.y), n_boot=50)
        h, se = mixture_entropy_mc()
        assert rep.values["total_entropy"][0] == pytest.approx(h, abs=3 * se + 1e-6)
        assert rep.values["epistemic_total"][0] > 0.5

    def test_identity_check(self):
        rep = unc.entropy_decompose(gaussian_dist([0.0, 0.5, 1.5], [1.0, 1.1, 0.9], self.y))
        assert all(rep.check().values())

    def test_density_warning(self):
        y = np.linspace(-1, 1, 101)
        with pytest.warns(unc.GridWarning, match="density"):
            rep = unc.entropy_decompose(gaussian_dist([0.0], [1.0], y), n_boot=2)
        assert rep.warnings

    def test_requires_pdf(self):
        dist = gaussian_dist([0.0], [1.0], self.y)
        dist.pdf = None
        with pytest.raises(unc.DecompositionError):
            unc.entropy_decompose(dist)


def box_dist(table, idx, width=1.0, step=2e-3):
    """Discrete outcomes {0, 1, 2} embedded as disjoint unit boxes on a grid.

    With a shared box shape the differential mutual information equals the
    discrete one, so exact enumeration is a valid oracle.
    """
    edges = [(3.0 * o, 3.0 * o + width) for o in range(table.shape[1])]
    y = np.arange(-1.0, 3.0 * table.shape[1] + 1.0, step)
    boxes = np.stack([((y >= a) & (y <= b)).astype(float) / width for a, b in edges])
    pdf = (table[idx] @ boxes)[:, None, :]
    cdf = np.clip(np.cumsum(pdf, axis=-1) * step, 0, 1)
    return make_dist(cdf, y, pdf=pdf)


def discrete_mi(prior, table):
    H = lambda p: -np.sum(np.where(p > 0, p * np.log(np.where(p > 0, p, 1)), 0.0), axis=-1)
    return H(prior @ table) - prior @ H(table)


class TestEpistemicSplit:
    y = np.linspace(-10, 14, 2401)

    def test_identical_sets(self):
        d = gaussian_dist([0.0, 1.0, 2.0], [1.0] * 3, self.y)
        rep = unc.epistemic_split(d, d, d, n_boot=50)
        se = rep.mc_se
        assert abs(rep.values["structural_G"][0]) <= 3 * se["structural_G"][0] + 1e-12
        assert abs(rep.values["structural_delta"][0]) <= 3 * se["structural_delta"][0] + 1e-12

    def test_single_parametric_draw(self):
        a = gaussian_dist([0.0, 1.0], [1.0] * 2, self.y)
        c = gaussian_dist([0.5], [1.0], self.y)
        rep = unc.epistemic_split(a, a, c, n_boot=10)
        assert abs(rep.values["parametric"][0]) < 1e-9

    def test_empty_set_named(self):
        a = gaussian_dist([0.0], [1.0], self.y)
        empty = make_dist(np.zeros((0, 1, self.y.size)), self.y, pdf=np.zeros((0, 1, self.y.size)))
        with pytest.raises(unc.DecompositionError, match="bae"):
            unc.epistemic_split(a, empty, a)

    def test_grid_mismatch(self):
        a = gaussian_dist([0.0], [1.0], self.y)
        b = gaussian_dist([0.0], [1.0], self.y + 0.1)
        with pytest.raises(unc.DecompositionError, match="grid"):
            unc.epistemic_split(a, b, a)

    def test_discrete_enumeration(self):
        # parameters (a, b) in {0,1}^2, outcomes in {0,1,2}; b is the structural component
        table = np.array([[0.7, 0.2, 0.1], [0.2, 0.5, 0.3], [0.1, 0.1, 0.8], [0.4, 0.4, 0.2]])
        prior_ab = np.array([0.3, 0.2, 0.1, 0.4])  # index 2*a + b
        rng = np.random.default_rng(5)
        S = 600
        full_idx = rng.choice(4, S, p=prior_ab)
        # reduced model: b pinned to 0, a drawn from its marginal
        p_a = np.array([prior_ab[0] + prior_ab[1], prior_ab[2] + prior_ab[3]])
        red_idx = 2 * rng.choice(2, S, p=p_a)
        const_idx = np.zeros(1, dtype=int)
        rep = unc.epistemic_split(box_dist(table, full_idx), box_dist(table, red_idx),
                                  box_dist(table, const_idx), n_boot=100)
        exact_full = discrete_mi(prior_ab, table)
        exact_red = discrete_mi(np.array([p_a[0], 0, p_a[1], 0]), table)
        assert rep.values["epistemic_total"][0] == pytest.approx(
            exact_full, abs=3 * rep.mc_se["epistemic_total"][0])
        assert rep.values["structural_G"][0] == pytest.approx(
            exact_full - exact_red, abs=3 * rep.mc_se["structural_G"][0])
        assert rep.values["parametric"][0] == pytest.approx(0.0, abs=1e-9)

    def test_telescoping(self):
        rng = np.random.default_rng(0)
        a = gaussian_dist(rng.normal(0, 1.0, 40), np.full(40, 1.0), self.y)
        b = gaussian_dist(rng.normal(0, 0.6, 40), np.full(40, 1.0), self.y)
        c = gaussian_dist(rng.normal(0, 0.3, 40), np.full(40, 1.0), self.y)
        checks = unc.epistemic_split(a, b, c, n_boot=100).check()
        assert checks["telescoping"] and checks["aleatoric_plus_epistemic"]


class TestVarianceDecompose:
    y = np.linspace(-12, 16, 2801)

    def test_single_draw_each(self):
        d = gaussian_dist([1.0], [1.5], self.y)
        rep = unc.variance_decompose(d, d, d, n_boot=5)
        for name in ("structural_G", "structural_delta", "parametric"):
            assert abs(rep.values[name][0]) < 1e-12
        assert rep.values["aleatoric"][0] == pytest.approx(2.25, abs=1e-4)

    def test_two_term_reduction(self):
        means = np.array([0.0, 1.0, 3.0, -1.0])
        sds = np.array([1.0, 0.8, 1.2, 1.0])
        d = gaussian_dist(means, sds, self.y)
        rep = unc.variance_decompose(d, d, d, n_boot=20)
        assert rep.values["parametric"][0] == pytest.approx(means.var(), abs=1e-4)
        assert rep.values["aleatoric"][0] == pytest.approx((sds**2).mean(), abs=1e-4)
        assert rep.values["total_variance"][0] == pytest.approx(means.var() + (sds**2).mean(), abs=1e-4)
        assert all(rep.check().values())

    def test_terms_nonnegative_on_fitted_models(self):
        import warnings
        from dataclasses import replace

        from bne import data as bd
        from bne import pipeline as pl

        split = pl.prepare_synthetic(bd.SyntheticSpec(n=80, seed=4, shape_floor=0.8, shape_amp=2.2), n_test=10)
        cfg = pl.FitConfig(chains=1, warmup=150, samples=150, n_anchor=12, n_pins=4, seed=4)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            fits = {m: pl.fit_model(split.ensemble_train, replace(cfg, model=m)) for m in ("bne", "bae", "original")}
            X, f = split.test.X, split.test.base
            full = pl.predictive(fits["bne"], X, f, max_draws=150, seed=0)
            kw = dict(y_grid=full.y_grid, max_draws=150, seed=0)
            rep = unc.variance_decompose(full, pl.predictive(fits["bae"], X, f, **kw),
                                         pl.predictive(fits["original"], X, f, **kw), seed=0)
        for name in ("structural_G", "structural_delta", "parametric", "aleatoric"):
            assert np.all(rep.values[name] >= -3 * rep.mc_se[name]), name


class TestInterval:
    def test_standard_normal(self):
        y = np.linspace(-8, 8, 1601)
        lo, hi = unc.predictive_interval(gaussian_dist([0.0], [1.0], y), 0.9)
        assert lo[0] == pytest.approx(-1.645, abs=0.01)
        assert hi[0] == pytest.approx(1.645, abs=0.01)

    def test_extreme_level_clamps(self):
        y = np.linspace(-3, 3, 601)
        with pytest.warns(unc.GridWarning):
            lo, hi = unc.predictive_interval(gaussian_dist([0.0], [1.0], y), 0.999)
        assert (lo[0], hi[0]) == (-3.0, 3.0)

    def test_translation(self):
        y = np.linspace(-8, 8, 1601)
        lo0, hi0 = unc.predictive_interval(gaussian_dist([0.0], [1.0], y), 0.5)
        lo1, hi1 = unc.predictive_interval(gaussian_dist([0.7], [1.0], y + 0.7), 0.5)
        assert lo1[0] - lo0[0] == pytest.approx(0.7, abs=1e-9)
        assert hi1[0] - hi0[0] == pytest.approx(0.7, abs=1e-9)

    @given(st.floats(0.01, 0.98), st.floats(0.001, 0.01))
    @settings(max_examples=40, deadline=None)
    def test_widens(self, q, dq):
        d = gaussian_dist([0.0, 1.0], [1.0, 0.5], np.linspace(-8, 9, 801))
        lo0, hi0 = unc.predictive_interval(d, q)
        lo1, hi1 = unc.predictive_interval(d, q + dq)
        assert hi1[0] - lo1[0] >= hi0[0] - lo0[0]

    @pytest.mark.parametrize("q", [0.0, 1.0, -0.2])
    def test_bad_level(self, q):
        with pytest.raises(ValueError):
            unc.predictive_interval(gaussian_dist([0.0], [1.0], np.linspace(-8, 8, 11)), q)


class TestReports:
    def test_bias_report_without_calibration(self):
        d = gaussian_dist([0.0, 1.0], [1.0, 1.0], np.linspace(-8, 9, 401))
        d.kind = "original"
        rep = unc.bias_report(d)
        assert rep.D_G_mean is None and rep.D_delta_mean is None
        assert "P_G_pos" not in rep.rows()[0]

    def test_bias_report_zero_delta(self, toy_state, toy_draws):
        x = np.array([[0.0], [1.0]])
        f = np.column_stack([np.sin(x[:, 0]), 0.5 * x[:, 0]])
        dist = predict(toy_state.with_kind("original"), toy_draws_original(toy_state), x, f, max_draws=10)
        rep = unc.bias_report(dist)
        assert rep.P_delta is None

    def test_bias_report_fields(self, toy_state, toy_draws):
        x = np.array([[0.0], [1.0]])
        f = np.column_stack([np.sin(x[:, 0]), 0.5 * x[:, 0]])
        rep = unc.bias_report(predict(toy_state, toy_draws, x, f, max_draws=10), statistics=("variance",))
        row = rep.rows()[0]
        for key in ("D_delta", "P_delta_pos", "D_G", "P_G_pos", "D_G_variance", "P_G_variance_pos"):
            assert key in row
        assert all(0 <= r["P_G_pos"] <= 1 for r in rep.rows())

    def test_serialization(self, tmp_path):
        d = gaussian_dist([0.0, 0.4], [1.0, 1.0], np.linspace(-8, 9, 401))
        rep = unc.entropy_decompose(d, n_boot=5)
        rep.write_csv(tmp_path / "dec.csv")
        lines = (tmp_path / "dec.csv").read_text().splitlines()
        assert lines[0].startswith("x1,total_entropy")
        assert len(lines) == 2
        payload = json.loads(rep.to_json())
        assert payload["kind"] == "entropy" and len(payload["rows"]) == 3


# -- a small model with a non-trivial calibration map, shared by several tests --------------


@pytest.fixture(scope="module")
def toy_state():
    rng = np.random.default_rng(0)
    X = rng.uniform(-2, 2, (25, 1))
    base = np.column_stack([np.sin(X[:, 0]), 0.5 * X[:, 0]])
    y = base @ [0.8, 0.4] + 0.2 * rng.standard_normal(25)
    return ModelState(X, y, base, Hyperparams(sigma_eps=0.3, l_delta=1.0, l_G=2.0), n_anchor=8, n_pins=4)


def random_draws(state, n, seed=1):
    """Prior-ish draws in white coordinates; enough to exercise calibration."""
    rng = np.random.default_rng(seed)
    theta = 0.5 * rng.standard_normal((1, n, state.dim))
    return PosteriorDraws.from_white(state, theta, meta={})


@pytest.fixture(scope="module")
def toy_draws(toy_state):
    return random_draws(toy_state, 30)


def toy_draws_original(state):
    return random_draws(state.with_kind("original"), 12)
