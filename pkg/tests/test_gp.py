import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bne import gp

M32 = gp.KernelSpec("matern32", 1.0)


def fd_blocks(spec, z, zp, h=1e-5):
    """Finite-difference dk/dz'_0 and d2k/dz_0 dz'_0 from kernel_eval alone."""
    z, zp = np.atleast_1d(z).astype(float), np.atleast_1d(zp).astype(float)
    e = np.zeros_like(z)
    e[0] = h
    k = lambda a, b: gp.kernel_eval(spec, a, b)
    d1 = (k(z, zp + e) - k(z, zp - e)) / (2 * h)
    d2 = (k(z + e, zp + e) - k(z + e, zp - e) - k(z - e, zp + e) + k(z - e, zp - e)) / (4 * h * h)
    return d1, d2


class TestKernelEval:
    def test_matern_zero_distance(self):
        assert gp.kernel_eval(M32, [0.3], [0.3]) == 1.0

    def test_matern_unit_distance(self):
        oracle = (1 + math.sqrt(3)) * math.exp(-math.sqrt(3))
        assert gp.kernel_eval(M32, [0.0], [1.0]) == pytest.approx(oracle, abs=1e-15)
        assert oracle == pytest.approx(0.48335, abs=1e-5)

    def test_rbf_zero_distance(self):
        assert gp.kernel_eval(gp.KernelSpec("rbf", 2.0), [1.0], [1.0]) == 1.0

    def test_dimension_mismatch(self):
        with pytest.raises(gp.GPError):
            gp.kernel_eval(M32, [0.0, 1.0], [0.0])

    def test_periodic_repeats(self):
        spec = gp.KernelSpec("periodic", 1.0, period=2.0)
        assert gp.kernel_eval(spec, [0.0], [4.0]) == pytest.approx(1.0)
        assert gp.kernel_eval(spec, [0.0], [1.0]) == pytest.approx(math.exp(-2.0))

    @pytest.mark.parametrize("bad", [dict(length_scale=0), dict(period=-1), dict(amplitude=0), dict(family="cosine")])
    def test_invalid_spec(self, bad):
        with pytest.raises(ValueError):
            gp.KernelSpec(**bad)

    @given(
        st.lists(st.floats(-5, 5), min_size=2, max_size=2),
        st.lists(st.floats(-5, 5), min_size=2, max_size=2),
        st.sampled_from(["matern32", "rbf", "periodic"]),
    )
    def test_symmetric_exactly(self, a, b, fam):
        spec = gp.KernelSpec(fam, 1.3, period=2.1)
        assert gp.kernel_eval(spec, a, b) == gp.kernel_eval(spec, b, a)


class TestDerivativeKernels:
    def test_matern_dd_diagonal(self):
        blocks = gp.derivative_kernels(M32, np.array([[0.2], [1.7]]))
        assert np.allclose(np.diag(blocks.K_dd), 3.0)
        _, d2 = fd_blocks(M32, [0.2], [0.2 + 1e-9])
        assert abs(d2 - 3.0) < 1e-3  # nondifferentiable point; FD is only approximate here

    def test_rbf_first_derivative_vanishes_on_diagonal(self):
        blocks = gp.derivative_kernels(gp.KernelSpec("rbf", 1.0), np.array([[0.0], [1.0]]))
        assert np.all(np.diag(blocks.K_d) == 0.0)

    def test_matern_l2_matches_fd(self):
        spec = gp.KernelSpec("matern32", 2.0)
        Z = np.array([[0.0], [0.5]])
        blocks = gp.derivative_kernels(spec, Z)
        d1, d2 = fd_blocks(spec, Z[0], Z[1])
        assert abs(blocks.K_d[0, 1] - d1) < 1e-4
        assert abs(blocks.K_dd[0, 1] - d2) < 1e-4

    def test_periodic_rejected(self):
        with pytest.raises(gp.GPError):
            gp.derivative_kernels(gp.KernelSpec("periodic"), np.zeros((2, 1)))

    @pytest.mark.parametrize("fam", ["matern32", "rbf"])
    def test_fd_random_triples(self, fam):
        rng = np.random.default_rng(11)
        worst = 0.0
        for _ in range(100):
            l = rng.uniform(0.5, 3.0)
            spec = gp.KernelSpec(fam, l)
            z, zp = rng.uniform(-2, 2, size=2), rng.uniform(-2, 2, size=2)
            if np.linalg.norm(z - zp) < 0.05:
                continue
            blocks = gp.derivative_kernels(spec, np.vstack([z, zp]))
            d1, d2 = fd_blocks(spec, z, zp)
            worst = max(worst, abs(blocks.K_d[0, 1] - d1), abs(blocks.K_dd[0, 1] - d2))
        assert worst < 1e-4

    def test_cross_block_orientation(self):
        # K_d[i, j] differentiates the second argument at z_j
        Z = np.array([[0.0], [0.8], [2.0]])
        blocks = gp.derivative_kernels(M32, Z)
        for i in range(3):
            for j in range(3):
                if i != j:
                    d1, _ = fd_blocks(M32, Z[i], Z[j])
                    assert blocks.K_d[i, j] == pytest.approx(d1, abs=1e-6)

    @given(st.lists(st.floats(-5, 5), min_size=1, max_size=10), st.floats(0.3, 5))
    @settings(max_examples=60, deadline=None)
    def test_joint_block_psd(self, zs, l):
        blocks = gp.derivative_kernels(gp.KernelSpec("matern32", l), np.array(zs)[:, None])
        J = blocks.joint(with_jitter=False)
        assert np.allclose(blocks.K, blocks.K.T) and np.allclose(blocks.K_dd, blocks.K_dd.T)
        assert np.linalg.eigvalsh(J).min() >= -1e-8
        assert blocks.jitter > 0


def random_spd(rng, n):
    A = rng.standard_normal((n, n))
    return A @ A.T + n * np.eye(n)


class TestOrthogonalize:
    def test_ones_column(self):
        K = random_spd(np.random.default_rng(0), 3)
        _, Ko = gp.orthogonalize(K, np.ones((3, 1)))
        assert np.allclose(Ko.sum(axis=1), 0.0, atol=1e-10)

    def test_empty_basis(self):
        K = random_spd(np.random.default_rng(1), 4)
        proj, Ko = gp.orthogonalize(K, np.zeros((4, 0)))
        assert np.array_equal(proj.P, np.eye(4))
        assert np.allclose(Ko, K)

    def test_full_basis(self):
        K = random_spd(np.random.default_rng(2), 4)
        _, Ko = gp.orthogonalize(K, np.eye(4))
        assert np.allclose(Ko, 0.0, atol=1e-10)

    def test_rank_deficiency_names_column(self):
        F = np.column_stack([np.ones(5), np.arange(5.0), 2 * np.ones(5)])
        with pytest.raises(gp.GPError, match="column"):
            gp.projector(F)

    def test_projector_formula(self):
        rng = np.random.default_rng(3)
        F = rng.standard_normal((6, 2))
        P = gp.projector(F).P
        assert np.allclose(P, np.eye(6) - F @ np.linalg.solve(F.T @ F, F.T), atol=1e-12)

    @given(st.integers(2, 8), st.integers(0, 3), st.integers(0, 10_000))
    @settings(max_examples=50, deadline=None)
    def test_idempotent_and_annihilating(self, n, m, seed):
        m = min(m, n - 1)
        rng = np.random.default_rng(seed)
        F = rng.standard_normal((n, m))
        K = random_spd(rng, n)
        proj, Ko = gp.orthogonalize(K, F)
        P = proj.P
        assert np.abs(P @ P - P).max() < 1e-8
        assert np.abs(P - P.T).max() < 1e-12
        if m:
            assert np.abs(P @ F).max() < 1e-8
            assert np.abs(Ko @ F).max() < 1e-6 * np.abs(K).max()


class TestCondition:
    def test_interpolates_training_point(self):
        X = np.array([[0.0], [1.0], [2.5]])
        obs = np.array([0.3, -1.0, 2.0])
        mean, cov = gp.gp_condition(
            gp.kernel_matrix(M32, X), gp.kernel_matrix(M32, X, X[1:2]), gp.kernel_matrix(M32, X[1:2]), obs
        )
        assert mean[0] == pytest.approx(-1.0, abs=1e-6)
        assert cov[0, 0] < 1e-6

    def test_empty_training_set(self):
        Kt = gp.kernel_matrix(M32, np.array([[0.0], [1.0]]))
        mean, cov = gp.gp_condition(np.zeros((0, 0)), np.zeros((0, 2)), Kt, np.zeros(0), prior_mean_test=0.7)
        assert np.allclose(mean, 0.7)
        assert np.allclose(cov, Kt)

    def test_two_point_explicit_inverse(self):
        x = np.array([[0.0], [1.2]])
        xs = np.array([[0.5]])
        obs = np.array([1.0, -0.5])
        k = lambda a, b: gp.kernel_eval(M32, a, b)
        a, b, d = k(x[0], x[0]), k(x[0], x[1]), k(x[1], x[1])
        det = a * d - b * b
        inv = np.array([[d, -b], [-b, a]]) / det
        ks = np.array([k(x[0], xs[0]), k(x[1], xs[0])])
        mean_o = ks @ inv @ (obs - 0.2) + 0.1
        var_o = 1.0 - ks @ inv @ ks
        mean, cov = gp.gp_condition(
            gp.kernel_matrix(M32, x), gp.kernel_matrix(M32, x, xs), gp.kernel_matrix(M32, xs), obs,
            prior_mean_train=0.2, prior_mean_test=0.1,
        )
        # the factorization adds 1e-8 * trace/N jitter
        assert mean[0] == pytest.approx(mean_o, abs=1e-6)
        assert cov[0, 0] == pytest.approx(var_o, abs=1e-6)

    def test_accepts_gram_blocks(self):
        Z = np.array([[0.0], [1.0]])
        blocks = gp.derivative_kernels(M32, Z)
        J = blocks.joint(with_jitter=False)
        mean, _ = gp.gp_condition(blocks, J[:, :1], J[:1, :1], np.array([0.5, 0.1, 0.0, 0.2]))
        assert mean[0] == pytest.approx(0.5, abs=1e-5)

    def test_cholesky_gives_up(self):
        bad = np.array([[1.0, 0.0], [0.0, -5.0]])
        with pytest.raises(gp.GPError, match="jitter"):
            gp.stable_cholesky(bad)

    def test_covariance_clipped_psd(self):
        X = np.linspace(0, 1, 6)[:, None]
        mean, cov = gp.gp_condition(gp.kernel_matrix(M32, X), gp.kernel_matrix(M32, X, X), gp.kernel_matrix(M32, X), np.ones(6))
        assert np.allclose(cov, cov.T)
        assert np.linalg.eigvalsh(cov).min() >= 0
