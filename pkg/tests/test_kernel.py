"""Kernel, bandwidth tuning, bistochastic normalization, and gradients.

The dimension-estimate tests act as slope-scan oracles on manifolds of
known dimension; gradient tests compare analytic formulas against central
finite differences.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fockcast import dynamics, kernel, parallel
from fockcast.errors import InvalidKernelError, TuningFailedError


@pytest.fixture(scope="module")
def tiny_model():
    ds = dynamics.sample_grid_stepanoff(12)
    return kernel.fit_kernel_model(ds)


class TestElementaryKernels:
    def test_rbf_self_is_one(self):
        x = np.array([0.2, 0.4, 0.1])
        assert kernel.rbf_kernel(x, x, 0.7) == 1.0

    def test_rbf_symmetric(self):
        x = np.array([0.0, 1.0])
        y = np.array([2.0, -1.0])
        assert kernel.rbf_kernel(x, y, 0.5) == kernel.rbf_kernel(y, x, 0.5)

    def test_rbf_at_one_bandwidth(self):
        x = np.zeros(2)
        y = np.array([0.3, 0.4])  # norm 0.5
        assert kernel.rbf_kernel(x, y, 0.5) == pytest.approx(np.exp(-1.0), rel=1e-15)

    def test_vb_reduces_to_rbf(self):
        x = np.array([1.0, 0.0])
        y = np.array([0.0, 1.0])
        assert kernel.vb_kernel(x, y, 0.9, 1.0, 1.0) == kernel.rbf_kernel(x, y, 0.9)

    def test_vb_self_is_one(self):
        x = np.array([0.5, 0.5])
        assert kernel.vb_kernel(x, x, 0.3, 2.1, 2.1) == 1.0

    @given(
        st.floats(0.1, 3.0),
        st.floats(0.2, 5.0),
        st.floats(0.2, 5.0),
    )
    @settings(max_examples=25, deadline=None)
    def test_vb_rho_doubling_matches_eps_quadrupling(self, eps, rx, ry):
        x = np.array([0.0, 0.0])
        y = np.array([1.3, -0.7])
        a = kernel.vb_kernel(x, y, eps, 2 * rx, 2 * ry)
        b = kernel.vb_kernel(x, y, 2 * eps, rx, ry)
        assert a == pytest.approx(b, rel=1e-12)


class TestPairwise:
    def test_sqdist_matches_direct(self):
        rng = np.random.default_rng(0)
        A = rng.normal(size=(20, 3))
        D = kernel.pairwise_sqdist(A)
        for i in range(0, 20, 7):
            for j in range(0, 20, 5):
                assert D[i, j] == pytest.approx(
                    np.sum((A[i] - A[j]) ** 2), rel=1e-10, abs=1e-12
                )
        assert np.all(D >= 0)
        np.testing.assert_array_equal(D, D.T)

    def test_cross_sqdist(self):
        rng = np.random.default_rng(1)
        A = rng.normal(size=(5, 4))
        B = rng.normal(size=(7, 4))
        D = kernel.pairwise_sqdist(A, B)
        assert D.shape == (5, 7)
        assert D[2, 3] == pytest.approx(np.sum((A[2] - B[3]) ** 2), rel=1e-10)


class TestTuning:
    def test_circle_dimension(self):
        th = 2 * np.pi * np.arange(256) / 256
        data = np.column_stack([np.cos(th), np.sin(th)])
        eps_star, m_nu = kernel.tune_bandwidth(data)
        assert 0.8 <= m_nu <= 1.2
        assert eps_star > 0

    def test_square_dimension(self):
        rng = np.random.default_rng(42)
        data = rng.uniform(0, 1, size=(1024, 2))
        _, m_nu = kernel.tune_bandwidth(data)
        assert 1.7 <= m_nu <= 2.3

    def test_degenerate_data_raises(self):
        data = np.ones((16, 2))
        with pytest.raises(TuningFailedError):
            kernel.tune_bandwidth(data)

    def test_grid_needs_32_candidates(self):
        th = 2 * np.pi * np.arange(64) / 64
        data = np.column_stack([np.cos(th), np.sin(th)])
        with pytest.raises(Exception):
            kernel.tune_bandwidth(data, eps_grid=np.geomspace(0.01, 1, 8))

    def test_thread_count_does_not_change_scan(self):
        th = 2 * np.pi * np.arange(128) / 128
        data = np.column_stack([np.cos(th), np.sin(th)])
        parallel.set_threads(1)
        r1 = kernel.tune_bandwidth(data)
        parallel.set_threads(3)
        r2 = kernel.tune_bandwidth(data)
        parallel.set_threads(1)
        assert r1.eps_star == r2.eps_star
        assert r1.m_nu == r2.m_nu
        np.testing.assert_array_equal(r1.s_values, r2.s_values)


class TestBandwidthFunction:
    def test_single_point(self):
        bw = kernel.BandwidthFunction(np.zeros((1, 2)), eps_tilde=0.5, m_nu=1.0)
        assert bw.values[0] == 1.0

    def test_uniform_two_points(self):
        data = np.array([[0.0, 0.0], [0.3, 0.0]])
        bw = kernel.BandwidthFunction(data, eps_tilde=0.5, m_nu=2.0)
        k12 = np.exp(-0.09 / 0.25)
        want = ((1 + k12) / 2.0) ** (-1.0 / 2.0)
        np.testing.assert_allclose(bw.values, want, rtol=1e-14)

    def test_sparse_region_gets_larger_rho(self):
        rng = np.random.default_rng(5)
        dense = rng.normal(0, 0.05, size=(80, 2))
        sparse = rng.normal(0, 0.05, size=(8, 2)) + np.array([4.0, 0.0])
        data = np.vstack([dense, sparse])
        bw = kernel.BandwidthFunction(data, eps_tilde=0.5, m_nu=2.0)
        assert bw.values[80:].min() > bw.values[:80].max()

    def test_evaluator_matches_samples(self):
        rng = np.random.default_rng(6)
        data = rng.normal(size=(30, 3))
        bw = kernel.BandwidthFunction(data, eps_tilde=0.8, m_nu=1.5)
        np.testing.assert_allclose(bw.evaluate(data), bw.values, rtol=1e-13)


class TestBistochastic:
    def test_single_sample(self):
        P, d, q = kernel.bistochastic_normalize(np.array([[1.0]]))
        np.testing.assert_allclose(P, [[1.0]])

    def test_constant_kernel(self):
        K = np.full((6, 6), 0.37)
        P, d, q = kernel.bistochastic_normalize(K)
        np.testing.assert_allclose(P, 1.0, rtol=1e-14)
        np.testing.assert_allclose(P.sum(axis=1) / 6.0, 1.0, rtol=1e-14)

    def test_random_spd_rowsums(self):
        rng = np.random.default_rng(9)
        M = rng.uniform(0.5, 1.5, size=(8, 8))
        K = M @ M.T + 8 * np.eye(8)
        assert np.min(K) > 0
        P, d, q = kernel.bistochastic_normalize(K)
        assert np.max(np.abs(P.sum(axis=1) / 8.0 - 1.0)) < 1e-12
        assert np.max(np.abs(P - P.T)) < 1e-13
        w = np.linalg.eigvalsh(P / 8.0)
        assert w.min() > -1e-13

    @given(st.integers(2, 10), st.integers(0, 1000))
    @settings(max_examples=30, deadline=None)
    def test_rowsum_property(self, n, seed):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(n, 2))
        K = np.exp(-kernel.pairwise_sqdist(X) / 2.0)
        P, d, q = kernel.bistochastic_normalize(K)
        assert np.max(np.abs(P.sum(axis=1) / n - 1.0)) < 1e-11
        assert np.all(d > 0) and np.all(q > 0)

    def test_nonpositive_entries_rejected(self):
        K = np.eye(3)
        with pytest.raises(InvalidKernelError):
            kernel.bistochastic_normalize(K)

    def test_markov_rowsums_on_torus_grid(self, tiny_model):
        P = tiny_model.markov_matrix()
        n = P.shape[0]
        assert np.max(np.abs(P.sum(axis=1) / n - 1.0)) < 1e-10
        assert np.max(np.abs(P - P.T)) < 1e-13


class TestGradients:
    def test_gradient_at_coincident_points(self, tiny_model):
        x = tiny_model.dataset.states[17]
        g = kernel.kernel_gradient(x, x, tiny_model)
        assert np.max(np.abs(g)) < 1e-12

    def test_gradient_vs_finite_differences(self, tiny_model):
        rng = np.random.default_rng(12)
        ds = tiny_model.dataset
        h = 1e-6
        for _ in range(100):
            x = rng.uniform(0, 2 * np.pi, size=2)
            y = ds.states[rng.integers(0, ds.n_samples)]
            g = kernel.kernel_gradient(x, y, tiny_model)
            fd = np.empty(2)
            for a in range(2):
                e = np.zeros(2)
                e[a] = h
                fd[a] = (
                    _vb_value(x + e, y, tiny_model) - _vb_value(x - e, y, tiny_model)
                ) / (2 * h)
            scale = max(np.max(np.abs(fd)), 1e-8)
            assert np.max(np.abs(g - fd)) / scale < 1e-6

    def test_directional_at_stepanoff_fixed_point(self, tiny_model):
        x = np.zeros(2)
        y = tiny_model.dataset.states[33]
        v = tiny_model.dataset.system.vector_field(x)
        val = kernel.kernel_gradient(x, y, tiny_model, direction=v)
        assert val == 0.0

    def test_directional_matrix_matches_pointwise(self, tiny_model):
        ds = tiny_model.dataset
        U = dynamics.embedded_velocity(ds.system, ds.states)
        Kp = kernel.directional_kernel_matrix(tiny_model, U)
        rng = np.random.default_rng(3)
        for _ in range(20):
            n = int(rng.integers(0, ds.n_samples))
            l = int(rng.integers(0, ds.n_samples))
            v = ds.system.vector_field(ds.states[n])
            want = kernel.kernel_gradient(
                ds.states[n], ds.states[l], tiny_model, direction=v
            )
            assert Kp[n, l] == pytest.approx(want, rel=1e-9, abs=1e-13)

    def test_cross_kernel_consistency(self, tiny_model):
        ds = tiny_model.dataset
        Kc = tiny_model.cross_kernel(ds.states[:5])
        Kfull = tiny_model.kernel_matrix()
        np.testing.assert_allclose(Kc, Kfull[:5], rtol=1e-12)

    def test_cross_markov_rows_sum_to_n(self, tiny_model):
        # off-sample Markov rows integrate to one under the sampling measure
        rng = np.random.default_rng(8)
        X = rng.uniform(0, 2 * np.pi, size=(6, 2))
        pc = tiny_model.cross_markov(X)
        n = tiny_model.dataset.n_samples
        np.testing.assert_allclose(pc.sum(axis=1) / n, 1.0, rtol=1e-10)


def _vb_value(x, y, model):
    ds = model.dataset
    fx = ds.system.embed(x)
    fy = ds.system.embed(y)
    rx = model.bandwidth.evaluate(fx[None, :])[0]
    ry = model.bandwidth.evaluate(fy[None, :])[0]
    return kernel.vb_kernel(fx, fy, model.epsilon, rx, ry)
