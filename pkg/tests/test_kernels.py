"""Kernel tests: closed forms against numerical quadrature of the defining
convolution integrals, Gram assembly bookkeeping, and the jitter ladder."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from frvs import _backend
from frvs.errors import DomainError, NumericalError
from frvs.kernels import (ConvGpHyper, CovarianceAssembly,
                          MultiOutputConvGpHyper, chol_with_jitter, full_cov,
                          gram, k_cross, k_pairs, k_within,
                          multi_output_gram, pair_term)


def quad_pair(v_r, a_r, v_c, a_c, dt):
    """Brute-force convolution of the two smoothing kernels."""
    val, _ = quad(lambda u: v_r * np.exp(-0.5 * a_r * (dt - u) ** 2)
                  * v_c * np.exp(-0.5 * a_c * u ** 2),
                  -np.inf, np.inf)
    return val


class TestClosedForms:
    def test_pair_term_matches_quadrature(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            v_r, v_c = rng.uniform(0.05, 1.5, size=2)
            a_r, a_c = rng.uniform(0.05, 5.0, size=2)
            for dt in rng.uniform(-3, 3, size=3):
                assert pair_term(v_r, a_r, v_c, a_c, dt) == \
                    pytest.approx(quad_pair(v_r, a_r, v_c, a_c, dt), abs=1e-4)

    def test_within_state_variance_at_zero(self):
        # v0 = v1 = 0.1, a0 = 1, a1 = 0.1 at lag zero:
        # sqrt(pi) * (0.01 + 0.01/sqrt(0.1))
        hyper = ConvGpHyper([0.1, 0.1], [1.0, 1.0], [0.1, 0.5], [0.1, 1.0])
        expect = np.sqrt(np.pi) * (0.01 + 0.01 / np.sqrt(0.1))
        assert k_within(hyper, 1, 0.0) == pytest.approx(expect, rel=1e-12)
        assert hyper.variance_at_zero()[0] == pytest.approx(expect, rel=1e-12)

    def test_within_is_shared_plus_own(self):
        hyper = ConvGpHyper([0.3, 0.2], [1.2, 0.8], [0.4, 0.6], [2.0, 0.5])
        dt = 0.37
        shared = pair_term(0.3, 1.2, 0.3, 1.2, dt)
        own = pair_term(0.4, 2.0, 0.4, 2.0, dt)
        assert k_within(hyper, 1, dt) == pytest.approx(shared + own, rel=1e-12)
        assert k_cross(hyper, 1, 2, dt) == \
            pytest.approx(pair_term(0.3, 1.2, 0.2, 0.8, dt), rel=1e-12)

    def test_stationary_and_even(self):
        hyper = ConvGpHyper([0.5], [1.0], [0.3], [4.0])
        dts = np.linspace(0, 2, 9)
        assert np.allclose(k_within(hyper, 1, dts), k_within(hyper, 1, -dts))

    def test_decays_with_lag(self):
        hyper = ConvGpHyper([0.5], [1.0], [0.3], [4.0])
        vals = k_within(hyper, 1, np.array([0.0, 0.5, 1.0, 2.0]))
        assert np.all(np.diff(vals) < 0)


class TestHyperValidation:
    def test_rejects_nonpositive(self):
        with pytest.raises(DomainError):
            ConvGpHyper([0.1], [1.0], [0.0], [1.0])
        with pytest.raises(DomainError):
            ConvGpHyper([0.1], [np.inf], [0.1], [1.0])

    def test_rejects_mismatched_lengths(self):
        with pytest.raises(DomainError):
            ConvGpHyper([0.1, 0.2], [1.0], [0.1], [1.0])

    def test_log_vector_round_trip(self):
        hyper = ConvGpHyper([0.1, 0.2], [1.0, 2.0], [0.3, 0.4], [0.5, 0.6])
        back = ConvGpHyper.from_log_vector(hyper.to_log_vector(), 2)
        for name in ("v0", "a0", "v1", "a1"):
            assert np.allclose(getattr(back, name), getattr(hyper, name))


class TestGramAssembly:
    def setup_method(self):
        self.hyper = ConvGpHyper([0.2, 0.3], [1.0, 0.5], [0.4, 0.1],
                                 [2.0, 0.3])
        self.t = np.linspace(0.1, 0.9, 7)

    def test_full_cov_layout(self):
        k = full_cov(self.hyper, self.t)
        # row i*M + (m-1) is state m at t_i
        assert k[0, 0] == pytest.approx(k_within(self.hyper, 1, 0.0))
        assert k[0, 1] == pytest.approx(k_cross(self.hyper, 1, 2, 0.0))
        dt = self.t[0] - self.t[2]
        assert k[1, 5] == pytest.approx(float(k_within(self.hyper, 2, dt)))

    def test_full_cov_positive_semidefinite(self):
        k = full_cov(self.hyper, self.t)
        assert np.allclose(k, k.T)
        assert np.linalg.eigvalsh(k).min() >= -1e-8

    def test_dense_and_direct_paths_agree(self):
        z = np.array([1, 2, 2, 1, 2, 1, 1])
        dense = CovarianceAssembly(self.hyper, self.t)
        direct = CovarianceAssembly(self.hyper, self.t, max_dense=1)
        assert dense._use_dense and not direct._use_dense
        for op in ("path_cov", "cross_cov", "complement_cov"):
            assert np.allclose(getattr(dense, op)(z), getattr(direct, op)(z),
                               atol=1e-12)

    def test_complement_states_bookkeeping(self):
        hyper3 = ConvGpHyper([0.1] * 3, [1.0] * 3, [0.2] * 3, [1.0] * 3)
        asm = CovarianceAssembly(hyper3, self.t[:3])
        times, states = asm.complement_states(np.array([2, 1, 3]))
        assert np.array_equal(times, np.repeat(self.t[:3], 2))
        assert np.array_equal(states, [1, 3, 2, 3, 1, 2])

    def test_k_pairs_matches_gram(self):
        z_row = np.array([1, 2, 1])
        z_col = np.array([2, 2])
        g = gram(self.hyper, self.t[:3], z_row, self.t[3:5], z_col)
        manual = k_pairs(self.hyper, self.t[:3, None], z_row[:, None],
                         self.t[None, 3:5], z_col[None, :])
        assert np.allclose(g, manual, atol=1e-14)

    def test_backend_agrees_with_numpy_reference(self):
        rng = np.random.default_rng(1)
        tr, tc = rng.random(6), rng.random(4)
        sr = rng.integers(0, 2, 6)
        sc = rng.integers(0, 2, 4)
        args = (tr, sr, tc, sc, self.hyper.v0, self.hyper.a0,
                self.hyper.v1, self.hyper.a1)
        assert np.allclose(_backend.gram(*args), _backend.gram_numpy(*args),
                           atol=1e-12)


class TestMultiOutput:
    def setup_method(self):
        rng = np.random.default_rng(9)
        self.hyper = MultiOutputConvGpHyper(
            *(rng.uniform(0.1, 1.0, size=(2, 2)) for _ in range(6)))

    def test_three_branch_structure(self):
        h = self.hyper
        dt = 0.4
        val = multi_output_gram(h, [0.5], [1], [0], [0.1], [1], [0])[0, 0]
        expect = (pair_term(h.v0[0, 0], h.a0[0, 0], h.v0[0, 0], h.a0[0, 0], dt)
                  + pair_term(h.v1[0, 0], h.a1[0, 0], h.v1[0, 0], h.a1[0, 0], dt)
                  + pair_term(h.v2[0, 0], h.a2[0, 0], h.v2[0, 0], h.a2[0, 0], dt))
        assert val == pytest.approx(expect, rel=1e-12)
        # same state, different outputs: individual layer drops out
        val = multi_output_gram(h, [0.5], [1], [0], [0.1], [1], [1])[0, 0]
        expect = (pair_term(h.v0[0, 0], h.a0[0, 0], h.v0[1, 0], h.a0[1, 0], dt)
                  + pair_term(h.v1[0, 0], h.a1[0, 0], h.v1[1, 0], h.a1[1, 0], dt))
        assert val == pytest.approx(expect, rel=1e-12)
        # different states: only the globally shared layer remains
        val = multi_output_gram(h, [0.5], [1], [0], [0.1], [2], [1])[0, 0]
        expect = pair_term(h.v0[0, 0], h.a0[0, 0], h.v0[1, 1], h.a0[1, 1], dt)
        assert val == pytest.approx(expect, rel=1e-12)

    def test_matches_quadrature(self):
        rng = np.random.default_rng(21)
        for _ in range(20):
            h = MultiOutputConvGpHyper(
                *(rng.uniform(0.1, 1.2, size=(2, 2)) for _ in range(6)))
            dt = rng.uniform(-2, 2)
            val = multi_output_gram(h, [dt], [1], [0], [0.0], [1], [0])[0, 0]
            expect = (quad_pair(h.v0[0, 0], h.a0[0, 0], h.v0[0, 0],
                                h.a0[0, 0], dt)
                      + quad_pair(h.v1[0, 0], h.a1[0, 0], h.v1[0, 0],
                                  h.a1[0, 0], dt)
                      + quad_pair(h.v2[0, 0], h.a2[0, 0], h.v2[0, 0],
                                  h.a2[0, 0], dt))
            assert val == pytest.approx(expect, abs=1e-4)

    def test_reduces_to_single_output(self):
        # P = 1 with a negligible across-output state layer collapses onto
        # the single-output kernel with the individual layer as "own"
        v0, a0, v2, a2 = 0.3, 1.1, 0.5, 2.3
        h = MultiOutputConvGpHyper([[v0, v0]], [[a0, a0]],
                                   [[1e-9, 1e-9]], [[1.0, 1.0]],
                                   [[v2, v2]], [[a2, a2]])
        single = ConvGpHyper([v0, v0], [a0, a0], [v2, v2], [a2, a2])
        t = np.linspace(0, 1, 5)
        s = np.array([1, 2, 1, 2, 1])
        k_multi = multi_output_gram(h, t, s, np.zeros(5, int),
                                    t, s, np.zeros(5, int))
        k_single = gram(single, t, s, t, s)
        assert np.allclose(k_multi, k_single, atol=1e-10)

    def test_variance_at_zero(self):
        h = MultiOutputConvGpHyper([[0.2]], [[1.0]], [[0.3]], [[2.0]],
                                   [[0.4]], [[0.5]])
        expect = np.sqrt(np.pi) * (0.04 + 0.09 / np.sqrt(2.0)
                                   + 0.16 / np.sqrt(0.5))
        assert h.variance_at_zero()[0] == pytest.approx(expect, rel=1e-12)

    def test_joint_gram_positive_semidefinite(self):
        t = np.repeat(np.linspace(0.1, 0.9, 6), 2)
        s = np.tile([1, 2], 6)
        p = np.zeros(12, int)
        p[1::2] = 1
        k = multi_output_gram(self.hyper, t, s, p, t, s, p)
        assert np.linalg.eigvalsh(0.5 * (k + k.T)).min() >= -1e-8

    def test_shape_validation(self):
        with pytest.raises(DomainError):
            MultiOutputConvGpHyper(*([np.ones((2, 2))] * 5 + [np.ones((2, 3))]))


class TestCholWithJitter:
    def test_clean_matrix_unchanged(self):
        a = np.array([[4.0, 1.0], [1.0, 3.0]])
        low = chol_with_jitter(a)
        assert np.allclose(low @ low.T, a, atol=1e-12)

    def test_rank_deficient_needs_jitter(self):
        v = np.array([1.0, 2.0, 3.0])
        low = chol_with_jitter(np.outer(v, v))
        assert np.allclose(low @ low.T, np.outer(v, v), atol=1e-5)

    def test_indefinite_raises_with_eigenvalue(self):
        with pytest.raises(NumericalError) as err:
            chol_with_jitter(np.diag([1.0, -0.5]))
        assert err.value.min_eigenvalue == pytest.approx(-0.5)


@given(st.floats(0.05, 2.0), st.floats(0.05, 5.0), st.floats(-4.0, 4.0))
@settings(max_examples=50, deadline=None)
def test_pair_term_bounded_by_lag_zero(v, a, dt):
    assert 0 < pair_term(v, a, v, a, dt) <= pair_term(v, a, v, a, 0.0) + 1e-15


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=20, deadline=None)
def test_random_gram_is_psd(seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(1, 4))
    hyper = ConvGpHyper(*(rng.uniform(0.05, 1.5, size=m) for _ in range(4)))
    t = np.sort(rng.random(5))
    k = full_cov(hyper, t)
    assert np.linalg.eigvalsh(0.5 * (k + k.T)).min() >= -1e-8
