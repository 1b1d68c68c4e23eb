"""Multi-output fits: stacked covariance assembly against the raw Gram
builder, and smoke/determinism checks on the joint sampler."""

import numpy as np
import pytest

from frvs.errors import InputError
from frvs.inference import GibbsConfig
from frvs.kernels import MultiOutputConvGpHyper, multi_output_gram
from frvs.multi import (MultiAssembly, fit_multi, marginal_loglik_multi,
                        predict_multi, stack_path)

HYPER = MultiOutputConvGpHyper(
    v0=[[0.3, 0.2], [0.25, 0.35]], a0=[[30.0, 20.0], [25.0, 40.0]],
    v1=[[0.4, 0.3], [0.3, 0.2]], a1=[[50.0, 35.0], [45.0, 30.0]],
    v2=[[0.2, 0.4], [0.35, 0.25]], a2=[[40.0, 60.0], [55.0, 45.0]])

SMALL = GibbsConfig(n_iter=8, n_burn=4, n_keep_paths=3,
                    theta_f_update="none", theta_g_maxiter=5)


def toy_multi(n=16, seed=0):
    rng = np.random.default_rng(seed)
    t = np.arange(1, n + 1) / (n + 1)
    scale = np.where(t < 0.5, 0.1, 1.0)
    y = np.column_stack([scale * rng.normal(size=n),
                         scale * rng.normal(size=n)])
    return t, y


class TestStackPath:
    def test_output_major_repeat(self):
        assert np.array_equal(stack_path([1, 2], 3), [1, 1, 1, 2, 2, 2])


class TestMultiAssembly:
    def test_path_cov_matches_manual_gram(self):
        t = np.array([0.2, 0.5, 0.8])
        z = np.array([1, 2, 1])
        asm = MultiAssembly(HYPER, t)
        zs = stack_path(z, 2)
        manual = multi_output_gram(HYPER, np.repeat(t, 2), zs,
                                   np.tile([0, 1], 3),
                                   np.repeat(t, 2), zs, np.tile([0, 1], 3))
        assert np.allclose(asm.path_cov(zs), manual)

    def test_complement_bookkeeping(self):
        t = np.array([0.3, 0.7])
        asm = MultiAssembly(HYPER, t)
        zs = stack_path([1, 2], 2)
        times, states = asm.complement_states(zs)
        assert np.allclose(times, [0.3, 0.3, 0.7, 0.7])
        assert np.array_equal(states, [2, 2, 1, 1])
        assert asm.cross_cov(zs).shape == (4, 4)
        assert asm.complement_cov(zs).shape == (4, 4)

    def test_marginal_loglik_matches_direct_formula(self):
        t = np.array([0.2, 0.6])
        zs = stack_path([1, 2], 2)
        asm = MultiAssembly(HYPER, t)
        y_flat = np.array([0.1, -0.2, 0.4, 0.0])
        s2 = np.array([0.02, 0.05])
        kz = asm.path_cov(zs) + np.diag(np.tile(s2, 2))
        sign, logdet = np.linalg.slogdet(kz)
        expect = -0.5 * (y_flat @ np.linalg.solve(kz, y_flat) + logdet
                         + 4 * np.log(2 * np.pi))
        got = marginal_loglik_multi(HYPER, asm, zs, y_flat, s2)
        assert got == pytest.approx(expect, abs=1e-8)


class TestFitMulti:
    def test_shapes_and_probs(self):
        t, y = toy_multi()
        res = fit_multi(y, t, 2, SMALL, n_chains=1, seed=0)
        assert res.state_probs.shape == (16, 2)
        assert np.allclose(res.state_probs.sum(axis=1), 1.0)
        assert res.f_mean.shape == (16, 2)
        assert res.sigma2_mean.shape == (2,)
        assert "sigma2_1" in res.gelman_rubin

    def test_deterministic_under_seed(self):
        t, y = toy_multi()
        a = fit_multi(y, t, 2, SMALL, n_chains=1, seed=4)
        b = fit_multi(y, t, 2, SMALL, n_chains=1, seed=4)
        assert np.array_equal(a.z_hat, b.z_hat)
        assert np.allclose(a.f_mean, b.f_mean)

    def test_one_output_column_required_shape(self):
        t, y = toy_multi()
        with pytest.raises(InputError):
            fit_multi(y[:, 0], t, 2, SMALL, n_chains=1)

    def test_large_stacked_problem_rejected(self):
        n = 600
        t = np.arange(1, n + 1) / (n + 1)
        y = np.random.default_rng(0).normal(size=(n, 2))
        with pytest.raises(InputError, match="dense"):
            fit_multi(y, t, 2, SMALL, n_chains=1)

    def test_predict_shapes(self):
        t, y = toy_multi()
        res = fit_multi(y, t, 2, SMALL, n_chains=1, seed=2)
        mean, var = predict_multi(res, np.array([0.3, 0.65]))
        assert mean.shape == (2, 2) and var.shape == (2, 2)
        assert np.all(var > 0)
