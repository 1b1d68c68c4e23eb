"""Multi-output fits: P observation streams sharing one hidden state path.

The single-output pipeline carries over with the observations stacked
output-major within each time point: the curves are drawn jointly from the
three-layer multi-output kernel, the path sampler receives a per-point
observation log-likelihood summed over outputs, and each output keeps its
own conjugately updated noise variance.  Dense linear algebra only -- the
stacked problem has nP rows and is meant for desk-scale data.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize

from . import cbss, gp_sampler, inference
from .ctmm import HiddenStatePath, RateMatrix
from .errors import InputError, NumericalError
from .kernels import (MultiOutputConvGpHyper, chol_with_jitter,
                      multi_output_gram)

LOG_2PI = np.log(2.0 * np.pi)


class MultiAssembly:
    """Covariance blocks over the stacked (time, output) index.

    Mirrors the single-output assembly interface: ``n`` counts stacked rows
    (original points times outputs) and the path argument is the stacked
    state vector.
    """

    def __init__(self, hyper: MultiOutputConvGpHyper, t):
        t = np.asarray(t, float)
        self.p_outputs = hyper.n_outputs
        self.t = np.repeat(t, self.p_outputs)
        self.p = np.tile(np.arange(self.p_outputs), t.size)
        self.n = self.t.size
        self.m = hyper.n_states
        self.hyper = hyper

    def path_cov(self, z) -> np.ndarray:
        return multi_output_gram(self.hyper, self.t, z, self.p,
                                 self.t, z, self.p)

    def complement_states(self, z):
        z = np.asarray(z, int)
        all_m = np.arange(1, self.m + 1)
        mask = all_m[None, :] != z[:, None]
        times = np.repeat(self.t, self.m - 1)
        states = np.broadcast_to(all_m, (self.n, self.m))[mask]
        return times, states

    def _comp_index(self, z):
        times, states = self.complement_states(z)
        outputs = np.repeat(self.p, self.m - 1)
        return times, states, outputs

    def cross_cov(self, z) -> np.ndarray:
        tc, sc, pc = self._comp_index(z)
        return multi_output_gram(self.hyper, self.t, z, self.p, tc, sc, pc)

    def complement_cov(self, z) -> np.ndarray:
        tc, sc, pc = self._comp_index(z)
        return multi_output_gram(self.hyper, tc, sc, pc, tc, sc, pc)


def stack_path(z, n_outputs: int) -> np.ndarray:
    """Repeat the n-point path across outputs (stacked, output-major)."""
    return np.repeat(np.asarray(z, int), n_outputs)


def init_hyper_multi(y: np.ndarray, z0: np.ndarray,
                     n_states: int) -> MultiOutputConvGpHyper:
    """Starting kernels per (output, state): layer scales follow each
    output's within-state spread; the state that looks roughest overall
    gets the rough specific layers."""
    y = np.asarray(y, float)
    z0 = np.asarray(z0, int)
    n, p_out = y.shape
    std = np.std(y, axis=0)
    pooled = (y / np.where(std > 0, std, 1.0)).mean(axis=1)
    ranked = inference.init_hyper(pooled, z0, n_states)  # reuse the ranking
    rough_state = int(np.argmax(ranked.a1)) + 1

    spread = np.empty((p_out, n_states))
    for m in range(1, n_states + 1):
        sel = z0 == m
        for q in range(p_out):
            s = np.std(y[sel, q]) if sel.sum() >= 5 else np.std(y[:, q])
            spread[q, m - 1] = max(s, 1e-3)
    rough = np.arange(1, n_states + 1) == rough_state
    v0 = 0.15 * spread
    a0 = np.ones((p_out, n_states))
    v1 = np.where(rough, 0.5 * spread, 0.2 * spread)
    a1 = np.where(rough, 1.0, 0.1) * np.ones((p_out, n_states))
    v2 = np.where(rough, 0.5 * spread, 0.2 * spread)
    a2 = np.where(rough, 1.0, 0.1) * np.ones((p_out, n_states))
    return MultiOutputConvGpHyper(v0, a0, v1, a1, v2, a2)


def marginal_loglik_multi(hyper: MultiOutputConvGpHyper, assembly, z_stack,
                          y_flat, sigma2_vec) -> float:
    """log p(y | z, theta_f, sigma2) of the stacked observations."""
    kz = assembly.path_cov(z_stack)
    kz[np.diag_indices(assembly.n)] += np.tile(sigma2_vec,
                                               assembly.n // sigma2_vec.size)
    chol = chol_with_jitter(kz)
    alpha = np.linalg.solve(chol, y_flat)
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    return float(-0.5 * (alpha @ alpha + logdet + y_flat.size * LOG_2PI))


def optimize_hyper_multi(hyper: MultiOutputConvGpHyper, t, z, y, sigma2_vec,
                         prior_sd: float = 2.5,
                         maxiter: int = 120) -> MultiOutputConvGpHyper:
    """Empirical-Bayes refresh of the multi-output kernels (monotone)."""
    n_out, n_states = hyper.n_outputs, hyper.n_states
    z_stack = stack_path(z, n_out)
    y_flat = np.asarray(y, float).ravel()

    def objective(x):
        if np.any(np.abs(x) > inference.LOG_PARAM_BOUND):
            return np.inf
        try:
            h = MultiOutputConvGpHyper.from_log_vector(x, n_out, n_states)
            ll = marginal_loglik_multi(h, MultiAssembly(h, t), z_stack,
                                       y_flat, sigma2_vec)
        except (NumericalError, FloatingPointError):
            return np.inf
        return -ll + 0.5 * (x @ x) / prior_sd ** 2

    x0 = hyper.to_log_vector()
    f0 = objective(x0)
    res = minimize(objective, x0, method="Nelder-Mead",
                   options={"maxiter": maxiter, "xatol": 1e-2, "fatol": 1e-2})
    if res.fun < f0:
        return MultiOutputConvGpHyper.from_log_vector(res.x, n_out, n_states)
    return hyper


@dataclass
class MultiChainResult:
    """Post-burn-in draws of one multi-output chain."""

    t: np.ndarray
    n_states: int
    n_outputs: int
    sigma2_trace: np.ndarray          # (n_iter, P)
    rate_trace: np.ndarray            # (n_iter, M*(M-1))
    theta_f_trace: np.ndarray         # (n_iter, 6PM) log scale
    loglik_trace: np.ndarray
    z_draws: np.ndarray               # (n_kept, n)
    f_draws: np.ndarray               # (n_kept, n, P) values at drawn labels
    sigma2_draws: np.ndarray          # (n_kept, P)
    rate_draws: np.ndarray
    theta_f_draws: np.ndarray
    accept_path: float
    accept_rates: float
    score: float = -np.inf


def run_chain_multi(y, t, n_states: int, config: inference.GibbsConfig, rng,
                    init_z=None) -> MultiChainResult:
    """One Gibbs chain on (n, P) observations sharing a state path."""
    y = np.asarray(y, float)
    t = np.asarray(t, float)
    if y.ndim != 2:
        raise InputError("multi-output fit expects y with shape (n, P)")
    n, p_out = y.shape
    if gp_sampler.choose_mode(n * p_out, config.mode) != "dense":
        raise InputError("multi-output fits support dense mode only; "
                         f"{n} x {p_out} stacked rows is too large")
    y_flat = y.ravel()

    sigma2 = np.maximum(0.05 * y.var(axis=0), 1e-4)
    if init_z is not None:
        z = np.asarray(init_z, int)
    else:
        std = np.std(y, axis=0)
        pooled = (y / np.where(std > 0, std, 1.0)).mean(axis=1)
        z = inference.init_state_candidates(pooled, t, n_states, rng,
                                            float(sigma2.mean()))[0]
    hyper = init_hyper_multi(y, z, n_states)
    hyper = optimize_hyper_multi(hyper, t, z, y, sigma2,
                                 prior_sd=config.theta_f_prior_sd)
    rate = RateMatrix(inference._with_offdiag(
        np.ones(n_states * (n_states - 1)), n_states))

    prior_g = cbss.SmoothingPrior(np.ones(n_states - 1),
                                  np.full(n_states - 1, 50.0))
    counts0 = cbss.state_counts(z[None, :], n_states)
    g, blocks, _ = cbss.fisher_scoring_mode(prior_g, t, counts0, 1.0)

    n_kept = config.n_iter - config.n_burn
    theta_dim = 6 * p_out * n_states
    res = MultiChainResult(
        t=t, n_states=n_states, n_outputs=p_out,
        sigma2_trace=np.empty((config.n_iter, p_out)),
        rate_trace=np.empty((config.n_iter, n_states * (n_states - 1))),
        theta_f_trace=np.empty((config.n_iter, theta_dim)),
        loglik_trace=np.empty(config.n_iter),
        z_draws=np.empty((n_kept, n), dtype=int),
        f_draws=np.empty((n_kept, n, p_out)),
        sigma2_draws=np.empty((n_kept, p_out)),
        rate_draws=np.empty((n_kept, n_states, n_states)),
        theta_f_draws=np.empty((n_kept, theta_dim)),
        accept_path=0.0, accept_rates=0.0)

    step_rate = config.rw_step
    acc_path = 0.0
    acc_rates = 0
    noise_vec = np.tile(sigma2, n)

    for it in range(config.n_iter):
        assembly = MultiAssembly(hyper, t)
        z_stack = stack_path(z, p_out)
        f_stack = gp_sampler.sample_curves_dense(assembly, z_stack, y_flat,
                                                 noise_vec, rng)
        f = f_stack.reshape(n, p_out, n_states)
        f_path = f[np.arange(n), :, z - 1]          # (n, P)

        resid = y - f_path
        for q in range(p_out):
            shape = config.sigma2_shape + 0.5 * n
            rate_q = config.sigma2_rate + 0.5 * resid[:, q] @ resid[:, q]
            sigma2[q] = rate_q / rng.gamma(shape)
        noise_vec = np.tile(sigma2, n)

        path_obj = HiddenStatePath(z, t)
        rate, ok_r = inference.rw_update_rates(rate, path_obj, step_rate, rng)
        acc_rates += ok_r

        due = (it >= config.theta_f_start
               and (it - config.theta_f_start) % config.theta_f_every == 0)
        if config.theta_f_update != "none" and due:
            hyper = optimize_hyper_multi(hyper, t, z, y, sigma2,
                                         prior_sd=config.theta_f_prior_sd)

        obs_loglik = -0.5 * (((y[:, :, None] - f) ** 2
                              / sigma2[None, :, None])
                             + np.log(sigma2)[None, :, None]
                             + LOG_2PI).sum(axis=1)
        alpha = cbss.state_probs(g)
        kept, acc_rate, z = cbss.run_cbss(
            None, None, None, rate, t, alpha, z, rng,
            n_keep=config.n_keep_paths,
            steps_per_keep=config.steps_per_keep,
            method="imh" if config.path_method == "ngs" else config.path_method,
            n_candidates=config.n_candidates, obs_loglik=obs_loglik)
        acc_path += acc_rate
        counts = cbss.state_counts(kept, n_states)
        prior_g, g = cbss.optimize_theta_g(prior_g, t, counts,
                                           config.n_keep_paths, g,
                                           maxiter=config.theta_g_maxiter)
        blocks = cbss.curvature_blocks(g, config.n_keep_paths)
        f_path = f[np.arange(n), :, z - 1]

        res.sigma2_trace[it] = sigma2
        res.rate_trace[it] = inference._offdiag(rate.q)
        res.theta_f_trace[it] = hyper.to_log_vector()
        try:
            res.loglik_trace[it] = marginal_loglik_multi(
                hyper, assembly, stack_path(z, p_out), y_flat, sigma2)
        except NumericalError:
            res.loglik_trace[it] = -np.inf
        if it >= config.n_burn:
            k = it - config.n_burn
            res.z_draws[k] = z
            res.f_draws[k] = f_path
            res.sigma2_draws[k] = sigma2
            res.rate_draws[k] = rate.q
            res.theta_f_draws[k] = hyper.to_log_vector()

    res.accept_path = acc_path / config.n_iter
    res.accept_rates = acc_rates / config.n_iter
    res.score = float(np.mean(res.loglik_trace[config.n_burn:]))
    return res


@dataclass
class MultiFitResult:
    """Combined multi-chain summary for multi-output data."""

    t: np.ndarray
    n_states: int
    n_outputs: int
    chains: list
    state_probs: np.ndarray
    z_hat: np.ndarray
    sigma2_mean: np.ndarray           # (P,)
    rate_mean: np.ndarray
    hyper_mean: MultiOutputConvGpHyper
    f_mean: np.ndarray                # (n, P)
    gelman_rubin: dict = field(default_factory=dict)
    label_order: np.ndarray = None
    kept_chains: np.ndarray = None


def _align_chain_labels_multi(chain: MultiChainResult) -> None:
    m, p_out = chain.n_states, chain.n_outputs
    hyper = MultiOutputConvGpHyper.from_log_vector(
        chain.theta_f_draws.mean(axis=0), p_out, m)
    order = inference._canonical_order(hyper)
    if np.array_equal(order, np.arange(m)):
        return
    relabel = np.empty(m + 1, dtype=int)
    relabel[order + 1] = np.arange(1, m + 1)
    chain.z_draws = relabel[chain.z_draws]

    def permute(theta):
        blocks = theta.reshape(theta.shape[:-1] + (6, p_out, m))
        return blocks[..., order].reshape(theta.shape)

    chain.theta_f_draws = permute(chain.theta_f_draws)
    chain.theta_f_trace = permute(chain.theta_f_trace)
    chain.rate_draws = chain.rate_draws[:, order][:, :, order]
    eye = ~np.eye(m, dtype=bool)
    full = np.zeros((chain.rate_trace.shape[0], m, m))
    full[:, eye] = chain.rate_trace
    chain.rate_trace = full[:, order][:, :, order][:, eye]


def fit_multi(y, t, n_states: int = 2,
              config: inference.GibbsConfig | None = None,
              n_chains: int = 2, seed: int = 0) -> MultiFitResult:
    """Multi-output counterpart of :func:`frvs.inference.fit`."""
    config = config or inference.GibbsConfig()
    y = np.asarray(y, float)
    t = np.asarray(t, float)
    if y.ndim != 2:
        raise InputError("multi-output fit expects y with shape (n, P)")
    n, p_out = y.shape
    root = np.random.SeedSequence(seed)
    children = root.spawn(n_chains + 1)
    init_rng = np.random.default_rng(children[0])
    std = np.std(y, axis=0)
    pooled = (y / np.where(std > 0, std, 1.0)).mean(axis=1)
    sigma2_0 = max(0.05 * pooled.var(), 1e-4)
    candidates = inference.init_state_candidates(pooled, t, n_states,
                                                 init_rng, sigma2_0)

    chains = []
    for c, child in enumerate(children[1:]):
        rng = np.random.default_rng(child)
        delay = 25 if c % 2 == 1 else 0
        cfg = replace(config, theta_f_start=config.theta_f_start + delay)
        chains.append(run_chain_multi(y, t, n_states, cfg, rng,
                                      init_z=candidates[c % len(candidates)]))

    for chain in chains:
        _align_chain_labels_multi(chain)
    scores = np.array([c.score for c in chains])
    kept = np.where(scores >= scores.max() - inference.CHAIN_SCORE_TOL)[0]
    pool = [chains[i] for i in kept]

    z_all = np.concatenate([c.z_draws for c in pool])
    probs = np.stack([(z_all == m).mean(axis=0)
                      for m in range(1, n_states + 1)], axis=1)
    theta_mean = np.mean(np.concatenate([c.theta_f_draws for c in pool]),
                         axis=0)
    hyper_mean = MultiOutputConvGpHyper.from_log_vector(theta_mean, p_out,
                                                        n_states)
    order = inference._canonical_order(hyper_mean)
    probs = probs[:, order]
    hyper_mean = MultiOutputConvGpHyper(
        *(getattr(hyper_mean, name)[:, order]
          for name in ("v0", "a0", "v1", "a1", "v2", "a2")))
    rate_mean = np.mean(np.concatenate([c.rate_draws for c in pool]), axis=0)
    rate_mean = rate_mean[np.ix_(order, order)]

    gr = {}
    for q in range(p_out):
        gr[f"sigma2_{q + 1}"] = inference.gelman_rubin(
            np.stack([c.sigma2_trace[config.n_burn:, q] for c in chains]))
    for j in range(chains[0].rate_trace.shape[1]):
        gr[f"rate_{j}"] = inference.gelman_rubin(
            np.stack([c.rate_trace[config.n_burn:, j] for c in chains]))

    return MultiFitResult(
        t=t, n_states=n_states, n_outputs=p_out, chains=chains,
        state_probs=probs, z_hat=np.argmax(probs, axis=1) + 1,
        sigma2_mean=np.mean(np.concatenate(
            [c.sigma2_draws for c in pool]), axis=0),
        rate_mean=rate_mean, hyper_mean=hyper_mean,
        f_mean=np.mean(np.concatenate([c.f_draws for c in pool]), axis=0),
        gelman_rubin=gr, label_order=order, kept_chains=kept)


def predict_multi(result: MultiFitResult, t_new, mode: str = "auto",
                  max_draws: int = 50) -> tuple[np.ndarray, np.ndarray]:
    """Posterior predictive mean and variance per output at new points."""
    from .ctmm import interpolate_state

    t_new = np.asarray(t_new, float)
    t = result.t
    n, p_out = t.size, result.n_outputs

    draws = []
    kept = result.kept_chains if result.kept_chains is not None \
        else np.arange(len(result.chains))
    for i in kept:
        c = result.chains[i]
        for k in range(c.z_draws.shape[0]):
            draws.append((c.z_draws[k], c.f_draws[k], c.sigma2_draws[k],
                          c.rate_draws[k], c.theta_f_draws[k]))
    if len(draws) > max_draws:
        pick = np.linspace(0, len(draws) - 1, max_draws).round().astype(int)
        draws = [draws[i] for i in pick]

    means = np.empty((len(draws), t_new.size, p_out))
    variances = np.empty((len(draws), t_new.size, p_out))
    prep = np.tile(np.arange(p_out), n)
    pnew = np.tile(np.arange(p_out), t_new.size)
    for d, (z, f_path, s2, q, th) in enumerate(draws):
        hyper = MultiOutputConvGpHyper.from_log_vector(th, p_out,
                                                       result.n_states)
        rate = RateMatrix(q)
        path = HiddenStatePath(z, t)
        z_star = np.array([interpolate_state(rate, path, ts) for ts in t_new])
        trep = np.repeat(t, p_out)
        zrep = stack_path(z, p_out)
        tnew_rep = np.repeat(t_new, p_out)
        znew_rep = stack_path(z_star, p_out)
        kz = multi_output_gram(hyper, trep, zrep, prep, trep, zrep, prep)
        cross = multi_output_gram(hyper, tnew_rep, znew_rep, pnew,
                                  trep, zrep, prep)
        sol = np.linalg.solve(kz + 1e-10 * np.eye(n * p_out),
                              np.column_stack([f_path.ravel()[:, None],
                                               cross.T]))
        means[d] = (cross @ sol[:, 0]).reshape(t_new.size, p_out)
        kss = multi_output_gram(hyper, tnew_rep, znew_rep, pnew,
                                tnew_rep, znew_rep, pnew).diagonal()
        var_flat = np.maximum(kss - np.einsum("ij,ji->i", cross, sol[:, 1:]),
                              0.0) + np.tile(s2, t_new.size)
        variances[d] = var_flat.reshape(t_new.size, p_out)

    mean = means.mean(axis=0)
    var = variances.mean(axis=0) + means.var(axis=0)
    return mean, var
