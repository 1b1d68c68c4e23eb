"""Gibbs sampler tying the pieces together.

Each iteration cycles three blocks: (1) the latent curves given the state
path and parameters, (2) the noise variance (conjugate inverse-gamma), the
transition rates (random-walk move on the log scale) and the kernel
hyperparameters, and (3) the state path via the curve-based proposal,
followed by a refresh of the logit curves that drive that proposal.

Kernel hyperparameters default to an empirical-Bayes update: they are moved
to a local maximizer of the marginal likelihood of the observations given
the current path and noise variance (lightly shrunk on the log scale).
Holding the curves out of that score keeps the update from chasing
transient curve draws; a random-walk sampling variant on the same target is
available as an option.

The posterior over paths is highly multimodal -- a path that labels every
point with the roughest state explains the data without leaving any
residual misfit to push the sampler out -- so initialization decides which
mode a chain finds.  Several candidate initial paths are built by
clustering simple summaries of y (local level, local second moment, local
roughness) and ranked by their optimized marginal likelihood; chains start
from the top candidates and the final summary comes from the chains whose
average post-burn-in marginal likelihood is near the best.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.optimize import minimize

from . import cbss, gp_sampler
from .ctmm import (HiddenStatePath, RateMatrix, interpolate_state,
                   log_path_probability)
from .errors import DomainError, NumericalError
from .kernels import ConvGpHyper, CovarianceAssembly, gram, k_pairs

RW_TARGET = (0.25, 0.40)
RW_ADAPT_EVERY = 25

#: Random-walk support: log-scale parameters are confined to this interval,
#: a flat-but-proper prior that keeps unidentified components from drifting
#: into overflow territory.
LOG_PARAM_BOUND = 15.0

#: Chains whose average post-burn-in marginal likelihood is within this many
#: nats of the best chain contribute to the combined summary.  Tight enough
#: that chains settled in different path modes are not pooled together.
CHAIN_SCORE_TOL = 2.0

#: Points used for scoring initial-path candidates when n is large.
INIT_SCORE_POINTS = 200


@dataclass
class GibbsConfig:
    """Tuning knobs of the sampler; defaults target desk-scale runs."""

    n_iter: int = 250
    n_burn: int = 150
    n_keep_paths: int = 10
    steps_per_keep: int = cbss.STEPS_PER_KEEP
    path_method: str = "imh"
    n_candidates: int = 5
    rw_step: float = 0.1
    adapt_rw: bool = True
    mode: str = "auto"
    n_neighbors: int = gp_sampler.DEFAULT_NEIGHBORS
    theta_g_refresh: int = 1
    theta_g_maxiter: int = 20
    sigma2_shape: float = 2.0
    sigma2_rate: float = 0.02
    theta_f_update: str = "eb"        # "eb" | "mh" | "none"
    theta_f_every: int = 5
    theta_f_start: int = 0
    theta_f_maxiter: int = 60
    theta_f_prior_sd: float = 2.5
    init_scheme: str = "scored"       # "scored" | "basic"
    relabel_every: int = 5            # 0 disables the segment-relabel move

    def __post_init__(self):
        if self.n_burn >= self.n_iter:
            raise DomainError("n_burn must be below n_iter")
        if self.theta_f_update not in ("eb", "mh", "none"):
            raise DomainError(f"unknown theta_f_update {self.theta_f_update!r}")
        if self.init_scheme not in ("scored", "basic"):
            raise DomainError(f"unknown init_scheme {self.init_scheme!r}")


@dataclass
class ChainResult:
    """Post-burn-in draws and trace summaries of one chain."""

    t: np.ndarray
    n_states: int
    sigma2_trace: np.ndarray          # (n_iter,)
    rate_trace: np.ndarray            # (n_iter, M*(M-1))
    theta_f_trace: np.ndarray         # (n_iter, 4M) log scale
    loglik_trace: np.ndarray          # (n_iter,) marginal loglik of y
    z_draws: np.ndarray               # (n_kept, n)
    f_draws: np.ndarray               # (n_kept, n) values at the drawn labels
    sigma2_draws: np.ndarray
    rate_draws: np.ndarray            # (n_kept, M, M)
    theta_f_draws: np.ndarray         # (n_kept, 4M) log scale
    accept_path: float
    accept_rates: float
    accept_kernel: float
    score: float = -np.inf            # mean post-burn marginal loglik


def sliding_window_mean(x: np.ndarray, window: int) -> np.ndarray:
    """Centered rolling mean, edges padded by reflection."""
    half = window // 2
    padded = np.pad(np.asarray(x, float), half, mode="reflect")
    kernel = np.full(2 * half + 1, 1.0 / (2 * half + 1))
    return np.convolve(padded, kernel, mode="valid")


def sliding_window_variance(y: np.ndarray, window: int) -> np.ndarray:
    """Rolling second moment about the global mean, edges reflected.

    Centering within the window would cancel the level differences between
    states, which carry most of the signal; centering globally keeps them.
    """
    y = np.asarray(y, float)
    return sliding_window_mean((y - y.mean()) ** 2, window)


def _cluster_path(feature: np.ndarray, n_states: int, seed: int) -> np.ndarray | None:
    """kmeans partition of a 1-d feature; highest-center cluster gets label 1.
    Returns None when a cluster comes back empty."""
    centers, labels = kmeans2(feature[:, None], n_states, minit="++", seed=seed)
    if np.unique(labels).size < n_states:
        return None
    order = np.argsort(-centers[:, 0])
    relabel = np.empty(n_states, dtype=int)
    relabel[order] = np.arange(1, n_states + 1)
    return relabel[labels]


def jump_segment_paths(y: np.ndarray, n_states: int,
                       boundary_counts=(2, 4)) -> list[np.ndarray]:
    """Piecewise-constant candidate paths cut at the largest jumps of y.

    A state switch forces y onto a different latent curve, so boundaries
    tend to show up as outsized one-step increments even when the states
    are indistinguishable by local variance.  For each requested boundary
    count the largest well-separated jumps become segment edges and the
    segments alternate labels.
    """
    y = np.asarray(y, float)
    n = y.size
    jumps = np.abs(np.diff(y))
    order = np.argsort(-jumps, kind="stable")
    paths = []
    for k in boundary_counts:
        cuts: list[int] = []
        for i in order:
            if len(cuts) == k:
                break
            if all(abs(i - c) >= 3 for c in cuts):
                cuts.append(int(i))
        if len(cuts) < k:
            continue
        edges = np.sort(np.asarray(cuts)) + 1
        z = np.empty(n, dtype=int)
        label = 1
        for lo, hi in zip(np.concatenate(([0], edges)),
                          np.concatenate((edges, [n]))):
            z[lo:hi] = label
            label = label % n_states + 1
        paths.append(z)
    return paths


def init_state_candidates(y, t, n_states: int, rng, sigma2: float,
                          max_candidates: int = 4) -> list[np.ndarray]:
    """Candidate initial paths, best first.

    Partitions come from clustering the local level, local second moment and
    local roughness of y at a couple of window widths, plus segment paths cut
    at the largest jumps; each is scored by the marginal likelihood of y
    under its empirical-Bayes kernels.  No single summary wins on every
    dataset, which is why several are tried.
    """
    y = np.asarray(y, float)
    t = np.asarray(t, float)
    n = y.size
    features = [y]
    for window in (max(5, n // 12), max(5, n // 6)):
        features.append(np.log(sliding_window_variance(y, window) + 1e-12))
    rough = np.abs(np.diff(y, prepend=y[0]))
    features.append(np.log(sliding_window_mean(rough, max(5, n // 12)) + 1e-12))

    seen = set()
    candidates = []

    def add(z):
        key = min(tuple(z), tuple(n_states + 1 - z))
        if key not in seen and np.unique(z).size == n_states:
            seen.add(key)
            candidates.append(z)

    for feature in features:
        for ks in rng.integers(2 ** 31, size=2):
            z = _cluster_path(feature, n_states, int(ks))
            if z is not None:
                add(z)
    for z in jump_segment_paths(y, n_states):
        add(z)
    if not candidates:
        # degenerate y (e.g. constant): alternate labels so both states exist
        candidates = [np.arange(n) % n_states + 1]

    sub = np.unique(np.linspace(0, n - 1, min(n, INIT_SCORE_POINTS)).astype(int))
    scored = []
    for z in candidates:
        hyper = init_hyper(y, z, n_states)
        hyper, score = optimize_hyper(hyper, t[sub], z[sub], y[sub], sigma2,
                                      "dense", None, maxiter=80)
        scored.append((score, z))
    scored.sort(key=lambda s: -s[0])
    return [z for _, z in scored[:max_candidates]]


def basic_init_path(y: np.ndarray, n_states: int) -> np.ndarray:
    """Single initial path from clustering the local variance of y alone,
    labels ordered by window variance descending; the plain scheme used by
    the naive baseline."""
    y = np.asarray(y, float)
    feature = sliding_window_variance(y, max(5, y.size // 20))
    z = _cluster_path(feature, n_states, seed=0)
    if z is None:
        z = np.arange(y.size) % n_states + 1
    return z


def init_hyper(y: np.ndarray, z0: np.ndarray, n_states: int) -> ConvGpHyper:
    """Starting kernels per state: the state whose points look roughest (by
    the mean absolute increment within its contiguous runs) gets a rough
    specific layer, the others smoother and smaller ones, all scaled to
    each state's sample spread."""
    y = np.asarray(y, float)
    z0 = np.asarray(z0, int)
    overall = max(np.std(y), 1e-3)
    inc = np.abs(np.diff(y))
    same = z0[:-1] == z0[1:]
    rough = np.empty(n_states)
    spread = np.empty(n_states)
    for m in range(1, n_states + 1):
        sel = z0 == m
        spread[m - 1] = max(np.std(y[sel]) if sel.sum() >= 5 else overall, 1e-3)
        pair = same & (z0[:-1] == m)
        rough[m - 1] = inc[pair].mean() if pair.any() else 0.0
    rank = np.empty(n_states, dtype=int)
    rank[np.argsort(-rough, kind="stable")] = np.arange(n_states)

    v0 = 0.2 * spread
    a0 = np.ones(n_states)
    v1 = np.where(rank == 0, 0.8 * spread, 0.3 * spread)
    a1 = np.where(rank == 0, 1.0, 0.1)
    return ConvGpHyper(v0, a0, v1, a1)


def update_sigma2(y, f_path, shape0, rate0, rng) -> float:
    """Conjugate inverse-gamma draw of the noise variance."""
    resid = np.asarray(y, float) - np.asarray(f_path, float)
    shape = shape0 + 0.5 * resid.size
    rate = rate0 + 0.5 * resid @ resid
    return float(rate / rng.gamma(shape))


def _offdiag(mat: np.ndarray) -> np.ndarray:
    m = mat.shape[0]
    return mat[~np.eye(m, dtype=bool)]


def _with_offdiag(values: np.ndarray, m: int) -> np.ndarray:
    q = np.zeros((m, m))
    q[~np.eye(m, dtype=bool)] = values
    return q


def rw_update_rates(rate: RateMatrix, path: HiddenStatePath, step, rng):
    """Random-walk move of the transition rates on the log scale; the
    acceptance ratio is the path likelihood alone (flat log-scale prior)."""
    m = rate.n_states
    cur = _offdiag(rate.q)
    logp = np.log(cur) + step * rng.standard_normal(cur.size)
    if np.any(np.abs(logp) > LOG_PARAM_BOUND):
        return rate, False
    cand = RateMatrix(_with_offdiag(np.exp(logp), m), rate.initial_probs)
    delta = log_path_probability(cand, path) - log_path_probability(rate, path)
    if np.log(rng.random()) < delta:
        return cand, True
    return rate, False


def marginal_loglik(hyper: ConvGpHyper, t, z, y, sigma2, mode: str,
                    neighbors=None) -> float:
    """log p(y | z, theta_f, sigma2) with the curves integrated out."""
    if mode == "dense":
        return gp_sampler.dense_log_density(hyper, t, z, y, noise=sigma2)
    return gp_sampler.nngp_log_density(hyper, t, z, y, neighbors, noise=sigma2)


def optimize_hyper(hyper: ConvGpHyper, t, z, y, sigma2, mode: str,
                   neighbors=None, prior_sd: float = 2.5,
                   maxiter: int = 60) -> tuple[ConvGpHyper, float]:
    """Empirical-Bayes refresh: move the kernel hyperparameters to a local
    maximizer of the marginal likelihood, with a weak normal shrinkage on
    the log scale.  Monotone: the incumbent is kept unless the optimizer
    improves on it.  Returns (hyper, marginal loglik at the result)."""
    n_states = hyper.n_states

    def objective(x):
        if np.any(np.abs(x) > LOG_PARAM_BOUND):
            return np.inf
        try:
            h = ConvGpHyper.from_log_vector(x, n_states)
            ll = marginal_loglik(h, t, z, y, sigma2, mode, neighbors)
        except (NumericalError, FloatingPointError):
            return np.inf
        return -ll + 0.5 * (x @ x) / prior_sd ** 2

    x0 = hyper.to_log_vector()
    f0 = objective(x0)
    res = minimize(objective, x0, method="Nelder-Mead",
                   options={"maxiter": maxiter, "xatol": 1e-2, "fatol": 1e-2})
    if res.fun < f0:
        best = ConvGpHyper.from_log_vector(res.x, n_states)
        return best, float(-res.fun + 0.5 * (res.x @ res.x) / prior_sd ** 2)
    return hyper, float(-f0 + 0.5 * (x0 @ x0) / prior_sd ** 2)


def segment_relabel_update(z, y, t, n_states, hyper, sigma2, rate, rng,
                           cut_pool, config, alt_paths=()):
    """Whole-interval relabeling against the curve-integrated likelihood.

    Conditional path moves cannot revise a long mislabeled stretch once the
    drawn curves track the data inside it, and the kernel refresh then
    adapts the hypers to the wrong labeling, entrenching it.  This move
    proposes replacing the path by a candidate from ``alt_paths`` and
    relabeling whole intervals -- delimited by the current changepoints
    plus externally detected candidate cuts -- accepting on the marginal
    likelihood of y with the curves integrated out (on an evenly spaced
    sub-grid for large n), profiled over the kernel hypers when they are
    being estimated.  It runs during burn-in only; the post-burn-in kernel
    is untouched.

    Returns the (possibly) updated labels and the hypers profiled for them.
    """
    z = np.asarray(z, int).copy()
    n = z.size
    sub = np.unique(np.linspace(0, n - 1, min(n, INIT_SCORE_POINTS)).astype(int))
    profile = config.theta_f_update == "eb"

    def score(zz, h):
        if profile:
            h, ll = optimize_hyper(init_hyper(y, zz, n_states), t[sub],
                                   zz[sub], y[sub], sigma2, "dense", None,
                                   prior_sd=config.theta_f_prior_sd,
                                   maxiter=40)
        else:
            ll = marginal_loglik(h, t[sub], zz[sub], y[sub], sigma2,
                                 "dense", None)
        return ll + log_path_probability(rate, HiddenStatePath(zz, t)), h

    try:
        ll, hyper = score(z, hyper)
    except NumericalError:
        return z, hyper

    for cand in alt_paths:
        try:
            ll_new, h_new = score(np.asarray(cand, int), hyper)
        except NumericalError:
            continue
        if np.log(rng.random()) < ll_new - ll:
            z, ll, hyper = np.asarray(cand, int).copy(), ll_new, h_new

    edges = np.unique(np.concatenate(
        ([0, n], list(cut_pool), np.flatnonzero(np.diff(z)) + 1)))
    starts, ends = edges[:-1], edges[1:]
    for k in rng.permutation(starts.size):
        a, b = int(starts[k]), int(ends[k])
        others = [s for s in range(1, n_states + 1) if s != z[a]]
        prop = others[int(rng.integers(len(others)))]
        z_new = z.copy()
        z_new[a:b] = prop
        if np.unique(z_new[sub]).size < n_states:
            continue
        try:
            ll_new, h_new = score(z_new, hyper)
        except NumericalError:
            continue
        if np.log(rng.random()) < ll_new - ll:
            z, ll, hyper = z_new, ll_new, h_new
    return z, hyper


def rw_update_hyper(hyper: ConvGpHyper, t, z, y, sigma2, step, rng, mode,
                    neighbors=None):
    """Random-walk move of the kernel hyperparameters on the log scale,
    scored by the marginal likelihood of the observations (the curves are
    redrawn right after, so integrating them out here is exact)."""
    cur_vec = hyper.to_log_vector()
    prop_vec = cur_vec + step * rng.standard_normal(cur_vec.size)
    if np.any(np.abs(prop_vec) > LOG_PARAM_BOUND):
        return hyper, False
    prop = ConvGpHyper.from_log_vector(prop_vec, hyper.n_states)
    try:
        delta = (marginal_loglik(prop, t, z, y, sigma2, mode, neighbors)
                 - marginal_loglik(hyper, t, z, y, sigma2, mode, neighbors))
    except NumericalError:
        # numerically singular covariance on either side: keep the current
        # value rather than walking into a degenerate region
        return hyper, False
    if np.log(rng.random()) < delta:
        return prop, True
    return hyper, False


def _adapt(step: float, accepted: int, proposed: int) -> float:
    rate = accepted / max(proposed, 1)
    if rate < RW_TARGET[0]:
        return step * 0.8
    if rate > RW_TARGET[1]:
        return step * 1.25
    return step


def run_chain(y, t, n_states: int, config: GibbsConfig, rng,
              init_z=None, hyper0: ConvGpHyper | None = None,
              alt_paths=None) -> ChainResult:
    """One Gibbs chain; returns post-burn-in draws and full traces."""
    if n_states < 2:
        raise DomainError("at least two states are required")
    y = np.asarray(y, float)
    t = np.asarray(t, float)
    n = y.size
    mode = gp_sampler.choose_mode(n, config.mode)
    neighbors = (gp_sampler.neighbor_sets(t, config.n_neighbors)
                 if mode == "nngp" else None)

    sigma2 = max(0.05 * y.var(), 1e-4)
    if init_z is not None:
        z = np.asarray(init_z, int)
    elif config.init_scheme == "basic":
        z = basic_init_path(y, n_states)
    else:
        z = init_state_candidates(y, t, n_states, rng, sigma2)[0]
    hyper = hyper0 if hyper0 is not None else init_hyper(y, z, n_states)
    if hyper0 is None and config.theta_f_update == "eb":
        # align the kernels with the initial path before any curve is drawn;
        # a mismatched start can push the path sampler out of a good basin
        hyper, _ = optimize_hyper(hyper, t, z, y, sigma2, mode, neighbors,
                                  prior_sd=config.theta_f_prior_sd,
                                  maxiter=config.theta_f_maxiter)
    rate = RateMatrix(_with_offdiag(np.ones(n_states * (n_states - 1)), n_states))

    # candidate cuts for the burn-in relabel move: boundaries showing up as
    # outsized one-step jumps of y (which survive even when the regimes are
    # indistinguishable by local variance), plus the changepoints of any
    # supplied alternative paths that are not noise-dominated
    if alt_paths is None:
        alt_paths = []
    cut_pool: set[int] = set()
    for zc in itertools.chain(jump_segment_paths(y, n_states), alt_paths):
        cuts = np.flatnonzero(np.diff(np.asarray(zc, int))) + 1
        if cuts.size <= max(6, n // 10):
            cut_pool.update(int(c) for c in cuts)

    # logit-curve state: fit on an evenly spaced subset when n is large
    sub = cbss.subset_indices(n) if n > cbss.SUBSET_THRESHOLD else np.arange(n)
    t_sub = t[sub]
    prior_g = cbss.SmoothingPrior(np.ones(n_states - 1),
                                  np.full(n_states - 1, 50.0))
    counts0 = cbss.state_counts(z[sub][None, :], n_states)
    g_sub, blocks_sub, _ = cbss.fisher_scoring_mode(prior_g, t_sub, counts0, 1.0)

    n_kept = config.n_iter - config.n_burn
    res = ChainResult(
        t=t, n_states=n_states,
        sigma2_trace=np.empty(config.n_iter),
        rate_trace=np.empty((config.n_iter, n_states * (n_states - 1))),
        theta_f_trace=np.empty((config.n_iter, 4 * n_states)),
        loglik_trace=np.empty(config.n_iter),
        z_draws=np.empty((n_kept, n), dtype=int),
        f_draws=np.empty((n_kept, n)),
        sigma2_draws=np.empty(n_kept),
        rate_draws=np.empty((n_kept, n_states, n_states)),
        theta_f_draws=np.empty((n_kept, 4 * n_states)),
        accept_path=0.0, accept_rates=0.0, accept_kernel=0.0)

    step_rate = step_kern = config.rw_step
    acc = {"path": 0.0, "rates": 0, "kernel": 0, "kernel_tries": 0}
    window = {"rates": 0, "kernel": 0, "n": 0}

    for it in range(config.n_iter):
        # (1) latent curves
        if mode == "dense":
            assembly = CovarianceAssembly(hyper, t)
            f = gp_sampler.sample_curves_dense(assembly, z, y, sigma2, rng)
        else:
            f = gp_sampler.sample_curves_nngp(hyper, t, z, y, sigma2, rng,
                                              neighbors)
        f_path = f[np.arange(n), z - 1]

        # (2) parameters
        sigma2 = update_sigma2(y, f_path, config.sigma2_shape,
                               config.sigma2_rate, rng)
        path_obj = HiddenStatePath(z, t)
        rate, ok_r = rw_update_rates(rate, path_obj, step_rate, rng)
        acc["rates"] += ok_r
        window["rates"] += ok_r

        due = (it >= config.theta_f_start
               and (it - config.theta_f_start) % config.theta_f_every == 0)
        if config.theta_f_update == "eb" and due:
            new_hyper, _ = optimize_hyper(
                hyper, t, z, y, sigma2, mode, neighbors,
                prior_sd=config.theta_f_prior_sd,
                maxiter=config.theta_f_maxiter)
            acc["kernel"] += new_hyper is not hyper
            acc["kernel_tries"] += 1
            hyper = new_hyper
        elif config.theta_f_update == "mh":
            hyper, ok_k = rw_update_hyper(hyper, t, z, y, sigma2, step_kern,
                                          rng, mode, neighbors)
            acc["kernel"] += ok_k
            acc["kernel_tries"] += 1
            window["kernel"] += ok_k
        window["n"] += 1
        if (config.adapt_rw and it < config.n_burn
                and window["n"] == RW_ADAPT_EVERY):
            step_rate = _adapt(step_rate, window["rates"], window["n"])
            if config.theta_f_update == "mh":
                step_kern = _adapt(step_kern, window["kernel"], window["n"])
            window = {"rates": 0, "kernel": 0, "n": 0}

        # (3) state path
        if config.path_method == "ngs":
            z = cbss.ngs_sweep(y, f, sigma2, rate, t, z, rng)
            acc["path"] += 1.0
            f_path = f[np.arange(n), z - 1]
        else:
            if sub.size < n:
                mean_g, cov_g = cbss.predict_g(prior_g, t_sub, g_sub,
                                               blocks_sub, t)
                alpha = cbss.state_probs(mean_g)
            else:
                alpha = cbss.state_probs(g_sub)
            kept, acc_rate, z = cbss.run_cbss(
                y, f, sigma2, rate, t, alpha, z, rng,
                n_keep=config.n_keep_paths,
                steps_per_keep=config.steps_per_keep,
                method=config.path_method, n_candidates=config.n_candidates)
            acc["path"] += acc_rate
            counts = cbss.state_counts(kept[:, sub], n_states)
            if config.theta_g_refresh and it % config.theta_g_refresh == 0:
                prior_g, g_sub = cbss.optimize_theta_g(
                    prior_g, t_sub, counts, config.n_keep_paths, g_sub,
                    maxiter=config.theta_g_maxiter)
            else:
                g_sub, _, _ = cbss.fisher_scoring_mode(
                    prior_g, t_sub, counts, config.n_keep_paths, g_sub)
            blocks_sub = cbss.curvature_blocks(g_sub, config.n_keep_paths)
            f_path = f[np.arange(n), z - 1]

        # (4) burn-in only: segment-level relabeling against the marginal,
        # so a chain can leave a wrong labeling basin; the single-site
        # baseline stays naive end to end
        relabel_due = (config.relabel_every and it < config.n_burn
                       and config.path_method != "ngs"
                       and it % config.relabel_every == 0
                       # taper off after the early sweeps: basin escapes
                       # happen early, later moves mostly guard drift
                       and (it <= 10 * config.relabel_every
                            or it % (5 * config.relabel_every) == 0))
        if relabel_due:
            z, hyper = segment_relabel_update(
                z, y, t, n_states, hyper, sigma2, rate, rng, cut_pool,
                config, alt_paths=alt_paths)
            f_path = f[np.arange(n), z - 1]

        res.sigma2_trace[it] = sigma2
        res.rate_trace[it] = _offdiag(rate.q)
        res.theta_f_trace[it] = hyper.to_log_vector()
        try:
            res.loglik_trace[it] = marginal_loglik(hyper, t, z, y, sigma2,
                                                   mode, neighbors)
        except NumericalError:
            res.loglik_trace[it] = -np.inf
        if it >= config.n_burn:
            k = it - config.n_burn
            res.z_draws[k] = z
            res.f_draws[k] = f_path
            res.sigma2_draws[k] = sigma2
            res.rate_draws[k] = rate.q
            res.theta_f_draws[k] = hyper.to_log_vector()

    res.accept_path = acc["path"] / config.n_iter
    res.accept_rates = acc["rates"] / config.n_iter
    res.accept_kernel = acc["kernel"] / max(acc["kernel_tries"], 1)
    res.score = float(np.mean(res.loglik_trace[config.n_burn:]))
    return res


@dataclass
class FitResult:
    """Combined multi-chain posterior summary."""

    t: np.ndarray
    n_states: int
    chains: list
    state_probs: np.ndarray       # (n, M) averaged over the kept chains
    z_hat: np.ndarray             # (n,) pointwise argmax, ties to lower label
    sigma2_mean: float
    rate_mean: np.ndarray         # (M, M)
    hyper_mean: ConvGpHyper
    f_mean: np.ndarray            # (n,)
    gelman_rubin: dict = field(default_factory=dict)
    label_order: np.ndarray = None
    kept_chains: np.ndarray = None


def gelman_rubin(traces: np.ndarray) -> float:
    """Potential scale reduction factor over (n_chains, n_samples) traces;
    exactly constant traces give 1.0."""
    traces = np.asarray(traces, float)
    m, n = traces.shape
    if np.ptp(traces) == 0 or m < 2:
        return 1.0
    means = traces.mean(axis=1)
    w = traces.var(axis=1, ddof=1).mean()
    b = n * means.var(ddof=1)
    if w == 0:
        return 1.0
    v_hat = (n - 1) / n * w + b / n
    return float(np.sqrt(v_hat / w))


def _canonical_order(hyper: ConvGpHyper) -> np.ndarray:
    """Permutation sorting states by within-state variance, largest first;
    ties keep the original order."""
    return np.argsort(-hyper.variance_at_zero(), kind="stable")


def _permute_theta(theta: np.ndarray, order: np.ndarray) -> np.ndarray:
    """Reorder the states of stacked (..., 4M) log hyperparameter rows."""
    m = order.size
    blocks = theta.reshape(theta.shape[:-1] + (4, m))
    return blocks[..., order].reshape(theta.shape)


def _align_chain_labels(chain: ChainResult) -> None:
    """Relabel one chain's draws into the canonical state order, in place.

    Labels are identified only up to permutation, so independent chains can
    settle on mirrored labelings; pooling their draws without aligning them
    first would average a path with its mirror image.
    """
    m = chain.n_states
    hyper = ConvGpHyper.from_log_vector(chain.theta_f_draws.mean(axis=0), m)
    order = _canonical_order(hyper)
    if np.array_equal(order, np.arange(m)):
        return
    relabel = np.empty(m + 1, dtype=int)
    relabel[order + 1] = np.arange(1, m + 1)
    chain.z_draws = relabel[chain.z_draws]
    chain.theta_f_draws = _permute_theta(chain.theta_f_draws, order)
    chain.theta_f_trace = _permute_theta(chain.theta_f_trace, order)
    chain.rate_draws = chain.rate_draws[:, order][:, :, order]
    eye = ~np.eye(m, dtype=bool)
    full = np.zeros((chain.rate_trace.shape[0], m, m))
    full[:, eye] = chain.rate_trace
    chain.rate_trace = full[:, order][:, :, order][:, eye]


def fit(y, t, n_states: int = 2, config: GibbsConfig | None = None,
        n_chains: int = 2, seed: int = 0,
        hyper0: ConvGpHyper | None = None) -> FitResult:
    """Run independent chains and combine their post-burn-in draws.

    ``hyper0`` supplies starting kernel hyper-parameters (held fixed when
    ``theta_f_update`` is ``"none"``), for workflows that pin the kernels
    to external point estimates.

    Chains start from the top-ranked candidate initial paths (cycling when
    there are more chains than candidates) and alternate between an
    immediate and a delayed first kernel refresh, so at least one chain
    tends to land in the dominant mode.  The summary pools the chains whose
    average post-burn-in marginal likelihood is within
    :data:`CHAIN_SCORE_TOL` nats of the best; the scale-reduction
    diagnostics still cover every chain.
    """
    config = config or GibbsConfig()
    y = np.asarray(y, float)
    t = np.asarray(t, float)
    root = np.random.SeedSequence(seed)
    children = root.spawn(n_chains + 1)
    init_rng = np.random.default_rng(children[0])
    sigma2_0 = max(0.05 * y.var(), 1e-4)
    if config.init_scheme == "basic":
        candidates = [basic_init_path(y, n_states)]
    else:
        candidates = init_state_candidates(y, t, n_states, init_rng, sigma2_0)

    chains = []
    for c, child in enumerate(children[1:]):
        rng = np.random.default_rng(child)
        # stagger the first kernel refresh so chains explore both regimes:
        # adapting at once vs. letting the path settle under the starting
        # kernels first
        delay = 25 if (c % 2 == 1 and config.theta_f_update == "eb") else 0
        cfg = replace(config, theta_f_start=config.theta_f_start + delay)
        chains.append(run_chain(y, t, n_states, cfg, rng,
                                init_z=candidates[c % len(candidates)],
                                hyper0=hyper0, alt_paths=candidates))

    for chain in chains:
        _align_chain_labels(chain)
    scores = np.array([c.score for c in chains])
    kept = np.where(scores >= scores.max() - CHAIN_SCORE_TOL)[0]
    pool = [chains[i] for i in kept]

    n = y.size
    z_all = np.concatenate([c.z_draws for c in pool])
    probs = np.stack([(z_all == m).mean(axis=0)
                      for m in range(1, n_states + 1)], axis=1)

    theta_mean = np.mean(np.concatenate([c.theta_f_draws for c in pool]),
                         axis=0)
    hyper_mean = ConvGpHyper.from_log_vector(theta_mean, n_states)
    order = _canonical_order(hyper_mean)
    relabel = np.empty(n_states, dtype=int)
    relabel[order] = np.arange(n_states)

    probs = probs[:, order]
    hyper_mean = ConvGpHyper(hyper_mean.v0[order], hyper_mean.a0[order],
                             hyper_mean.v1[order], hyper_mean.a1[order])
    rate_mean = np.mean(np.concatenate([c.rate_draws for c in pool]), axis=0)
    rate_mean = rate_mean[np.ix_(order, order)]

    gr = {
        "sigma2": gelman_rubin(np.stack([c.sigma2_trace[config.n_burn:]
                                         for c in chains])),
    }
    n_rates = chains[0].rate_trace.shape[1]
    for j in range(n_rates):
        gr[f"rate_{j}"] = gelman_rubin(
            np.stack([c.rate_trace[config.n_burn:, j] for c in chains]))

    return FitResult(
        t=t, n_states=n_states, chains=chains,
        state_probs=probs,
        z_hat=np.argmax(probs, axis=1) + 1,
        sigma2_mean=float(np.mean(np.concatenate(
            [c.sigma2_draws for c in pool]))),
        rate_mean=rate_mean,
        hyper_mean=hyper_mean,
        f_mean=np.mean(np.concatenate([c.f_draws for c in pool]), axis=0),
        gelman_rubin=gr,
        label_order=order,
        kept_chains=kept)


def predict_y(result: FitResult, t_new, mode: str = "auto",
              n_neighbors: int = gp_sampler.DEFAULT_NEIGHBORS,
              max_draws: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Posterior predictive mean and variance of y at new time points.

    Per retained draw: the state at each new point is interpolated from the
    drawn path, the curve follows the GP conditional on the drawn values,
    and the noise variance is added; draws combine by the law of total
    variance.  In nearest-neighbor mode each new point conditions on its
    closest observed points only.
    """
    t_new = np.asarray(t_new, float)
    t = result.t
    n = t.size
    mode = gp_sampler.choose_mode(n, mode)

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

    means = np.empty((len(draws), t_new.size))
    variances = np.empty((len(draws), t_new.size))
    for d, (z, f_path, s2, q, th) in enumerate(draws):
        hyper = ConvGpHyper.from_log_vector(th, result.n_states)
        rate = RateMatrix(q)
        path = HiddenStatePath(z, t)
        z_star = np.array([interpolate_state(rate, path, ts) for ts in t_new])
        if mode == "dense":
            kz = gram(hyper, t, z, t, z)
            cross = gram(hyper, t_new, z_star, t, z)
            sol = np.linalg.solve(kz + 1e-10 * np.eye(n),
                                  np.column_stack([f_path[:, None], cross.T]))
            means[d] = cross @ sol[:, 0]
            kss = k_pairs(hyper, t_new, z_star, t_new, z_star)
            variances[d] = np.maximum(
                kss - np.einsum("ij,ji->i", cross, sol[:, 1:]), 0.0) + s2
        else:
            for j, ts in enumerate(t_new):
                nb = np.argsort(np.abs(t - ts), kind="stable")[:n_neighbors]
                kz = gram(hyper, t[nb], z[nb], t[nb], z[nb])
                cross = gram(hyper, [ts], [z_star[j]], t[nb], z[nb])[0]
                sol = np.linalg.solve(kz + 1e-10 * np.eye(nb.size),
                                      np.column_stack([f_path[nb], cross]))
                means[d, j] = cross @ sol[:, 0]
                kss = float(k_pairs(hyper, ts, z_star[j], ts, z_star[j]))
                variances[d, j] = max(kss - cross @ sol[:, 1], 0.0) + s2

    mean = means.mean(axis=0)
    var = variances.mean(axis=0) + means.var(axis=0)
    return mean, var
