"""Curve-based sampling of the hidden state path.

The pointwise state probabilities are modeled through M-1 latent logit
curves g with squared-exponential priors (state M is the reference
category).  Whole candidate paths are proposed from the induced independent
categorical distribution and accepted against the exact conditional of the
path, either by independence Metropolis-Hastings or by an ensemble move
that picks among several candidates at once.

Between path moves, the logit curves are refreshed by a Laplace
approximation: Fisher scoring for the posterior mode given the retained
path draws, and a Nelder-Mead search on the smoothing hyperparameters
against the Laplace evidence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp

from .ctmm import RateMatrix, path_log_probs_batch
from .errors import DomainError

FISHER_TOL = 1e-6
FISHER_MAX_ITER = 100

#: Proposal-steps-per-retained-path ratio of the path sampler.
STEPS_PER_KEEP = 5

GH_NODES = 20


@dataclass(frozen=True)
class SmoothingPrior:
    """Squared-exponential prior on the logit curves: per-curve scale
    ``gamma`` and inverse squared length-scale ``omega``."""

    gamma: np.ndarray
    omega: np.ndarray

    def __post_init__(self):
        g = np.atleast_1d(np.asarray(self.gamma, float))
        w = np.atleast_1d(np.asarray(self.omega, float))
        if g.shape != w.shape or np.any(g <= 0) or np.any(w <= 0):
            raise DomainError("gamma and omega must be matched positive arrays")
        g.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "gamma", g)
        object.__setattr__(self, "omega", w)

    @property
    def n_curves(self) -> int:
        return self.gamma.size

    def to_log_vector(self):
        return np.log(np.concatenate([self.gamma, self.omega]))

    @classmethod
    def from_log_vector(cls, vec):
        half = np.asarray(vec).size // 2
        arr = np.exp(np.asarray(vec, float))
        return cls(arr[:half], arr[half:])


def state_probs(g: np.ndarray) -> np.ndarray:
    """Map logit curves (n, M-1) to category probabilities (n, M).

    The last column is the reference category; computed through a
    log-sum-exp shift so large logits cannot overflow.
    """
    g = np.atleast_2d(np.asarray(g, float))
    full = np.concatenate([g, np.zeros((g.shape[0], 1))], axis=1)
    lse = logsumexp(full, axis=1, keepdims=True)
    return np.exp(full - lse)


def sample_paths(alpha: np.ndarray, rng, size: int) -> np.ndarray:
    """Draw `size` independent paths from the categorical proposal; (size, n)."""
    n, m = alpha.shape
    u = rng.random((size, n, 1))
    cum = np.cumsum(alpha, axis=1)[None, :, :]
    return (u > cum).sum(axis=2) + 1


def log_proposal(alpha: np.ndarray, z_batch: np.ndarray) -> np.ndarray:
    """Proposal log-probability of each path in a (B, n) batch."""
    zb = np.atleast_2d(np.asarray(z_batch, int)) - 1
    n = alpha.shape[0]
    with np.errstate(divide="ignore"):
        la = np.log(alpha)
    return la[np.arange(n)[None, :], zb].sum(axis=1)


def target_log_probs(y, f, sigma2, rate: RateMatrix, t, z_batch,
                     obs_loglik=None) -> np.ndarray:
    """Unnormalized conditional log-probability of each path: the Gaussian
    fit of y to the curve values it selects, plus the state-process term.

    ``obs_loglik`` (n, M) replaces the Gaussian term with an arbitrary
    per-point observation log-likelihood (used for multi-output data, where
    each entry sums over outputs)."""
    zb = np.atleast_2d(np.asarray(z_batch, int))
    if obs_loglik is not None:
        n = obs_loglik.shape[0]
        gauss = obs_loglik[np.arange(n)[None, :], zb - 1].sum(axis=1)
    else:
        n = y.size
        fz = f[np.arange(n)[None, :], zb - 1]
        resid = y[None, :] - fz
        gauss = -0.5 * (resid * resid / sigma2
                        + np.log(2.0 * np.pi * sigma2)).sum(axis=1)
    return gauss + path_log_probs_batch(rate, np.asarray(t, float), zb)


def run_cbss(y, f, sigma2, rate: RateMatrix, t, alpha, z0, rng,
             n_keep: int, steps_per_keep: int = STEPS_PER_KEEP,
             method: str = "imh", n_candidates: int = 5, obs_loglik=None):
    """Run the path sampler and retain ``n_keep`` evenly thinned draws.

    ``method`` is "imh" (single proposal, accept/reject) or "ensemble"
    (``n_candidates`` proposals plus the incumbent, selected by importance
    weight).  Returns (kept paths (n_keep, n), acceptance rate, final path).
    """
    n_steps = steps_per_keep * n_keep
    z = np.asarray(z0, int).copy()
    t = np.asarray(t, float)
    logp_z = target_log_probs(y, f, sigma2, rate, t, z, obs_loglik)[0]
    logq_z = log_proposal(alpha, z)[0]
    kept = np.empty((n_keep, z.size), dtype=int)
    keep_at = np.linspace(steps_per_keep - 1, n_steps - 1, n_keep).round().astype(int)
    accepted = 0
    kidx = 0

    if method == "imh":
        props = sample_paths(alpha, rng, n_steps)
        logp_p = target_log_probs(y, f, sigma2, rate, t, props, obs_loglik)
        logq_p = log_proposal(alpha, props)
        logu = np.log(rng.random(n_steps))
        for s in range(n_steps):
            if logu[s] < (logp_p[s] - logp_z) - (logq_p[s] - logq_z):
                z, logp_z, logq_z = props[s], logp_p[s], logq_p[s]
                accepted += 1
            if kidx < n_keep and s == keep_at[kidx]:
                kept[kidx] = z
                kidx += 1
    elif method == "ensemble":
        cand_all = sample_paths(alpha, rng, n_steps * n_candidates)
        logp_all = target_log_probs(y, f, sigma2, rate, t, cand_all,
                                    obs_loglik).reshape(n_steps, n_candidates)
        logq_all = log_proposal(alpha, cand_all).reshape(n_steps, n_candidates)
        cand_all = cand_all.reshape(n_steps, n_candidates, -1)
        logw_all = logp_all - logq_all
        u_pick = rng.random(n_steps)
        for s in range(n_steps):
            logw = np.append(logw_all[s], logp_z - logq_z)
            w = np.exp(logw - logw.max())
            cum = np.cumsum(w)
            pick = min(int(np.searchsorted(cum, u_pick[s] * cum[-1],
                                           side="right")), n_candidates)
            if pick < n_candidates:
                z = cand_all[s, pick]
                logp_z, logq_z = logp_all[s, pick], logq_all[s, pick]
                accepted += 1
            if kidx < n_keep and s == keep_at[kidx]:
                kept[kidx] = z
                kidx += 1
    else:
        raise DomainError(f"unknown path sampler method {method!r}")
    return kept, accepted / n_steps, z


def ngs_sweep(y, f, sigma2, rate: RateMatrix, t, z, rng) -> np.ndarray:
    """One single-site Gibbs sweep over the path (the naive baseline).

    Each z_i is drawn from its full conditional: the Gaussian fit of y_i to
    the curve value it selects times the transition factors to both
    neighbors (forward factor only at the last point).
    """
    from .ctmm import transition_matrix

    t = np.asarray(t, float)
    y = np.asarray(y, float)
    z = np.asarray(z, int).copy()
    n, m = f.shape
    gaps = np.diff(np.concatenate(([0.0], t)))
    mats = {}
    for dt in gaps:
        key = round(float(dt), 15)
        if key not in mats:
            mats[key] = transition_matrix(rate, dt)
    with np.errstate(divide="ignore"):
        logp_obs = -0.5 * (y[:, None] - f) ** 2 / sigma2
        logm = {k: np.log(v) for k, v in mats.items()}
    pi = np.clip(rate.initial_probs, 1e-300, None)
    keys = [round(float(dt), 15) for dt in gaps]
    first = logsumexp(np.log(pi)[:, None] + logm[keys[0]], axis=0)
    u = rng.random(n)
    for i in range(n):
        lp = logp_obs[i].copy()
        if i == 0:
            lp += first
        else:
            lp += logm[keys[i]][z[i - 1] - 1]
        if i < n - 1:
            lp += logm[keys[i + 1]][:, z[i + 1] - 1]
        cum = np.cumsum(np.exp(lp - lp.max()))
        z[i] = min(int(np.searchsorted(cum, u[i] * cum[-1], side="right")),
                   m - 1) + 1
    return z


# ---------------------------------------------------------------------------
# Laplace machinery for the logit curves


def state_counts(z_batch: np.ndarray, n_states: int) -> np.ndarray:
    """Occupancy counts (n, M) of the retained path draws."""
    zb = np.atleast_2d(np.asarray(z_batch, int))
    n = zb.shape[1]
    counts = np.zeros((n, n_states))
    for m in range(1, n_states + 1):
        counts[:, m - 1] = (zb == m).sum(axis=0)
    return counts


def multinomial_loglik(g: np.ndarray, counts: np.ndarray) -> float:
    """Sum over retained draws and points of log alpha at the drawn state."""
    g = np.atleast_2d(g)
    full = np.concatenate([g, np.zeros((g.shape[0], 1))], axis=1)
    lse = logsumexp(full, axis=1)
    return float((counts * full).sum() - counts.sum(axis=1) @ lse)


def loglik_gradient(g: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Gradient wrt g, shape (n, M-1): counts minus expected counts."""
    alpha = state_probs(g)
    s_tot = counts.sum(axis=1, keepdims=True)
    return counts[:, :-1] - s_tot * alpha[:, :-1]


def curvature_blocks(g: np.ndarray, n_samples: float) -> np.ndarray:
    """Per-point negative Hessian blocks (n, M-1, M-1) of the loglik."""
    alpha = state_probs(g)[:, :-1]
    return n_samples * (alpha[:, :, None] * np.eye(alpha.shape[1])
                        - alpha[:, :, None] * alpha[:, None, :])


def prior_cov(prior: SmoothingPrior, t) -> np.ndarray:
    """Prior covariance of the stacked logit curves, time-major layout:
    entry ((i,a),(j,b)) = [a==b] gamma_a exp(-omega_a (t_i-t_j)^2 / 2)."""
    t = np.asarray(t, float)
    n, r = t.size, prior.n_curves
    d2 = np.subtract.outer(t, t) ** 2
    c = np.zeros((n, r, n, r))
    for a in range(r):
        c[:, a, :, a] = prior.gamma[a] * np.exp(-0.5 * prior.omega[a] * d2)
    return c.reshape(n * r, n * r)


def _block_diag_apply(blocks: np.ndarray, vec_or_mat: np.ndarray) -> np.ndarray:
    """Multiply a block-diagonal matrix (n blocks of r x r, time-major) by a
    time-major vector or by a dense matrix."""
    n, r, _ = blocks.shape
    x = vec_or_mat.reshape(n, r, -1)
    return np.einsum("nab,nbk->nak", blocks, x).reshape(n * r, -1)


def fisher_scoring_mode(prior: SmoothingPrior, t, counts, n_samples,
                        g0=None, tol=FISHER_TOL, max_iter=FISHER_MAX_ITER):
    """Posterior mode of the logit curves by Fisher scoring.

    Solves (I + C D) g_new = C (d + D g), iterated to an infinity-norm
    increment below ``tol``; this form never inverts the (often
    ill-conditioned) prior covariance.  Returns (mode (n, r), per-point
    curvature blocks at the mode, C).
    """
    t = np.asarray(t, float)
    n, r = t.size, prior.n_curves
    c_mat = prior_cov(prior, t)
    g = np.zeros((n, r)) if g0 is None else np.asarray(g0, float).copy()
    eye = np.eye(n * r)
    for _ in range(max_iter):
        d = loglik_gradient(g, counts).reshape(-1)
        blocks = curvature_blocks(g, n_samples)
        rhs = c_mat @ (d + _block_diag_apply(blocks, g.reshape(-1, 1))[:, 0])
        lhs = eye + c_mat @ _block_diag_to_dense(blocks)
        g_new = np.linalg.solve(lhs, rhs).reshape(n, r)
        step = np.abs(g_new - g).max()
        g = g_new
        if step < tol:
            break
    return g, curvature_blocks(g, n_samples), c_mat


def _block_diag_to_dense(blocks: np.ndarray) -> np.ndarray:
    n, r, _ = blocks.shape
    out = np.zeros((n * r, n * r))
    for i in range(n):
        out[i * r:(i + 1) * r, i * r:(i + 1) * r] = blocks[i]
    return out


def laplace_marginal_loglik(prior: SmoothingPrior, t, counts, n_samples,
                            g0=None) -> tuple[float, np.ndarray]:
    """Laplace evidence of the smoothing hyperparameters.

    Uses the mode stationarity C^{-1} g = d(g) to express the quadratic
    penalty as g^T d(g), and |C||C^{-1}+D| = |I + C D| for the determinant
    pair -- neither needs C^{-1}.  Returns (loglik, mode).
    """
    g, blocks, c_mat = fisher_scoring_mode(prior, t, counts, n_samples, g0)
    ll = multinomial_loglik(g, counts)
    d = loglik_gradient(g, counts).reshape(-1)
    quad = float(g.reshape(-1) @ d)
    sign, logdet = np.linalg.slogdet(np.eye(c_mat.shape[0])
                                     + c_mat @ _block_diag_to_dense(blocks))
    if sign <= 0:
        return -np.inf, g
    return ll - 0.5 * logdet - 0.5 * quad, g


def optimize_theta_g(prior: SmoothingPrior, t, counts, n_samples,
                     g0=None, maxiter: int = 40) -> tuple[SmoothingPrior, np.ndarray]:
    """Nelder-Mead on the log hyperparameters against the Laplace evidence.

    The incumbent is always evaluated first and only improvements are
    accepted, so the refresh can never decrease the evidence.
    """
    x0 = prior.to_log_vector()

    def objective(x):
        if np.any(np.abs(x) > 20):
            return np.inf
        ll, _ = laplace_marginal_loglik(SmoothingPrior.from_log_vector(x),
                                        t, counts, n_samples, g0)
        return -ll

    f0 = objective(x0)
    res = minimize(objective, x0, method="Nelder-Mead",
                   options={"maxiter": maxiter, "xatol": 1e-3, "fatol": 1e-3})
    best = SmoothingPrior.from_log_vector(res.x) if res.fun < f0 else prior
    _, g_mode = laplace_marginal_loglik(best, t, counts, n_samples, g0)
    return best, g_mode


# ---------------------------------------------------------------------------
# Subset device and predictive state probabilities

SUBSET_THRESHOLD = 500
SUBSET_SIZE = 100


def subset_indices(n: int, n_sub: int = SUBSET_SIZE) -> np.ndarray:
    """Evenly spaced point indices used to fit the logit curves when the
    grid is large."""
    if n <= n_sub:
        return np.arange(n)
    return np.unique(np.linspace(0, n - 1, n_sub).round().astype(int))


def predict_g(prior: SmoothingPrior, t_sub, g_sub, blocks_sub, t_new):
    """Predictive mean and covariance of the logit curves at new points.

    Standard GP regression through the prior: B = C*^T Csub^{-1}, mean
    B g_sub, covariance B (Csub^{-1}+D)^{-1} B^T plus the prior Schur
    complement.  Returns (mean (n*, r), cov (n* r, n* r) time-major).
    """
    t_sub = np.asarray(t_sub, float)
    t_new = np.asarray(t_new, float)
    r = prior.n_curves
    c_sub = prior_cov(prior, t_sub)
    c_new = prior_cov(prior, t_new)
    n_s, n_n = t_sub.size, t_new.size
    d2 = np.subtract.outer(t_sub, t_new) ** 2
    cross = np.zeros((n_s, r, n_n, r))
    for a in range(r):
        cross[:, a, :, a] = prior.gamma[a] * np.exp(-0.5 * prior.omega[a] * d2)
    cross = cross.reshape(n_s * r, n_n * r)

    jitter = 1e-8 * np.eye(n_s * r)
    b_mat = np.linalg.solve(c_sub + jitter, cross).T
    mean = (b_mat @ np.asarray(g_sub, float).reshape(-1)).reshape(n_n, r)
    # posterior covariance of the subset mode: (Csub^{-1} + D)^{-1}
    d_dense = _block_diag_to_dense(blocks_sub)
    post_sub = np.linalg.solve(np.eye(n_s * r) + c_sub @ d_dense, c_sub)
    schur = c_new - b_mat @ cross
    cov = b_mat @ post_sub @ b_mat.T + schur
    return mean, 0.5 * (cov + cov.T)


def state_probs_gauss_hermite(mean: np.ndarray, var: np.ndarray,
                              n_nodes: int = GH_NODES) -> np.ndarray:
    """E[state probabilities] under independent Gaussian logits.

    ``mean``/``var`` are (n, r); the softmax is integrated by a tensor-
    product Gauss-Hermite rule over the r logit dimensions.
    """
    mean = np.atleast_2d(mean)
    var = np.maximum(np.atleast_2d(var), 0.0)
    n, r = mean.shape
    nodes, weights = np.polynomial.hermite_e.hermegauss(n_nodes)
    weights = weights / weights.sum()
    grids = np.meshgrid(*([nodes] * r), indexing="ij")
    wgrid = np.ones_like(grids[0])
    for wg in np.meshgrid(*([weights] * r), indexing="ij"):
        wgrid = wgrid * wg
    pts = np.stack([gr.ravel() for gr in grids], axis=1)  # (n_nodes^r, r)
    w = wgrid.ravel()
    out = np.zeros((n, r + 1))
    sd = np.sqrt(var)
    for q in range(pts.shape[0]):
        g = mean + sd * pts[q][None, :]
        out += w[q] * state_probs(g)
    return out
