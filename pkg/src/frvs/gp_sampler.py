"""Posterior draws of the latent curves given a state path.

Two interchangeable strategies:

* dense -- exact joint conditionals from the full Gram matrix; the default
  up to :data:`DENSE_POINT_LIMIT` time points.
* nearest-neighbor -- each time point is updated from its own observation
  plus the observations at its nearest earlier time points, first the value
  at the realized state and then the remaining states given that value.
  The per-point updates are mutually independent, so they run as one
  batched solve.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DomainError, NumericalError
from .kernels import ConvGpHyper, CovarianceAssembly, chol_with_jitter, gram, k_pairs

#: Number of time points up to which the dense strategy is auto-selected.
DENSE_POINT_LIMIT = 500

#: Default number of nearest earlier neighbors conditioned on per point.
DEFAULT_NEIGHBORS = 10

LOG_2PI = np.log(2.0 * np.pi)


def choose_mode(n: int, mode: str = "auto") -> str:
    if mode == "auto":
        return "dense" if n <= DENSE_POINT_LIMIT else "nngp"
    if mode not in ("dense", "nngp"):
        raise DomainError(f"unknown sampling mode {mode!r}")
    return mode


def neighbor_sets(t: np.ndarray, n_neighbors: int = DEFAULT_NEIGHBORS) -> list[np.ndarray]:
    """Index sets of the nearest earlier time points, one per point.

    The first point has no earlier neighbors.  Ordered nearest-first; on a
    sorted grid these are simply the immediately preceding indices.
    """
    t = np.asarray(t, float)
    sets = []
    for i in range(t.size):
        earlier = np.arange(i)
        order = np.argsort(np.abs(t[i] - t[earlier]), kind="stable")
        sets.append(earlier[order[:n_neighbors]])
    return sets


def _draw_mvn(mean, cov, rng):
    try:
        factor = chol_with_jitter(cov)
    except NumericalError:
        # near-degenerate conditionals can lose definiteness to round-off;
        # draw from the closest PSD matrix instead
        w, v = np.linalg.eigh(cov)
        factor = v * np.sqrt(np.clip(w, 0.0, None))
    return mean + factor @ rng.standard_normal(mean.shape[0])


def sample_curves_dense(assembly: CovarianceAssembly, z, y, sigma2, rng) -> np.ndarray:
    """Exact draw of all state curves at every time point, shape (n, M).

    The realized-state values come from their marginal posterior given y;
    the remaining states follow from the prior conditional given those
    values.  ``sigma2`` may be a scalar or a per-observation vector.
    """
    z = np.asarray(z, int)
    y = np.asarray(y, float)
    n, m = assembly.n, assembly.m
    kz = assembly.path_cov(z)
    noisy = kz.copy()
    noisy[np.diag_indices(n)] += sigma2
    sol = np.linalg.solve(noisy, np.column_stack([y, kz]))
    mean_z = kz @ sol[:, 0]
    cov_z = kz - kz @ sol[:, 1:]
    cov_z = 0.5 * (cov_z + cov_z.T)
    f_path = _draw_mvn(mean_z, cov_z, rng)

    kcross = assembly.cross_cov(z)
    kcomp = assembly.complement_cov(z)
    lz = chol_with_jitter(kz)
    w = solve_triangular(lz, kcross, lower=True)
    mean_c = w.T @ solve_triangular(lz, f_path, lower=True)
    cov_c = kcomp - w.T @ w
    f_comp = _draw_mvn(mean_c, cov_c, rng)

    out = np.empty((n, m))
    out[np.arange(n), z - 1] = f_path
    _, comp_states = assembly.complement_states(z)
    out[np.repeat(np.arange(n), m - 1), comp_states - 1] = f_comp
    return out


def _neighbor_arrays(t, z, neighbors):
    """Group points by neighbor-set size for fixed-width batching."""
    groups = {}
    for i, nb in enumerate(neighbors):
        groups.setdefault(len(nb), []).append(i)
    return groups


def sample_curves_nngp(hyper: ConvGpHyper, t, z, y, sigma2, rng,
                       neighbors=None) -> np.ndarray:
    """Nearest-neighbor draw of all state curves, shape (n, M).

    Per point i: first f at the realized state given (y_i, y at the
    neighbors), then the other states given that value and the neighbor
    observations.  Points are independent given the path, so each
    neighbor-count group is one stacked linear solve.
    """
    t = np.asarray(t, float)
    z = np.asarray(z, int)
    y = np.asarray(y, float)
    n, m = t.size, hyper.n_states
    if neighbors is None:
        neighbors = neighbor_sets(t)
    out = np.empty((n, m))
    all_states = np.arange(1, m + 1)

    for k, idx in _neighbor_arrays(t, z, neighbors).items():
        idx = np.asarray(idx)
        b = idx.size
        tn = np.empty((b, k))
        zn = np.empty((b, k), dtype=int)
        for r, i in enumerate(idx):
            tn[r] = t[neighbors[i]]
            zn[r] = z[neighbors[i]]
        ti, zi = t[idx], z[idx]
        # gram among neighbor observations, plus noise
        cnn = k_pairs(hyper, tn[:, :, None], zn[:, :, None],
                      tn[:, None, :], zn[:, None, :])
        cnn_noisy = cnn + sigma2 * np.eye(k)
        # realized state vs neighbors
        c = k_pairs(hyper, ti[:, None], zi[:, None], tn, zn)
        kii = k_pairs(hyper, ti, zi, ti, zi)

        # stage 1: f at the realized state | y_i, y_neighbors
        sig1 = np.empty((b, k + 1, k + 1))
        sig1[:, 0, 0] = kii + sigma2
        sig1[:, 0, 1:] = c
        sig1[:, 1:, 0] = c
        sig1[:, 1:, 1:] = cnn_noisy
        a_cross = np.concatenate([kii[:, None], c], axis=1)
        sol1 = np.linalg.solve(sig1, a_cross[:, :, None])[:, :, 0]
        obs = np.concatenate([y[idx][:, None], y_of(y, neighbors, idx, k)], axis=1)
        mean1 = np.einsum("bj,bj->b", sol1, obs)
        var1 = np.maximum(kii - np.einsum("bj,bj->b", sol1, a_cross), 1e-12)
        f_path = mean1 + np.sqrt(var1) * rng.standard_normal(b)
        out[idx, zi - 1] = f_path

        if m == 1:
            continue
        # stage 2: remaining states | f at realized state, y_neighbors
        sig2 = np.empty((b, k + 1, k + 1))
        sig2[:, 0, 0] = kii
        sig2[:, 0, 1:] = c
        sig2[:, 1:, 0] = c
        sig2[:, 1:, 1:] = cnn_noisy
        comp = np.stack([all_states[all_states != zi[r]] for r in range(b)])
        bc = np.empty((b, m - 1, k + 1))
        bc[:, :, 0] = k_pairs(hyper, ti[:, None], comp, ti[:, None], zi[:, None])
        bc[:, :, 1:] = k_pairs(hyper, ti[:, None, None], comp[:, :, None],
                               tn[:, None, :], zn[:, None, :])
        own = k_pairs(hyper, ti[:, None, None], comp[:, :, None],
                      ti[:, None, None], comp[:, None, :])
        sol2 = np.linalg.solve(sig2, bc.transpose(0, 2, 1))
        u = np.concatenate([f_path[:, None], y_of(y, neighbors, idx, k)], axis=1)
        mean2 = np.einsum("bjm,bj->bm", sol2, u)
        cov2 = own - np.einsum("bmj,bjh->bmh", bc, sol2)
        for r in range(b):
            out[idx[r], comp[r] - 1] = _draw_mvn(mean2[r],
                                                 0.5 * (cov2[r] + cov2[r].T), rng)
    return out


def y_of(y, neighbors, idx, k):
    """Neighbor observation matrix (len(idx), k)."""
    out = np.empty((idx.size, k))
    for r, i in enumerate(idx):
        out[r] = y[neighbors[i]]
    return out


def dense_log_density(hyper: ConvGpHyper, t, z, f_path, noise: float = 0.0) -> float:
    """Exact GP log density of the realized-state values; with ``noise`` > 0
    this is the marginal density of noisy observations."""
    f_path = np.asarray(f_path, float)
    kz = gram(hyper, t, z, t, z)
    if noise:
        kz = kz + noise * np.eye(f_path.size)
    chol = chol_with_jitter(kz)
    alpha = np.linalg.solve(chol, f_path)
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    return float(-0.5 * (alpha @ alpha + logdet + f_path.size * LOG_2PI))


def nngp_log_density(hyper: ConvGpHyper, t, z, f_path, neighbors=None,
                     noise: float = 0.0) -> float:
    """Nearest-neighbor factorization of the GP log density.

    Each point is scored against the conditional given the realized-state
    values at its neighbors; the first point uses the marginal.  With
    ``noise`` > 0 the factorization applies to the noisy-observation
    covariance, giving the usual nearest-neighbor response approximation
    of the marginal likelihood.
    """
    t = np.asarray(t, float)
    z = np.asarray(z, int)
    f_path = np.asarray(f_path, float)
    if neighbors is None:
        neighbors = neighbor_sets(t)
    total = 0.0
    for k, idx in _neighbor_arrays(t, z, neighbors).items():
        idx = np.asarray(idx)
        kii = k_pairs(hyper, t[idx], z[idx], t[idx], z[idx]) + noise
        if k == 0:
            mean = np.zeros(idx.size)
            var = kii
        else:
            b = idx.size
            tn = np.empty((b, k))
            zn = np.empty((b, k), dtype=int)
            fn = np.empty((b, k))
            for r, i in enumerate(idx):
                tn[r] = t[neighbors[i]]
                zn[r] = z[neighbors[i]]
                fn[r] = f_path[neighbors[i]]
            cnn = k_pairs(hyper, tn[:, :, None], zn[:, :, None],
                          tn[:, None, :], zn[:, None, :])
            if noise:
                cnn = cnn + noise * np.eye(k)
            c = k_pairs(hyper, t[idx][:, None], z[idx][:, None], tn, zn)
            sol = np.linalg.solve(cnn, c[:, :, None])[:, :, 0]
            mean = np.einsum("bj,bj->b", sol, fn)
            var = np.maximum(kii - np.einsum("bj,bj->b", sol, c), 1e-12)
        resid = f_path[idx] - mean
        total += float(-0.5 * (resid * resid / var + np.log(var) + LOG_2PI).sum())
    return total
