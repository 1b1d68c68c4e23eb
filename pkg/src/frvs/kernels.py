"""Convolution-process covariance kernels and Gram-matrix assembly.

Each state's curve is built from two smoothed white-noise processes: one
latent process shared by all states (giving cross-state covariance) and one
specific to the state.  With squared-exponential smoothing kernels both the
within-state and cross-state covariances have closed forms; these are what
the Gram builders evaluate.

The multi-output variant adds a third latent layer: a process shared across
outputs and states, one per state shared across outputs, and one individual
per (output, state) pair.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cholesky

from . import _backend
from .errors import DomainError, NumericalError

ROOT_2PI = np.sqrt(2.0 * np.pi)

#: nM above which the full Gram matrix is no longer cached and sliced;
#: sub-blocks are then assembled directly from their index lists.
DENSE_ASSEMBLY_LIMIT = 4000


def pair_term(v_r, a_r, v_c, a_c, dt):
    """Covariance contribution of one latent process smoothed by two
    squared-exponential kernels (v_r, a_r) and (v_c, a_c)."""
    asum = a_r + a_c
    return (ROOT_2PI * v_r * v_c / np.sqrt(asum)
            * np.exp(-0.5 * dt * dt * a_r * a_c / asum))


@dataclass(frozen=True)
class ConvGpHyper:
    """Kernel hyperparameters: per-state smoothing weights/precisions.

    ``v0``/``a0`` parameterize each state's smoothing of the shared latent
    process, ``v1``/``a1`` the state-specific process.  All entries must be
    strictly positive; ``a`` plays the role of an inverse squared
    length-scale.
    """

    v0: np.ndarray
    a0: np.ndarray
    v1: np.ndarray
    a1: np.ndarray

    def __post_init__(self):
        for name in ("v0", "a0", "v1", "a1"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.ndim != 1 or arr.size != np.asarray(self.v0).size:
                raise DomainError("hyperparameter arrays must share one length")
            if np.any(arr <= 0) or not np.all(np.isfinite(arr)):
                raise DomainError(f"{name} must be strictly positive and finite")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_states(self) -> int:
        return self.v0.size

    def variance_at_zero(self) -> np.ndarray:
        """Within-state marginal variance k_mm(0) for each state."""
        return np.sqrt(np.pi) * (self.v0 ** 2 / np.sqrt(self.a0)
                                 + self.v1 ** 2 / np.sqrt(self.a1))

    def to_log_vector(self) -> np.ndarray:
        return np.log(np.concatenate([self.v0, self.a0, self.v1, self.a1]))

    @classmethod
    def from_log_vector(cls, vec, n_states: int) -> "ConvGpHyper":
        parts = np.exp(np.asarray(vec, dtype=float)).reshape(4, n_states)
        return cls(*parts)


def k_within(hyper: ConvGpHyper, m: int, dt):
    """k_mm(dt) for 1-based state m."""
    i = m - 1
    dt = np.asarray(dt, dtype=float)
    return (pair_term(hyper.v0[i], hyper.a0[i], hyper.v0[i], hyper.a0[i], dt)
            + pair_term(hyper.v1[i], hyper.a1[i], hyper.v1[i], hyper.a1[i], dt))


def k_cross(hyper: ConvGpHyper, m: int, h: int, dt):
    """k_mh(dt) for 1-based states m != h (shared-process term only)."""
    dt = np.asarray(dt, dtype=float)
    return pair_term(hyper.v0[m - 1], hyper.a0[m - 1],
                     hyper.v0[h - 1], hyper.a0[h - 1], dt)


def k_pairs(hyper: ConvGpHyper, t_a, s_a, t_b, s_b) -> np.ndarray:
    """Elementwise (broadcasting) kernel values k_{s_a s_b}(t_a - t_b);
    states are 1-based."""
    ia = np.asarray(s_a, int) - 1
    ib = np.asarray(s_b, int) - 1
    dt = np.asarray(t_a, float) - np.asarray(t_b, float)
    out = pair_term(hyper.v0[ia], hyper.a0[ia], hyper.v0[ib], hyper.a0[ib], dt)
    same = ia == ib
    own = pair_term(hyper.v1[ia], hyper.a1[ia], hyper.v1[ia], hyper.a1[ia], dt)
    return out + np.where(same, own, 0.0)


def gram(hyper: ConvGpHyper, t_row, s_row, t_col, s_col) -> np.ndarray:
    """Gram matrix between (time, 1-based state) index lists."""
    return _backend.gram(np.asarray(t_row, float),
                         np.asarray(s_row, int) - 1,
                         np.asarray(t_col, float),
                         np.asarray(s_col, int) - 1,
                         hyper.v0, hyper.a0, hyper.v1, hyper.a1)


def full_cov(hyper: ConvGpHyper, t) -> np.ndarray:
    """Dense covariance over all (time, state) pairs, time-major:
    row i*M + (m-1) corresponds to state m at t_i."""
    t = np.asarray(t, dtype=float)
    m = hyper.n_states
    tt = np.repeat(t, m)
    ss = np.tile(np.arange(1, m + 1), t.size)
    return gram(hyper, tt, ss, tt, ss)


class CovarianceAssembly:
    """Extracts path/cross/complement covariance blocks for a state path.

    For small problems the full (nM x nM) matrix is built once and sliced;
    past :data:`DENSE_ASSEMBLY_LIMIT` rows the blocks are assembled
    directly from their index lists to avoid the quadratic memory cost.
    """

    def __init__(self, hyper: ConvGpHyper, t, max_dense: int = DENSE_ASSEMBLY_LIMIT):
        self.hyper = hyper
        self.t = np.asarray(t, dtype=float)
        self.n = self.t.size
        self.m = hyper.n_states
        self._full = None
        self._use_dense = self.n * self.m <= max_dense

    def full(self) -> np.ndarray:
        if self._full is None:
            self._full = full_cov(self.hyper, self.t)
        return self._full

    def _flat_idx(self, states) -> np.ndarray:
        return np.arange(self.n) * self.m + (np.asarray(states, int) - 1)

    def complement_states(self, z) -> tuple[np.ndarray, np.ndarray]:
        """(times, states) index lists for all labels other than the path's,
        time-major with states ascending within each time point."""
        z = np.asarray(z, int)
        all_m = np.arange(1, self.m + 1)
        mask = all_m[None, :] != z[:, None]
        times = np.repeat(self.t, self.m - 1)
        states = np.broadcast_to(all_m, (self.n, self.m))[mask]
        return times, states

    def path_cov(self, z) -> np.ndarray:
        """K_z: covariance of the curve at the realized labels."""
        if self._use_dense:
            idx = self._flat_idx(z)
            return self.full()[np.ix_(idx, idx)]
        return gram(self.hyper, self.t, z, self.t, z)

    def cross_cov(self, z) -> np.ndarray:
        """K_z*: path rows vs complement columns."""
        tc, sc = self.complement_states(z)
        if self._use_dense:
            ridx = self._flat_idx(z)
            cidx = np.repeat(np.arange(self.n), self.m - 1) * self.m + (sc - 1)
            return self.full()[np.ix_(ridx, cidx)]
        return gram(self.hyper, self.t, z, tc, sc)

    def complement_cov(self, z) -> np.ndarray:
        """K_{-z}: covariance among the unrealized labels."""
        tc, sc = self.complement_states(z)
        if self._use_dense:
            cidx = np.repeat(np.arange(self.n), self.m - 1) * self.m + (sc - 1)
            return self.full()[np.ix_(cidx, cidx)]
        return gram(self.hyper, tc, sc, tc, sc)


@dataclass(frozen=True)
class MultiOutputConvGpHyper:
    """Hyperparameters for P outputs over M states, arrays shaped (P, M).

    Three latent layers: ``v0``/``a0`` smooth a process shared by every
    (output, state) pair, ``v1``/``a1`` one process per state shared across
    outputs, and ``v2``/``a2`` one individual process per (output, state).
    """

    v0: np.ndarray
    a0: np.ndarray
    v1: np.ndarray
    a1: np.ndarray
    v2: np.ndarray
    a2: np.ndarray

    def __post_init__(self):
        shape = np.asarray(self.v0).shape
        for name in ("v0", "a0", "v1", "a1", "v2", "a2"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.ndim != 2 or arr.shape != shape:
                raise DomainError("hyperparameter arrays must share shape (P, M)")
            if np.any(arr <= 0) or not np.all(np.isfinite(arr)):
                raise DomainError(f"{name} must be strictly positive and finite")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_outputs(self) -> int:
        return self.v0.shape[0]

    @property
    def n_states(self) -> int:
        return self.v0.shape[1]

    def variance_at_zero(self) -> np.ndarray:
        """Marginal variance at lag zero summed over outputs, per state."""
        per = (ROOT_2PI / np.sqrt(2.0)) * (self.v0 ** 2 / np.sqrt(self.a0)
                                           + self.v1 ** 2 / np.sqrt(self.a1)
                                           + self.v2 ** 2 / np.sqrt(self.a2))
        return per.sum(axis=0)

    def to_log_vector(self) -> np.ndarray:
        return np.log(np.stack([self.v0, self.a0, self.v1, self.a1,
                                self.v2, self.a2]).ravel())

    @classmethod
    def from_log_vector(cls, vec, n_outputs, n_states):
        parts = np.exp(np.asarray(vec, float)).reshape(6, n_outputs, n_states)
        return cls(*parts)


def multi_output_gram(hyper: MultiOutputConvGpHyper,
                      t_row, s_row, p_row,
                      t_col, s_col, p_col) -> np.ndarray:
    """Gram matrix between (time, 1-based state, 0-based output) lists."""
    dt = np.subtract.outer(np.asarray(t_row, float), np.asarray(t_col, float))
    sr = np.asarray(s_row, int) - 1
    sc = np.asarray(s_col, int) - 1
    pr = np.asarray(p_row, int)
    pc = np.asarray(p_col, int)
    rr, cc = (pr, sr), (pc, sc)
    out = pair_term(hyper.v0[rr][:, None], hyper.a0[rr][:, None],
                    hyper.v0[cc][None, :], hyper.a0[cc][None, :], dt)
    same_state = sr[:, None] == sc[None, :]
    term1 = pair_term(hyper.v1[rr][:, None], hyper.a1[rr][:, None],
                      hyper.v1[cc][None, :], hyper.a1[cc][None, :], dt)
    out += np.where(same_state, term1, 0.0)
    same_both = same_state & (pr[:, None] == pc[None, :])
    term2 = pair_term(hyper.v2[rr][:, None], hyper.a2[rr][:, None],
                      hyper.v2[cc][None, :], hyper.a2[cc][None, :], dt)
    out += np.where(same_both, term2, 0.0)
    return out


def chol_with_jitter(mat: np.ndarray, jitters=(0.0, 1e-10, 1e-8, 1e-6)) -> np.ndarray:
    """Lower Cholesky factor, escalating diagonal jitter on failure.

    Jitter is relative to the mean diagonal so matrices with large overall
    scale get proportionally large regularization.  Raises
    :class:`NumericalError` carrying the smallest eigenvalue when the last
    rung of the ladder still fails.
    """
    eye = np.eye(mat.shape[0])
    scale = max(float(np.mean(np.diag(mat))), 1.0)
    for j in jitters:
        try:
            return cholesky(mat + j * scale * eye, lower=True)
        except np.linalg.LinAlgError:
            continue
    min_eig = float(np.linalg.eigvalsh(mat).min())
    raise NumericalError(
        f"matrix not positive definite after jitter ladder (min eigenvalue {min_eig:.3e})",
        min_eigenvalue=min_eig)
