"""Continuous-time Markov model for the hidden state process.

The state process lives on {1, ..., M} with an infinitesimal generator Q
(off-diagonal rates positive, rows summing to zero) and transition
probabilities P(t) = expm(Q t).  Time is assumed scaled to [0, 1] with the
process started at t = 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from .errors import DomainError


@dataclass(frozen=True)
class RateMatrix:
    """Generator Q plus the initial state distribution.

    The diagonal of ``q`` is recomputed at construction so each row sums to
    exactly zero; callers only need to supply valid off-diagonal rates.  The
    default initial distribution puts all mass on state 1, matching the
    convention that the process starts in the first state.
    """

    q: np.ndarray
    initial_probs: np.ndarray = None

    def __post_init__(self):
        q = np.array(self.q, dtype=float)
        if q.ndim != 2 or q.shape[0] != q.shape[1]:
            raise DomainError("rate matrix must be square")
        m = q.shape[0]
        off = q[~np.eye(m, dtype=bool)]
        if np.any(off <= 0):
            raise DomainError("off-diagonal rates must be strictly positive")
        q[np.eye(m, dtype=bool)] = 0.0
        np.fill_diagonal(q, -q.sum(axis=1))
        pi = self.initial_probs
        if pi is None:
            pi = np.zeros(m)
            pi[0] = 1.0
        else:
            pi = np.array(pi, dtype=float)
            if pi.shape != (m,) or np.any(pi < 0) or abs(pi.sum() - 1.0) > 1e-12:
                raise DomainError("initial_probs must be a length-M simplex vector")
        q.setflags(write=False)
        pi.setflags(write=False)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "initial_probs", pi)

    @property
    def n_states(self) -> int:
        return self.q.shape[0]

    @classmethod
    def from_rates(cls, rates: dict[tuple[int, int], float], n_states: int,
                   initial_probs=None) -> "RateMatrix":
        """Build from a {(m, h): q_mh} dict of 1-based off-diagonal rates."""
        q = np.zeros((n_states, n_states))
        for (m, h), r in rates.items():
            if m == h:
                raise DomainError("diagonal rates are implied, not supplied")
            q[m - 1, h - 1] = r
        return cls(q, initial_probs)


@dataclass(frozen=True)
class HiddenStatePath:
    """Realized state labels (1-based) on a strictly increasing time grid."""

    states: np.ndarray
    grid: np.ndarray

    def __post_init__(self):
        states = np.asarray(self.states, dtype=int)
        grid = np.asarray(self.grid, dtype=float)
        if states.shape != grid.shape or states.ndim != 1:
            raise DomainError("states and grid must be aligned 1-d arrays")
        if states.size == 0:
            raise DomainError("empty path")
        if np.any(np.diff(grid) <= 0):
            raise DomainError("grid must be strictly increasing")
        if np.any(states < 1):
            raise DomainError("state labels are 1-based")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "grid", grid)

    def __len__(self):
        return self.states.size


def transition_matrix(rate: RateMatrix, dt: float) -> np.ndarray:
    """P(dt) = expm(Q dt); rows are probability vectors.

    Results are memoized on the rate object: repeated sweeps over the same
    grid keep asking for the same handful of gap lengths.
    """
    if dt < 0:
        raise DomainError("negative time duration")
    if dt == 0:
        return np.eye(rate.n_states)
    cache = rate.__dict__.setdefault("_tm_cache", {})
    key = round(float(dt), 15)
    if key not in cache:
        p = expm(rate.q * dt)
        # expm can leave tiny negative round-off in near-degenerate cases
        np.clip(p, 0.0, None, out=p)
        p.setflags(write=False)
        cache[key] = p
    return cache[key]


def _gap_matrices(rate: RateMatrix, grid: np.ndarray) -> np.ndarray:
    """Transition matrices for every inter-point gap, t_0 = 0 prepended.

    Gaps repeat on uniform grids, so matrices are cached by gap length.
    Returns an (n, M, M) stack where entry i is P(t_i - t_{i-1}).
    """
    gaps = np.diff(np.concatenate(([0.0], grid)))
    cache: dict[float, np.ndarray] = {}
    out = np.empty((gaps.size, rate.n_states, rate.n_states))
    for i, dt in enumerate(gaps):
        key = round(float(dt), 15)
        if key not in cache:
            cache[key] = transition_matrix(rate, dt)
        out[i] = cache[key]
    return out


def sample_path(rate: RateMatrix, grid, rng: np.random.Generator) -> HiddenStatePath:
    """Draw the state at each grid point, chaining from z(0) ~ initial_probs."""
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise DomainError("empty grid")
    mats = _gap_matrices(rate, grid)
    m = rate.n_states
    states = np.empty(grid.size, dtype=int)
    prev = rng.choice(m, p=rate.initial_probs)
    for i in range(grid.size):
        prev = rng.choice(m, p=mats[i, prev])
        states[i] = prev + 1
    return HiddenStatePath(states, grid)


def log_path_probability(rate: RateMatrix, path: HiddenStatePath) -> float:
    """Log-probability of the realized labels under the CTMM.

    The initial state z(0) is marginalized over ``initial_probs``; with the
    default point mass on state 1 the first factor is P_{1 z_1}(t_1).  A zero
    transition probability (only possible for coincident time stamps, which
    ingestion rejects) yields -inf rather than an exception.
    """
    mats = _gap_matrices(rate, path.grid)
    z = path.states - 1
    with np.errstate(divide="ignore"):
        first = np.log(rate.initial_probs @ mats[0, :, z[0]])
        rest = np.log(mats[np.arange(1, len(path)), z[:-1], z[1:]])
    return float(first + rest.sum())


def path_log_probs_batch(rate: RateMatrix, grid: np.ndarray,
                         states_batch: np.ndarray) -> np.ndarray:
    """log_path_probability for a (B, n) batch of label matrices."""
    mats = _gap_matrices(rate, grid)
    zb = np.asarray(states_batch, dtype=int) - 1
    with np.errstate(divide="ignore"):
        logm = np.log(mats)
    first = np.log(np.clip(mats[0].T @ rate.initial_probs, 1e-300, None))[zb[:, 0]]
    idx = np.arange(1, grid.size)
    rest = logm[idx, zb[:, :-1], zb[:, 1:]].sum(axis=1)
    return first + rest


def interpolate_state(rate: RateMatrix, path: HiddenStatePath, t_star: float) -> int:
    """Most probable label at an off-grid time given the flanking labels.

    Interior points maximize P_{z_i, z}(t* - t_i) P_{z, z_{i+1}}(t_{i+1} - t*);
    beyond the last grid point only the forward factor applies.  Ties resolve
    to the lower label.
    """
    grid = path.grid
    if t_star < grid[0]:
        raise DomainError("interpolation before the first grid point is undefined")
    if t_star in grid:
        return int(path.states[np.searchsorted(grid, t_star)])
    if t_star > grid[-1]:
        row = transition_matrix(rate, t_star - grid[-1])[path.states[-1] - 1]
        return int(np.argmax(row)) + 1
    i = np.searchsorted(grid, t_star) - 1
    left = transition_matrix(rate, t_star - grid[i])[path.states[i] - 1]
    right = transition_matrix(rate, grid[i + 1] - t_star)[:, path.states[i + 1] - 1]
    return int(np.argmax(left * right)) + 1
