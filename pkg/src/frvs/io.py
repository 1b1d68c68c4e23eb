"""Dataset ingestion and machine-readable result emission.

CSV in (header row mandatory), CSV/JSON out.  Times are normalized to
[0, 1] on load; all artifact writers are deterministic so a rerun under a
fixed seed produces byte-identical files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import InputError

#: Bumped when any artifact layout changes.
SCHEMA_VERSION = "1"


@dataclass
class Dataset:
    """Observations on a normalized time grid.

    ``y`` is (n,) for a single output or (n, P) for multi-output data;
    ``labels`` are optional known states (1-based).  ``meta`` records the
    source file and the raw time range so predictions can be mapped back.
    """

    t: np.ndarray
    y: np.ndarray
    labels: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.t.size

    @property
    def n_outputs(self) -> int:
        return 1 if self.y.ndim == 1 else self.y.shape[1]


def normalize_times(t: np.ndarray) -> np.ndarray:
    """Map raw times affinely onto [0, 1]; idempotent on normalized input."""
    t = np.asarray(t, float)
    span = t.max() - t.min()
    if span <= 0:
        raise InputError("all time stamps are identical; cannot normalize")
    return (t - t.min()) / span


def load_csv(path, time_col: str = "t", value_cols=("y",),
             label_col: str | None = None) -> Dataset:
    """Read a dataset: parses, sorts by time, rejects duplicate or
    non-finite rows (reporting 1-based data row numbers), and normalizes
    the time stamps onto [0, 1]."""
    value_cols = [value_cols] if isinstance(value_cols, str) else list(value_cols)
    try:
        frame = pd.read_csv(path)
    except pd.errors.EmptyDataError:
        raise InputError(f"{path}: empty file") from None
    if frame.empty:
        raise InputError(f"{path}: no data rows")
    for col in [time_col, *value_cols] + ([label_col] if label_col else []):
        if col not in frame.columns:
            raise InputError(f"{path}: missing column {col!r} "
                             f"(have {list(frame.columns)})")

    numeric = {}
    for col in [time_col, *value_cols]:
        parsed = pd.to_numeric(frame[col], errors="coerce")
        bad = np.flatnonzero(~np.isfinite(parsed.to_numpy(float)))
        if bad.size:
            rows = ", ".join(str(i + 1) for i in bad[:10])
            raise InputError(f"{path}: column {col!r} unparseable or "
                             f"non-finite at data row(s) {rows}")
        numeric[col] = parsed.to_numpy(float)

    t_raw = numeric[time_col]
    order = np.argsort(t_raw, kind="stable")
    t_sorted = t_raw[order]
    dup = np.flatnonzero(np.diff(t_sorted) == 0)
    if dup.size:
        rows = ", ".join(str(order[i] + 1) for i in dup[:10])
        raise InputError(f"{path}: duplicate time stamps (data row(s) {rows})")

    y = np.column_stack([numeric[c][order] for c in value_cols])
    if y.shape[1] == 1:
        y = y[:, 0]
    labels = None
    if label_col:
        lab = pd.to_numeric(frame[label_col], errors="coerce").to_numpy(float)
        bad = np.flatnonzero(~np.isfinite(lab) | (lab != np.round(lab)) | (lab < 1))
        if bad.size:
            rows = ", ".join(str(i + 1) for i in bad[:10])
            raise InputError(f"{path}: column {label_col!r} must hold positive "
                             f"integers; bad data row(s) {rows}")
        labels = lab[order].astype(int)

    meta = {"source": str(path),
            "raw_time_min": float(t_raw.min()),
            "raw_time_max": float(t_raw.max())}
    return Dataset(t=normalize_times(t_sorted), y=y, labels=labels, meta=meta)


def split_dataset(ds: Dataset, frac: float, seed: int) -> tuple[Dataset, Dataset]:
    """Uniform random train/test split; both parts stay time-sorted."""
    if not 0 < frac < 1:
        raise InputError("train fraction must lie strictly between 0 and 1")
    n = ds.n
    n_train = int(round(frac * n))
    if min(n_train, n - n_train) < 5:
        raise InputError(f"split {frac} of {n} points leaves a part below "
                         "5 points")
    perm = np.random.default_rng(seed).permutation(n)
    parts = []
    for idx in (np.sort(perm[:n_train]), np.sort(perm[n_train:])):
        parts.append(Dataset(
            t=ds.t[idx], y=ds.y[idx],
            labels=None if ds.labels is None else ds.labels[idx],
            meta=dict(ds.meta)))
    return parts[0], parts[1]


def _write_json(path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _ci(draws: np.ndarray) -> list:
    lo, hi = np.percentile(draws, [2.5, 97.5])
    return [float(lo), float(hi)]


def write_posterior_summary(path, result, config, metrics: dict | None = None,
                            extra: dict | None = None) -> None:
    """posterior_summary.json: parameter means, 95% credible intervals and
    convergence diagnostics; optional classification metrics block."""
    kept = (result.kept_chains if result.kept_chains is not None
            else np.arange(len(result.chains)))
    pool = [result.chains[i] for i in kept]
    sigma2 = np.concatenate([c.sigma2_draws for c in pool])
    rates = np.concatenate([c.rate_draws for c in pool])
    m = result.n_states
    rate_block = {}
    for i in range(m):
        for j in range(m):
            if i != j:
                rate_block[f"q_{i + 1}{j + 1}"] = {
                    "mean": float(result.rate_mean[i, j]),
                    "ci95": _ci(rates[:, i, j])}
    multi = np.ndim(result.sigma2_mean) > 0
    if multi:
        sigma2_block = {
            f"output_{q + 1}": {"mean": float(result.sigma2_mean[q]),
                                "ci95": _ci(sigma2[:, q])}
            for q in range(sigma2.shape[1])}
    else:
        sigma2_block = {"mean": float(result.sigma2_mean), "ci95": _ci(sigma2)}
    hyper_names = ("v0", "a0", "v1", "a1", "v2", "a2") \
        if hasattr(result.hyper_mean, "v2") else ("v0", "a0", "v1", "a1")
    payload = {
        "schema_version": SCHEMA_VERSION,
        "n_states": m,
        "n_chains": len(result.chains),
        "chains_used": [int(i) for i in kept],
        "sigma2": sigma2_block,
        "rates": rate_block,
        "kernel_hyper": {name: np.asarray(getattr(result.hyper_mean,
                                                  name)).tolist()
                         for name in hyper_names},
        "gelman_rubin": {k: float(v) for k, v in result.gelman_rubin.items()},
        "config": {"n_iter": config.n_iter, "n_burn": config.n_burn,
                   "path_method": config.path_method,
                   "n_keep_paths": config.n_keep_paths,
                   "theta_f_update": config.theta_f_update},
    }
    if metrics:
        payload["classification"] = {k: float(v) for k, v in metrics.items()}
    if extra:
        payload.update(extra)
    _write_json(path, payload)


def write_state_probs(path, t, probs, z_hat) -> None:
    """state_probs.csv: t, one posterior-probability column per state, ẑ."""
    cols = {"t": np.asarray(t, float)}
    for m in range(probs.shape[1]):
        cols[f"p_state{m + 1}"] = probs[:, m]
    cols["z_hat"] = np.asarray(z_hat, int)
    pd.DataFrame(cols).to_csv(path, index=False)


def write_fitted_curve(path, t, f_draws) -> None:
    """fitted_curve.csv: t, posterior mean and central 95% band of f_z."""
    lo, hi = np.percentile(f_draws, [2.5, 97.5], axis=0)
    pd.DataFrame({"t": np.asarray(t, float),
                  "f_mean": f_draws.mean(axis=0),
                  "f_lo95": lo, "f_hi95": hi}).to_csv(path, index=False)


def segments_from_path(t, z_hat) -> list[dict]:
    """Contiguous constant-state segments of a fitted path.

    Boundaries between two differently labeled neighbors are placed at the
    midpoint of their time stamps; the first segment starts at t[0] and the
    last ends at t[-1].
    """
    t = np.asarray(t, float)
    z_hat = np.asarray(z_hat, int)
    change = np.flatnonzero(np.diff(z_hat)) + 1
    starts = np.concatenate(([t[0]], (t[change - 1] + t[change]) / 2))
    ends = np.concatenate(((t[change - 1] + t[change]) / 2, [t[-1]]))
    firsts = np.concatenate(([0], change))
    return [{"state": int(z_hat[i]), "start": float(s), "end": float(e)}
            for i, s, e in zip(firsts, starts, ends)]


def write_segments(path, t, z_hat) -> None:
    _write_json(path, {"schema_version": SCHEMA_VERSION,
                       "segments": segments_from_path(t, z_hat)})


def write_predictions(path, t_new, mean, variance, z_star,
                      out_of_range=None) -> None:
    """predictions.csv: t*, predictive mean/variance, interpolated state,
    and a flag for points the model cannot reach (left of the grid)."""
    frame = pd.DataFrame({
        "t": np.asarray(t_new, float),
        "mean": np.asarray(mean, float),
        "variance": np.asarray(variance, float),
        "z_star": np.asarray(z_star, float),
    })
    if out_of_range is not None:
        frame["out_of_range"] = np.asarray(out_of_range, bool)
    frame.to_csv(path, index=False)
