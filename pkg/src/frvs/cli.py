"""Command-line interface: simulate, fit, predict, benchmark.

Configuration can come from a JSON file (``--config``); any flag given
explicitly on the command line overrides the file value.  Exit codes:
0 success, 2 input error, 3 numerical failure.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np
import pandas as pd

from . import inference, io, multi, simulation
from .ctmm import HiddenStatePath, RateMatrix, interpolate_state
from .errors import DomainError, InputError, NumericalError


def _load_config(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise InputError(f"config {path} must hold a JSON object")
    return cfg


def _merge(ctx, config: dict, **flags):
    """File values for parameters the user left at their defaults; explicit
    command-line flags win."""
    merged = dict(flags)
    for key, value in config.items():
        if key not in merged:
            continue
        source = ctx.get_parameter_source(key)
        if source is not None and source.name != "COMMANDLINE":
            merged[key] = value
    return merged


def _run(func):
    try:
        func()
    except (InputError, DomainError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    except NumericalError as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        sys.exit(3)
    sys.exit(0)


def _gibbs_config(p) -> inference.GibbsConfig:
    return inference.GibbsConfig(
        n_iter=p["iters"], n_burn=p["burn"], n_keep_paths=p["keep_paths"],
        path_method=p["method"], mode=p["mode"], n_neighbors=p["neighbors"],
        theta_f_update=p["theta_f_update"],
        relabel_every=p["relabel_every"])


_FIT_OPTIONS = [
    click.option("--input", "input_path", required=True,
                 type=click.Path(exists=True), help="Input CSV."),
    click.option("--time-col", default="t", show_default=True),
    click.option("--value-col", "value_cols", multiple=True, default=("y",),
                 show_default=True,
                 help="Value column; repeat for multi-output data."),
    click.option("--label-col", default=None,
                 help="Optional known-state column (1-based integers)."),
    click.option("--states", default=2, show_default=True),
    click.option("--iters", default=250, show_default=True),
    click.option("--burn", default=150, show_default=True),
    click.option("--keep-paths", default=10, show_default=True),
    click.option("--method", default="imh", show_default=True,
                 type=click.Choice(["imh", "ensemble", "ngs"])),
    click.option("--mode", default="auto", show_default=True,
                 type=click.Choice(["auto", "dense", "nngp"])),
    click.option("--neighbors", default=10, show_default=True),
    click.option("--relabel-every", default=5, show_default=True,
                 help="Burn-in segment-relabel cadence; 0 disables."),
    click.option("--theta-f-update", default="eb", show_default=True,
                 type=click.Choice(["eb", "mh", "none"])),
    click.option("--chains", default=2, show_default=True),
    click.option("--seed", default=0, show_default=True),
    click.option("--outdir", default=".", show_default=True,
                 type=click.Path(file_okay=False)),
]


def _fit_options(cmd):
    for opt in reversed(_FIT_OPTIONS):
        cmd = opt(cmd)
    return cmd


@click.group()
def main():
    """Segmentation of functional data with state-switching covariance."""


@main.command()
@click.option("--scenario", default="scenario1", show_default=True,
              type=click.Choice(sorted(simulation.SCENARIOS)))
@click.option("--n", default=None, type=int, help="Grid size override.")
@click.option("--seed", default=0, show_default=True)
@click.option("--out", default="data.csv", show_default=True,
              type=click.Path(dir_okay=False))
@click.option("--config", default=None, type=click.Path(exists=True))
@click.pass_context
def simulate(ctx, scenario, n, seed, out, config):
    """Draw one synthetic dataset and write it as CSV (t, y, z, f)."""
    def body():
        p = _merge(ctx, _load_config(config), scenario=scenario, n=n,
                   seed=seed, out=out)
        spec = simulation.SCENARIOS[p["scenario"]](p["n"]) \
            if p["n"] else simulation.SCENARIOS[p["scenario"]]()
        data = simulation.generate(spec, np.random.default_rng(p["seed"]))
        pd.DataFrame({"t": data["t"], "y": data["y"], "z": data["z"],
                      "f": data["f"]}).to_csv(p["out"], index=False)
        click.echo(f"wrote {p['out']} ({spec.n} points, {p['scenario']})")
    _run(body)


def _fit_dataset(ds: io.Dataset, p) -> tuple:
    """Shared fit path; returns (result, config, metrics or None)."""
    cfg = _gibbs_config(p)
    if ds.n_outputs > 1:
        result = multi.fit_multi(ds.y, ds.t, p["states"], cfg,
                                 n_chains=p["chains"], seed=p["seed"])
    else:
        result = inference.fit(ds.y, ds.t, p["states"], cfg,
                               n_chains=p["chains"], seed=p["seed"])
    metrics = None
    if ds.labels is not None:
        metrics = simulation.classification_metrics(ds.labels, result.z_hat,
                                                    p["states"])
    return result, cfg, metrics


def _write_fit_artifacts(outdir: Path, result, cfg, metrics) -> None:
    kept = (result.kept_chains if result.kept_chains is not None
            else np.arange(len(result.chains)))
    f_draws = np.concatenate([result.chains[i].f_draws for i in kept])
    io.write_posterior_summary(outdir / "posterior_summary.json", result, cfg,
                               metrics)
    io.write_state_probs(outdir / "state_probs.csv", result.t,
                         result.state_probs, result.z_hat)
    if f_draws.ndim == 3:
        lo, hi = np.percentile(f_draws, [2.5, 97.5], axis=0)
        cols = {"t": result.t}
        for q in range(f_draws.shape[2]):
            cols[f"f_mean_{q + 1}"] = f_draws[:, :, q].mean(axis=0)
            cols[f"f_lo95_{q + 1}"] = lo[:, q]
            cols[f"f_hi95_{q + 1}"] = hi[:, q]
        pd.DataFrame(cols).to_csv(outdir / "fitted_curve.csv", index=False)
    else:
        io.write_fitted_curve(outdir / "fitted_curve.csv", result.t, f_draws)
    io.write_segments(outdir / "segments.json", result.t, result.z_hat)


@main.command()
@_fit_options
@click.option("--config", default=None, type=click.Path(exists=True))
@click.pass_context
def fit(ctx, config, **flags):
    """Fit the model and write the posterior artifacts."""
    def body():
        p = _merge(ctx, _load_config(config), **flags)
        ds = io.load_csv(p["input_path"], p["time_col"], p["value_cols"],
                         p["label_col"])
        result, cfg, metrics = _fit_dataset(ds, p)
        outdir = Path(p["outdir"])
        outdir.mkdir(parents=True, exist_ok=True)
        _write_fit_artifacts(outdir, result, cfg, metrics)
        click.echo(f"fit complete; artifacts in {outdir}")
        if metrics:
            click.echo(f"accuracy vs labels: {metrics['accuracy']:.4f}")
    _run(body)


def _interp_states(result, t_new, in_range) -> np.ndarray:
    rate = RateMatrix(result.rate_mean)
    path = HiddenStatePath(result.z_hat, result.t)
    z_star = np.full(t_new.size, np.nan)
    for j in np.flatnonzero(in_range):
        z_star[j] = interpolate_state(rate, path, t_new[j])
    return z_star


@main.command()
@_fit_options
@click.option("--grid", default=None,
              help="Prediction grid 'start:stop:num' (normalized time).")
@click.option("--grid-file", default=None, type=click.Path(exists=True),
              help="CSV with the prediction times in the time column.")
@click.option("--test-frac", default=None, type=float,
              help="Hold out this fraction for testing instead of a grid.")
@click.option("--config", default=None, type=click.Path(exists=True))
@click.pass_context
def predict(ctx, config, **flags):
    """Fit, then predict y at new time points (predictions.csv)."""
    def body():
        p = _merge(ctx, _load_config(config), **flags)
        ds = io.load_csv(p["input_path"], p["time_col"], p["value_cols"],
                         p["label_col"])
        outdir = Path(p["outdir"])
        outdir.mkdir(parents=True, exist_ok=True)

        test = None
        if p["test_frac"] is not None:
            ds, test = io.split_dataset(ds, 1.0 - p["test_frac"], p["seed"])
            t_new = test.t
        elif p["grid"] is not None:
            try:
                start, stop, num = p["grid"].split(":")
                t_new = np.linspace(float(start), float(stop), int(num))
            except ValueError:
                raise InputError(f"bad --grid {p['grid']!r}; "
                                 "expected start:stop:num") from None
        elif p["grid_file"] is not None:
            t_new = io.load_csv(p["grid_file"], p["time_col"],
                                (p["time_col"],)).t
        else:
            raise InputError("one of --grid, --grid-file or --test-frac "
                             "is required")

        result, cfg, metrics = _fit_dataset(ds, p)
        _write_fit_artifacts(outdir, result, cfg, metrics)

        mean = np.full((t_new.size,) if ds.n_outputs == 1
                       else (t_new.size, ds.n_outputs), np.nan)
        var = np.full_like(mean, np.nan)
        # points left of the observed grid cannot be reached by the forward
        # state process; they are flagged and skipped
        in_range = t_new >= result.t[0]
        if in_range.any():
            if ds.n_outputs > 1:
                m_in, v_in = multi.predict_multi(result, t_new[in_range],
                                                 mode=cfg.mode)
            else:
                m_in, v_in = inference.predict_y(result, t_new[in_range],
                                                 mode=cfg.mode)
            mean[in_range] = m_in
            var[in_range] = v_in
        z_star = _interp_states(result, t_new, in_range)

        if ds.n_outputs == 1:
            io.write_predictions(outdir / "predictions.csv", t_new, mean,
                                 var, z_star,
                                 None if in_range.all() else ~in_range)
        else:
            frame = {"t": t_new}
            for q in range(ds.n_outputs):
                frame[f"mean_{q + 1}"] = mean[:, q]
                frame[f"variance_{q + 1}"] = var[:, q]
            frame["z_star"] = z_star
            if not in_range.all():
                frame["out_of_range"] = ~in_range
            pd.DataFrame(frame).to_csv(outdir / "predictions.csv", index=False)

        if test is not None and in_range.all():
            err = mean - test.y
            rmse = float(np.sqrt(np.mean(err ** 2)))
            mae = float(np.mean(np.abs(err)))
            click.echo(f"test rmse {rmse:.4f} mae {mae:.4f}")
        click.echo(f"wrote {outdir / 'predictions.csv'}")
    _run(body)


@main.command()
@click.option("--scenario", default="scenario1", show_default=True,
              type=click.Choice(sorted(simulation.SCENARIOS)))
@click.option("--reps", default=10, show_default=True)
@click.option("--n", default=None, type=int)
@click.option("--methods", default="imh", show_default=True,
              help="Comma-separated subset of imh,ensemble,ngs.")
@click.option("--chains", default=2, show_default=True)
@click.option("--iters", default=250, show_default=True)
@click.option("--burn", default=150, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", default="benchmark.csv", show_default=True,
              type=click.Path(dir_okay=False))
@click.option("--config", default=None, type=click.Path(exists=True))
@click.pass_context
def benchmark(ctx, config, **flags):
    """Replicated synthetic benchmark; writes one row per (rep, method)."""
    def body():
        p = _merge(ctx, _load_config(config), **flags)
        methods = tuple(m.strip() for m in p["methods"].split(",") if m.strip())
        for m in methods:
            if m not in ("imh", "ensemble", "ngs"):
                raise InputError(f"unknown method {m!r}")
        cfg = inference.GibbsConfig(n_iter=p["iters"], n_burn=p["burn"])
        df = simulation.run_benchmark(p["scenario"], p["reps"], config=cfg,
                                      methods=methods, n_chains=p["chains"],
                                      seed=p["seed"], n=p["n"],
                                      out_csv=p["out"])
        mean_rows = df[df["replication"] == "mean"]
        for _, row in mean_rows.iterrows():
            click.echo(f"{row['method']}: accuracy {row['accuracy']:.4f} "
                       f"rmse {row['rmse']:.4f} ({row['seconds']:.1f} s/rep)")
        click.echo(f"wrote {p['out']}")
    _run(body)


if __name__ == "__main__":
    main()
