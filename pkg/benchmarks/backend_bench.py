"""Compare the compiled and pure-numpy Gram builders.

Runs the kernel assembly and a short Gibbs fit under both backends and
prints a timing table.  The numpy fallback is selected by re-executing
this script with FRVS_PURE_PYTHON=1, so each backend gets a fresh
interpreter and a clean import.

Usage: python benchmarks/backend_bench.py [--sizes 200,500,1000]
"""

import argparse
import json
import os
import subprocess
import sys
import time


def measure():
    import numpy as np

    from frvs import _backend, inference
    from frvs.kernels import ConvGpHyper, gram
    from frvs.simulation import generate, scenario1

    sizes = [int(s) for s in os.environ["BENCH_SIZES"].split(",")]
    hyper = ConvGpHyper([0.1, 0.1], [1.0, 1.0], [0.1, 0.5], [0.1, 1.0])
    rows = {"backend": _backend.BACKEND, "gram": {}, "fit": {}}
    for n in sizes:
        t = np.arange(1, n + 1) / (n + 1)
        z = np.random.default_rng(0).integers(1, 3, size=n)
        gram(hyper, t[:10], z[:10], t[:10], z[:10])  # warm up
        reps = max(3, 2000 // n)
        start = time.perf_counter()
        for _ in range(reps):
            gram(hyper, t, z, t, z)
        rows["gram"][n] = (time.perf_counter() - start) / reps

    spec = scenario1(60)
    data = generate(spec, np.random.default_rng(1))
    cfg = inference.GibbsConfig(n_iter=30, n_burn=15, theta_f_update="none")
    start = time.perf_counter()
    inference.fit(data["y"], data["t"], 2, cfg, n_chains=1, seed=0)
    rows["fit"][60] = time.perf_counter() - start
    print(json.dumps(rows))


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--sizes", default="200,500,1000")
    args = parser.parse_args()

    results = []
    for pure in ("0", "1"):
        env = dict(os.environ, FRVS_PURE_PYTHON=pure,
                   BENCH_SIZES=args.sizes, BENCH_CHILD="1")
        out = subprocess.run([sys.executable, __file__], env=env,
                             capture_output=True, text=True, check=True)
        results.append(json.loads(out.stdout.strip().splitlines()[-1]))

    a, b = results
    print(f"{'task':>14} {a['backend']:>12} {b['backend']:>12} {'speedup':>9}")
    for n, ta in a["gram"].items():
        tb = b["gram"][n]
        print(f"{'gram n=' + n:>14} {ta * 1e3:>10.2f}ms {tb * 1e3:>10.2f}ms "
              f"{tb / ta:>8.1f}x")
    for n, ta in a["fit"].items():
        tb = b["fit"][n]
        print(f"{'fit n=' + n:>14} {ta:>11.2f}s {tb:>11.2f}s {tb / ta:>8.1f}x")


if __name__ == "__main__":
    if os.environ.get("BENCH_CHILD") == "1":
        measure()
    else:
        main()
