"""Time the compiled kernels against the numpy fallback on representative workloads.

Usage: python3 benchmarks/bench_kernels.py [--repeat 3] [--paths 20000]
"""
import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))

from instances import random_spec  # noqa: E402
from rlq import kernels  # noqa: E402
from rlq.adjoint import solve_adjoint_ode  # noqa: E402
from rlq.control import build_policy  # noqa: E402
from rlq.grid import TimeGrid  # noqa: E402
from rlq.riccati import solve_riccati_ode  # noqa: E402
from rlq.simulate import estimate_cost, perturbed  # noqa: E402


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def workloads(paths):
    spec = random_spec(np.random.default_rng(0), 3, 2, 3)
    fine = TimeGrid(1.0, 2000)
    grid = TimeGrid(1.0, 200)
    ric = solve_riccati_ode(spec, grid)
    adj = solve_adjoint_ode(spec, ric)
    pol = build_policy(ric, adj, spec)
    ric_fine = solve_riccati_ode(spec, fine)
    ctrl = perturbed(pol, delta=0.2)
    return {
        "riccati n=3 ell=3 N=2000": lambda: solve_riccati_ode(spec, fine),
        "adjoint n=3 ell=3 N=2000": lambda: solve_adjoint_ode(spec, ric_fine),
        f"euler M={paths} N=200": lambda: estimate_cost(spec, ctrl, grid, paths, rng=1, reference=pol, workers=1),
    }


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=3)
    parser.add_argument("--paths", type=int, default=20_000)
    args = parser.parse_args(argv)
    backends = kernels.available_backends()
    rows = []
    for name in backends:
        prev = kernels.use_backend(name)
        try:
            for label, fn in workloads(args.paths).items():
                fn()  # warm-up
                rows.append((label, name, best_of(fn, args.repeat)))
        finally:
            kernels.use_backend(prev)
    print(f"{'workload':<28} " + " ".join(f"{b:>10}" for b in backends) + ("   speedup" if len(backends) > 1 else ""))
    for label in dict.fromkeys(r[0] for r in rows):
        t = {b: s for lab, b, s in rows if lab == label}
        line = f"{label:<28} " + " ".join(f"{t[b] * 1e3:8.1f}ms" for b in backends)
        if "compiled" in t and "python" in t:
            line += f"   {t['python'] / t['compiled']:6.1f}x"
        print(line)


if __name__ == "__main__":
    main()
