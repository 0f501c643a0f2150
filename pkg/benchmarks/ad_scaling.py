"""Forward- versus reverse-mode ELBO gradient cost on ``mini_neural_ode``.

Times one full ELBO gradient (theta and every subject's kappa) while the
network width grows, and prints a table (with the gradient-to-primal cost
ratio) plus the 1600-vs-100 ratios.

    python benchmarks/ad_scaling.py [--subjects 4] [--samples 4] [--repeats 3]
"""

import argparse
import json
import time

import numpy as np

from nlmevem.data import simulate_population
from nlmevem.elbo import ElboConfig, ElboProblem
from nlmevem.models import catalog_lookup
from nlmevem.subject import DoseEvent, Subject

# hidden widths giving n_theta = h^2 + 7h + 6 close to 100, 400 and 1600
WIDTHS = {100: 7, 400: 17, 1600: 36}
TIMES = (0.5, 1.0, 2.0, 4.0, 8.0)


def problem_for(hidden, n_subjects, M, mode):
    model = catalog_lookup("mini_neural_ode", hidden=hidden)
    design = Subject("d", np.array(TIMES), {"y": np.full(len(TIMES), np.nan)}, (DoseEvent(0.0, 10.0, 0),), {})
    subjects = simulate_population(model, n_subjects, design, model.theta_init, seed=1)
    prob = ElboProblem(model, subjects, ElboConfig(M=M), ad_mode=mode, threads=1)
    return model, prob


def best_time(fn, repeats):
    fn()  # warm caches (draws, step schedules)
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def run(n_subjects=4, M=4, repeats=3):
    rows = []
    for target, hidden in WIDTHS.items():
        for mode in ("forward", "reverse"):
            model, prob = problem_for(hidden, n_subjects, M, mode)
            x = prob.initial_point()
            grad = best_time(lambda: prob.value_and_grad(x), repeats)
            primal = best_time(lambda: prob.value(x), repeats)
            rows.append({"target": target, "n_theta": model.n_theta, "mode": mode, "seconds": grad,
                         "primal_seconds": primal, "cost": grad / primal})  # fmt: skip
    return rows


def ratios(rows):
    t = {(r["target"], r["mode"]): r["seconds"] for r in rows}
    return {mode: t[(1600, mode)] / t[(100, mode)] for mode in ("forward", "reverse")}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--subjects", type=int, default=4)
    ap.add_argument("--samples", type=int, default=4)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--json", action="store_true", help="print rows as JSON")
    args = ap.parse_args()
    rows = run(args.subjects, args.samples, args.repeats)
    if args.json:
        print(json.dumps({"rows": rows, "ratios": ratios(rows)}, indent=2))
        return
    print(f"{'n_theta':>8} {'mode':>8} {'seconds':>10} {'grad/primal':>12}")
    for r in rows:
        print(f"{r['n_theta']:>8} {r['mode']:>8} {r['seconds']:>10.4f} {r['cost']:>12.2f}")
    for mode, v in ratios(rows).items():
        print(f"{mode}: t(1600) / t(100) = {v:.2f}")


if __name__ == "__main__":
    main()
