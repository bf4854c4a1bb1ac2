#!/usr/bin/env python3
"""Run the three experimental arms at desk scale and print a comparison.

Example:
    python3 scripts/run_desk_experiment.py --backend trainer --seeds 1,2,3 \
        --out results/desk
"""

import argparse
import statistics
import time
from pathlib import Path

from neurolgp.data import DataConfig
from neurolgp.engine import MODES, RunConfig, nominal_cost_units, run
from neurolgp.metrics import cost_summary


def parse_args():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--backend", choices=["trainer", "proxy"], default="trainer")
    p.add_argument("--seeds", default="1,2,3", help="comma-separated run seeds")
    p.add_argument("--population", type=int, default=10)
    p.add_argument("--generations", type=int, default=5)
    p.add_argument("--full-epochs", type=int, default=30)
    p.add_argument("--partial-epochs", type=int, default=10)
    p.add_argument("--images", type=int, default=320)
    p.add_argument("--noise", type=float, default=0.12)
    p.add_argument("--data-seed", type=int, default=101)
    p.add_argument("--out", default=None, help="artifact root (optional)")
    return p.parse_args()


def main():
    args = parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]
    data_cfg = DataConfig(n_images=args.images, noise=args.noise, seed=args.data_seed)
    results = {mode: [] for mode in MODES}
    times = {mode: 0.0 for mode in MODES}
    for mode in MODES:
        for seed in seeds:
            cfg = RunConfig(
                mode=mode,
                seed=seed,
                backend=args.backend,
                population=args.population,
                generations=args.generations,
                full_epochs=args.full_epochs,
                partial_epochs=args.partial_epochs,
                data=data_cfg,
            )
            out_dir = Path(args.out) / f"{mode}_seed{seed}" if args.out else None
            t0 = time.time()
            results[mode].append(run(cfg, out_dir))
            times[mode] += time.time() - t0
            print(f"  {mode} seed {seed}: best {results[mode][-1].best.fitness:.4f}")

    print("\nmode        mean best    cost/run (epoch-units)    wall time")
    for mode in MODES:
        best = statistics.mean(r.best.fitness for r in results[mode])
        cost = results[mode][0].total_cost_units
        print(f"{mode:<12}{best:>8.4f}    {cost:>10}                {times[mode]:>6.1f}s")
    saved = cost_summary(results["expensive"][0], results["surrogate"][0])
    print(f"\nsurrogate arm saves {saved:.1f}% of the expensive arm's epoch-units "
          f"(model: {100 * (1 - nominal_cost_units(cfg, 'surrogate') / nominal_cost_units(cfg, 'expensive')):.1f}%)")


if __name__ == "__main__":
    main()
