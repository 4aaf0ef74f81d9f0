"""DIGITS accuracy table: private cells at epsilon 10, 1, 0.1 plus the non-private baseline.

Prints a cell x epsilon table of mean (std) final test accuracy across seeds.
"""

import argparse
import math

import numpy as np

from dpvd.experiment import ExperimentSpec, run_experiment
from dpvd.trainer import TrainConfig

CELLS = ("dpvd-zcdp", "svi-zcdp", "dpvd-ac", "svi-ac", "nonprivate")


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out-dir", default="out/table1")
    parser.add_argument("--repeats", type=int, default=10)
    parser.add_argument("--epochs", type=int, default=100)
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--cells", default=",".join(CELLS))
    args = parser.parse_args(argv)
    epsilons = (10.0, 1.0, 0.1)
    spec = ExperimentSpec(cells=tuple(args.cells.split(",")), epsilons=epsilons, repeats=args.repeats,
                          base=TrainConfig(epochs=args.epochs))
    results = run_experiment(spec, args.out_dir, workers=args.workers, log=lambda m: print(m, flush=True))
    accs = {}
    for r in results:
        if r.report is not None:
            accs.setdefault((r.cell, r.epsilon), []).append(r.report.final_test_acc)
    print(f"\n{'cell':<12}" + "".join(f"{f'eps={e:g}':>18}" for e in epsilons))
    for cell in spec.cells:
        line = f"{cell:<12}"
        for eps in epsilons:
            # the non-private baseline has no privacy axis; shown once
            key = (cell, math.inf) if cell == "nonprivate" and eps == epsilons[0] else (cell, eps)
            vals = accs.get(key)
            line += f"{'-':>18}" if not vals else f"{np.mean(vals):>11.4f} ({np.std(vals):.3f})"
        print(line)


if __name__ == "__main__":
    main()
