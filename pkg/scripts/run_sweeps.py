"""Parameter-effect sweeps on DIGITS: hidden units, clipping bound and minibatch size.

Each sweep lands in its own directory with runs.csv and aggregate.csv
(per-epoch mean and std, ready for plotting).
"""

import argparse
from pathlib import Path

from dpvd.experiment import ExperimentSpec, run_experiment
from dpvd.trainer import TrainConfig

SWEEPS = {
    "hidden_units": (500, 1000, 2000),
    "clip_c": (1.0, 2.0, 4.0),
    "minibatch": (50, 100, 200),
}


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out-dir", default="out/sweeps")
    parser.add_argument("--epochs", type=int, default=100)
    parser.add_argument("--repeats", type=int, default=3)
    parser.add_argument("--epsilon", type=float, default=1.0)
    parser.add_argument("--cells", default="dpvd-zcdp,dpvd-ac")
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--only", choices=tuple(SWEEPS), help="run a single sweep")
    args = parser.parse_args(argv)
    for key, values in SWEEPS.items():
        if args.only and key != args.only:
            continue
        spec = ExperimentSpec(cells=tuple(args.cells.split(",")), epsilons=(args.epsilon,), repeats=args.repeats,
                              sweep=key, sweep_values=values, base=TrainConfig(epochs=args.epochs))
        run_experiment(spec, Path(args.out_dir) / key, workers=args.workers, log=lambda m: print(m, flush=True))


if __name__ == "__main__":
    main()
