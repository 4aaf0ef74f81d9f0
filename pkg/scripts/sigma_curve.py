"""Noise multiplier against epsilon for both accountants (MNIST and DIGITS settings).

Writes one CSV per setting and prints the epsilon = 1 values next to the
published reference numbers.
"""

import argparse
import csv
from pathlib import Path

import numpy as np

from dpvd.cli import sigma_curve

SETTINGS = {"mnist": (0.01, 20000), "digits": (0.05, 2000)}
REFERENCE = {"mnist": (8.24, 2.68), "digits": (9.73, 2.97)}  # (ac, zcdp) at epsilon = 1


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out-dir", default="out/sigma")
    parser.add_argument("--points", type=int, default=41)
    parser.add_argument("--delta", type=float, default=1e-5)
    args = parser.parse_args(argv)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    epsilons = sorted(set(np.logspace(-1, 1, args.points).tolist()) | {0.1, 1.0, 10.0})
    for name, (nu, t) in SETTINGS.items():
        rows = sigma_curve(epsilons, args.delta, nu, t)
        with open(out / f"sigma_{name}.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=("epsilon", "sigma_ac", "sigma_zcdp"))
            writer.writeheader()
            writer.writerows(rows)
        one = next(r for r in rows if r["epsilon"] == 1.0)
        ref_ac, ref_zcdp = REFERENCE[name]
        print(f"{name}: eps=1 sigma_ac={one['sigma_ac']:.3f} (ref {ref_ac}, x{one['sigma_ac'] / ref_ac:.2f}) "
              f"sigma_zcdp={one['sigma_zcdp']:.3f} (ref {ref_zcdp}, x{one['sigma_zcdp'] / ref_zcdp:.2f})")


if __name__ == "__main__":
    main()
