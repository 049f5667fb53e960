"""Train all seven models on the desk dataset and print the comparison table.

    python3 scripts/desk_experiment.py --seed 0 --epochs 500 --out results/desk
"""

import argparse
import logging

from windgat.experiment import desk_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=500)
    ap.add_argument("--out", default="results/desk")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    comp, checks, inline = desk_experiment(args.seed, args.epochs, args.out)
    print(comp.report.table())
    print()
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name}  ({c.detail})")
    print(f"inline E2V weights (senders {inline['senders']}): {inline['mean_weights']}")


if __name__ == "__main__":
    main()
