#!/usr/bin/env python3
"""Plot per-round MSE and test accuracy from an airfl output directory.

usage: python3 plot_results.py [OUTPUT_DIR]
"""

import csv
import pathlib
import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def read_rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def main():
    root = pathlib.Path(sys.argv[1] if len(sys.argv) > 1 else pathlib.Path(__file__).parent)
    files = sorted((root / "rounds").glob("*.csv"))
    if not files:
        sys.exit(f"no per-round CSVs under {root / 'rounds'}")

    fig, (ax_mse, ax_acc) = plt.subplots(1, 2, figsize=(11, 4))
    for path in files:
        rows = read_rows(path)
        rounds = [int(r["round"]) for r in rows]
        ax_mse.semilogy(rounds, [float(r["mse_avg_analytic"]) for r in rows], label=path.stem)
        acc = [float(r["test_accuracy_avg"]) for r in rows]
        if all(a == a for a in acc):
            ax_acc.plot(rounds, acc, label=path.stem)

    ax_mse.set_xlabel("round")
    ax_mse.set_ylabel("average MSE")
    ax_acc.set_xlabel("round")
    ax_acc.set_ylabel("average test accuracy")
    ax_mse.legend(fontsize="x-small")
    ax_acc.legend(fontsize="x-small")
    fig.tight_layout()
    out = root / "results.png"
    fig.savefig(out, dpi=150)
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
