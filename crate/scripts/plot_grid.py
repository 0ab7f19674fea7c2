"""Plot a decision grid written by `neural-bayes export-grid`.

    python scripts/plot_grid.py grid.csv --data moons.csv --out grid.png

Needs matplotlib and numpy. The optional overlay takes a planar dataset CSV.
"""

import argparse
import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def read_grid(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    x = np.array([float(r["x"]) for r in rows])
    y = np.array([float(r["y"]) for r in rows])
    label = np.array([int(r["argmax_label"]) for r in rows])
    prob = np.array([float(r["max_prob"]) for r in rows])
    return x, y, label, prob


def read_points(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in r] for r in reader]
    if len(header) != 3:
        raise SystemExit(f"{path}: overlay needs a planar dataset, found {len(header) - 1} columns")
    pts = np.array(rows)
    return pts[:, 0], pts[:, 1], pts[:, 2].astype(int)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("grid")
    parser.add_argument("--data")
    parser.add_argument("--out", default="grid.png")
    args = parser.parse_args()

    x, y, label, prob = read_grid(args.grid)
    side = int(round(np.sqrt(len(x))))
    if side * side != len(x):
        raise SystemExit(f"{args.grid}: {len(x)} rows do not form a square grid")
    shape = (side, side)

    fig, ax = plt.subplots(figsize=(6, 6))
    ax.contourf(x.reshape(shape), y.reshape(shape), label.reshape(shape), levels=np.arange(label.max() + 2) - 0.5,
                cmap="coolwarm", alpha=0.35)
    ax.contour(x.reshape(shape), y.reshape(shape), prob.reshape(shape), levels=[0.6, 0.8, 0.95], colors="k",
               linewidths=0.5)
    if args.data:
        px, py, comp = read_points(args.data)
        ax.scatter(px, py, c=comp, cmap="coolwarm", s=6, edgecolors="none")
    ax.set_aspect("equal")
    fig.tight_layout()
    fig.savefig(args.out, dpi=150)


if __name__ == "__main__":
    main()
