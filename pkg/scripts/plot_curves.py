"""Plot two-column (step, loss) curves written by the train commands.

usage: python scripts/plot_curves.py run/diffusion_loss.txt [more.txt ...] -o curves.png
"""

import argparse
from pathlib import Path

import numpy as np


def load_curve(path):
    data = np.loadtxt(path, ndmin=2)
    return data[:, 0], data[:, 1]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("curves", nargs="+", type=Path)
    ap.add_argument("-o", "--output", type=Path, default=Path("curves.png"))
    ap.add_argument("--smooth", type=int, default=1, help="moving-average window in samples")
    ap.add_argument("--linear", action="store_true", help="linear instead of log loss axis")
    args = ap.parse_args(argv)

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    for path in args.curves:
        step, loss = load_curve(path)
        if args.smooth > 1 and len(loss) >= args.smooth:
            kernel = np.ones(args.smooth) / args.smooth
            loss = np.convolve(loss, kernel, mode="valid")
            step = step[args.smooth - 1:]
        ax.plot(step, loss, label=path.stem)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    if not args.linear:
        ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(args.output, dpi=120)
    print(f"wrote {args.output}")


if __name__ == "__main__":
    main()
