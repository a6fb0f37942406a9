"""Toy model seed sweep: print per-seed signatures and an ASCII view of one trajectory.

    python demos/toy_sweep.py --seeds 0-11
    python demos/toy_sweep.py --mu1 0 --seeds 0-3 --out /tmp/toy
"""

import argparse

import numpy as np

from coopetition import toy


def parse_range(text):
    if "-" in text:
        lo, hi = text.split("-")
        return list(range(int(lo), int(hi) + 1))
    return [int(s) for s in text.split(",")]


def sparkline(x, width=60):
    bars = " .:-=+*#%@"
    idx = np.linspace(0, len(x) - 1, width).astype(int)
    v = np.log10(np.maximum(x[idx], 1e-12))
    lo, hi = v.min(), v.max()
    scaled = (v - lo) / (hi - lo + 1e-12)
    return "".join(bars[int(s * (len(bars) - 1))] for s in scaled)


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--seeds", default="0-11")
    ap.add_argument("--mu1", type=float, default=0.1)
    ap.add_argument("--alpha", type=float, default=0.1)
    ap.add_argument("--steps", type=int, default=40000)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--out", help="write traces and summary.csv here")
    args = ap.parse_args()

    base = toy.ToyConfig(mu1=args.mu1, alpha=args.alpha, steps=args.steps)
    res = toy.toy_sweep(toy.seeds_configs(base, parse_range(args.seeds)), workers=args.workers)

    print(f"{'seed':>4} {'stuck':>5} {'trans':>5} {'divot':>5} {'m1 min':>9} {'m1 end':>9} "
          f"{'m2 end':>9} {'comp end':>9}")
    for r in res.rows:
        print(f"{r['seed']:>4} {r['plateau_stuck']!s:>5} {r['transient']!s:>5} {r['divot']!s:>5} "
              f"{r['mech1_min']:9.3g} {r['mech1_final']:9.3g} {r['mech2_final']:9.3g} "
              f"{r['competition_final']:9.3g}")

    # show the first seed that leaves the plateau
    for tr, r in zip(res.traces, res.rows):
        if not r["plateau_stuck"]:
            print(f"\nseed {r['seed']} (log scale, left to right over {args.steps} steps)")
            print("mech1 |" + sparkline(tr.mech1) + "|")
            print("mech2 |" + sparkline(tr.mech2) + "|")
            break

    if args.out:
        toy.write_outputs(res, args.out)
        print(f"\nwrote {args.out}/summary.csv")


if __name__ == "__main__":
    main()
