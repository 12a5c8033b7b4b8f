"""Contrastive weight on vs off: paired SR/SPL over training seeds.

    python scripts/alpha_ablation.py --out out/alpha --values 0 0.25 0.5 1.0
"""

import argparse
from collections import defaultdict

import numpy as np

from wpcl.cli import load_config, report, run_ablation


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--out", required=True)
    ap.add_argument("--values", type=float, nargs="+", default=[0.0, 0.5])
    ap.add_argument("--split", default="val_unseen")
    ap.add_argument("--seeds", type=int, nargs="+")
    args = ap.parse_args()

    cfg = load_config(args.config)
    rows = run_ablation(cfg, "alpha", args.values, args.out, split=args.split, seeds=args.seeds)
    sr, spl = defaultdict(dict), defaultdict(dict)
    for r in rows:
        sr[r[1]][r[3]], spl[r[1]][r[3]] = r[6], r[7]
    base = min(args.values)
    print(report([f"{args.out}/ablation_alpha.csv"]))
    for v in args.values:
        if v == base:
            continue
        seeds = sorted(sr[v])
        d_sr = np.array([sr[v][s] - sr[base][s] for s in seeds])
        d_spl = np.array([spl[v][s] - spl[base][s] for s in seeds])
        print(f"alpha={v:g} vs {base:g}: SR {d_sr.mean():+.3f} (wins {int((d_sr > 0).sum())}/{len(seeds)}), "
              f"SPL {d_spl.mean():+.3f} (wins {int((d_spl > 0).sum())}/{len(seeds)})")


if __name__ == "__main__":
    main()
