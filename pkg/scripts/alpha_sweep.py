"""Sweep the feature-shift scale alpha through the CLI harness and print per-model SRmask."""

import argparse

from aef.config import load_config
from aef.experiments import toy_config
from aef.harness import cmd_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", help="config file; defaults to the 16x16 toy ensemble")
    ap.add_argument("--values", default="0,0.4,0.8,1.2")
    ap.add_argument("--param", default="alpha")
    ap.add_argument("--out", default="out/alpha_sweep")
    args = ap.parse_args()

    cfg = load_config(args.config) if args.config else toy_config(16, 32, 300)
    groups = cmd_sweep(cfg, args.param, [float(v) for v in args.values.split(",")], args.out)
    for label, g in groups.items():
        per = " ".join(f"{m}={v:6.2f}" for m, v in g["per_model"].items())
        print(f"{label:12s} {per} | mean {g['mean']:6.2f} std {g['std']:6.2f} min {g['min']:6.2f}")


if __name__ == "__main__":
    main()
