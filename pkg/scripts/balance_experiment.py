"""Adaptive vs static weighting on the asymmetric 4-model ensemble (blur 0/0/1/2)."""

import argparse
import json
import time

from aef.experiments import balance_experiment, toy_config


def _fmt(d):
    return " ".join(f"{k}={v:.4f}" for k, v in d.items())


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--n-train", type=int, default=32)
    ap.add_argument("--pretrain-steps", type=int, default=500)
    ap.add_argument("--t-out", type=int, default=30)
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--json", help="write the full result here")
    args = ap.parse_args()

    t0 = time.time()
    cfg = toy_config(args.size, args.n_train, args.pretrain_steps, args.t_out)
    res = balance_experiment(cfg, [int(s) for s in args.seeds.split(",")])
    for seed, t in res["trials"].items():
        a, s = t["adaptive"], t["static"]
        print(f"seed {seed}: adaptive min {a['min']:6.2f} std {a['std']:6.2f} | "
              f"static min {s['min']:6.2f} std {s['std']:6.2f} | per-model {a['per_model']} vs {s['per_model']}")
        print(f"        L2mask adaptive {_fmt(a['l2mask'])} | static {_fmt(s['l2mask'])}")
    print(f"min wins {res['min_wins']}/{res['n']}  std wins {res['std_wins']}/{res['n']}  "
          f"L2mask min wins {res['l2mask_min_wins']}/{res['n']}  L2mask std wins {res['l2mask_std_wins']}/{res['n']}  "
          f"({time.time() - t0:.0f} s)")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(res, fh, indent=1, sort_keys=True, default=str)


if __name__ == "__main__":
    main()
