"""Leave-one-out transfer: is the held-out model disrupted less than the trained-on ones?"""

import argparse
import json
import time

from aef.experiments import holdout_experiment, toy_config


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--size", type=int, default=16)
    ap.add_argument("--n-train", type=int, default=32)
    ap.add_argument("--pretrain-steps", type=int, default=300)
    ap.add_argument("--t-out", type=int, default=30)
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--json", help="write the full result here")
    args = ap.parse_args()

    t0 = time.time()
    cfg = toy_config(args.size, args.n_train, args.pretrain_steps, args.t_out)
    res = holdout_experiment(cfg, [int(s) for s in args.seeds.split(",")])
    for seed, r in res["seeds"].items():
        for excl, f in r["folds"].items():
            print(f"seed {seed} hold out {excl}: SRmask black {f['black_box']:6.2f} white {f['white_box_mean']:6.2f} | "
                  f"L2mask black {f['l2mask_black']:.5f} white {f['l2mask_white_mean']:.5f}")
        print(f"seed {seed}: {r['passed']}/4 folds (L2mask {r['l2mask_passed']}/4)")
    print(f"({time.time() - t0:.0f} s)")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(res, fh, indent=1, sort_keys=True, default=str)


if __name__ == "__main__":
    main()
