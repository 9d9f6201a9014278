"""Per-model SRmask spread across softmax temperatures on the toy ensemble."""

import argparse
import json
import time

from aef.experiments import temperature_experiment, toy_config


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--size", type=int, default=16)
    ap.add_argument("--n-train", type=int, default=32)
    ap.add_argument("--pretrain-steps", type=int, default=300)
    ap.add_argument("--t-out", type=int, default=30)
    ap.add_argument("--temperatures", default="0.1,1.0,3.0")
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--json", help="write the full result here")
    args = ap.parse_args()

    t0 = time.time()
    temps = tuple(float(t) for t in args.temperatures.split(","))
    cfg = toy_config(args.size, args.n_train, args.pretrain_steps, args.t_out)
    res = temperature_experiment(cfg, [int(s) for s in args.seeds.split(",")], temps)
    for seed in res["std"]:
        sr = " ".join(f"{v:6.2f}" for v in res["std"][seed])
        l2 = " ".join(f"{v:.5f}" for v in res["l2mask_std"][seed])
        print(f"seed {seed}: SRmask std {sr} | L2mask std {l2} | rho {res['rho_per_seed'][seed]:+.2f}")
    print(f"pooled rho {res['rho']:+.3f}  L2mask rho {res['l2mask_rho']:+.3f}  ({time.time() - t0:.0f} s)")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(res, fh, indent=1, sort_keys=True, default=str)


if __name__ == "__main__":
    main()
