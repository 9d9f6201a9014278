"""Single-model attack strength against input blur, for every paradigm."""

import argparse
import time

from aef.experiments import blur_curve
from aef.surrogates import PARADIGMS


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--size", type=int, default=16)
    ap.add_argument("--pretrain-steps", type=int, default=100)
    ap.add_argument("--sigmas", default="0,1,2")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    t0 = time.time()
    sigmas = tuple(float(s) for s in args.sigmas.split(","))
    for paradigm in PARADIGMS:
        curve = blur_curve(paradigm, sigmas, args.size, args.pretrain_steps, args.seed)
        mono = all(a > b for a, b in zip(curve, curve[1:]))
        print(f"{paradigm:17s} " + " ".join(f"{v:.5f}" for v in curve) + ("  strictly decreasing" if mono else ""))
    print(f"({time.time() - t0:.0f} s)")


if __name__ == "__main__":
    main()
