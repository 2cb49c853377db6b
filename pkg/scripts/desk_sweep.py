"""Desk-scale grid sweep with a one-screen summary.

    python3 scripts/desk_sweep.py --out runs/a_to_c
    python3 scripts/desk_sweep.py --out runs/a_to_b --scenario A-to-B --methods finetune,rescl --seeds 0
"""

import argparse
import logging
import time

from rescl import harness as hs
from rescl.config import load_config


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", required=True)
    p.add_argument("--scenario", default="A-to-C")
    p.add_argument("--methods", default="finetune,rescl,lwf")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    exp = load_config(overrides=[f"scenario={args.scenario}", f"seeds={args.seeds}", *args.set])
    t0 = time.perf_counter()
    rep = hs.sweep(exp, args.methods.split(","), out_dir=args.out)
    print(f"sweep finished in {(time.perf_counter() - t0) / 60:.1f} min; report {args.out}/report.csv")

    ft_val = rep.point("finetune", 0.0, "val").target if "finetune" in rep.methods() else None
    print("method,best_hyper,max_avg,source_at_required_target")
    for m in rep.methods():
        h, v = hs.max_achievable_avg(rep, m)
        req = "n/a"
        if ft_val is not None and m != "finetune":
            try:
                hr, src = hs.source_at_required_target(rep, ft_val, 0.95, m)
                req = f"{hs.percent(src)} (hyper {hr:g})"
            except hs.RequirementUnachievable:
                req = "unachievable"
        print(f"{m},{h:g},{hs.percent(v)},{req}")


if __name__ == "__main__":
    main()
