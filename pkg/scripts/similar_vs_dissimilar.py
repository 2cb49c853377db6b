"""Forgetting and the best lambda on a similar pair (A-to-B) against a dissimilar one (A-to-C).

    python3 scripts/similar_vs_dissimilar.py --out runs/pairs --seeds 0
"""

import argparse
import logging
from pathlib import Path

from rescl import harness as hs
from rescl.config import load_config


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default="0")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    print("scenario,ft_source,ft_target,lastlayer_source,best_lambda,rescl_avg,rescl_source,rescl_target")
    for scenario in ("A-to-B", "A-to-C"):
        exp = load_config(overrides=[f"scenario={scenario}", f"seeds={args.seeds}"])
        rep = hs.sweep(exp, ["lastlayer", "finetune", "rescl"], out_dir=Path(args.out) / scenario)
        ft = rep.point("finetune", 0.0)
        ll = rep.point("lastlayer", 0.0)
        h, avg = hs.max_achievable_avg(rep, "rescl")
        best = rep.point("rescl", h)
        print(f"{scenario},{hs.percent(ft.source)},{hs.percent(ft.target)},{hs.percent(ll.source)},"
              f"{h:g},{hs.percent(avg)},{hs.percent(best.source)},{hs.percent(best.target)}")


if __name__ == "__main__":
    main()
