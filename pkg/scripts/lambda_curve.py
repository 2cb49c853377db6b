"""Accuracy and mean|alpha| along the ResCL lambda grid of a sweep report.

    python3 scripts/lambda_curve.py runs/a_to_c/report.csv
"""

import argparse

import numpy as np

from rescl import harness as hs


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("report")
    p.add_argument("--method", default="rescl")
    args = p.parse_args()
    rep = hs.load_report(args.report)
    curve = rep.curve(args.method)
    print("lambda,source,target,average,mean_abs_alpha")
    alphas = []
    for pt in curve:
        try:
            a = rep.stat(args.method, pt.hyper, "mean_abs_alpha")
        except KeyError:
            a = float("nan")
        alphas.append(a)
        print(f"{pt.hyper:g},{hs.percent(pt.source)},{hs.percent(pt.target)},{hs.percent(pt.average)},{a:.5f}")
    lams = [pt.hyper for pt in curve]
    print(f"spearman(lambda, source) = {hs.spearman(lams, [float(p.source) for p in curve]):+.3f}")
    print(f"spearman(lambda, target) = {hs.spearman(lams, [float(p.target) for p in curve]):+.3f}")
    if not np.isnan(alphas).any():
        print(f"spearman(lambda, mean|alpha|) = {hs.spearman(lams, alphas):+.3f}")

    names = sorted({n for m, _, _, n, _ in rep.stats if m == args.method and n.startswith("alpha_depth.")},
                   key=lambda n: int(n.split(".")[1]))
    if names:
        h, _ = hs.max_achievable_avg(rep, args.method)
        print(f"per-depth mean|alpha| at best lambda {h:g}")
        for n in names:
            print(f"  depth {n.split('.')[1]}: {rep.stat(args.method, h, n):.5f}")


if __name__ == "__main__":
    main()
