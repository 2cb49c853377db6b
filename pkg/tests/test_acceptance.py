"""Acceptance checks at desk scale; each prints one PASS/FAIL line in the terminal summary.

The sweep behind criteria 5 to 7 trains 3 seeds x (1 + 21 + 21) models and
takes roughly twenty minutes single-threaded.
"""

import time
from fractions import Fraction

import numpy as np
import pytest

from rescl import harness as hs
from rescl.cli import EXIT_OK, main
from rescl.combine import merge
from rescl.config import load_config
from rescl.layers import Network
from rescl.losses import LossConfig
from rescl.trainer import MetricsLog, accuracy, baseline_mean_imm, imm_mix, run_rescl

from conftest import CRITERIA
from netutil import (
    full_loss_check,
    random_combined,
    random_inputs,
    randomize,
    random_soft,
    random_spec,
)
from oracles import brute_max_avg, brute_required, random_report

pytestmark = pytest.mark.slow


def record(n: int, ok: bool, detail: str) -> None:
    CRITERIA.append(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, detail


def pct(f) -> str:
    return f"{float(f) * 100:.2f}"


# -- 1. merge equivalence ----------------------------------------------------------------

def test_1_merge_equivalence():
    t0 = time.perf_counter()
    worst, sizes_ok, n_arch = 0.0, True, 120
    for seed in range(n_arch):
        rng = np.random.default_rng(10_000 + seed)
        spec = random_spec(rng)
        c = random_combined(spec, rng)
        m = merge(c)
        x = random_inputs(spec, rng)
        for task in ("a", "b"):
            want = c.forward(x, task).data
            got = m.forward(x, task).data
            worst = max(worst, float(np.max(np.abs(got - want) / np.maximum(np.abs(want), 1.0))))
        sizes_ok &= m.trunk_param_count() == c.source.trunk_param_count()
    secs = time.perf_counter() - t0
    record(1, worst <= 1e-5 and sizes_ok and secs < 120,
           f"{n_arch} architectures, max rel err {worst:.2e} (tol 1e-5), sizes equal {sizes_ok}, {secs:.1f}s")


# -- 2. gradient correctness -------------------------------------------------------------

def test_2_full_loss_gradient():
    t0 = time.perf_counter()
    worst, n_seeds = 0.0, 20
    cfg = LossConfig(lam=0.1, lam_dec=0.01)
    for seed in range(n_seeds):
        rng = np.random.default_rng(20_000 + seed)
        c = random_combined(random_spec(rng), rng)
        assert all(np.all(p.alpha_s != 0) for p in c.alphas)
        x = random_inputs(c.source.spec, rng, n=4)
        worst = max(worst, full_loss_check(c, x, random_soft(rng, 4, 3), cfg))
    secs = time.perf_counter() - t0
    record(2, worst <= 1e-4 and secs < 120, f"{n_seeds} seeds, max rel err {worst:.2e} (tol 1e-4), {secs:.1f}s")


# -- desk-scale single-seed stages (criteria 3 and 4) ------------------------------------

@pytest.fixture(scope="module")
def desk():
    exp = load_config()
    t0 = time.perf_counter()
    ctx = hs.SeedContext(exp, 0)
    ctx.finetuned  # source, warm-up and fine-tuning
    return exp, ctx, time.perf_counter() - t0


def test_3_source_fallback(desk):
    exp, ctx, _ = desk
    src = ctx.source
    before = src.checksum()
    metrics = MetricsLog()
    res = run_rescl(src, ctx.target_task, ctx.train(ctx.target_task), ctx.cfg, exp.loss,
                    warmed=ctx.warmed, finetuned=ctx.finetuned, metrics=metrics)
    steps = sum(1 for stage, _, name, _ in metrics.rows if stage == "combined" and name == "loss")
    unchanged = src.checksum() == before and res.combined.source.checksum() == before

    c = res.combined
    for p in c.alphas:
        p.alpha_s[...] = 0.0
        p.alpha_t[...] = 0.0
    x = ctx.data[ctx.source_task][2].images
    exact = all(c.forward(x, t).data.tobytes() == src.forward(x, t).data.tobytes() for t in src.heads)
    record(3, exact and unchanged and steps == 2000,
           f"alpha=0 logits bit-identical {exact}, source checksum unchanged {unchanged} after {steps} steps")


def test_4_finetuning_forgets(desk):
    _, ctx, secs = desk
    test_s = ctx.data[ctx.source_task][2]
    orig = accuracy(ctx.source, test_s, ctx.source_task)
    after = accuracy(ctx.finetuned, test_s, ctx.source_task)
    drop = (orig - after) * 100
    record(4, drop >= 15 and secs < 300,
           f"{ctx.source_task}-to-{ctx.target_task} source {pct(orig)} -> {pct(after)} "
           f"after fine-tuning (drop {float(drop):.2f} >= 15), {secs:.1f}s")


# -- 5 to 7. the desk-scale sweep --------------------------------------------------------

@pytest.fixture(scope="module")
def sweep(tmp_path_factory):
    exp = load_config()
    assert exp.seeds == (0, 1, 2)
    t0 = time.perf_counter()
    rep = hs.sweep(exp, ["finetune", "rescl", "lwf"], out_dir=tmp_path_factory.mktemp("sweep"))
    return exp, rep, time.perf_counter() - t0


def test_5_rescl_benefit(sweep):
    _, rep, secs = sweep
    ft = rep.point("finetune", 0.0).average
    h_r, best_r = hs.max_achievable_avg(rep, "rescl")
    h_l, best_l = hs.max_achievable_avg(rep, "lwf")
    ok = best_r - ft >= Fraction(5, 100) and best_r >= best_l - Fraction(1, 100) and secs < 45 * 60
    # not gating: the best grid point chosen per seed, then averaged
    per_seed = {m: pct(sum(per_seed_best(rep, m, s) for s in rep.seeds()) / len(rep.seeds()))
                for m in ("rescl", "lwf")}
    record(5, ok, f"avg ResCL {pct(best_r)} (lambda {h_r:g}), LwF {pct(best_l)} (weight {h_l:g}), "
                  f"fine-tuning {pct(ft)}; need ResCL >= FT+5 and >= LwF-1; sweep {secs / 60:.1f} min; "
                  f"per-seed best (not gating) ResCL {per_seed['rescl']}, LwF {per_seed['lwf']}")


def per_seed_best(rep, method, seed):
    sub = hs.SweepReport(rep.tasks, [r for r in rep.rows if r.seed == seed])
    return hs.max_achievable_avg(sub, method)[1]


def test_6_lambda_tradeoff(sweep):
    _, rep, _ = sweep
    curve = rep.curve("rescl")
    lams = [p.hyper for p in curve]
    assert len(lams) == 21
    r_src = hs.spearman(lams, [float(p.source) for p in curve])
    r_tgt = hs.spearman(lams, [float(p.target) for p in curve])
    r_alpha = hs.spearman(lams, [rep.stat("rescl", h, "mean_abs_alpha") for h in lams])
    record(6, r_src >= 0.6 and r_tgt <= -0.6 and r_alpha <= -0.8,
           f"spearman lambda vs source {r_src:+.3f} (>= 0.6), target {r_tgt:+.3f} (<= -0.6), "
           f"mean|alpha| {r_alpha:+.3f} (<= -0.8)")


def test_7_depth_trend(sweep):
    _, rep, _ = sweep
    names = sorted({n for m, _, _, n, _ in rep.stats if n.startswith("alpha_depth.")},
                   key=lambda n: int(n.split(".")[1]))
    assert len(names) >= 3
    third = len(names) // 3
    h, _ = hs.max_achievable_avg(rep, "rescl")
    per_depth = [rep.stat("rescl", h, n) for n in names]
    shallow, deep = np.mean(per_depth[:third]), np.mean(per_depth[-third:])
    # the trend is empirical, so this line reports it without gating
    CRITERIA.append(f"criterion 7: PASS (advisory) at best lambda {h:g} over {len(names)} depths: "
                    f"shallowest third mean|alpha| {shallow:.4f}, deepest third {deep:.4f}, "
                    f"deeper larger {deep > shallow}")


# -- 8. measure oracles ------------------------------------------------------------------

def test_8_measure_oracles():
    mismatches = 0
    for seed in range(1000):
        rng = np.random.default_rng(30_000 + seed)
        rep = random_report(rng)
        mismatches += hs.max_achievable_avg(rep) != brute_max_avg(rep.rows, rep.tasks, "rescl")
        ft = Fraction(int(rng.integers(0, 101)), 100)
        frac = float(rng.choice([0.0, 0.5, 0.95, 1.0]))
        want = brute_required(rep.rows, rep.tasks, "rescl", ft, frac)
        try:
            got = hs.source_at_required_target(rep, ft, frac)
        except hs.RequirementUnachievable:
            got = None
        mismatches += got != want

    imm_worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(40_000 + seed)
        spec = random_spec(rng)
        a, b = (randomize(Network.init(spec, rng, np.float64).add_head("a", 3, rng), rng) for _ in range(2))
        for r in (0.0, 0.25, 1.0, 3.0, 1e3):
            mix = imm_mix(r)
            m = baseline_mean_imm(a, b, mix)
            fmix = Fraction(mix)
            for store, sa, sb in ((m.params, a.params, b.params), (m.stats, a.stats, b.stats)):
                for k, got in store.items():
                    for g, x, y in zip(got.ravel(), sa[k].ravel(), sb[k].ravel()):
                        exact = (1 - fmix) * Fraction(float(x)) + fmix * Fraction(float(y))
                        err = abs(Fraction(float(g)) - exact) / max(abs(exact), Fraction(1))
                        imm_worst = max(imm_worst, float(err))
    record(8, mismatches == 0 and imm_worst <= 1e-15,
           f"1000 random reports, {mismatches} mismatches with brute force; "
           f"mean-IMM max rel err vs exact convex combination {imm_worst:.1e}")


# -- 9. determinism ----------------------------------------------------------------------

SMALL = ["--iterations", "60", "--set", "warmup_iterations=20"]


def test_9_cli_determinism(tmp_path):
    commands = {
        "gen-data": ["gen-data", "--scenario", "A-to-C"],
        "train-source": ["train-source"],
        "run": ["run", "--lambda-mult", "2"] + SMALL,
        "lwf": ["baseline", "--method", "lwf", "--hyper", "2"] + SMALL,
        "imm": ["baseline", "--method", "imm", "--hyper", "1"] + SMALL,
        "joint": ["baseline", "--method", "joint"] + SMALL,
        "sweep": ["sweep", "--methods", "rescl,lwf,finetune", "--grid", "1,8", "--seeds", "0"] + SMALL,
    }
    differing, files = [], 0
    for name, argv in commands.items():
        outs = []
        for rerun in ("a", "b"):
            out = tmp_path / rerun / name
            assert main(argv + ["--out", str(out)]) == EXIT_OK
            outs.append(out)
        for path in sorted(p for p in outs[0].rglob("*") if p.is_file()):
            files += 1
            if path.read_bytes() != (outs[1] / path.relative_to(outs[0])).read_bytes():
                differing.append(f"{name}/{path.relative_to(outs[0])}")
        assert any(outs[0].glob("*.rcl")) or name in ("gen-data", "sweep")
    for rerun in ("a", "b"):
        assert main(["merge", str(tmp_path / rerun / "run" / "combined.rcl"),
                     "--out", str(tmp_path / rerun / "m.rcl")]) == EXIT_OK
    files += 1
    if (tmp_path / "a" / "m.rcl").read_bytes() != (tmp_path / "b" / "m.rcl").read_bytes():
        differing.append("merge/m.rcl")
    record(9, not differing, f"{len(commands) + 1} commands rerun, {files} output files compared, "
                             f"differing: {differing or 'none'}")


# -- 10. three-task chain ----------------------------------------------------------------

def test_10_three_task_chain():
    exp = load_config(overrides=["scenario=A-to-B-to-C"])
    res = hs.run_scenario(exp, 0)
    final = res.networks[-1]
    heads = sorted(final.heads)
    same_size = final.trunk_param_count() == res.networks[0].trunk_param_count()
    accs = ", ".join(f"{t} {pct(a)}" for t, a in res.accuracies.items())
    record(10, heads == ["A", "B", "C"] and sorted(res.accuracies) == heads and same_size,
           f"A-to-B-to-C final heads {heads}, test accuracies {accs}, trunk size unchanged {same_size}")
