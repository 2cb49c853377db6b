from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rescl import harness as hs
from rescl.config import load_config
from rescl.harness import RequirementUnachievable, Row, SweepReport

from oracles import brute_max_avg, brute_required, random_report


def report_from_pairs(pairs, hypers=None, method="rescl", splits=("val", "test")):
    """Two-task report with one seed; ``pairs`` are (source %, target %) per grid point."""
    hypers = hypers or [1e-4 * 2.0 ** k for k in range(len(pairs))]
    rows = []
    for h, (src, tgt) in zip(hypers, pairs):
        for split in splits:
            rows += [Row(method, h, 0, split, "A", src, 100), Row(method, h, 0, split, "C", tgt, 100)]
    return SweepReport(("A", "C"), rows)


# -- maximum achievable average ----------------------------------------------------------

def test_max_avg_hand_example():
    rep = report_from_pairs([(90, 60), (85, 70), (80, 72)])
    h, best = hs.max_achievable_avg(rep)
    assert best == Fraction(775, 1000) and h == rep.hypers("rescl")[1]
    assert [p.average for p in rep.curve("rescl")] == [Fraction(75, 100), Fraction(775, 1000), Fraction(76, 100)]


def test_max_avg_single_row():
    rep = report_from_pairs([(40, 50)], hypers=[3.0])
    assert hs.max_achievable_avg(rep) == (3.0, Fraction(45, 100))


def test_max_avg_ties_go_to_larger_hyper():
    rep = report_from_pairs([(80, 70), (70, 80), (60, 70)], hypers=[1.0, 2.0, 4.0])
    assert hs.max_achievable_avg(rep)[0] == 2.0


def test_max_avg_empty_report():
    with pytest.raises(ValueError):
        hs.max_achievable_avg(SweepReport(("A", "C")))


def test_average_uses_all_learned_tasks():
    rows = [Row("rescl", 1.0, 0, "test", t, c, 10) for t, c in (("A", 9), ("B", 6), ("C", 3))]
    p = SweepReport(("A", "B", "C"), rows).point("rescl", 1.0)
    assert p.average == Fraction(18, 30) and p.source == Fraction(15, 20) and p.target == Fraction(3, 10)


def test_seed_mean():
    rows = [Row("lwf", 1.0, s, "test", t, c, 10) for s, (a, b) in enumerate([(8, 4), (6, 2)]) for t, c in (("A", a), ("C", b))]
    p = SweepReport(("A", "C"), rows).point("lwf", 1.0)
    assert p.source == Fraction(7, 10) and p.target == Fraction(3, 10) and p.average == Fraction(1, 2)


# -- source accuracy at required target accuracy -----------------------------------------

def test_required_target_hand_example():
    rep = report_from_pairs([(60, 79), (70, 77), (80, 70)])
    h, src = hs.source_at_required_target(rep, Fraction(80, 100))
    assert h == rep.hypers("rescl")[1] and src == Fraction(70, 100)


def test_required_target_zero_fraction_picks_largest():
    rep = report_from_pairs([(60, 79), (70, 77), (80, 70)])
    assert hs.source_at_required_target(rep, Fraction(80, 100), fraction=0.0) == (rep.hypers("rescl")[-1],
                                                                                   Fraction(80, 100))


def test_required_target_unachievable():
    rep = report_from_pairs([(60, 79), (70, 77), (80, 70)])
    with pytest.raises(RequirementUnachievable):
        hs.source_at_required_target(rep, Fraction(99, 100))


def test_required_target_selects_on_validation_and_reports_test():
    rows = [Row("rescl", 1.0, 0, "val", "C", 90, 100), Row("rescl", 1.0, 0, "val", "A", 10, 100),
            Row("rescl", 1.0, 0, "test", "C", 10, 100), Row("rescl", 1.0, 0, "test", "A", 55, 100),
            Row("rescl", 2.0, 0, "val", "C", 50, 100), Row("rescl", 2.0, 0, "val", "A", 99, 100),
            Row("rescl", 2.0, 0, "test", "C", 99, 100), Row("rescl", 2.0, 0, "test", "A", 99, 100)]
    assert hs.source_at_required_target(SweepReport(("A", "C"), rows), Fraction(80, 100)) == (1.0, Fraction(55, 100))


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_measures_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    rep = random_report(rng)
    assert hs.max_achievable_avg(rep) == brute_max_avg(rep.rows, rep.tasks, "rescl")
    ft = Fraction(int(rng.integers(0, 101)), 100)
    frac = float(rng.choice([0.0, 0.5, 0.95, 1.0]))
    want = brute_required(rep.rows, rep.tasks, "rescl", ft, frac)
    if want is None:
        with pytest.raises(RequirementUnachievable):
            hs.source_at_required_target(rep, ft, frac)
    else:
        h, src = hs.source_at_required_target(rep, ft, frac)
        assert (h, src) == want
        assert rep.point("rescl", h, "val").target >= Fraction(frac).limit_denominator(10 ** 9) * ft


# -- reports -----------------------------------------------------------------------------

def test_csv_roundtrip_keeps_exact_fractions(tmp_path):
    rep = random_report(np.random.default_rng(1))
    rep.provenance = {"config_sha256": "abc"}
    rep.stats = [("rescl", rep.hypers("rescl")[0], 0, "mean_abs_alpha", 0.25)]
    text = rep.to_csv()
    assert text.splitlines()[0] == "method,hyper,seed,split,task,accuracy"
    assert "/" in text.splitlines()[1].split(",")[-1]
    assert hs.rows_from_csv(text) == rep.rows
    rep.save(tmp_path / "report.csv")
    back = hs.load_report(tmp_path / "report.csv")
    assert back.rows == rep.rows and back.tasks == rep.tasks and back.stats == rep.stats
    assert "config_sha256=abc" in (tmp_path / "report.csv.manifest").read_text()


def test_fraction_formatting():
    assert hs.fmt_fraction(Fraction(3, 4)) == "3/4"
    assert hs.parse_fraction("3/4") == Fraction(3, 4)
    assert hs.percent(Fraction(7751, 10000)) == "77.51"


def test_spearman():
    assert hs.spearman([1, 2, 3, 4], [10, 20, 30, 40]) == pytest.approx(1.0)
    assert hs.spearman([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0)
    assert hs.spearman([1, 1, 1], [1, 2, 3]) == 0.0
    x, y = [1, 2, 3, 4, 5], [2, 1, 4, 3, 5]
    d = np.array([1, -1, 1, -1, 0])
    assert hs.spearman(x, y) == pytest.approx(1 - 6 * (d ** 2).sum() / (5 * 24))
    # ties get average ranks: ranks of y are [1.5, 1.5, 3]
    assert hs.spearman([1, 2, 3], [5, 5, 6]) == pytest.approx(np.corrcoef([1, 2, 3], [1.5, 1.5, 3])[0, 1])


def test_default_grids():
    exp = load_config()
    g = hs.default_grid("rescl", exp)
    assert len(g) == 21 and g[10] == 1e-4 and g[0] == 1e-4 * 2.0 ** -10 and g[-1] == 1e-4 * 2.0 ** 10
    assert hs.default_grid("lwf", exp)[10] == 1.0
    assert hs.default_grid("finetune", exp) == [0.0]
    with pytest.raises(ValueError):
        hs.default_grid("adam", exp)


# -- a tiny real sweep -------------------------------------------------------------------

TINY = ["iterations=20", "warmup_iterations=10", "seeds=0,1", "batch_size=16"]


def test_tiny_sweep_counts_and_rerun(tmp_path):
    exp = load_config(overrides=TINY)
    rep = hs.sweep(exp, ["rescl"], {"rescl": [1e-4]}, out_dir=tmp_path / "s")
    per_point = {(r.seed, r.hyper) for r in rep.rows}
    assert len(per_point) == len(exp.seeds)
    assert len(rep.rows) == len(exp.seeds) * 4
    assert rep.stat("rescl", 1e-4, "mean_abs_alpha") > 0
    first = (tmp_path / "s" / "report.csv").read_bytes()
    # rerun from the part files, then from scratch
    hs.sweep(exp, ["rescl"], {"rescl": [1e-4]}, out_dir=tmp_path / "s")
    assert (tmp_path / "s" / "report.csv").read_bytes() == first
    hs.sweep(exp, ["rescl"], {"rescl": [1e-4]}, out_dir=tmp_path / "fresh")
    assert (tmp_path / "fresh" / "report.csv").read_bytes() == first


def test_sweep_rejects_unknown_method_and_chains():
    exp = load_config(overrides=TINY)
    with pytest.raises(ValueError):
        hs.sweep(exp, ["adam"])
    with pytest.raises(ValueError):
        hs.SeedContext(load_config(overrides=TINY + ["scenario=A-to-B-to-C"]), 0)
