"""Sweeps over trade-off hyperparameters, reports, and the two fairness measures."""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import os
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .combine import alpha_stats, mean_abs_alpha
from .config import ExperimentConfig
from .data import Dataset, default_suite, gen_task, scenario_tasks, spec_hash
from .layers import Network, NetworkSpec, preact_resnet
from .trainer import (
    MetricsLog, accuracy, baseline_joint, baseline_lwf, baseline_mean_imm, correct_count, finetune,
    imm_mix, run_rescl, train_source, warmup_head,
)

log = logging.getLogger(__name__)

GRID_EXPONENTS = tuple(range(-10, 11))
GRID_METHODS = ("rescl", "lwf", "imm")
SINGLE_METHODS = ("finetune", "lastlayer", "joint")
METHODS = GRID_METHODS + SINGLE_METHODS
CSV_HEADER = ("method", "hyper", "seed", "split", "task", "accuracy")


class RequirementUnachievable(RuntimeError):
    pass


def fmt_fraction(f: Fraction) -> str:
    return f"{f.numerator}/{f.denominator}"


def parse_fraction(text: str) -> Fraction:
    num, _, den = text.partition("/")
    return Fraction(int(num), int(den or 1))


def percent(f: Fraction) -> str:
    return f"{float(f) * 100:.2f}"


@dataclass(frozen=True)
class Row:
    method: str
    hyper: float
    seed: int
    split: str
    task: str
    correct: int
    total: int

    @property
    def accuracy(self) -> Fraction:
        return Fraction(self.correct, self.total)


@dataclass(frozen=True)
class Point:
    """Seed-averaged accuracies of one grid point on one split."""

    hyper: float
    source: Fraction
    target: Fraction
    average: Fraction
    per_task: dict


@dataclass
class SweepReport:
    """Long-format accuracy rows plus task order and provenance.

    ``tasks`` lists tasks in learning order; the last one is the current
    target, all earlier ones count as source tasks.
    """

    tasks: tuple[str, ...]
    rows: list[Row] = field(default_factory=list)
    provenance: dict[str, str] = field(default_factory=dict)
    stats: list[tuple[str, float, int, str, float]] = field(default_factory=list)

    @property
    def target_task(self) -> str:
        return self.tasks[-1]

    @property
    def source_tasks(self) -> tuple[str, ...]:
        return self.tasks[:-1]

    def methods(self) -> list[str]:
        return sorted({r.method for r in self.rows})

    def hypers(self, method: str) -> list[float]:
        return sorted({r.hyper for r in self.rows if r.method == method})

    def seeds(self) -> list[int]:
        return sorted({r.seed for r in self.rows})

    def _method(self, method: str | None) -> str:
        if method is not None:
            return method
        ms = self.methods()
        if len(ms) != 1:
            raise ValueError(f"report holds several methods {ms}; pass one explicitly")
        return ms[0]

    def accuracy(self, method: str, hyper: float, split: str, task: str) -> Fraction:
        accs = [r.accuracy for r in self.rows
                if r.method == method and r.hyper == hyper and r.split == split and r.task == task]
        if not accs:
            raise KeyError(f"no rows for {method} hyper={hyper} split={split} task={task}")
        return sum(accs, Fraction(0)) / len(accs)

    def point(self, method: str, hyper: float, split: str = "test") -> Point:
        per = {t: self.accuracy(method, hyper, split, t) for t in self.tasks}
        src = sum((per[t] for t in self.source_tasks), Fraction(0)) / max(len(self.source_tasks), 1)
        avg = sum(per.values(), Fraction(0)) / len(per)
        return Point(hyper, src, per[self.target_task], avg, per)

    def curve(self, method: str, split: str = "test") -> list[Point]:
        return [self.point(method, h, split) for h in self.hypers(method)]

    def stat(self, method: str, hyper: float, name: str) -> float:
        vals = [v for m, h, _, n, v in self.stats if m == method and h == hyper and n == name]
        if not vals:
            raise KeyError(f"no stat {name!r} for {method} hyper={hyper}")
        return float(np.mean(vals))

    def extend(self, other: "SweepReport") -> None:
        if other.tasks != self.tasks:
            raise ValueError("reports cover different task sequences")
        self.rows += other.rows
        self.stats += other.stats

    # -- files ------------------------------------------------------------------------

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            w.writerow([r.method, repr(r.hyper), r.seed, r.split, r.task, f"{r.correct}/{r.total}"])
        return buf.getvalue()

    def stats_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("method", "hyper", "seed", "stat", "value"))
        for m, h, s, n, v in self.stats:
            w.writerow([m, repr(h), s, n, repr(v)])
        return buf.getvalue()

    def manifest(self) -> str:
        lines = [f"tasks={','.join(self.tasks)}"]
        lines += [f"{k}={v}" for k, v in sorted(self.provenance.items())]
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        path = Path(path)
        _atomic_write(path, self.to_csv())
        _atomic_write(path.with_name(path.name + ".manifest"), self.manifest())
        if self.stats:
            _atomic_write(path.with_name(path.name + ".stats"), self.stats_csv())


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def rows_from_csv(text: str) -> list[Row]:
    reader = csv.reader(io.StringIO(text))
    header = tuple(next(reader, ()))
    if header != CSV_HEADER:
        raise ValueError(f"unexpected report header {header}")
    rows = []
    for rec in reader:
        if not rec:
            continue
        method, hyper, seed, split, task, acc = rec
        f = acc.partition("/")
        rows.append(Row(method, float(hyper), int(seed), split, task, int(f[0]), int(f[2])))
    return rows


def stats_from_csv(text: str) -> list[tuple[str, float, int, str, float]]:
    reader = csv.reader(io.StringIO(text))
    next(reader, None)
    return [(m, float(h), int(s), n, float(v)) for m, h, s, n, v in reader]


def load_report(path) -> SweepReport:
    path = Path(path)
    rows = rows_from_csv(path.read_text(encoding="utf-8"))
    meta = {}
    mpath = path.with_name(path.name + ".manifest")
    if mpath.exists():
        for line in mpath.read_text(encoding="utf-8").splitlines():
            if "=" in line:
                k, v = line.split("=", 1)
                meta[k] = v
    tasks = tuple(meta.pop("tasks").split(",")) if "tasks" in meta else _infer_tasks(rows)
    report = SweepReport(tasks, rows, meta)
    spath = path.with_name(path.name + ".stats")
    if spath.exists():
        report.stats = stats_from_csv(spath.read_text(encoding="utf-8"))
    return report


def _infer_tasks(rows: Sequence[Row]) -> tuple[str, ...]:
    seen: list[str] = []
    for r in rows:
        if r.task not in seen:
            seen.append(r.task)
    return tuple(seen)


# -- measures -----------------------------------------------------------------------------

def max_achievable_avg(report: SweepReport, method: str | None = None,
                       split: str = "test") -> tuple[float, Fraction]:
    """Grid point with the best seed-averaged average accuracy; ties go to the larger value."""
    method = report._method(method) if report.rows else method
    hypers = report.hypers(method) if method is not None else []
    if not hypers:
        raise ValueError("empty report")
    best_h, best = None, None
    for h in hypers:  # ascending, so ">=" keeps the larger hyperparameter on ties
        avg = report.point(method, h, split).average
        if best is None or avg >= best:
            best_h, best = h, avg
    return best_h, best


def source_at_required_target(report: SweepReport, finetune_target_acc, fraction: float = 0.95,
                              method: str | None = None) -> tuple[float, Fraction]:
    """Largest hyperparameter whose validation target accuracy meets the requirement.

    The requirement is ``fraction * finetune_target_acc``; the returned value
    is that model's source test accuracy.
    """
    method = report._method(method) if report.rows else method
    hypers = report.hypers(method) if method is not None else []
    if not hypers:
        raise ValueError("empty report")
    required = Fraction(fraction).limit_denominator(10 ** 9) * Fraction(finetune_target_acc)
    ok = [h for h in hypers if report.point(method, h, "val").target >= required]
    if not ok:
        raise RequirementUnachievable(
            f"no {method} grid point reaches validation target accuracy {float(required):.4f}"
        )
    h = max(ok)
    return h, report.point(method, h, "test").source


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Rank correlation with average ranks for ties."""
    def ranks(v):
        v = np.asarray(v, dtype=np.float64)
        order = np.argsort(v, kind="mergesort")
        r = np.empty(len(v))
        i = 0
        while i < len(v):
            j = i
            while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
                j += 1
            r[order[i:j + 1]] = (i + j) / 2.0
            i = j + 1
        return r

    rx, ry = ranks(x), ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    den = np.sqrt((rx * rx).sum() * (ry * ry).sum())
    return float((rx * ry).sum() / den) if den > 0 else 0.0


# -- runs ---------------------------------------------------------------------------------

def scenario_spec(exp: ExperimentConfig) -> NetworkSpec:
    return preact_resnet((3, exp.image_size, exp.image_size), exp.widths, stem_pool=True)


def default_grid(method: str, exp: ExperimentConfig) -> list[float]:
    base = {"rescl": exp.rescl_base, "lwf": exp.lwf_base, "imm": exp.imm_base}
    if method in base:
        return [base[method] * 2.0 ** k for k in GRID_EXPONENTS]
    if method in SINGLE_METHODS:
        return [0.0]
    raise ValueError(f"unknown method {method!r}")


def suite_for(exp: ExperimentConfig, seed: int):
    suite = default_suite(seed)
    tasks = scenario_tasks(exp.scenario)
    missing = [t for t in tasks if t not in suite]
    if missing:
        raise ValueError(f"scenario {exp.scenario!r} uses unknown tasks {missing}")
    return {t: replace(suite[t], size=exp.image_size) for t in tasks}


def dataset_digest(exp: ExperimentConfig) -> str:
    h = hashlib.sha256()
    for seed in exp.seeds:
        for t, spec in suite_for(exp, seed).items():
            h.update(f"{seed}:{t}:{spec_hash(spec)}\n".encode())
    return h.hexdigest()


class SeedContext:
    """Datasets and the lambda-independent stages of one seed, computed lazily."""

    def __init__(self, exp: ExperimentConfig, seed: int, metrics: MetricsLog | None = None):
        tasks = scenario_tasks(exp.scenario)
        if len(tasks) != 2:
            raise ValueError("sweeps need a two-task scenario")
        self.exp = exp
        self.seed = seed
        self.cfg = exp.for_seed(seed)
        self.source_task, self.target_task = tasks
        self.data = {t: gen_task(s) for t, s in suite_for(exp, seed).items()}
        self.metrics = metrics
        self._cache: dict = {}

    def set_source(self, net: Network) -> None:
        """Use an already trained source network instead of training one."""
        self._cache = {"source": net}

    def _get(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    def train(self, task: str) -> Dataset:
        return self.data[task][0]

    @property
    def source(self) -> Network:
        return self._get("source", lambda: train_source(
            scenario_spec(self.exp), self.train(self.source_task), self.source_task, self.cfg,
            self.exp.loss, metrics=self.metrics))

    @property
    def warmed(self) -> Network:
        return self._get("warmed", lambda: warmup_head(
            self.source, self.target_task, self.train(self.target_task), self.cfg, self.exp.loss,
            self.metrics))

    @property
    def finetuned(self) -> Network:
        return self._get("finetuned", lambda: finetune(
            self.warmed, self.target_task, self.train(self.target_task), self.cfg, self.exp.loss,
            self.metrics))

    def lwf(self, mult: float) -> Network:
        return self._get(("lwf", mult), lambda: baseline_lwf(
            self.warmed, self.target_task, self.train(self.target_task), self.cfg, mult,
            self.exp.loss, self.metrics))

    def run(self, method: str, hyper: float):
        """Trained model for one grid point; ResCL also returns its alpha statistics."""
        stats: dict[str, float] = {}
        tgt = self.train(self.target_task)
        if method == "rescl":
            res = run_rescl(self.source, self.target_task, tgt, self.cfg,
                            replace(self.exp.loss, lam=hyper), warmed=self.warmed,
                            finetuned=self.finetuned, metrics=self.metrics)
            stats["mean_abs_alpha"] = mean_abs_alpha(res.combined)
            for row in alpha_stats(res.combined):
                stats[f"alpha_depth.{row.depth}"] = row.mean_abs
            return res.merged, stats
        if method == "lwf":
            return self.lwf(hyper), stats
        if method == "imm":
            return baseline_mean_imm(self.warmed, self.lwf(self.exp.imm_lwf_mult), imm_mix(hyper)), stats
        if method == "finetune":
            return self.finetuned, stats
        if method == "lastlayer":
            return self.warmed, stats
        if method == "joint":
            sets = {t: self.train(t) for t in (self.source_task, self.target_task)}
            return baseline_joint(self.warmed, sets, self.cfg, self.exp.loss, self.metrics), stats
        raise ValueError(f"unknown method {method!r}")

    def evaluate(self, method: str, hyper: float, model) -> list[Row]:
        rows = []
        for split, part in (("val", 1), ("test", 2)):
            for task in (self.source_task, self.target_task):
                ds = self.data[task][part]
                rows.append(Row(method, hyper, self.seed, split, task, correct_count(model, ds, task), len(ds)))
        return rows


def _part_name(method: str, hyper: float, seed: int) -> str:
    return f"{method}_{hyper!r}_{seed}.csv"


def sweep(exp: ExperimentConfig, methods: Iterable[str] = ("rescl",),
          grids: Mapping[str, Sequence[float]] | None = None, out_dir=None,
          contexts: dict[int, SeedContext] | None = None) -> SweepReport:
    """One full run per (method, grid point, seed).

    With ``out_dir`` every run writes its rows to its own part file, which a
    rerun reuses; the merged report is written last.
    """
    methods = list(methods)
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}")
    grids = dict(grids or {})
    tasks = scenario_tasks(exp.scenario)
    report = SweepReport(tuple(tasks), provenance={
        "config_sha256": exp.digest(), "datasets_sha256": dataset_digest(exp),
    })
    parts = Path(out_dir) / "parts" if out_dir is not None else None
    contexts = {} if contexts is None else contexts
    for seed in exp.seeds:
        for method in methods:
            for hyper in grids.get(method) or default_grid(method, exp):
                part = None if parts is None else parts / _part_name(method, hyper, seed)
                if part is not None and part.exists():
                    sub = SweepReport(tuple(tasks), rows_from_csv(part.read_text(encoding="utf-8")))
                    spath = part.with_name(part.name + ".stats")
                    if spath.exists():
                        sub.stats = stats_from_csv(spath.read_text(encoding="utf-8"))
                    report.extend(sub)
                    continue
                ctx = contexts.get(seed)
                if ctx is None:
                    ctx = contexts[seed] = SeedContext(exp, seed)
                log.info("seed %d %s hyper=%g", seed, method, hyper)
                model, stats = ctx.run(method, hyper)
                sub = SweepReport(tuple(tasks), ctx.evaluate(method, hyper, model),
                                  stats=[(method, hyper, seed, k, v) for k, v in stats.items()])
                if part is not None:
                    _atomic_write(part, sub.to_csv())
                    if sub.stats:
                        _atomic_write(part.with_name(part.name + ".stats"), sub.stats_csv())
                report.extend(sub)
    if out_dir is not None:
        report.save(Path(out_dir) / "report.csv")
    return report


@dataclass
class ScenarioResult:
    tasks: tuple[str, ...]
    networks: list[Network]  # source network, then the merged network after each step
    accuracies: dict[str, Fraction]  # final network on every learned task's test split
    combined: list  # CombinedNetwork per step


def run_scenario(exp: ExperimentConfig, seed: int, lam_mults: Sequence[float] | float = 1.0,
                 metrics: MetricsLog | None = None, source: Network | None = None) -> ScenarioResult:
    """Source training followed by one ResCL step per further task (chains allowed)."""
    tasks = scenario_tasks(exp.scenario)
    if isinstance(lam_mults, (int, float)):
        lam_mults = [float(lam_mults)] * (len(tasks) - 1)
    if len(lam_mults) != len(tasks) - 1:
        raise ValueError("need one lambda multiplier per ResCL step")
    cfg = exp.for_seed(seed)
    data = {t: gen_task(s) for t, s in suite_for(exp, seed).items()}
    net = source if source is not None else train_source(
        scenario_spec(exp), data[tasks[0]][0], tasks[0], cfg, exp.loss, metrics=metrics)
    nets, combos = [net], []
    for task, mult in zip(tasks[1:], lam_mults):
        res = run_rescl(net, task, data[task][0], cfg, replace(exp.loss, lam=exp.rescl_base * mult),
                        metrics=metrics)
        net = res.merged
        nets.append(net)
        combos.append(res.combined)
    accs = {t: accuracy(net, data[t][2], t) for t in tasks}
    return ScenarioResult(tuple(tasks), nets, accs, combos)
