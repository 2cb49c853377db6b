"""``rescl`` command line: data generation, training, baselines, merging, sweeps, measures."""

from __future__ import annotations

import os

# single-threaded BLAS keeps runs bit-reproducible; must precede the numpy import
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import logging
import sys
from fractions import Fraction
from pathlib import Path

from . import harness as hs
from .checkpoint import CheckpointError
from .combine import (
    CombinedNetwork, alpha_stats, bn_stats_dump, load_any, merge, save_combined,
)
from .config import ConfigError, ExperimentConfig, load_config
from .data import DatasetFormatError, gen_task, read_task, scenario_tasks, sha256_file, spec_hash, write_task
from .layers import Network, save_network
from .trainer import MetricsLog, TrainingDiverged, accuracy, correct_count, train_source

EXIT_OK, EXIT_USAGE, EXIT_BAD_INPUT, EXIT_DIVERGED, EXIT_UNACHIEVABLE = 0, 1, 2, 3, 4

log = logging.getLogger("rescl")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- helpers ------------------------------------------------------------------------------

def _config(args) -> ExperimentConfig:
    overrides = dict(kv.split("=", 1) for kv in _check_pairs(args.set or []))
    if getattr(args, "scenario", None):
        overrides["scenario"] = args.scenario
    if getattr(args, "iterations", None) is not None:
        overrides["iterations"] = str(args.iterations)
    if getattr(args, "seeds", None):
        overrides["seeds"] = args.seeds
    return load_config(args.config, overrides)


def _check_pairs(pairs):
    for kv in pairs:
        if "=" not in kv:
            raise UsageError(f"--set expects key=value, got {kv!r}")
    return pairs


def _datasets(exp: ExperimentConfig, seed: int, data_dir):
    """Scenario datasets, read from ``data_dir`` when given, else regenerated."""
    tasks = scenario_tasks(exp.scenario)
    if data_dir is None:
        return {t: gen_task(s) for t, s in hs.suite_for(exp, seed).items()}
    return {t: read_task(data_dir, t) for t in tasks}


def _dataset_lines(exp: ExperimentConfig, seed: int, data_dir) -> list[str]:
    if data_dir is None:
        return [f"dataset.{t}={spec_hash(s)}" for t, s in hs.suite_for(exp, seed).items()]
    lines = []
    for t in scenario_tasks(exp.scenario):
        for split in ("train", "val", "test"):
            lines.append(f"dataset.{t}.{split}={sha256_file(Path(data_dir) / f'{t}.{split}.rcld')}")
    return lines


def _write_manifest(out: Path, command: str, exp: ExperimentConfig, extra: list[str]) -> None:
    text = f"command={command}\nconfig_sha256={exp.digest()}\n" + "".join(l + "\n" for l in extra)
    text += "[config]\n" + exp.to_text()
    (out / "manifest.txt").write_text(text)


def _write_metrics(out: Path, metrics: MetricsLog) -> None:
    (out / "metrics.csv").write_text(metrics.to_csv())


def _eval_rows(report: hs.SweepReport, method: str, hyper: float, seed: int, model, data, tasks):
    for split, part in (("val", 1), ("test", 2)):
        for t in tasks:
            ds = data[t][part]
            report.rows.append(hs.Row(method, hyper, seed, split, t, correct_count(model, ds, t), len(ds)))


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- commands -----------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    exp = _config(args)
    out = _out_dir(args.out)
    suite = hs.suite_for(exp, args.seed)
    for spec in suite.values():
        write_task(out, spec)
        print(f"{spec.name}: {spec.family} {spec.n_train}/{spec.n_val}/{spec.n_test} -> {out}")
    return EXIT_OK


def cmd_train_source(args) -> int:
    exp = _config(args)
    out = _out_dir(args.out)
    task = scenario_tasks(exp.scenario)[0]
    data = _datasets(exp, args.seed, args.data)
    metrics = MetricsLog()
    net = train_source(hs.scenario_spec(exp), data[task][0], task, exp.for_seed(args.seed), exp.loss,
                       metrics=metrics)
    acc = accuracy(net, data[task][2], task)
    metrics.log("source", exp.train.iterations, f"test_accuracy.{task}", acc)
    save_network(out / "source.rcl", net)
    _write_metrics(out, metrics)
    _write_manifest(out, "train-source", exp, [f"seed={args.seed}", f"task={task}"]
                    + _dataset_lines(exp, args.seed, args.data))
    print(f"source {task}: test accuracy {hs.percent(acc)}")
    return EXIT_OK


def _load_network(path) -> Network:
    model = load_any(path)
    if isinstance(model, CombinedNetwork):
        raise UsageError(f"{path} holds a combined network; merge it first")
    return model


def cmd_run(args) -> int:
    exp = _config(args)
    out = _out_dir(args.out)
    tasks = scenario_tasks(exp.scenario)
    mults = [float(m) for m in args.lambda_mult.split(",")]
    if len(mults) == 1:
        mults = mults * (len(tasks) - 1)
    metrics = MetricsLog()
    source = _load_network(args.source) if args.source else None
    res = hs.run_scenario(exp, args.seed, mults, metrics=metrics, source=source)
    if source is None:
        save_network(out / "source.rcl", res.networks[0])
    save_combined(out / "combined.rcl", res.combined[-1])
    save_network(out / "merged.rcl", res.networks[-1])
    report = hs.SweepReport(tasks, provenance={"config_sha256": exp.digest()})
    data = _datasets(exp, args.seed, None)
    _eval_rows(report, "rescl", exp.rescl_base * mults[-1], args.seed, res.networks[-1], data, tasks)
    for t, acc in res.accuracies.items():
        metrics.log("final", exp.train.iterations, f"test_accuracy.{t}", acc)
    report.save(out / "report.csv")
    _write_metrics(out, metrics)
    _write_manifest(out, "run", exp, [f"seed={args.seed}", f"lambda_mult={args.lambda_mult}"]
                    + _dataset_lines(exp, args.seed, None))
    for t, acc in res.accuracies.items():
        print(f"{t}: test accuracy {hs.percent(acc)}")
    return EXIT_OK


def cmd_baseline(args) -> int:
    exp = _config(args)
    out = _out_dir(args.out)
    tasks = scenario_tasks(exp.scenario)
    if len(tasks) != 2:
        raise UsageError("baselines run on two-task scenarios")
    metrics = MetricsLog()
    ctx = hs.SeedContext(exp, args.seed, metrics)
    if args.source:
        ctx.set_source(_load_network(args.source))
    hyper = 0.0 if args.method in hs.SINGLE_METHODS else float(args.hyper)
    model, _ = ctx.run(args.method, hyper)
    save_network(out / "model.rcl", model)
    report = hs.SweepReport(tasks, ctx.evaluate(args.method, hyper, model),
                            {"config_sha256": exp.digest()})
    report.save(out / "report.csv")
    _write_metrics(out, metrics)
    _write_manifest(out, "baseline", exp, [f"seed={args.seed}", f"method={args.method}", f"hyper={hyper!r}"]
                    + _dataset_lines(exp, args.seed, None))
    for r in report.rows:
        if r.split == "test":
            print(f"{r.task}: test accuracy {hs.percent(r.accuracy)}")
    return EXIT_OK


def cmd_merge(args) -> int:
    model = load_any(args.checkpoint)
    if not isinstance(model, CombinedNetwork):
        raise UsageError(f"{args.checkpoint} is not a combined network")
    merged = merge(model)
    save_network(args.out, merged)
    print(f"merged trunk parameters: {merged.trunk_param_count()} "
          f"(source trunk {model.source.trunk_param_count()})")
    return EXIT_OK


def cmd_eval(args) -> int:
    exp = _config(args)
    model = load_any(args.checkpoint)
    data = _datasets(exp, args.seed, args.data)
    part = {"train": 0, "val": 1, "test": 2}[args.split]
    tasks = args.task.split(",") if args.task else [t for t in scenario_tasks(exp.scenario)
                                                     if t in _model_tasks(model)]
    print("task,split,accuracy")
    for t in tasks:
        if t not in data:
            raise UsageError(f"task {t!r} is not part of scenario {exp.scenario!r}")
        model.check_task(t)
        ds = data[t][part]
        print(f"{t},{args.split},{correct_count(model, ds, t)}/{len(ds)}")
    return EXIT_OK


def _model_tasks(model) -> list[str]:
    return model.tasks if isinstance(model, CombinedNetwork) else list(model.heads)


def cmd_inspect(args) -> int:
    if not (args.alphas or args.bn):
        raise UsageError("inspect needs --alphas or --bn")
    model = load_any(args.checkpoint)
    if args.alphas:
        if not isinstance(model, CombinedNetwork):
            raise UsageError("--alphas needs a combined-network checkpoint")
        print("depth,channels,mean_abs_alpha_s,mean_abs_alpha_t,mean_abs_alpha")
        for r in alpha_stats(model):
            print(f"{r.depth},{r.channels},{r.mean_abs_s!r},{r.mean_abs_t!r},{r.mean_abs!r}")
    if args.bn:
        nets = [("source", model.source), ("target", model.target)] if isinstance(model, CombinedNetwork) \
            else [("network", model)]
        print("path,layer,channel,mean,std")
        for label, net in nets:
            for name, mu, sd in bn_stats_dump(net):
                for ch, (m, s) in enumerate(zip(mu, sd)):
                    print(f"{label},{name},{ch},{float(m)!r},{float(s)!r}")
    return EXIT_OK


def _grid_from_mults(method: str, exp: ExperimentConfig, text: str | None):
    if not text:
        return None
    mults = [float(x) for x in text.split(",")]
    base = {"rescl": exp.rescl_base, "lwf": exp.lwf_base, "imm": exp.imm_base}.get(method, 0.0)
    return [base * m for m in mults] if method in hs.GRID_METHODS else [0.0]


def cmd_sweep(args) -> int:
    exp = _config(args)
    methods = args.methods.split(",")
    grids = {m: _grid_from_mults(m, exp, args.grid) for m in methods}
    report = hs.sweep(exp, methods, {m: g for m, g in grids.items() if g}, out_dir=args.out)
    _print_summary(report)
    return EXIT_OK


def _print_summary(report: hs.SweepReport) -> None:
    print("method,best_hyper,max_avg_accuracy")
    for m in report.methods():
        h, v = hs.max_achievable_avg(report, m)
        print(f"{m},{h!r},{hs.percent(v)}")


def cmd_measures(args) -> int:
    report = hs.load_report(args.report)
    methods = [args.method] if args.method else [m for m in report.methods() if m != "finetune"]
    if args.finetune_acc is not None:
        ft = Fraction(args.finetune_acc).limit_denominator(10 ** 6)
    elif "finetune" in report.methods():
        ft = report.point("finetune", 0.0, "val").target
    else:
        raise UsageError("need finetune rows in the report or --finetune-acc")
    print("method,measure,hyper,accuracy")
    status = EXIT_OK
    for m in methods:
        h, v = hs.max_achievable_avg(report, m)
        print(f"{m},max_achievable_avg(test),{h!r},{hs.percent(v)}")
        try:
            h, v = hs.source_at_required_target(report, ft, args.fraction, m)
            print(f"{m},source_at_required_target(val->test),{h!r},{hs.percent(v)}")
        except hs.RequirementUnachievable as exc:
            print(f"{m},source_at_required_target(val->test),unachievable,", flush=True)
            print(f"error: {exc}", file=sys.stderr)
            status = EXIT_UNACHIEVABLE
    return status


# -- parser -------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rescl", description="Residual continual learning experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, seed=True):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value")
        sp.add_argument("--scenario", help="e.g. A-to-B, A-to-C, A-to-B-to-C")
        sp.add_argument("--iterations", type=int)
        if seed:
            sp.add_argument("--seed", type=int, default=0)
        return sp

    sp = common(sub.add_parser("gen-data", help="write the synthetic task files"))
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_data)

    sp = common(sub.add_parser("train-source", help="train the source network"))
    sp.add_argument("--out", required=True)
    sp.add_argument("--data", help="directory written by gen-data")
    sp.set_defaults(func=cmd_train_source)

    sp = common(sub.add_parser("run", help="full ResCL pipeline over a scenario"))
    sp.add_argument("--out", required=True)
    sp.add_argument("--lambda-mult", default="1", help="multiplier(s) of the base lambda, comma per step")
    sp.add_argument("--source", help="source network checkpoint to start from")
    sp.set_defaults(func=cmd_run)

    sp = common(sub.add_parser("baseline", help="run a comparison method"))
    sp.add_argument("--method", required=True, choices=("finetune", "lastlayer", "lwf", "imm", "joint"))
    sp.add_argument("--hyper", default="1", help="lwf weight or imm ratio")
    sp.add_argument("--out", required=True)
    sp.add_argument("--source", help="source network checkpoint")
    sp.set_defaults(func=cmd_baseline)

    sp = sub.add_parser("merge", help="fold a combined network into a plain one")
    sp.add_argument("checkpoint")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_merge)

    sp = common(sub.add_parser("eval", help="accuracy of a checkpoint"))
    sp.add_argument("checkpoint")
    sp.add_argument("--task", help="comma-separated tasks (default: all heads in the scenario)")
    sp.add_argument("--split", default="test", choices=("train", "val", "test"))
    sp.add_argument("--data", help="directory written by gen-data")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("inspect", help="alpha statistics per depth, BN statistics")
    sp.add_argument("checkpoint")
    sp.add_argument("--alphas", action="store_true")
    sp.add_argument("--bn", action="store_true")
    sp.set_defaults(func=cmd_inspect)

    sp = common(sub.add_parser("sweep", help="grid sweep over seeds"), seed=False)
    sp.add_argument("--methods", default="rescl", help="comma list of rescl,lwf,imm,finetune,lastlayer,joint")
    sp.add_argument("--grid", help="comma list of multipliers of the base value (default 2^-10..2^10)")
    sp.add_argument("--seeds", help="comma list of seeds")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("measures", help="fairness measures from a sweep report")
    sp.add_argument("report")
    sp.add_argument("--method")
    sp.add_argument("--finetune-acc", type=float, help="fine-tuning validation target accuracy in [0,1]")
    sp.add_argument("--fraction", type=float, default=0.95)
    sp.set_defaults(func=cmd_measures)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not getattr(args, "command", None):
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"rescl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, CheckpointError, DatasetFormatError, FileNotFoundError, IsADirectoryError,
            KeyError, ValueError) as exc:
        print(f"rescl: bad input: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except TrainingDiverged as exc:
        print(f"rescl: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except hs.RequirementUnachievable as exc:
        print(f"rescl: {exc}", file=sys.stderr)
        return EXIT_UNACHIEVABLE


if __name__ == "__main__":
    sys.exit(main())
