"""Command-line entry point: ``gateadd <subcommand> ...``.

Settings come from a TOML config file; command-line flags override it.
Precedence, lowest to highest: built-in defaults, the ``[train]`` table,
the stage table (``[pretrain]``, ``[add]``, ``[vanilla]``, ``[single]``),
then flags such as ``--seed``, ``--epochs`` or ``--lr``.

Every command writes into one output directory (``--out``, or
``$GATEADD_OUT_ROOT/<command>`` when omitted) holding a copy of the
resolved config, a JSONL training log, checkpoints and reports.

Exit codes: 0 ok, 2 config/usage, 3 data, 4 training, 5 I/O.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import tomli

from . import bench, persist
from .autodiff import NonFiniteError
from .data import (DataError, SuiteConfig, generate_synthetic_suite, read_dataset, standardize,
                   transfer_suite, write_dataset)
from .trainer import (TrainConfig, TrainingError, add_and_train_gate, add_and_train_mtl,
                      checkpoint_meta, pretrain_gate, pretrain_mtl, train_single,
                      train_vanilla_gate, train_vanilla_mtl)

log = logging.getLogger("gateadd")

OUT_ROOT_ENV = "GATEADD_OUT_ROOT"
BENCH_KEYS = ("task_counts", "samples_per_task", "n_features")
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_TRAINING, EXIT_IO = 0, 2, 3, 4, 5


class ConfigError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


# -- config -------------------------------------------------------------------

STAGES = ("pretrain", "add", "vanilla", "single", "bench")


def load_config(path: str | Path | None) -> dict:
    """Parse a TOML config and reject unknown tables or training keys up front."""
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            cfg = tomli.load(fh)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    unknown = set(cfg) - {"suite", "train", *STAGES}
    if unknown:
        raise ConfigError(f"{path}: unknown tables {sorted(unknown)}")
    fields = set(TrainConfig.__dataclass_fields__)
    for table in ("train", *STAGES):
        extra = set(cfg.get(table, {})) - fields - (set(BENCH_KEYS) if table == "bench" else set())
        if extra:
            raise ConfigError(f"{path}: unknown settings in [{table}]: {sorted(extra)}")
    return cfg


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def train_config(cfg: dict, stage: str, args: argparse.Namespace) -> TrainConfig:
    stage_table = {k: v for k, v in cfg.get(stage, {}).items() if k not in BENCH_KEYS}
    raw = _merge(cfg.get("train", {}), stage_table)
    for flag, key in (("seed", "seed"), ("epochs", "epochs"), ("lr", "learning_rate"),
                      ("batch_size", "batch_size")):
        value = getattr(args, flag, None)
        if value is not None:
            raw[key] = value
    unknown = set(raw) - set(TrainConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown training settings: {sorted(unknown)}")
    try:
        return TrainConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid training settings: {exc}") from exc


def suite_config(cfg: dict, seed: int | None) -> SuiteConfig:
    """``[suite]`` either lists ``tasks`` explicitly or gives transfer-suite arguments."""
    raw = dict(cfg.get("suite", {}))
    if seed is not None:
        raw["seed"] = seed
    try:
        if "tasks" in raw:
            return SuiteConfig.from_dict(raw)
        return transfer_suite(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [suite] settings: {exc}") from exc


def _out_dir(args) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        out = Path(os.environ.get(OUT_ROOT_ENV, "runs")) / args.command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n")


def _save_resolved(out: Path, args, train: TrainConfig | None = None, extra: dict | None = None):
    cfg = {"command": args.command, "config_file": getattr(args, "config", None),
           "argv": {k: v for k, v in vars(args).items() if k != "func"}}
    if train is not None:
        cfg["train"] = train.to_dict()
    cfg.update(extra or {})
    _write_json(out / "config.json", cfg)


# -- data helpers ---------------------------------------------------------------

def _roles(ds) -> tuple[list[str], list[str]]:
    suite = ds.metadata.get("suite") or {}
    specs = suite.get("tasks") or []
    sources = [t["task_id"] for t in specs if t.get("role") == "source"]
    targets = [t["task_id"] for t in specs if t.get("role") == "target"]
    return sources, targets


def _split_list(value: str | None) -> list[str] | None:
    return None if value is None else [t for t in value.split(",") if t]


def _dataset(path):
    return standardize(read_dataset(path))


def _tasks_or_roles(ds, given, role: str) -> list[str]:
    if given:
        missing = [t for t in given if t not in ds.labels]
        if missing:
            raise DataError(f"unknown tasks {missing}")
        return given
    sources, targets = _roles(ds)
    chosen = sources if role == "source" else targets
    if not chosen:
        raise ConfigError(f"dataset does not declare {role} tasks; pass them explicitly")
    return chosen


def _record_run(out: Path, record, data_path, extra: dict | None = None) -> None:
    info = record.to_dict()
    info["dataset"] = str(Path(data_path).resolve())
    info.update(extra or {})
    _write_json(out / "run.json", info)


# -- commands ---------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    suite_cfg = suite_config(cfg, args.seed)
    suite = generate_synthetic_suite(suite_cfg)
    out = _out_dir(args)
    write_dataset(suite.dataset, out, extra={"correlations": suite.correlations})
    _save_resolved(out, args, extra={"suite": suite_cfg.to_dict()})
    print(f"wrote {suite.dataset.n_samples} samples, tasks {suite.dataset.tasks} to {out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    tc = train_config(cfg, "pretrain", args)
    ds = _dataset(args.data)
    sources = _tasks_or_roles(ds, _split_list(args.sources), "source")
    out = _out_dir(args)
    _save_resolved(out, args, tc)
    fn = pretrain_gate if args.model == "gate" else pretrain_mtl
    record = fn(ds, sources, tc, checkpoint_dir=out / "checkpoint", log_path=out / "train.log.jsonl")
    _record_run(out, record, args.data)
    print(f"pre-trained {args.model} on {sources}; best val RMSE {record.best_val_rmse:.4f} "
          f"at epoch {record.best_epoch}")
    return EXIT_OK


def _checkpoint_path(path) -> Path:
    path = Path(path)
    return path / "checkpoint" if (path / "checkpoint" / persist.MANIFEST).exists() else path


def cmd_add_task(args) -> int:
    cfg = load_config(args.config)
    tc = train_config(cfg, "add", args)
    ds = _dataset(args.data)
    ckpt = _checkpoint_path(args.checkpoint)
    kind = persist.read_manifest(ckpt)["model_kind"]
    target = args.target or _tasks_or_roles(ds, None, "target")[0]
    out = _out_dir(args)
    _save_resolved(out, args, tc)
    fn = {"gate": add_and_train_gate, "mtl": add_and_train_mtl}.get(kind)
    if fn is None:
        raise ConfigError(f"cannot add a task to a {kind!r} checkpoint")
    record = fn(ckpt, ds, target, tc, log_path=out / "train.log.jsonl")
    persist.save(record.model, out / "checkpoint", meta=checkpoint_meta(record, ds, tc))
    record.checkpoint = str(out / "checkpoint")
    _record_run(out, record, args.data, {"pretrained_checkpoint": str(ckpt.resolve())})
    log.info("frozen digest before %s after %s", record.frozen_digest_before, record.frozen_digest_after)
    print(f"added {target} to {kind} model; frozen parameters unchanged "
          f"(sha256 {record.frozen_digest_after[:16]}); best val RMSE {record.best_val_rmse:.4f}")
    return EXIT_OK


def cmd_train_vanilla(args) -> int:
    cfg = load_config(args.config)
    tc = train_config(cfg, "vanilla", args)
    ds = _dataset(args.data)
    tasks = _split_list(args.tasks) or ds.tasks
    out = _out_dir(args)
    _save_resolved(out, args, tc)
    fn = train_vanilla_gate if args.model == "gate" else train_vanilla_mtl
    record = fn(ds, tasks, tc, log_path=out / "train.log.jsonl")
    persist.save(record.model, out / "checkpoint", meta=checkpoint_meta(record, ds, tc))
    record.checkpoint = str(out / "checkpoint")
    _record_run(out, record, args.data)
    print(f"vanilla {args.model} on {tasks}; best val RMSE {record.best_val_rmse:.4f}")
    return EXIT_OK


def cmd_train_single(args) -> int:
    cfg = load_config(args.config)
    tc = train_config(cfg, "single", args)
    ds = _dataset(args.data)
    task = args.task or _tasks_or_roles(ds, None, "target")[0]
    out = _out_dir(args)
    _save_resolved(out, args, tc)
    record = train_single(ds, task, tc, log_path=out / "train.log.jsonl")
    persist.save(record.model, out / "checkpoint", meta=checkpoint_meta(record, ds, tc))
    record.checkpoint = str(out / "checkpoint")
    _record_run(out, record, args.data)
    print(f"single-task {task}; best val RMSE {record.best_val_rmse:.4f}")
    return EXIT_OK


def _run_info(run_dir: Path) -> dict:
    f = run_dir / "run.json"
    if not f.exists():
        raise ConfigError(f"{run_dir} is not a run directory (missing run.json)")
    return json.loads(f.read_text())


def _evaluate_run(run_dir: Path, data_path=None, name: str | None = None) -> bench.MetricReport:
    info = _run_info(run_dir)
    ds = _dataset(data_path or info["dataset"])
    model, _, _ = persist.load(run_dir / "checkpoint")
    tasks = info["target_tasks"] or info["source_tasks"]
    report = bench.evaluate_model(model, ds, tasks, run=name or run_dir.name)
    for t in tasks:
        sources = [s for s in ds.tasks if s != t and s in info["source_tasks"]] or \
                  [s for s in ds.tasks if s != t]
        try:
            report.max_source_correlation[t] = bench.source_correlation_analysis(ds, t, sources)
        except bench.MetricError:
            log.debug("no qualifying source for %s", t)
    return report


def cmd_evaluate(args) -> int:
    run_dir = Path(args.run)
    report = _evaluate_run(run_dir, args.data)
    if args.vanilla:
        report = bench.attach_recovery(report, _evaluate_run(Path(args.vanilla), args.data))
    out = Path(args.out) if args.out else run_dir
    out.mkdir(parents=True, exist_ok=True)
    bench.write_report_json(report, out / "metrics.json")
    bench.write_metrics_csv([report], out / "metrics.csv")
    sys.stdout.write(bench.summary_text([report]))
    return EXIT_OK


def cmd_bench_time(args) -> int:
    cfg = load_config(args.config)
    tc = train_config(cfg, "bench", args)
    bcfg = cfg.get("bench", {})
    counts = [int(n) for n in (_split_list(args.counts) or bcfg.get("task_counts", [4, 8]))]
    n_samples = int(bcfg.get("samples_per_task", 1000))
    n_features = int(bcfg.get("n_features", 16))
    out = _out_dir(args)
    _save_resolved(out, args, tc, {"bench": {"task_counts": counts, "samples_per_task": n_samples}})
    cells = timing_cells(counts, tc, n_samples, n_features, seed=tc.seed)
    results = bench.timing_harness(cells)
    bench.write_timing_csv(results, out / "timing.csv")
    for c in results:
        print(f"{c.model_kind:<7} {c.regime:<9} N={c.n_tasks:<3} {c.seconds_per_epoch:.4f} s/epoch "
              f"alignment terms {c.alignment_terms}")
    return EXIT_OK


def timing_cells(counts, tc: TrainConfig, n_samples: int = 1000, n_features: int = 16, seed: int = 0):
    """Vanilla GATE at each N, plus GATE addition and SINGLE on the largest suite."""
    from .data import SyntheticTaskSpec

    def suite(n):
        tasks = [SyntheticTaskSpec(f"s{k + 1}", "source", ("linear", "quadratic", "sinusoidal")[k % 3])
                 for k in range(n)]
        return standardize(generate_synthetic_suite(
            SuiteConfig(tasks, n_samples=n_samples, n_features=n_features, seed=seed)).dataset)

    cells = []
    for n in counts:
        ds = suite(n)
        cells.append(("gate", "vanilla", n, lambda ds=ds: train_vanilla_gate(ds, ds.tasks, tc)))
    ds = suite(max(counts) + 1)
    sources, target = ds.tasks[:-1], ds.tasks[-1]
    one = TrainConfig.from_dict({**tc.to_dict(), "epochs": 1})

    def added():
        pre = pretrain_gate(ds, sources, one)
        return add_and_train_gate(pre.model, ds, target, tc)

    cells.append(("gate", "addition", len(sources), added))
    cells.append(("single", "single", 1, lambda: train_single(ds, target, tc)))
    return cells


def cmd_report(args) -> int:
    reports = []
    for run in args.runs:
        f = Path(run) / "metrics.json"
        if not f.exists():
            raise ConfigError(f"{run} has no metrics.json; run `evaluate` first")
        reports.append(bench.read_report_json(f))
    out = _out_dir(args)
    bench.write_metrics_csv(reports, out / "report.csv")
    text = bench.summary_text(reports)
    (out / "summary.txt").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    verbosity = argparse.ArgumentParser(add_help=False)
    verbosity.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS)
    verbosity.add_argument("-q", "--quiet", action="store_true", default=argparse.SUPPRESS)
    p = _Parser(prog="gateadd", description="GATE task addition and baselines", parents=[verbosity])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    _add = sub.add_parser

    def add_parser(name, **kw):
        return _add(name, parents=[verbosity], **kw)

    sub.add_parser = add_parser

    def common(sp, data=True, train=True):
        sp.add_argument("--config", help="TOML config file")
        sp.add_argument("--out", help=f"output directory (default ${OUT_ROOT_ENV}/<command>)")
        sp.add_argument("--seed", type=int)
        if data:
            sp.add_argument("--data", required=True, help="dataset directory written by gen-data")
        if train:
            sp.add_argument("--epochs", type=int)
            sp.add_argument("--lr", type=float)
            sp.add_argument("--batch-size", dest="batch_size", type=int)

    sp = sub.add_parser("gen-data", help="generate a synthetic task suite")
    common(sp, data=False, train=False)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("pretrain", help="pre-train on source tasks")
    common(sp)
    sp.add_argument("--model", choices=("gate", "mtl"), default="gate")
    sp.add_argument("--sources", help="comma-separated source tasks (default: suite roles)")
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("add-task", help="freeze a pre-trained model and train a new task")
    common(sp)
    sp.add_argument("--checkpoint", required=True, help="pretrain run or checkpoint directory")
    sp.add_argument("--target")
    sp.set_defaults(func=cmd_add_task)

    sp = sub.add_parser("train-vanilla", help="train all tasks jointly from scratch")
    common(sp)
    sp.add_argument("--model", choices=("gate", "mtl"), default="gate")
    sp.add_argument("--tasks", help="comma-separated tasks (default: all)")
    sp.set_defaults(func=cmd_train_vanilla)

    sp = sub.add_parser("train-single", help="train one task from scratch")
    common(sp)
    sp.add_argument("--task")
    sp.set_defaults(func=cmd_train_single)

    sp = sub.add_parser("evaluate", help="score a run on the held-out test split")
    sp.add_argument("--run", required=True)
    sp.add_argument("--data", help="override the dataset recorded in the run")
    sp.add_argument("--vanilla", help="vanilla run directory for recovery rates")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("bench-time", help="seconds-per-epoch timing table")
    common(sp, data=False)
    sp.add_argument("--counts", help="comma-separated task counts (default 4,8)")
    sp.set_defaults(func=cmd_bench_time)

    sp = sub.add_parser("report", help="collect evaluated runs into one table")
    sp.add_argument("runs", nargs="+")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_report)
    return p


def run(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    verbose, quiet = getattr(args, "verbose", 0), getattr(args, "quiet", False)
    level = (logging.ERROR if quiet else logging.DEBUG if verbose > 1 else
             logging.INFO if verbose else logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:
        code, kind = _classify(exc)
        print(json.dumps({"error": kind, "message": str(exc)}), file=sys.stderr)
        return code


def _classify(exc: Exception) -> tuple[int, str]:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG, "config"
    if isinstance(exc, (DataError, bench.MetricError)):
        return EXIT_DATA, "data"
    if isinstance(exc, (TrainingError, NonFiniteError)):
        return EXIT_TRAINING, "training"
    if isinstance(exc, (OSError, persist.CheckpointError)):
        return EXIT_IO, "io"
    raise exc


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
