"""Command-line entry point: ``cilbench gen | run | report | validate``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from . import cil, datagen, protocol, report

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_PARTIAL = 0, 1, 2, 3

log = logging.getLogger("cilbench")


class UsageError(Exception):
    pass


def default_workers():
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


@dataclass
class RunConfig:
    dataset: str = ""
    capacity: int | None = None
    methods: list = field(default_factory=lambda: list(cil.ALL_METHODS))
    sizes: list = field(default_factory=lambda: list(datagen.DEFAULT_SIZES))
    epochs: int = 50
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    hidden: list = field(default_factory=lambda: [128, 64])
    seed: int = 0
    repeats: int = 1
    workers: int = 0  # 0 = all available cores
    out: str = "results"
    detail_method: str = "replay"
    figures: bool = True
    strategy_params: dict = field(default_factory=dict)

    def validate(self):
        unknown = [m for m in self.methods if m not in cil.STRATEGIES]
        if unknown:
            raise UsageError(f"unknown method(s) {', '.join(unknown)}; valid: all, {', '.join(cil.STRATEGIES)}")
        if not self.methods:
            raise UsageError("no methods selected")
        if not self.sizes or any(n < 1 for n in self.sizes):
            raise UsageError("sizes must be positive integers")
        if self.repeats < 1 or self.workers < 0:
            raise UsageError("repeats must be >= 1 and workers >= 0")
        for m in self.strategy_params:
            if m not in cil.STRATEGIES:
                raise UsageError(f"hyperparameters given for unknown method {m!r}")
        try:
            for m in self.methods:
                cil.make_strategy(m, **self.strategy_params.get(m, {}))
            self.train_config()
        except ValueError as exc:
            raise UsageError(str(exc)) from None

    def train_config(self):
        return protocol.TrainConfig(hidden=tuple(self.hidden), epochs=self.epochs, batch_size=self.batch_size,
                                    lr=self.lr, momentum=self.momentum, strategy_params=self.strategy_params)

    def to_flat(self):
        """Flat key-value form; strategy hyperparameters become ``method.param`` keys."""
        d = asdict(self)
        params = d.pop("strategy_params")
        for m in sorted(params):
            for k in sorted(params[m]):
                d[f"{m}.{k}"] = params[m][k]
        return d

    @classmethod
    def from_flat(cls, d):
        names = {f.name for f in fields(cls)} - {"strategy_params"}
        cfg = cls()
        for key, value in d.items():
            if "." in key:
                m, p = key.split(".", 1)
                cfg.strategy_params.setdefault(m.lower(), {})[p] = value
            elif key in names:
                setattr(cfg, key, value)
            else:
                raise UsageError(f"unknown config key {key!r}")
        if isinstance(cfg.methods, str):
            cfg.methods = parse_methods(cfg.methods)
        if isinstance(cfg.sizes, str):
            cfg.sizes = parse_ints(cfg.sizes)
        return cfg


def parse_methods(text):
    out = []
    for m in text.split(","):
        m = m.strip().lower()
        if m == "all":
            out.extend(x for x in cil.ALL_METHODS if x not in out)
        elif m and m not in out:
            out.append(m)
    return out


def parse_ints(text):
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="cilbench", description="Class-incremental solver-selection benchmark on online bin packing.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a class-balanced labeled dataset")
    g.add_argument("--per-class", type=int, default=200, help="instances per solver class (default 200; 1000 for full scale)")
    g.add_argument("--seed", type=int, default=0, help="master seed")
    g.add_argument("--out", required=True, help="output JSONL path; the log goes to <out>.log.json")
    g.add_argument("--budget", type=int, default=None, help="cap on instance evaluations")
    g.add_argument("--capacity", type=int, default=150, help="bin capacity")
    g.add_argument("--method", choices=datagen.METHODS, default="lineage", help="generation scheme")
    g.add_argument("--founders", type=int, default=10, help="lineage: founders per class")
    g.add_argument("--mutations", type=int, default=30, help="lineage: mutations applied to a founder")
    g.add_argument("--workers", type=int, default=None, help="parallel processes (default: all cores)")

    r = sub.add_parser("run", help="run the experiment matrix and write reports")
    r.add_argument("dataset", nargs="?", help="dataset JSONL (may also come from --config)")
    r.add_argument("--config", help="flat JSON config file; flags override its values")
    r.add_argument("--methods", help="comma list or 'all' (default all: 8 CIL methods, cumulative, oracle)")
    r.add_argument("--sizes", help="train sizes per class (default 100,200,300,400,500)")
    r.add_argument("--seed", type=int, help="master seed (default 0)")
    r.add_argument("--epochs", type=int, help="epochs per task (default 50)")
    r.add_argument("--batch-size", type=int, help="minibatch size (default 32)")
    r.add_argument("--lr", type=float, help="learning rate (default 0.01)")
    r.add_argument("--momentum", type=float, help="SGD momentum (default 0.9)")
    r.add_argument("--repeats", type=int, help="runs per cell with different seeds (default 1)")
    r.add_argument("--workers", type=int, help="parallel runs (default: all cores)")
    r.add_argument("--capacity", type=int, help="override the dataset's bin capacity")
    r.add_argument("--detail-method", help="method shown in the per-class tables (default replay)")
    r.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
    r.add_argument("--out", help="output directory (default results)")

    rp = sub.add_parser("report", help="rebuild tables and figures from a records file")
    rp.add_argument("records", help="records.jsonl")
    rp.add_argument("--out", help="output directory (default: next to the records file)")
    rp.add_argument("--detail-method", default="replay", help="method shown in the per-class tables")
    rp.add_argument("--no-figures", action="store_true", help="skip PNG rendering")

    v = sub.add_parser("validate", help="relabel every instance and compare with the stored labels")
    v.add_argument("dataset", help="dataset JSONL")
    v.add_argument("--capacity", type=int, help="override the header capacity")
    return p


# -- commands --------------------------------------------------------------------


def cmd_gen(args):
    if args.per_class < 0:
        raise UsageError("--per-class must be >= 0")
    workers = args.workers or default_workers()
    glog = datagen.GenerationLog(args.method, args.per_class)
    out = Path(args.out)
    log_path = out.with_name(out.name + ".log.json")
    try:
        ds = datagen.generate_balanced(args.per_class, args.budget, args.seed, method=args.method,
                                       meta=datagen.Meta(capacity=args.capacity), founders=args.founders,
                                       mutations=args.mutations, workers=workers, log_out=glog)
    except datagen.BudgetExhausted as exc:
        log_path.write_text(json.dumps({**glog.to_dict(), "error": str(exc)}, indent=2) + "\n")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    datagen.save(ds, out)
    log_path.write_text(json.dumps(glog.to_dict(), indent=2) + "\n")
    print(f"wrote {len(ds)} instances to {out} ({glog.evaluations} evaluations)")
    return EXIT_OK


def resolve_run_config(args):
    cfg = RunConfig()
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(raw, dict):
            raise UsageError("config file must hold a JSON object")
        cfg = RunConfig.from_flat(raw)
    if args.dataset:
        cfg.dataset = args.dataset
    if args.methods:
        cfg.methods = parse_methods(args.methods)
    if args.sizes:
        cfg.sizes = parse_ints(args.sizes)
    for name in ("seed", "epochs", "batch_size", "lr", "momentum", "repeats", "workers", "capacity",
                 "out", "detail_method"):
        value = getattr(args, name)
        if value is not None:
            setattr(cfg, name, value)
    if args.no_figures:
        cfg.figures = False
    if not cfg.dataset:
        raise UsageError("no dataset given")
    cfg.validate()
    return cfg


def cmd_run(args):
    cfg = resolve_run_config(args)
    try:
        ds = datagen.load(cfg.dataset, capacity=cfg.capacity)
        need = max(cfg.sizes)
        for spec in datagen.make_streams(ds):
            datagen.split(ds, spec.with_size(need), 0)
    except (OSError, datagen.DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_flat(), indent=2, sort_keys=True) + "\n")
    records, failures = protocol.run_matrix(ds, cfg.methods, cfg.sizes, cfg.seed, cfg.train_config(),
                                            workers=cfg.workers or default_workers(), repeats=cfg.repeats)
    protocol.save_records(records, out / "records.jsonl")
    if records:
        rep, _ = report.write_all(records, out, cfg.figures, cfg.detail_method)
        print(report.format_table1(rep), end="")
    if failures:
        print(f"{len(failures)} run(s) failed:", file=sys.stderr)
        for f in failures:
            print(f"  {f}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_report(args):
    path = Path(args.records)
    try:
        records = protocol.load_records(path)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    if not records:
        print(f"error: no records in {path}", file=sys.stderr)
        return EXIT_DATA
    rep, _ = report.write_all(records, Path(args.out) if args.out else path.parent,
                              not args.no_figures, args.detail_method)
    print(report.format_table1(rep), end="")
    return EXIT_OK


def cmd_validate(args):
    try:
        ds = datagen.load(args.dataset, capacity=args.capacity)
    except (OSError, datagen.DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    counts = ", ".join(f"{k}={v}" for k, v in ds.counts().items())
    print(f"ok: {len(ds)} instances verified ({counts})")
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "run": cmd_run, "report": cmd_report, "validate": cmd_validate}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # --help and usage errors
        return exc.code
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
