"""Command-line driver: ``fedkd partition | train | evaluate | synthesize``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

from . import checkpoint as ckpt
from .config import RUN_MODES, ConfigError, TrainConfig
from .evaluate import MetricReport, evaluate_federation, format_table
from .experiment import method_name, run_method
from .kg import DataError, load_dataset, load_graph, partition_by_relation, read_partition, write_partition
from .scorers import NumericError

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3

log = logging.getLogger("fedkd")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _bool(text: str) -> str:
    if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
        raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")
    return text


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    for f in dataclasses.fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        kind = {"int": int, "float": float, "bool": _bool}.get(f.type, str)
        parser.add_argument(flag, dest=f.name, type=kind, default=None, metavar=f.name.upper())


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fedkd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("partition", help="split a KG by relation across clients")
    p.add_argument("--input", required=True, help="triple file, or directory with train/valid/test.txt")
    p.add_argument("--clients", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train one method with early stopping")
    p.add_argument("--config", help="flat key = value config file")
    _add_config_flags(p)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("valid", "test"), default="test")
    p.add_argument("--partition-dir", help="defaults to the partition recorded in the checkpoint")
    p.add_argument("--raw", action="store_true", help="unfiltered ranking")
    p.add_argument("--out", help="report JSON path (default: <checkpoint>/../evaluate_<split>.json)")

    p = sub.add_parser("synthesize", help="write a synthetic triple file")
    p.add_argument("--out", required=True)
    p.add_argument("--entities", type=int, default=300)
    p.add_argument("--relations", type=int, default=9)
    p.add_argument("--triples", type=int, default=3000)
    p.add_argument("--seed", type=int, default=0)
    return parser


def cmd_partition(args) -> int:
    if args.clients < 1:
        raise UsageError("--clients must be positive")
    source = load_dataset(args.input) if os.path.isdir(args.input) else load_graph(args.input)
    fed = partition_by_relation(source, args.clients, args.seed)
    write_partition(fed, args.out)
    rel_counts = [kg.num_relations for kg in fed.clients]
    print(f"wrote {fed.num_clients} clients to {args.out}; relations per client: {rel_counts}")
    return 0


def _train_config(args) -> TrainConfig:
    overrides = {f.name: getattr(args, f.name) for f in dataclasses.fields(TrainConfig)}
    if args.config:
        return TrainConfig.load(args.config, **overrides)
    return TrainConfig.from_mapping({k: v for k, v in overrides.items() if v is not None})


def cmd_train(args) -> int:
    cfg = _train_config(args).resolved()
    if not cfg.partition_dir:
        raise UsageError("partition_dir is required")
    teachers = None
    if cfg.mode == "distill":
        if not cfg.teacher_checkpoint:
            raise UsageError("distill mode needs teacher_checkpoint")
        teacher_ckpt = ckpt.load_checkpoint(cfg.teacher_checkpoint)
        teachers = teacher_ckpt.tables()
        for t in teachers:
            if t.kind != cfg.kge or t.dim != cfg.teacher_dim:
                raise ConfigError(f"teacher checkpoint is {t.kind} d={t.dim}, "
                                  f"config expects {cfg.kge} d={cfg.teacher_dim}")
    fed = read_partition(cfg.partition_dir)
    if teachers is not None:
        teacher_ckpt.check_against(fed)

    os.makedirs(cfg.out_dir, exist_ok=True)
    cfg.save(os.path.join(cfg.out_dir, "config.txt"))
    log_path = os.path.join(cfg.out_dir, "rounds.jsonl")
    if os.path.exists(log_path):
        os.remove(log_path)
    dcfg = cfg.distill_config()
    run = run_method(fed, cfg.mode, cfg.kge, cfg.init_params(), cfg.round_config(), cfg.seed, dcfg,
                     teachers, cfg.transe_norm, log_path=log_path)
    config_dict = {k: v for k, v in dataclasses.asdict(cfg).items()}
    ckpt.save_checkpoint(os.path.join(cfg.out_dir, "checkpoint"), run.clients, run.result.best_server,
                         config_dict, {"best_round": run.result.best_round,
                                       "truncated": run.result.truncated})
    _write_report(os.path.join(cfg.out_dir, "report.json"), run.name, run.dim, run.test, "test")
    summary = format_table([(run.name, run.dim, run.test)])
    with open(os.path.join(cfg.out_dir, "summary.txt"), "w", encoding="utf-8") as fh:
        fh.write(summary + "\n")
    print(summary)
    print(f"best round {run.result.best_round} of {run.result.rounds_run}"
          + (" (truncated at max_rounds)" if run.result.truncated else ""))
    return 0


def _write_report(path, method: str, dim: int, report: MetricReport, split: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"method": method, "dim": dim, "split": split, **report.to_dict()}, fh, indent=2)
        fh.write("\n")


def cmd_evaluate(args) -> int:
    checkpoint = ckpt.load_checkpoint(args.checkpoint)
    cfg = checkpoint.config
    partition_dir = args.partition_dir or cfg.get("partition_dir")
    if not partition_dir:
        raise UsageError("--partition-dir is required (checkpoint records none)")
    fed = read_partition(partition_dir)
    checkpoint.check_against(fed)
    tables = checkpoint.tables()
    report = evaluate_federation(tables, fed.clients, args.split, filtered=not args.raw)
    mode = cfg.get("mode", "teacher")
    name = method_name(mode) if mode in RUN_MODES else mode
    if mode == "distill" and not cfg.get("aats", True):
        name += "*"
    out = args.out or os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)),
                                   f"evaluate_{args.split}.json")
    _write_report(out, name, tables[0].dim, report, args.split)
    print(format_table([(name, tables[0].dim, report)]))
    return 0


def cmd_synthesize(args) -> int:
    from .synthetic import synthetic_graph

    graph = synthetic_graph(args.entities, args.relations, args.triples, seed=args.seed)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    with open(args.out, "w", encoding="utf-8") as fh:
        for h, r, t in graph.train.tolist():
            fh.write(f"{graph.entities[h]}\t{graph.relations[r]}\t{graph.entities[t]}\n")
    print(f"wrote {len(graph.train)} triples to {args.out}")
    return 0


COMMANDS = {"partition": cmd_partition, "train": cmd_train, "evaluate": cmd_evaluate,
            "synthesize": cmd_synthesize}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"fedkd: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"fedkd: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ckpt.CheckpointError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"fedkd: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
