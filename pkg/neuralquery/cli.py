"""
Command-line front end.

    neuralquery load-check --fixture royal
    neuralquery query --fixture royal "one('Henry_VIII of house of Tudor', person_t).wife()"
    neuralquery train --schema kb/schema.txt --facts kb/facts.tsv --dataset kb/father.tsv
    neuralquery eval  --schema ... --facts ... --dataset ... --checkpoint model.npz
    neuralquery bench --entities 100000 --tuples 1000000
    neuralquery generate-kinship --output-dir kb --seed 7

Exit codes: 0 ok, 1 runtime failure, 2 usage or query error.
"""

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Dict, List, Optional, Sequence, TextIO, Tuple

import numpy as np
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from . import fixtures, graph, kb_io
from .context import Context
from .exceptions import BindError, NQLError, QueryParseError, UsageError
from .kb_core import KnowledgeBase, build_kb
from .learning import LOSS_KINDS, MODEL_KINDS, build_model, evaluate, train
from .models import (SCHEMA_VERSION, BenchReport, EpochMetrics, KinshipSpec, LatencyStats,
                     LossSpec, OptimizerSpec, RunConfig)

logger = logging.getLogger(__name__)

THREADS_ENV = "NQL_NUM_THREADS"
LOG_LEVEL_ENV = "NQL_LOG_LEVEL"
FIXTURES = ("royal", "student-grade")


# ---------------------------------------------------------------- argument parsing

def _kb_arguments(p: argparse.ArgumentParser) -> None:
    p.add_argument("--schema", dest="schema_path", help="schema file (type/rel/group lines)")
    p.add_argument("--facts", dest="facts_path",
                   help="facts TSV: relation, subject, object[, weight]")
    p.add_argument("--fixture", choices=FIXTURES, help="use a built-in knowledge base instead")
    p.add_argument("--follow-strategy", choices=("sum", "stacked"), default="sum",
                   help="kernel used by follow() over relation groups")


def _model_arguments(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", dest="dataset_path", required=True,
                   help="examples TSV: question, seed entity, comma-separated targets")
    p.add_argument("--model", choices=MODEL_KINDS, default="template")
    p.add_argument("--group", help="relation group the model chooses from (default: the only one)")
    p.add_argument("--max-hops", type=int, default=5, help="recurrent model chain length")
    p.add_argument("--embedding-dim", type=int, default=32)
    p.add_argument("--leftover", choices=("drop", "last"), default="drop",
                   help="recurrent model: what to do with mass that never stops")
    p.add_argument("--loss", choices=LOSS_KINDS, default="target_mass_nll")
    p.add_argument("--batch-size", type=int, default=32)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="neuralquery",
                                     description="Differentiable knowledge-base queries.")
    parser.add_argument("-v", "--verbose", action="count", default=0,
                        help="-v for progress, -vv for debug logging")
    parser.add_argument("--debug", action="store_true", help="same as -vv")
    parser.add_argument("--format", dest="output_format", choices=("text", "jsonl"),
                        default="text", help="human text or line-delimited JSON records")
    parser.add_argument("--seed", type=int, default=0, help="seed for every random choice")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("load-check", help="load a KB and report its size")
    _kb_arguments(p)

    p = sub.add_parser("query", help="evaluate a query and print the weighted result")
    _kb_arguments(p)
    p.add_argument("query", nargs="?", help="query text (or use --query-file)")
    p.add_argument("--query-file", help="read the query program from a file")
    p.add_argument("--top-k", type=int)
    p.add_argument("--min-weight", type=float)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _kb_arguments(p)
    _model_arguments(p)
    p.add_argument("--eval-dataset", dest="eval_dataset_path")
    p.add_argument("--checkpoint", dest="checkpoint_path", default="model.npz",
                   help="where to write the trained parameters")
    p.add_argument("--optimizer", choices=("sgd", "adam"), default="adam")
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--momentum", type=float, default=0.0)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--trainable-relation", dest="trainable_relations", action="append",
                   default=[], help="also learn the fact weights of this relation")

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    _kb_arguments(p)
    _model_arguments(p)
    p.add_argument("--checkpoint", dest="checkpoint_path", required=True)

    p = sub.add_parser("bench", help="time traversals on a generated KB")
    p.add_argument("--entities", type=int, default=100_000)
    p.add_argument("--tuples", type=int, default=1_000_000)
    p.add_argument("--relations", type=int, default=12)
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("generate-kinship", help="write a synthetic kinship KB and datasets")
    p.add_argument("--output-dir", dest="output_path", required=True)
    p.add_argument("--generations", type=int, default=4)
    p.add_argument("--persons", type=int, default=40, help="persons per generation")
    p.add_argument("--marriage-prob", type=float, default=0.8)
    p.add_argument("--remarriage-prob", type=float, default=0.0)
    p.add_argument("--min-children", type=int, default=1)
    p.add_argument("--max-children", type=int, default=4)
    p.add_argument("--examples", type=int, default=400, help="examples per generated dataset")
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    get = lambda name, default=None: getattr(args, name, default)  # noqa: E731
    return RunConfig(
        subcommand=args.subcommand,
        seed=args.seed,
        schema_path=get("schema_path"),
        facts_path=get("facts_path"),
        dataset_path=get("dataset_path"),
        eval_dataset_path=get("eval_dataset_path"),
        checkpoint_path=get("checkpoint_path"),
        output_path=get("output_path"),
        fixture=get("fixture"),
        model=get("model", "template"),
        group=get("group"),
        optimizer=OptimizerSpec(kind=get("optimizer", "adam"), lr=get("lr", 0.1),
                                momentum=get("momentum", 0.0)),
        loss=LossSpec(kind=get("loss", "target_mass_nll")),
        epochs=get("epochs", 50),
        batch_size=get("batch_size", 32),
        max_hops=get("max_hops", 5),
        embedding_dim=get("embedding_dim", 32),
        output_format=args.output_format,
        top_k=get("top_k"),
        min_weight=get("min_weight"),
        follow_strategy=get("follow_strategy", "sum"),
        threads=get("threads", 1),
        bench_entities=get("entities", 100_000),
        bench_tuples=get("tuples", 1_000_000),
        bench_relations=get("relations", 12),
        bench_repeats=get("repeats", 20),
    )


def validate_config(config: RunConfig) -> None:
    """Check every input path and flag combination before any compute."""
    needs_kb = config.subcommand in ("load-check", "query", "train", "eval")
    if needs_kb and not config.fixture:
        if not (config.schema_path and config.facts_path):
            raise UsageError("give --schema and --facts, or --fixture")
    if needs_kb and config.fixture and (config.schema_path or config.facts_path):
        raise UsageError("--fixture cannot be combined with --schema/--facts")
    must_exist = [config.schema_path, config.facts_path, config.dataset_path,
                  config.eval_dataset_path]
    if config.subcommand == "eval":
        must_exist.append(config.checkpoint_path)
    for path in must_exist:
        if path and not os.path.isfile(path):
            raise UsageError(f"no such file: {path}")
    for name in ("epochs", "batch_size", "max_hops", "embedding_dim", "bench_relations",
                 "bench_repeats"):
        minimum = 0 if name == "epochs" else 1
        if getattr(config, name) < minimum:
            raise UsageError(f"--{name.replace('_', '-')} must be >= {minimum}")
    if config.bench_entities < 0 or config.bench_tuples < 0:
        raise UsageError("--entities and --tuples must be >= 0")
    if config.top_k is not None and config.top_k < 1:
        raise UsageError("--top-k must be >= 1")


def thread_count(config: RunConfig) -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return max(1, config.threads)
    try:
        value = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if value < 1:
        raise UsageError(f"{THREADS_ENV} must be >= 1, got {value}")
    return value


def configure_logging(verbose: int, debug: bool) -> None:
    level = logging.WARNING
    if verbose == 1:
        level = logging.INFO
    if verbose >= 2 or debug:
        level = logging.DEBUG
    override = os.environ.get(LOG_LEVEL_ENV)
    if override:
        level = logging.getLevelName(override.upper())
        if not isinstance(level, int):
            level = logging.WARNING
    logging.basicConfig(level=level, format="%(name)s: %(message)s", force=True,
                        handlers=[RichHandler(console=Console(stderr=True), show_time=False)])


# ---------------------------------------------------------------- output

class Output:
    """Writes either rich text or JSON records to one stream."""

    def __init__(self, fmt: str, stream: Optional[TextIO] = None):
        self.format = fmt
        self.stream = stream or sys.stdout
        self.console = Console(file=self.stream, highlight=False, soft_wrap=True)

    @property
    def jsonl(self) -> bool:
        return self.format == "jsonl"

    def record(self, record: Dict[str, Any]) -> None:
        if self.jsonl:
            self.stream.write(json.dumps(record) + "\n")

    def text(self, line: str = "") -> None:
        if not self.jsonl:
            self.console.out(line, highlight=False)

    def table(self, table: Table) -> None:
        if not self.jsonl:
            self.console.print(table)


def format_multiset(pairs: Sequence[Tuple[str, float]]) -> str:
    """``{'name': weight, ...}`` with one entry per line; ``{}`` when empty."""
    if not pairs:
        return "{}"
    lines = ["{"] + [f"  {name!r}: {weight!r}," for name, weight in pairs] + ["}"]
    return "\n".join(lines)


# ---------------------------------------------------------------- commands

def load_kb(config: RunConfig) -> KnowledgeBase:
    if config.fixture == "royal":
        schema, facts = fixtures.royal_fixture()
    elif config.fixture == "student-grade":
        schema, facts = fixtures.student_grade_fixture(config.seed)
    else:
        schema = kb_io.load_schema(config.schema_path)
        facts = kb_io.load_facts(config.facts_path)
    return build_kb(schema, facts)


def cmd_load_check(config: RunConfig, out: Output) -> int:
    kb = load_kb(config)
    record = {"schema": SCHEMA_VERSION, "record": "kb", "types": len(kb.types),
              "relations": len(kb.relations), "groups": sorted(kb.groups),
              "entities": kb.n_entities, "tuples": kb.n_tuples, "kb_bytes": kb.memory_bytes()}
    out.record(record)
    table = Table(title="knowledge base")
    table.add_column("relation")
    table.add_column("signature")
    table.add_column("tuples", justify="right")
    for rel in kb.relations.values():
        table.add_row(rel.name, f"{rel.domain_type} -> {rel.range_type}", str(rel.matrix.nnz))
    out.table(table)
    out.text(f"{record['types']} types, {record['relations']} relations, "
             f"{record['entities']} entities, {record['tuples']} tuples")
    return 0


def cmd_query(config: RunConfig, query_text: str, out: Output) -> int:
    ctx = Context(load_kb(config), follow_strategy=config.follow_strategy)
    expr = ctx.query(query_text)
    if expr.type_name is None:
        raise UsageError("query does not denote a set of entities")
    rows = expr.eval(top_k=config.top_k, min_weight=config.min_weight)
    out.record({"schema": SCHEMA_VERSION, "record": "query", "seed": config.seed,
                "query": query_text, "type": expr.type_name,
                "result": [[name, weight] for name, weight in rows[0]]})
    out.text(format_multiset(rows[0]))
    return 0


def _resolve_group(ctx: Context, config: RunConfig) -> str:
    if config.group:
        return config.group
    if len(ctx.kb.groups) == 1:
        return next(iter(ctx.kb.groups))
    raise UsageError(f"--group is required; the KB has groups {sorted(ctx.kb.groups)}")


def _epoch_table(history: Sequence[EpochMetrics]) -> Table:
    table = Table(title="training")
    for col in ("epoch", "loss", "hits@1", "eval loss", "eval hits@1"):
        table.add_column(col, justify="right")
    for m in history:
        table.add_row(str(m.epoch), f"{m.loss:.4f}", f"{m.hits_at_1:.3f}",
                      "" if m.eval_loss is None else f"{m.eval_loss:.4f}",
                      "" if m.eval_hits_at_1 is None else f"{m.eval_hits_at_1:.3f}")
    return table


def cmd_train(config: RunConfig, out: Output, trainable: Sequence[str] = (),
              leftover: str = "drop") -> int:
    ctx = Context(load_kb(config), follow_strategy=config.follow_strategy,
                  trainable_relations=trainable)
    dataset = kb_io.load_dataset(config.dataset_path)
    eval_set = kb_io.load_dataset(config.eval_dataset_path) if config.eval_dataset_path else None
    group = _resolve_group(ctx, config)
    model = build_model(config.model, ctx, group, dataset, embedding_dim=config.embedding_dim,
                        max_hops=config.max_hops, leftover=leftover, seed=config.seed)
    out.text(f"seed: {config.seed}  model: {config.model}  examples: {len(dataset)}")
    result = train(model, dataset, config.optimizer, epochs=config.epochs,
                   batch_size=config.batch_size, seed=config.seed, loss_spec=config.loss,
                   eval_dataset=eval_set, on_epoch=lambda m: out.record(m.to_record()))
    metadata = {**model.metadata(), "seed": config.seed,
                "trainable_relations": sorted(trainable)}
    kb_io.save_checkpoint(result.parameters, config.checkpoint_path, metadata)
    out.table(_epoch_table(result.history))
    out.record({"schema": SCHEMA_VERSION, "record": "checkpoint",
                "path": config.checkpoint_path, "steps": result.steps})
    out.text(f"checkpoint written to {config.checkpoint_path}")
    return 0


def cmd_eval(config: RunConfig, out: Output) -> int:
    checkpoint = kb_io.load_checkpoint(config.checkpoint_path)
    meta = checkpoint.metadata
    ctx = Context(load_kb(config), follow_strategy=config.follow_strategy,
                  trainable_relations=meta.get("trainable_relations", ()))
    model = build_model(meta.get("model", config.model), ctx,
                        meta.get("group") or _resolve_group(ctx, config),
                        embedding_dim=meta.get("embedding_dim", config.embedding_dim),
                        max_hops=meta.get("max_hops", config.max_hops),
                        leftover=meta.get("leftover", "drop"),
                        phrase_length=meta.get("phrase_length", 3),
                        vocabulary=meta.get("vocabulary"))
    kb_io.restore_parameters(model.parameters() + ctx.trainable_parameters(), checkpoint)
    dataset = kb_io.load_dataset(config.dataset_path)
    loss, hits = evaluate(model, dataset, config.loss, config.batch_size)
    out.record({"schema": SCHEMA_VERSION, "record": "eval", "seed": config.seed,
                "examples": len(dataset), "loss": loss, "hits_at_1": hits})
    out.text(f"seed: {config.seed}  examples: {len(dataset)}  loss: {loss:.4f}  "
             f"hits@1: {hits:.3f}")
    return 0


def _peak_rss_bytes() -> int:
    try:
        import resource
    except ImportError:  # not available on Windows
        return 0
    usage = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    return int(usage if sys.platform == "darwin" else usage * 1024)


def _time_op(op: Callable[[np.ndarray], Any], batch: np.ndarray, repeats: int,
             threads: int) -> Tuple[float, float]:
    chunks = [c for c in np.array_split(batch, threads) if c.shape[0]] if threads > 1 else [batch]
    timings = []
    with ThreadPoolExecutor(max_workers=threads) as pool:
        for _ in range(repeats):
            start = time.perf_counter()
            if len(chunks) == 1:
                op(chunks[0])
            else:
                list(pool.map(op, chunks))
            timings.append((time.perf_counter() - start) * 1000.0)
    return float(np.median(timings)), float(np.percentile(timings, 95))


def run_bench(config: RunConfig, threads: int) -> BenchReport:
    k = config.bench_relations
    report = BenchReport(entities=config.bench_entities, tuples=0, relations=k, threads=threads,
                         kb_bytes=0, peak_rss_bytes=0)
    phase = "building the KB"
    try:
        kb = fixtures.generate_random_kb(config.bench_entities, config.bench_tuples,
                                         n_relations=k, seed=config.seed)
        report.tuples, report.kb_bytes = kb.n_tuples, kb.memory_bytes()
        ctx = Context(kb)
        n = kb.n_entities
        every_relation = ctx.all("rel_t")

        def seeds(rows: np.ndarray) -> graph.Expr:
            return ctx.as_nql(rows, "node_t")

        ops = {
            "relation": lambda rows: graph.forward(seeds(rows).rel("r0")),
            "chain3": lambda rows: graph.forward(
                seeds(rows).rel("r0").rel(f"r{1 % k}").rel(f"r{2 % k}")),
            "follow_all": lambda rows: graph.forward(seeds(rows).follow(every_relation)),
        }
        rng = np.random.default_rng(config.seed)
        for batch_size in (32, 1):
            batch = np.zeros((batch_size, n))
            if n:
                batch[np.arange(batch_size), rng.integers(n, size=batch_size)] = 1.0
            for name, op in ops.items():
                phase = f"{name} at batch {batch_size}"
                logger.info("bench: %s", phase)
                median, p95 = _time_op(op, batch, config.bench_repeats, threads)
                report.latencies.append(LatencyStats(name, batch_size, median, p95))
    except MemoryError:
        report.aborted = f"out of memory while {phase}"
        logger.error("bench aborted: %s", report.aborted)
    report.peak_rss_bytes = _peak_rss_bytes()
    return report


def cmd_bench(config: RunConfig, out: Output) -> int:
    threads = thread_count(config)
    report = run_bench(config, threads)
    for record in report.to_records():
        record["seed"] = config.seed
        out.record(record)
    table = Table(title=f"{report.entities} entities, {report.tuples} tuples, "
                        f"{threads} thread(s)")
    for col in ("op", "batch", "median ms", "p95 ms", "per row ms"):
        table.add_column(col, justify="right")
    for s in report.latencies:
        table.add_row(s.name, str(s.batch_size), f"{s.median_ms:.3f}", f"{s.p95_ms:.3f}",
                      f"{s.per_row_ms:.4f}")
    out.table(table)
    out.text(f"seed: {config.seed}  KB memory: {report.kb_bytes / 2**20:.1f} MiB  "
             f"peak RSS: {report.peak_rss_bytes / 2**20:.1f} MiB")
    if report.aborted:
        out.text(f"aborted: {report.aborted}")
        return 1
    return 0


def cmd_generate_kinship(config: RunConfig, spec: KinshipSpec, examples: int,
                         out: Output) -> int:
    paths = fixtures.write_kinship_bundle(config.output_path, spec, examples)
    out.record({"schema": SCHEMA_VERSION, "record": "generated", "seed": config.seed,
                "files": paths})
    out.text(f"seed: {config.seed}")
    for name, path in paths.items():
        out.text(f"wrote {path}")
    return 0


def _read_query(args: argparse.Namespace) -> str:
    if args.query_file:
        with open(args.query_file, encoding="utf-8") as f:
            return f.read()
    if not args.query:
        raise UsageError("give the query text or --query-file")
    return args.query


def main(argv: Optional[List[str]] = None, stdout: Optional[TextIO] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    configure_logging(args.verbose, args.debug)
    err = Console(stderr=True, highlight=False)
    out = Output(args.output_format, stdout)
    try:
        config = config_from_args(args)
        validate_config(config)
        out.record(config.to_record())
        if config.subcommand == "load-check":
            return cmd_load_check(config, out)
        if config.subcommand == "query":
            return cmd_query(config, _read_query(args), out)
        if config.subcommand == "train":
            return cmd_train(config, out, args.trainable_relations, args.leftover)
        if config.subcommand == "eval":
            return cmd_eval(config, out)
        if config.subcommand == "bench":
            return cmd_bench(config, out)
        spec = KinshipSpec(seed=config.seed, generations=args.generations,
                           persons_per_generation=args.persons,
                           marriage_prob=args.marriage_prob,
                           min_children=args.min_children, max_children=args.max_children,
                           remarriage_prob=args.remarriage_prob)
        return cmd_generate_kinship(config, spec, args.examples, out)
    except (QueryParseError, BindError) as exc:
        err.out(exc.render(), highlight=False)
        return 2
    except UsageError as exc:
        err.out(f"usage error: {exc}", highlight=False)
        return 2
    except (NQLError, OSError) as exc:
        err.out(f"error: {exc}", highlight=False)
        return 1


if __name__ == "__main__":
    sys.exit(main())
