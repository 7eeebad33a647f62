"""longscore command line: ingest, train, evaluate, bench and report."""
import os

# Thread caps must be exported before numpy loads its BLAS.
_THREADS = os.getenv("LONGSCORE_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ[_var] = _THREADS

import argparse  # noqa: E402
import asyncio  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from dataclasses import replace  # noqa: E402
from pathlib import Path  # noqa: E402
from typing import Any, Callable, Dict  # noqa: E402

from bench import bench_scaling, format_scaling_report  # noqa: E402
from common import (  # noqa: E402
    ConfigurationError,
    InputError,
    LongScoreError,
    SchemaError,
    UsageError,
    file_checksum,
)
from config import (  # noqa: E402
    LEDGER_PATH,
    LOG_LEVEL,
    bench_settings_from,
    config_hash,
    corpus_settings_from,
    describe_keys,
    load_config,
    model_config_from,
    train_config_from,
)
from corpus import (  # noqa: E402
    Corpus,
    Vocab,
    build_vocab,
    format_length_stats,
    format_rejects,
    ingest,
    length_stats,
    synthesize_corpus,
    write_corpus,
)
from ledger import record_run  # noqa: E402
from metrics import (  # noqa: E402
    format_report,
    human_baseline,
    report_from_dict,
    report_to_dict,
)
from model import (  # noqa: E402
    build_classifier,
    load_checkpoint,
    parameter_count,
    save_checkpoint,
)
from training import classifier_scorer, echo_scorer, evaluate, train  # noqa: E402

logger = logging.getLogger(__name__)

COMMANDS = ("ingest", "train", "evaluate", "bench", "report")
ECHO_CHECKPOINT = "echo"


class ArgumentParser(argparse.ArgumentParser):
    """Parser whose errors surface as UsageError instead of exiting."""

    def error(self, message: str):
        raise UsageError(message)


def configure_logging(level: str = LOG_LEVEL) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(level.upper())


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(
        prog="longscore",
        description="Long-context essay scoring toolkit.",
        epilog="config keys:\n" + describe_keys(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    commands = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub = commands.add_parser(name)
        sub.add_argument("--config", type=Path, default=None, help="key = value config file")
        sub.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        sub.add_argument("--out", type=Path, default=Path("out"), help="artifact directory")
        sub.add_argument("--format", choices=("text", "csv"), default="text")
        if name in ("train", "evaluate"):
            sub.add_argument("--arch", default=None, help="overrides the architecture key")
        if name == "evaluate":
            sub.add_argument("--checkpoint", required=True,
                             help=f"checkpoint file, or '{ECHO_CHECKPOINT}' for the echo stub")
            sub.add_argument("--name", default=None, help="model name in the report")
        if name in ("evaluate", "report"):
            sub.add_argument("--extended", action="store_true",
                             help="add context length and parameter count columns")
        if name == "report":
            sub.add_argument("--inputs", type=Path, nargs="+", required=True,
                             help="report.json files written by evaluate")
    return parser


# ============================================================================
# Commands
# ============================================================================


def _suffix(fmt: str) -> str:
    return "csv" if fmt == "csv" else "txt"


def _emit(out: Path, name: str, text: str) -> Path:
    path = out / name
    path.write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return path


def _load_corpus(values: Dict[str, Any]) -> Corpus:
    settings = corpus_settings_from(values)
    if settings.synthetic:
        low = settings.score_range[0] if settings.score_range else 1
        return synthesize_corpus(
            settings.synthetic_train,
            settings.synthetic_test,
            values["seed"],
            n_scores=settings.synthetic_scores,
            score_min=low,
            min_words=settings.synthetic_min_words,
            max_words=settings.synthetic_max_words,
        )
    if settings.path is None:
        raise ConfigurationError("set corpus_path or synthetic_train")
    return ingest(settings.path, settings.fmt, settings.column_map, settings.score_range)


def cmd_ingest(args, values: Dict[str, Any]) -> Dict[str, Path]:
    corpus = _load_corpus(values)
    artifacts = {"corpus.csv": args.out / "corpus.csv"}
    write_corpus(corpus.records, artifacts["corpus.csv"])
    suffix = _suffix(args.format)
    rejects = args.out / f"rejects.{suffix}"
    rejects.write_text(format_rejects(corpus.rejects, args.format), encoding="utf-8")
    artifacts[rejects.name] = rejects
    stats = _emit(args.out, f"length_stats.{suffix}",
                  format_length_stats(length_stats(corpus), args.format))
    artifacts[stats.name] = stats
    return artifacts


def cmd_train(args, values: Dict[str, Any]) -> Dict[str, Path]:
    corpus = _load_corpus(values)
    vocab = build_vocab(corpus.records, values["min_freq"])
    model = build_classifier(model_config_from(values, len(vocab), corpus.n_classes),
                             values["seed"])
    report = train(model, corpus, vocab, train_config_from(values))
    artifacts = {
        "model.lsck": args.out / "model.lsck",
        "vocab.txt": args.out / "vocab.txt",
        "labels.json": args.out / "labels.json",
        "train.log": args.out / "train.log",
    }
    save_checkpoint(model, artifacts["model.lsck"])
    vocab.save(artifacts["vocab.txt"])
    artifacts["labels.json"].write_text(
        json.dumps({"score_min": corpus.score_min, "score_max": corpus.score_max}) + "\n",
        encoding="utf-8",
    )
    artifacts["train.log"].write_text("\n".join(report.to_log_lines()) + "\n", encoding="utf-8")
    return artifacts


def _companion(checkpoint: Path, name: str) -> Path:
    path = checkpoint.parent / name
    if not path.is_file():
        raise InputError(f"{name} not found beside checkpoint {checkpoint}")
    return path


def _load_labels(path: Path) -> tuple[int, int]:
    try:
        labels = json.loads(path.read_text(encoding="utf-8"))
        return int(labels["score_min"]), int(labels["score_max"])
    except (ValueError, KeyError, TypeError) as e:
        raise SchemaError(f"{path} is not a label file: {e}") from e


def cmd_evaluate(args, values: Dict[str, Any]) -> Dict[str, Path]:
    corpus = _load_corpus(values)
    records = corpus.split("test")
    score_min, score_max = corpus.score_min, corpus.score_max
    if args.checkpoint == ECHO_CHECKPOINT:
        scorer = echo_scorer
        name = args.name or ECHO_CHECKPOINT
    else:
        checkpoint = Path(args.checkpoint)
        if not checkpoint.is_file():
            raise InputError(f"checkpoint {checkpoint} not found")
        vocab_path = _companion(checkpoint, "vocab.txt")
        score_min, score_max = _load_labels(_companion(checkpoint, "labels.json"))
        model = load_checkpoint(checkpoint)
        vocab = Vocab.load(vocab_path)
        scorer = classifier_scorer(model, vocab, score_min)
        name = args.name or model.config.architecture
    _, report = evaluate(scorer, records, score_min, score_max, name)
    if args.checkpoint != ECHO_CHECKPOINT:
        report = replace(report, context_length=model.config.max_length,
                         parameters=parameter_count(model))
    artifacts = {"report.json": args.out / "report.json"}
    artifacts["report.json"].write_text(
        json.dumps(report_to_dict(report), sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    table = _emit(args.out, f"report.{_suffix(args.format)}",
                  format_report([report], args.format, args.extended))
    artifacts[table.name] = table
    return artifacts


def cmd_bench(args, values: Dict[str, Any]) -> Dict[str, Path]:
    settings = bench_settings_from(values)
    report = bench_scaling(
        settings.mechanisms,
        settings.lengths,
        reps=settings.reps,
        d_model=settings.d_model,
        window_radius=settings.window_radius,
        state_dim=settings.state_dim,
        seed=settings.seed,
    )
    path = _emit(args.out, f"bench.{_suffix(args.format)}",
                 format_scaling_report(report, args.format))
    return {path.name: path}


def cmd_report(args, values: Dict[str, Any]) -> Dict[str, Path]:
    rows = []
    for path in args.inputs:
        if not path.is_file():
            raise InputError(f"report {path} not found")
        try:
            rows.append(report_from_dict(json.loads(path.read_text(encoding="utf-8"))))
        except (ValueError, KeyError, TypeError, AttributeError) as e:
            raise SchemaError(f"{path} is not a report: {e}") from e
    if values["human_baseline"] is not None:
        rows.append(human_baseline(values["human_baseline"]))
    table = format_report(rows, args.format, args.extended)
    path = _emit(args.out, f"table.{_suffix(args.format)}", table)
    return {path.name: path}


HANDLERS: Dict[str, Callable[..., Dict[str, Path]]] = {
    "ingest": cmd_ingest,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "bench": cmd_bench,
    "report": cmd_report,
}


# ============================================================================
# Entry point
# ============================================================================


def _ledger_path(out: Path) -> Path:
    return Path(LEDGER_PATH) if LEDGER_PATH else out / "runs.db"


def _record(args, manifest: Dict[str, Any], status: str) -> None:
    try:
        asyncio.run(record_run(_ledger_path(args.out), manifest, status))
    except Exception as e:
        logger.warning("⚠️ could not record run in ledger: %s", e)


def _fail(args, manifest: Dict[str, Any], category: str, detail: str) -> int:
    detail = " ".join(str(detail).split())
    print(f"error category={category} detail={detail}", file=sys.stderr)
    if args.out.is_dir():
        _record(args, manifest, f"error:{category}")
    return 1


def run(argv=None) -> int:
    """Dispatch one command; 0 on success, 1 on runtime errors, 2 on usage errors."""
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"error category={e.category} detail={e.detail}", file=sys.stderr)
        return 2
    except SystemExit as e:  # --help
        return int(e.code or 0)

    manifest: Dict[str, Any] = {"command": args.command}
    try:
        values = load_config(args.config)
        if args.seed is not None:
            values["seed"] = args.seed
        if getattr(args, "arch", None):
            values["architecture"] = args.arch
        manifest.update({"config_hash": config_hash(values), "seed": values["seed"]})
        args.out.mkdir(parents=True, exist_ok=True)
        logger.info("🚀 %s (seed %d) -> %s", args.command, values["seed"], args.out)
        artifacts = HANDLERS[args.command](args, values)
    except LongScoreError as e:
        return _fail(args, manifest, e.category, e.detail)
    except Exception as e:
        logger.debug("💥 %s failed", args.command, exc_info=True)
        return _fail(args, manifest, LongScoreError.category, f"{type(e).__name__}: {e}")

    manifest["artifacts"] = {name: file_checksum(path) for name, path in sorted(artifacts.items())}
    (args.out / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    _record(args, manifest, "ok")
    logger.info("✅ %s finished, %d artifacts", args.command, len(artifacts))
    return 0


def main() -> None:
    configure_logging()
    sys.exit(run())


if __name__ == "__main__":
    main()
