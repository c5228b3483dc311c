"""Batch entry point: python -m cli.main <command> [options].

Exit codes: 0 success, 1 other toolkit error, 2 configuration error,
3 I/O or file-format error, 4 training divergence, 5 calibration failure,
6 similarity on a non-FiLM checkpoint, 7 report grids do not match.
"""

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from cli.config import ExperimentConfig, load_experiment_config, schema
from data.corpus import Split, generate_corpus
from data.storage import CorpusFormatError, read_corpus, write_corpus
from evaluation.metrics import CalibrationError, calibrate_from_traces, roc_from_scores
from evaluation.report import (
    GridMismatchError,
    build_report,
    compare_reports,
    read_report_csv,
    similarity_report,
    variants_from_checkpoints,
    write_report,
)
from evaluation.scoring import score_stream, score_utterances
from model.checkpoint import SUFFIX, CheckpointFormatError, load_checkpoint
from model.config import ConditioningMode
from model.network import size_summary
from numerics.errors import ConfigError, KwsError
from training.trainer import (
    Regime,
    TrainingError,
    resolve_model_config,
    resume,
    save_trained,
    train,
)

logger = logging.getLogger("cli")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_TRAINING = 4
EXIT_CALIBRATION = 5
EXIT_NOT_FILM = 6
EXIT_GRID = 7


def _emit(document) -> None:
    sys.stdout.write(json.dumps(document, indent=2, sort_keys=True) + "\n")


def _experiment(args) -> ExperimentConfig:
    config = load_experiment_config(getattr(args, "config", None))
    return config.with_seed(getattr(args, "seed", None))


def _jobs(args, config: ExperimentConfig) -> int:
    return args.jobs if getattr(args, "jobs", None) else config.jobs


def cmd_gen_data(args) -> int:
    config = _experiment(args)
    specs = config.locale_specs()
    corpus = generate_corpus(config.corpus, specs, jobs=_jobs(args, config))
    out = Path(args.out or config.paths.corpus_dir)
    write_corpus(corpus, out)

    largest = max(spec.train_positives for spec in specs)
    _emit(
        {
            "corpus_dir": str(out),
            "seed": config.seed,
            "utterances": len(corpus.utterances),
            "locales": corpus.summary(),
            "low_resource": [
                spec.name for spec in specs if spec.train_positives * 10 <= largest
            ],
        }
    )
    return EXIT_OK


def cmd_train(args) -> int:
    config = _experiment(args)
    train_config = config.train
    if args.steps is not None:
        if args.steps < 1:
            raise ConfigError(f"--steps must be >= 1, got {args.steps}")
        train_config = train_config.model_copy(update={"steps": args.steps})
    corpus = read_corpus(args.corpus or config.paths.corpus_dir)
    out = Path(args.out or config.paths.checkpoint_dir)

    if args.resume:
        checkpoint = load_checkpoint(args.resume)
        trained = [resume(checkpoint, corpus, train_config)]
        append = True
    else:
        regime = Regime(args.regime)
        model_config = resolve_model_config(corpus, train_config, config.model)
        logger.info(
            "parameter totals by conditioning mode: %s",
            size_summary(model_config, corpus.num_locales),
        )
        trained = train(regime, corpus, train_config, model_config)
        append = False

    written = []
    final = {}
    for model in trained:
        written.append(str(save_trained(model, out, append_trace=append)))
        if model.trace:
            last = model.trace[-1]
            final[model.stem] = {
                "step": last.step,
                "loss_total": last.loss_total,
                "loss_enc": last.loss_enc,
                "loss_dec": last.loss_dec,
            }
    _emit({"checkpoints": written, "final_loss": final})
    return EXIT_OK


def _checkpoint_paths(entries: list[str]) -> list[Path]:
    paths = []
    for entry in entries:
        path = Path(entry)
        paths += sorted(path.glob(f"*{SUFFIX}")) if path.is_dir() else [path]
    return paths


def cmd_eval(args) -> int:
    config = _experiment(args)
    target = args.target_fah if args.target_fah is not None else config.target_fah
    corpus = read_corpus(args.corpus or config.paths.corpus_dir)
    checkpoints = [load_checkpoint(path) for path in _checkpoint_paths(args.checkpoints)]
    variants = variants_from_checkpoints(checkpoints, corpus.locale_names)
    out = Path(args.out or config.paths.report_dir)

    report, scored = build_report(
        variants,
        corpus,
        target_fah=target,
        smoothing_window=config.smoothing_window,
        lockout=config.lockout,
        jobs=_jobs(args, config),
        cache_dir=out if args.cache else None,
    )
    write_report(report, scored, out)
    sys.stderr.write(report.to_text() + "\n")
    return EXIT_OK


def cmd_curve(args) -> int:
    config = _experiment(args)
    target = args.target_fah if args.target_fah is not None else config.target_fah
    corpus = read_corpus(args.corpus or config.paths.corpus_dir)
    checkpoint = load_checkpoint(args.checkpoint)
    locale_name = args.locale or checkpoint.locale
    if locale_name is None:
        raise ConfigError("--locale is required for a model that serves several locales")
    if checkpoint.locale is not None and checkpoint.locale != locale_name:
        raise ConfigError(f"checkpoint was trained for {checkpoint.locale}, not {locale_name}")
    locale = corpus.locale_index(locale_name)
    locale_input = locale if checkpoint.params.mode != ConditioningMode.NONE else None

    positives = corpus.select(args.condition, locale=locale, positive=True)
    scores = score_utterances(
        checkpoint.params, positives, locale_input, config.smoothing_window, _jobs(args, config)
    )
    trace = score_stream(
        checkpoint.params, corpus.negative_stream(), locale_input, config.smoothing_window
    )
    point = calibrate_from_traces([trace], target, config.lockout)
    curve = roc_from_scores(
        [trace], [s.score for s in scores], lockout=config.lockout, thresholds=[point.threshold]
    )

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["threshold", "fah", "frr", "operating_point"])
        for row in curve:
            flag = int(row.threshold == point.threshold)
            writer.writerow([repr(row.threshold), repr(row.fah), repr(row.frr), flag])
    logger.info("wrote %d curve points to %s", len(curve), out)
    return EXIT_OK


def cmd_similarity(args) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    if checkpoint.params.mode != ConditioningMode.FILM:
        logger.error(
            "%s: locale similarity needs a FiLM checkpoint, got mode %s",
            args.checkpoint,
            checkpoint.params.mode.value,
        )
        return EXIT_NOT_FILM
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    similarity_report(checkpoint, out)
    logger.info("wrote locale similarity to %s", out)
    return EXIT_OK


def cmd_compare(args) -> int:
    summary = compare_reports(
        read_report_csv(args.report_a),
        read_report_csv(args.report_b),
        variant_a=args.variant_a,
        variant_b=args.variant_b,
    )
    _emit(summary)
    return EXIT_OK


def cmd_schema(args) -> int:
    _emit(schema())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kws", description="Multilingual keyword-spotting experiments"
    )
    parser.add_argument(
        "-v", "--verbose", action="store_true", help="log at DEBUG instead of INFO"
    )
    commands = parser.add_subparsers(dest="command", required=True)

    def command(name: str, handler, help_text: str) -> argparse.ArgumentParser:
        sub = commands.add_parser(name, help=help_text)
        sub.set_defaults(handler=handler)
        return sub

    gen = command("gen-data", cmd_gen_data, "generate and write the synthetic corpus")
    gen.add_argument("--config")
    gen.add_argument("--out")
    gen.add_argument("--seed", type=int)
    gen.add_argument("--jobs", type=int)

    trainer = command("train", cmd_train, "train one regime, or resume a checkpoint")
    trainer.add_argument("--config")
    trainer.add_argument("--regime", choices=[regime.value for regime in Regime])
    trainer.add_argument("--corpus")
    trainer.add_argument("--out")
    trainer.add_argument("--seed", type=int)
    trainer.add_argument("--steps", type=int, help="total step target")
    trainer.add_argument("--resume", help="checkpoint to continue from")

    evaluate = command("eval", cmd_eval, "calibrate and report FRR per variant")
    evaluate.add_argument("--config")
    evaluate.add_argument("--checkpoints", nargs="+", required=True)
    evaluate.add_argument("--corpus")
    evaluate.add_argument("--target-fah", type=float)
    evaluate.add_argument("--out")
    evaluate.add_argument("--cache", action="store_true", help="reuse scores stored in --out")
    evaluate.add_argument("--seed", type=int)
    evaluate.add_argument("--jobs", type=int)

    curve = command("curve", cmd_curve, "export the FRR-FAh curve of one model and locale")
    curve.add_argument("--config")
    curve.add_argument("--checkpoint", required=True)
    curve.add_argument("--corpus")
    curve.add_argument("--locale")
    curve.add_argument(
        "--condition",
        default=Split.EVAL_REGULAR.value,
        choices=[Split.EVAL_REGULAR.value, Split.EVAL_CHALLENGING.value],
    )
    curve.add_argument("--target-fah", type=float)
    curve.add_argument("--out", required=True)
    curve.add_argument("--seed", type=int)
    curve.add_argument("--jobs", type=int)

    similarity = command("similarity", cmd_similarity, "locale correlation of a FiLM model")
    similarity.add_argument("--checkpoint", required=True)
    similarity.add_argument("--out", required=True)

    compare = command("compare", cmd_compare, "relative FRR change between two reports")
    compare.add_argument("--report-a", required=True)
    compare.add_argument("--report-b", required=True)
    compare.add_argument("--variant-a")
    compare.add_argument("--variant-b")

    command("schema", cmd_schema, "print the experiment config JSON schema")
    return parser


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (OSError, CorpusFormatError, CheckpointFormatError)):
        return EXIT_IO
    if isinstance(exc, TrainingError):
        return EXIT_TRAINING
    if isinstance(exc, CalibrationError):
        return EXIT_CALIBRATION
    if isinstance(exc, GridMismatchError):
        return EXIT_GRID
    return EXIT_ERROR


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format=LOG_FORMAT,
        stream=sys.stderr,
    )
    if args.command == "train" and not args.resume and not args.regime:
        parser.error("train needs --regime or --resume")
    try:
        return args.handler(args)
    except (KwsError, OSError) as exc:
        logger.error("%s", exc)
        return exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
