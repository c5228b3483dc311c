"""Per-variant evaluation, FRR reports, score caches, locale similarity and report comparison."""

import csv
import io
import json
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError

from data.corpus import Corpus, NegativeStream, Split
from evaluation.metrics import TARGET_FAH, OperatingPoint, calibrate_from_traces, compute_frr
from evaluation.scoring import (
    LOCKOUT,
    SMOOTHING_WINDOW,
    UtteranceScore,
    score_stream,
    score_utterances,
)
from model.checkpoint import Checkpoint
from model.network import ParameterSet, locale_similarity
from numerics.errors import KwsError

logger = logging.getLogger(__name__)

VARIANT_ORDER = ("locale-specific", "universal", "concat", "film")
CONDITIONS = (Split.EVAL_REGULAR.value, Split.EVAL_CHALLENGING.value)
AVERAGE = "AVERAGE"
REPORT_CSV = "report.csv"
REPORT_TEXT = "report.txt"
OPERATING_POINTS = "operating_points.json"


class ReportError(KwsError):
    pass


class GridMismatchError(KwsError):
    pass


@dataclass
class Variant:
    """One row of the report: a regime and the model serving each locale."""

    name: str
    models: dict[int, ParameterSet]
    conditioned: bool
    shared: bool

    def model_for(
        self, locale: int, locale_name: str, condition: str
    ) -> tuple[ParameterSet, int | None]:
        params = self.models.get(locale)
        if params is None:
            raise ReportError(
                f"no checkpoint for cell ({self.name}, {locale_name}, {condition})"
            )
        return params, locale if self.conditioned else None

    @property
    def crc(self) -> int:
        """CRC32 over every model's parameters, in locale then tensor order."""
        crc = 0
        for locale in sorted(self.models):
            for name, value in self.models[locale].tensors.items():
                crc = zlib.crc32(name.encode("utf-8"), crc)
                crc = zlib.crc32(np.ascontiguousarray(value).tobytes(), crc)
        return crc


def variants_from_checkpoints(
    checkpoints: list[Checkpoint], locale_names: list[str]
) -> list[Variant]:
    """Groups checkpoints by regime; locale-specific checkpoints fill one cell each."""
    grouped: dict[str, Variant] = {}
    for checkpoint in checkpoints:
        if checkpoint.locale_names != locale_names:
            raise ReportError(
                f"{checkpoint.regime} checkpoint serves {checkpoint.locale_names}, "
                f"corpus has {locale_names}"
            )
        name = checkpoint.regime
        if name not in VARIANT_ORDER:
            raise ReportError(f"unknown regime {name!r}")
        if name == "locale-specific":
            variant = grouped.setdefault(
                name, Variant(name=name, models={}, conditioned=False, shared=False)
            )
            index = locale_names.index(checkpoint.locale)
            if index in variant.models:
                raise ReportError(f"two locale-specific checkpoints for {checkpoint.locale}")
            variant.models[index] = checkpoint.params
        else:
            if name in grouped:
                raise ReportError(f"two {name} checkpoints given")
            grouped[name] = Variant(
                name=name,
                models={index: checkpoint.params for index in range(len(locale_names))},
                conditioned=name in ("concat", "film"),
                shared=True,
            )
    return [grouped[name] for name in VARIANT_ORDER if name in grouped]


class ScoreSettings(BaseModel):
    """Everything cached scores depend on besides the corpus."""

    model_config = ConfigDict(frozen=True)

    checkpoint_crc: int
    target_fah: float
    smoothing_window: int
    lockout: int


class CacheEntry(BaseModel):
    operating_point: OperatingPoint
    settings: ScoreSettings


@dataclass
class VariantScores:
    scores: list[UtteranceScore]
    operating_point: OperatingPoint
    settings: ScoreSettings | None = None


@dataclass
class EvalReport:
    locales: list[str]
    cells: dict[tuple[str, str], list[float]] = field(default_factory=dict)
    operating_points: dict[str, OperatingPoint] = field(default_factory=dict)

    @property
    def variants(self) -> list[str]:
        seen = []
        for variant, _ in self.cells:
            if variant not in seen:
                seen.append(variant)
        return seen

    @property
    def conditions(self) -> list[str]:
        seen = []
        for _, condition in self.cells:
            if condition not in seen:
                seen.append(condition)
        return seen

    def average(self, variant: str, condition: str) -> float:
        return float(np.mean(self.cells[(variant, condition)]))

    def cell(self, variant: str, locale: str, condition: str) -> float:
        try:
            return self.cells[(variant, condition)][self.locales.index(locale)]
        except (KeyError, ValueError):
            raise ReportError(f"no cell ({variant}, {locale}, {condition})") from None

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["variant", "condition"] + self.locales + [AVERAGE])
        for (variant, condition), values in self.cells.items():
            writer.writerow(
                [variant, condition]
                + [repr(float(value)) for value in values]
                + [repr(self.average(variant, condition))]
            )
        return buffer.getvalue()

    def to_text(self) -> str:
        """Aligned table, one block per condition, FRR in percent."""
        width = max([len(name) for name in self.variants] + [len("variant")])
        columns = self.locales + [AVERAGE]
        lines = []
        for condition in self.conditions:
            lines.append(f"{condition} FRR (%)")
            lines.append(
                "  ".join([f"{'variant':<{width}}"] + [f"{c:>8}" for c in columns])
            )
            for variant in self.variants:
                values = self.cells[(variant, condition)] + [self.average(variant, condition)]
                point = self.operating_points.get(variant)
                suffix = (
                    f"  (threshold {point.threshold:.4f}, {point.achieved_fah:.3f} FAh)"
                    if point
                    else ""
                )
                lines.append(
                    "  ".join([f"{variant:<{width}}"] + [f"{v:>8.2f}" for v in values]) + suffix
                )
            lines.append("")
        return "\n".join(lines)


def read_report_csv(path: Path | str) -> EvalReport:
    path = Path(path)
    with open(path, newline="") as handle:
        rows = list(csv.reader(handle))
    if not rows or rows[0][:2] != ["variant", "condition"] or rows[0][-1] != AVERAGE:
        raise ReportError(f"{path}: not a report CSV")
    report = EvalReport(locales=rows[0][2:-1])
    for row in rows[1:]:
        if len(row) != len(rows[0]):
            raise ReportError(f"{path}: ragged row {row[:2]}")
        report.cells[(row[0], row[1])] = [float(value) for value in row[2:-1]]
    return report


def _score_variant(
    variant: Variant,
    corpus: Corpus,
    stream: NegativeStream,
    target_fah: float,
    smoothing_window: int,
    lockout: int,
    jobs: int,
    settings: ScoreSettings,
) -> VariantScores:
    scores: list[UtteranceScore] = []
    for locale, name in enumerate(corpus.locale_names):
        for condition in CONDITIONS:
            params, locale_input = variant.model_for(locale, name, condition)
            positives = corpus.select(condition, locale=locale, positive=True)
            scores += score_utterances(params, positives, locale_input, smoothing_window, jobs)

    # an unconditioned shared model sees the stream the same way for every locale;
    # each trace is held to the target on its own, so one trace stands for all
    stream_locales = (
        [0] if variant.shared and not variant.conditioned else range(corpus.num_locales)
    )
    traces = []
    for locale in stream_locales:
        params, locale_input = variant.model_for(
            locale, corpus.locale_names[locale], "neg-stream"
        )
        traces.append(score_stream(params, stream, locale_input, smoothing_window))
    logger.info("%s: calibrating on %d stream trace(s)", variant.name, len(traces))
    point = calibrate_from_traces(traces, target_fah, lockout)
    return VariantScores(
        scores=sorted(scores, key=lambda s: s.utterance_id),
        operating_point=point,
        settings=settings,
    )


def report_from_scores(
    locale_names: list[str], scored: dict[str, VariantScores]
) -> EvalReport:
    report = EvalReport(locales=list(locale_names))
    for variant in [name for name in VARIANT_ORDER if name in scored]:
        result = scored[variant]
        report.operating_points[variant] = result.operating_point
        for condition in CONDITIONS:
            values = []
            for locale in range(len(locale_names)):
                cell = [
                    s.score for s in result.scores if s.locale == locale and s.split == condition
                ]
                if not cell:
                    raise ReportError(
                        f"no scores for cell ({variant}, {locale_names[locale]}, {condition})"
                    )
                values.append(100.0 * compute_frr(cell, result.operating_point.threshold))
            report.cells[(variant, condition)] = values
    return report


def write_scores(path: Path | str, scores: list[UtteranceScore], locale_names: list[str]) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["utterance_id", "locale", "split", "score"])
        for score in scores:
            writer.writerow(
                [score.utterance_id, locale_names[score.locale], score.split, repr(score.score)]
            )


def read_scores(path: Path | str, locale_names: list[str]) -> list[UtteranceScore]:
    with open(path, newline="") as handle:
        return [
            UtteranceScore(
                utterance_id=row["utterance_id"],
                score=float(row["score"]),
                locale=locale_names.index(row["locale"]),
                split=row["split"],
            )
            for row in csv.DictReader(handle)
        ]


def _read_cache(
    cache_dir: Path, locale_names: list[str]
) -> dict[str, VariantScores]:
    points_path = cache_dir / OPERATING_POINTS
    if not points_path.exists():
        return {}
    cached = {}
    for variant, document in json.loads(points_path.read_text()).items():
        try:
            entry = CacheEntry.model_validate(document)
        except ValidationError:
            logger.warning("%s: cache entry in %s is unreadable, ignoring it", variant, points_path)
            continue
        scores_path = cache_dir / f"scores_{variant}.csv"
        if scores_path.exists():
            cached[variant] = VariantScores(
                scores=read_scores(scores_path, locale_names),
                operating_point=entry.operating_point,
                settings=entry.settings,
            )
    return cached


def build_report(
    variants: list[Variant],
    corpus: Corpus,
    target_fah: float = TARGET_FAH,
    smoothing_window: int = SMOOTHING_WINDOW,
    lockout: int = LOCKOUT,
    jobs: int = 1,
    cache_dir: Path | str | None = None,
    stream: NegativeStream | None = None,
) -> tuple[EvalReport, dict[str, VariantScores]]:
    """FRR (%) per variant, locale and condition at each variant's operating point.

    With a cache directory, variants stored there with the same parameters,
    target, smoothing window and lockout are not re-scored.
    """
    if not variants:
        raise ReportError("no model variants to evaluate")
    cached = _read_cache(Path(cache_dir), corpus.locale_names) if cache_dir else {}
    scored: dict[str, VariantScores] = {}
    for variant in variants:
        settings = ScoreSettings(
            checkpoint_crc=variant.crc,
            target_fah=target_fah,
            smoothing_window=smoothing_window,
            lockout=lockout,
        )
        hit = cached.get(variant.name)
        if hit is not None and hit.settings == settings:
            logger.info("%s: using cached scores", variant.name)
            scored[variant.name] = hit
            continue
        if hit is not None:
            logger.info("%s: cached scores are stale, re-scoring", variant.name)
        if stream is None:
            stream = corpus.negative_stream()
        scored[variant.name] = _score_variant(
            variant, corpus, stream, target_fah, smoothing_window, lockout, jobs, settings
        )
    return report_from_scores(corpus.locale_names, scored), scored


def write_report(
    report: EvalReport,
    scored: dict[str, VariantScores],
    directory: Path | str,
) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / REPORT_CSV).write_text(report.to_csv())
    (directory / REPORT_TEXT).write_text(report.to_text())
    points = {
        name: {
            "operating_point": result.operating_point.model_dump(),
            "settings": None if result.settings is None else result.settings.model_dump(),
        }
        for name, result in scored.items()
    }
    (directory / OPERATING_POINTS).write_text(json.dumps(points, sort_keys=True, indent=2) + "\n")
    for name, result in scored.items():
        write_scores(directory / f"scores_{name}.csv", result.scores, report.locales)
    logger.info("wrote report for %d variants to %s", len(scored), directory)
    return directory


def similarity_report(checkpoint: Checkpoint, path: Path | str | None = None) -> str:
    """N x N locale correlation CSV with locale names on both axes."""
    matrix = locale_similarity(checkpoint.params)
    names = checkpoint.locale_names or [f"L{i}" for i in range(matrix.shape[0])]
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["locale"] + names)
    for name, row in zip(names, matrix):
        writer.writerow([name] + [repr(float(value)) for value in row])
    text = buffer.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def _relative(a: float, b: float) -> float | None:
    if a == 0.0:
        return 0.0 if b == 0.0 else None
    return (a - b) / a


def _pick_variant(report: EvalReport, requested: str | None, label: str) -> str:
    if requested is not None:
        if requested not in report.variants:
            raise GridMismatchError(f"report {label} has no variant {requested!r}")
        return requested
    if len(report.variants) != 1:
        raise GridMismatchError(
            f"report {label} holds {report.variants}; choose one with --variant-{label}"
        )
    return report.variants[0]


def compare_reports(
    report_a: EvalReport,
    report_b: EvalReport,
    variant_a: str | None = None,
    variant_b: str | None = None,
) -> dict:
    """Absolute and relative FRR change from variant a to variant b.

    Relative reduction is (a - b) / a per cell and per AVERAGE; it is None when
    a is 0 and b is not.
    """
    if report_a.locales != report_b.locales:
        raise GridMismatchError(
            f"locale grids differ: {report_a.locales} vs {report_b.locales}"
        )
    if sorted(report_a.conditions) != sorted(report_b.conditions):
        raise GridMismatchError(
            f"condition grids differ: {report_a.conditions} vs {report_b.conditions}"
        )
    name_a = _pick_variant(report_a, variant_a, "a")
    name_b = _pick_variant(report_b, variant_b, "b")

    cells = []
    averages = {}
    for condition in report_a.conditions:
        for locale in report_a.locales:
            a = report_a.cell(name_a, locale, condition)
            b = report_b.cell(name_b, locale, condition)
            cells.append(
                {
                    "condition": condition,
                    "locale": locale,
                    "frr_a": a,
                    "frr_b": b,
                    "delta": b - a,
                    "relative_reduction": _relative(a, b),
                }
            )
        a = report_a.average(name_a, condition)
        b = report_b.average(name_b, condition)
        averages[condition] = {
            "frr_a": a,
            "frr_b": b,
            "delta": b - a,
            "relative_reduction": _relative(a, b),
        }
    reductions = [
        entry["relative_reduction"]
        for entry in averages.values()
        if entry["relative_reduction"] is not None
    ]
    return {
        "variant_a": name_a,
        "variant_b": name_b,
        "cells": cells,
        "averages": averages,
        "mean_relative_reduction": float(np.mean(reductions)) if reductions else None,
    }
