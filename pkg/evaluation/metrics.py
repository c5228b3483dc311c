"""FRR, FAh, threshold calibration and FRR-FAh curves."""

import logging

import numpy as np
from pydantic import BaseModel

from data.corpus import NegativeStream, Utterance
from evaluation.scoring import (
    LOCKOUT,
    SMOOTHING_WINDOW,
    StreamTrace,
    detect_events,
    score_stream,
    score_utterances,
)
from model.network import ParameterSet
from numerics.errors import KwsError

logger = logging.getLogger(__name__)

TARGET_FAH = 0.17
FAH_MAX = 0.5


class MetricError(KwsError):
    pass


class CalibrationError(KwsError):
    pass


class OperatingPoint(BaseModel):
    """A calibrated threshold.

    `achieved_fah` is the largest per-trace rate; `events` and
    `duration_hours` are totals over every trace scored.
    """

    threshold: float
    achieved_fah: float
    target_fah: float = TARGET_FAH
    events: int = 0
    duration_hours: float = 0.0
    traces: int = 1


class RocPoint(BaseModel):
    threshold: float
    fah: float
    frr: float


def compute_fah(events, duration_hours: float) -> float:
    """False accepts per hour; `events` is a count or a collection of events."""
    if duration_hours <= 0:
        raise MetricError(f"duration must be positive, got {duration_hours} h")
    count = events if isinstance(events, (int, np.integer)) else len(events)
    return count / duration_hours


def compute_frr(scores, threshold: float) -> float:
    """Fraction of positive scores strictly below the threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise MetricError("FRR needs at least one positive score")
    return float(np.count_nonzero(scores < threshold)) / scores.size


def local_maxima(smoothed: np.ndarray) -> np.ndarray:
    """Values of frames above their predecessor and not below their successor.

    The frame before the trace counts as 0 and the frame after it as -inf,
    so plateaus contribute their value once.
    """
    smoothed = np.asarray(smoothed, dtype=np.float64)
    if smoothed.size == 0:
        return smoothed
    previous = np.concatenate([[0.0], smoothed[:-1]])
    following = np.concatenate([smoothed[1:], [-np.inf]])
    return smoothed[(smoothed > previous) & (smoothed >= following)]


def calibration_candidates(traces: list[StreamTrace]) -> np.ndarray:
    """Thresholds at which some trace's event count can change, ascending.

    Each distinct peak contributes its value and the next float above it,
    the lowest threshold at which that peak no longer fires. Candidates above
    1.0 are dropped.
    """
    peaks = [local_maxima(trace.smoothed) for trace in traces]
    if not peaks:
        return np.empty(0)
    values = np.unique(np.concatenate(peaks))
    candidates = np.union1d(values, np.nextafter(values, np.inf))
    return candidates[candidates <= 1.0]


def stream_fah(
    traces: list[StreamTrace], threshold: float, lockout: int = LOCKOUT
) -> tuple[int, float]:
    """(total events, largest per-trace FAh) at a threshold.

    Each trace is the same negative stream seen through one locale's model or
    locale input, so every trace gets the full target on its own.
    """
    counts = [detect_events(trace.smoothed, threshold, lockout).size for trace in traces]
    worst = max(compute_fah(count, trace.duration_hours) for count, trace in zip(counts, traces))
    return int(sum(counts)), worst


def calibrate_from_traces(
    traces: list[StreamTrace], target_fah: float = TARGET_FAH, lockout: int = LOCKOUT
) -> OperatingPoint:
    """Smallest candidate threshold at which every trace stays at or under the target.

    FAh does not increase with the threshold, so candidates are swept from
    the top down and the sweep stops at the first violation. A stream without
    peaks calibrates to 0.
    """
    if target_fah < 0:
        raise MetricError(f"target FAh must be >= 0, got {target_fah}")
    if not traces:
        raise MetricError("calibration needs at least one stream trace")
    duration = sum(trace.duration_hours for trace in traces)
    candidates = calibration_candidates(traces)
    if candidates.size == 0:
        return OperatingPoint(
            threshold=0.0, achieved_fah=0.0, target_fah=target_fah, events=0,
            duration_hours=duration, traces=len(traces),
        )

    best = None
    for threshold in candidates[::-1]:
        events, fah = stream_fah(traces, float(threshold), lockout)
        if fah > target_fah:
            break
        best = OperatingPoint(
            threshold=float(threshold), achieved_fah=fah, target_fah=target_fah,
            events=events, duration_hours=duration, traces=len(traces),
        )
    if best is None:
        raise CalibrationError(
            f"even threshold {candidates[-1]:.6f} exceeds "
            f"{target_fah} FAh over {duration:.3f} h"
        )
    logger.info(
        "operating point: threshold %.6f, %.4f FAh (%d events over %d trace(s), %.3f h)",
        best.threshold, best.achieved_fah, best.events, len(traces), duration,
    )
    return best


def calibrate_threshold(
    params: ParameterSet,
    negative_stream: NegativeStream,
    locale=None,
    target_fah: float = TARGET_FAH,
    lockout: int = LOCKOUT,
    smoothing_window: int = SMOOTHING_WINDOW,
) -> OperatingPoint:
    if negative_stream.duration_hours <= 0:
        raise MetricError("the negative stream is empty")
    trace = score_stream(params, negative_stream, locale, smoothing_window)
    return calibrate_from_traces([trace], target_fah, lockout)


def roc_from_scores(
    traces: list[StreamTrace],
    positive_scores,
    fah_max: float = FAH_MAX,
    lockout: int = LOCKOUT,
    thresholds=(),
) -> list[RocPoint]:
    """FRR-FAh points for every candidate threshold with FAh <= fah_max.

    Candidates are the calibration candidates, the positive scores, one value
    just above the largest of them (the FAh = 0 end) and any extra
    `thresholds`, such as a calibrated operating point. Points come out
    sorted by FAh ascending, ties by threshold descending.
    """
    positive_scores = np.asarray(positive_scores, dtype=np.float64)
    if positive_scores.size == 0:
        raise MetricError("an FRR-FAh curve needs at least one positive score")
    candidates = np.concatenate([calibration_candidates(traces), positive_scores])
    candidates = np.unique(candidates[candidates > 0.0])
    top = np.nextafter(candidates[-1], np.inf) if candidates.size else 1.0
    candidates = np.union1d(np.append(candidates, top), np.asarray(thresholds, dtype=np.float64))

    points = []
    for threshold in candidates[::-1]:
        _, fah = stream_fah(traces, float(threshold), lockout)
        if fah > fah_max:
            break
        points.append(
            RocPoint(
                threshold=float(threshold), fah=fah, frr=compute_frr(positive_scores, threshold)
            )
        )
    return sorted(points, key=lambda point: (point.fah, -point.threshold))


def roc_curve(
    params: ParameterSet,
    positives: list[Utterance],
    negative_stream: NegativeStream,
    locale=None,
    fah_max: float = FAH_MAX,
    lockout: int = LOCKOUT,
    smoothing_window: int = SMOOTHING_WINDOW,
    jobs: int = 1,
    thresholds=(),
) -> list[RocPoint]:
    scores = score_utterances(params, positives, locale, smoothing_window, jobs)
    trace = score_stream(params, negative_stream, locale, smoothing_window)
    return roc_from_scores([trace], [s.score for s in scores], fah_max, lockout, thresholds)
