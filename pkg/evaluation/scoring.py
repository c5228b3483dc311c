"""Keyword posteriors, utterance scores and streaming detection.

Posterior traces live on the decoder output grid (one value per
`total_stride` input frames); smoothing windows and the detection lockout
are counted on that grid.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from data.corpus import NegativeStream, Utterance
from model.network import ParameterSet, forward, receptive_field
from numerics.errors import ConfigError
from numerics.kernels import softmax

logger = logging.getLogger(__name__)

KEYWORD_CLASS = 1
SMOOTHING_WINDOW = 30
LOCKOUT = 100
CHUNK_FRAMES = 40_000


@dataclass(frozen=True)
class UtteranceScore:
    utterance_id: str
    score: float
    locale: int
    split: str


@dataclass(frozen=True)
class StreamTrace:
    """Smoothed keyword posterior over a negative stream."""

    smoothed: np.ndarray
    duration_hours: float


def keyword_posterior(decoder_logits: np.ndarray) -> np.ndarray:
    return softmax(decoder_logits)[:, KEYWORD_CLASS]


def smooth(posterior: np.ndarray, window: int = SMOOTHING_WINDOW) -> np.ndarray:
    """Trailing moving average of width min(window, frames so far)."""
    if window < 1:
        raise ConfigError(f"smoothing window must be >= 1, got {window}")
    posterior = np.asarray(posterior, dtype=np.float64)
    frames = posterior.size
    smoothed = np.empty(frames)
    head = min(window - 1, frames)
    if head:
        smoothed[:head] = np.cumsum(posterior[:head]) / np.arange(1, head + 1)
    if frames >= window:
        smoothed[window - 1 :] = sliding_window_view(posterior, window).mean(axis=1)
    return smoothed


def posterior_trace(
    params: ParameterSet,
    features: np.ndarray,
    locale=None,
    chunk_frames: int = CHUNK_FRAMES,
) -> np.ndarray:
    """Keyword posterior of a long sequence, computed in overlapping chunks.

    Each chunk is extended by the network's receptive field on both sides
    (rounded up to whole output frames) so the kept outputs match a single
    full-length forward pass.
    """
    features = np.asarray(features, dtype=np.float64)
    stride = params.config.total_stride
    frames = features.shape[0]
    out_frames = math.ceil(frames / stride)
    if frames <= chunk_frames:
        return keyword_posterior(forward(params, features, locale).decoder_logits)

    left, right = receptive_field(params.config)
    left_outputs = math.ceil(left / stride)
    right_outputs = math.ceil(right / stride)
    chunk_outputs = max(chunk_frames // stride, 1)
    pieces = []
    for first in range(0, out_frames, chunk_outputs):
        last = min(first + chunk_outputs, out_frames)
        begin = max(first - left_outputs, 0)
        end = min(last + right_outputs, out_frames)
        window = features[begin * stride : end * stride]
        posterior = keyword_posterior(forward(params, window, locale).decoder_logits)
        pieces.append(posterior[first - begin : last - begin])
        logger.debug("stream chunk %d..%d of %d", first, last, out_frames)
    return np.concatenate(pieces)


def utterance_score(
    params: ParameterSet,
    utterance: Utterance,
    locale=None,
    smoothing_window: int = SMOOTHING_WINDOW,
) -> UtteranceScore:
    """Maximum over frames of the smoothed keyword posterior."""
    posterior = keyword_posterior(forward(params, utterance.features, locale).decoder_logits)
    return UtteranceScore(
        utterance_id=utterance.id,
        score=float(smooth(posterior, smoothing_window).max()),
        locale=utterance.locale,
        split=utterance.split.value,
    )


def score_utterances(
    params: ParameterSet,
    utterances: list[Utterance],
    locale=None,
    smoothing_window: int = SMOOTHING_WINDOW,
    jobs: int = 1,
) -> list[UtteranceScore]:
    """Scores every utterance; the result is sorted by utterance id."""
    def score(utt: Utterance) -> UtteranceScore:
        return utterance_score(params, utt, locale, smoothing_window)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            scores = list(pool.map(score, utterances))
    else:
        scores = [score(utt) for utt in utterances]
    return sorted(scores, key=lambda s: s.utterance_id)


def detect_events(smoothed: np.ndarray, threshold: float, lockout: int = LOCKOUT) -> np.ndarray:
    """Frame indices of detection events on a smoothed posterior trace.

    An event fires on the first frame at or above the threshold and again
    whenever the posterior is still at or above it `lockout` frames after the
    previous event. The trace starts from posterior 0, so a threshold <= 0 is
    never crossed and fires nothing.
    """
    if lockout < 1:
        raise ConfigError(f"lockout must be >= 1, got {lockout}")
    if threshold <= 0.0:
        return np.empty(0, dtype=np.int64)
    above = np.flatnonzero(np.asarray(smoothed) >= threshold)
    events = []
    position = 0
    while position < above.size:
        frame = int(above[position])
        events.append(frame)
        position = int(np.searchsorted(above, frame + lockout, side="left"))
    return np.asarray(events, dtype=np.int64)


def score_stream(
    params: ParameterSet,
    negative_stream: NegativeStream,
    locale=None,
    smoothing_window: int = SMOOTHING_WINDOW,
    chunk_frames: int = CHUNK_FRAMES,
) -> StreamTrace:
    posterior = posterior_trace(params, negative_stream.features, locale, chunk_frames)
    return StreamTrace(
        smoothed=smooth(posterior, smoothing_window),
        duration_hours=negative_stream.duration_hours,
    )


def stream_detect(
    params: ParameterSet,
    negative_stream: NegativeStream,
    locale,
    threshold: float,
    lockout: int = LOCKOUT,
    smoothing_window: int = SMOOTHING_WINDOW,
) -> np.ndarray:
    if not 0.0 <= threshold <= 1.0:
        raise ConfigError(f"threshold must lie in [0, 1], got {threshold}")
    trace = score_stream(params, negative_stream, locale, smoothing_window)
    return detect_events(trace.smoothed, threshold, lockout)
