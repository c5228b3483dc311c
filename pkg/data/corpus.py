"""Synthetic multilingual keyword corpus.

Utterances are sequences of phoneme prototypes drawn from one global pool
shared by every locale, so two locales that use the same pool id hear the
same sound. Frame labels come straight from the synthesis boundaries. Every
utterance draws its randomness from a stream keyed by (seed, utterance id),
which makes serial and parallel generation identical.
"""

import functools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from data.config import SILENCE_ID, CorpusConfig, LocaleSpec
from model.config import ENCODER_LOGITS_DIM
from numerics.errors import ConfigError, DegenerateInputError, KwsError, ShapeError
from numerics.rng import stream

logger = logging.getLogger(__name__)

MAX_ATTEMPTS = 200
# draws stay this far inside an SNR tier so the measured value respects the tier bounds
TIER_MARGIN_DB = 1e-6


class DataError(KwsError):
    pass


class Split(str, Enum):
    TRAIN = "train"
    EVAL_REGULAR = "eval-reg"
    EVAL_CHALLENGING = "eval-chall"
    NEGATIVE_STREAM = "neg-stream"


@dataclass(frozen=True)
class FrameLabels:
    encoder: np.ndarray
    decoder: np.ndarray
    keyword_span: tuple[int, int] | None = None

    def __post_init__(self):
        encoder = np.asarray(self.encoder, dtype=np.uint8)
        decoder = np.asarray(self.decoder, dtype=np.uint8)
        if encoder.shape != decoder.shape or encoder.ndim != 1:
            raise ShapeError(
                f"encoder and decoder labels must be equal-length vectors, got "
                f"{encoder.shape} and {decoder.shape}"
            )
        object.__setattr__(self, "encoder", encoder)
        object.__setattr__(self, "decoder", decoder)

    def __len__(self) -> int:
        return int(self.encoder.size)


@dataclass(frozen=True)
class Utterance:
    id: str
    locale: int
    features: np.ndarray
    labels: FrameLabels
    is_positive: bool
    split: Split
    snr_db: float | None = None

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] != len(self.labels):
            raise ShapeError(
                f"{self.id}: {len(self.labels)} label frames for features of shape "
                f"{self.features.shape}"
            )

    @property
    def num_frames(self) -> int:
        return int(self.features.shape[0])


@dataclass(frozen=True)
class NegativeStream:
    features: np.ndarray
    decoder: np.ndarray
    frame_period_ms: float
    tile_ids: list[str] = field(default_factory=list)

    @property
    def num_frames(self) -> int:
        return int(self.features.shape[0])

    @property
    def duration_hours(self) -> float:
        return self.num_frames * self.frame_period_ms / 3_600_000.0


@dataclass
class Corpus:
    config: CorpusConfig
    locales: list[LocaleSpec]
    utterances: list[Utterance]
    _pools: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    @property
    def locale_names(self) -> list[str]:
        return [spec.name for spec in self.locales]

    @property
    def num_locales(self) -> int:
        return len(self.locales)

    def locale_index(self, name: str) -> int:
        try:
            return self.locale_names.index(name)
        except ValueError:
            raise DataError(f"unknown locale {name!r}, corpus has {self.locale_names}") from None

    def select(
        self,
        split: Split | str | None = None,
        locale: int | None = None,
        positive: bool | None = None,
    ) -> list[Utterance]:
        split = None if split is None else Split(split)
        return [
            utt
            for utt in self.utterances
            if (split is None or utt.split == split)
            and (locale is None or utt.locale == locale)
            and (positive is None or utt.is_positive == positive)
        ]

    def training_pool(self, locale: int | None = None) -> list[Utterance]:
        """Original train-split utterances of one locale, or of all locales."""
        if locale not in self._pools:
            self._pools[locale] = self.select(Split.TRAIN, locale=locale)
        return self._pools[locale]

    def negative_stream(self, target_hours: float | None = None) -> NegativeStream:
        hours = self.config.negative_stream_hours if target_hours is None else target_hours
        return build_negative_stream(
            self.select(Split.NEGATIVE_STREAM), hours, self.config
        )

    def summary(self) -> dict:
        counts: dict = {}
        for utt in self.utterances:
            per_split = counts.setdefault(self.locales[utt.locale].name, {})
            slot = per_split.setdefault(utt.split.value, {"positive": 0, "negative": 0})
            slot["positive" if utt.is_positive else "negative"] += 1
        return counts


def utterance_id(locale: str, split: Split, positive: bool, index: int) -> str:
    return f"{locale}_{split.value}_{'p' if positive else 'n'}{index:05d}"


@functools.lru_cache(maxsize=8)
def phoneme_prototypes(config: CorpusConfig) -> np.ndarray:
    """(pool_size + 1, feature_dim) prototype table; row 0 is silence (zeros)."""
    table = np.zeros((config.pool_size + 1, config.feature_dim))
    for pid in range(1, config.pool_size + 1):
        rng = stream(config.seed, "prototype", pid)
        table[pid] = rng.normal(0.0, config.prototype_spread, config.feature_dim)
    table.setflags(write=False)
    return table


def check_setup(config: CorpusConfig, specs: list[LocaleSpec]) -> None:
    if config.pool_size + 1 > ENCODER_LOGITS_DIM:
        raise ConfigError(
            f"pool_size {config.pool_size} + silence exceeds the {ENCODER_LOGITS_DIM} "
            "encoder classes"
        )
    if not specs:
        raise ConfigError("at least one locale is required")
    names = [spec.name for spec in specs]
    if len(set(names)) != len(names):
        raise ConfigError(f"locale names must be unique, got {names}")
    for spec in specs:
        if not spec.keyword:
            raise ConfigError(f"{spec.name}: empty keyword")
        if max(spec.phonemes) > config.pool_size:
            raise ConfigError(
                f"{spec.name}: phoneme ids must lie in 1..{config.pool_size}, "
                f"got {max(spec.phonemes)}"
            )
        if not set(spec.keyword) <= set(spec.phonemes):
            raise ConfigError(f"{spec.name}: keyword phonemes must come from the inventory")


def _contains(sequence: list[int], phrase: tuple[int, ...]) -> int:
    width = len(phrase)
    return sum(
        1 for start in range(len(sequence) - width + 1)
        if tuple(sequence[start : start + width]) == phrase
    )


def _render(
    sequence: list[int], rng: np.random.Generator, config: CorpusConfig
) -> tuple[np.ndarray, np.ndarray, list[tuple[int, int]]]:
    """Frames, per-frame class ids and per-phoneme [start, end) segments."""
    lead, trail = rng.integers(config.silence_frames[0], config.silence_frames[1] + 1, size=2)
    mean = int(round(config.frames_per_phoneme))
    durations = rng.integers(
        mean - config.frames_jitter, mean + config.frames_jitter + 1, size=len(sequence)
    )
    durations = np.maximum(durations, config.min_phoneme_frames)

    segments = []
    cursor = int(lead)
    for duration in durations:
        segments.append((cursor, cursor + int(duration)))
        cursor += int(duration)
    ids = np.concatenate(
        [
            np.full(int(lead), SILENCE_ID),
            np.repeat(np.asarray(sequence, dtype=np.int64), durations),
            np.full(int(trail), SILENCE_ID),
        ]
    ).astype(np.uint8)
    prototypes = phoneme_prototypes(config)
    features = prototypes[ids] + rng.normal(
        0.0, config.within_phoneme_jitter, size=(ids.size, config.feature_dim)
    )
    return features, ids, segments


def add_noise(
    features: np.ndarray, snr_db: float, rng: np.random.Generator
) -> tuple[np.ndarray, float]:
    """Adds white Gaussian noise scaled to snr_db over feature energy.

    Returns the noisy features and the SNR measured from the injected noise.
    """
    signal_power = float(np.mean(features * features))
    if signal_power == 0.0:
        raise DegenerateInputError("cannot set an SNR on an all-zero signal")
    noise = rng.standard_normal(features.shape)
    target_power = signal_power / 10.0 ** (snr_db / 10.0)
    noise *= np.sqrt(target_power / np.mean(noise * noise))
    realized = 10.0 * np.log10(signal_power / float(np.mean(noise * noise)))
    return features + noise, float(realized)


def _tier_snr(rng: np.random.Generator, tier: tuple[float, float]) -> float:
    low, high = tier
    low, high = low + TIER_MARGIN_DB, max(high - TIER_MARGIN_DB, low + TIER_MARGIN_DB)
    return float(rng.uniform(low, high))


def _positive_sequence(
    spec: LocaleSpec, rng: np.random.Generator, config: CorpusConfig
) -> tuple[list[int], int, int]:
    phrases = spec.phrases()
    low, high = config.filler_phonemes
    for _ in range(MAX_ATTEMPTS):
        phrase = phrases[int(rng.integers(len(phrases)))]
        left = [int(p) for p in rng.choice(spec.phonemes, size=int(rng.integers(low, high + 1)))]
        right = [int(p) for p in rng.choice(spec.phonemes, size=int(rng.integers(low, high + 1)))]
        sequence = left + list(phrase) + right
        if sum(_contains(sequence, candidate) for candidate in phrases) == 1:
            return sequence, len(left), len(phrase)
    raise ConfigError(f"{spec.name}: could not place a single keyword span; inventory too small")


def _negative_sequence(
    spec: LocaleSpec,
    rng: np.random.Generator,
    config: CorpusConfig,
    forbidden: list[tuple[int, ...]],
    decoys: list[tuple[int, ...]],
) -> list[int]:
    low, high = config.negative_phonemes
    for _ in range(MAX_ATTEMPTS):
        sequence = [
            int(p) for p in rng.choice(spec.phonemes, size=int(rng.integers(low, high + 1)))
        ]
        if decoys and rng.random() < config.decoy_rate:
            decoy = decoys[int(rng.integers(len(decoys)))]
            at = int(rng.integers(len(sequence) + 1))
            sequence = sequence[:at] + list(decoy) + sequence[at:]
        if not any(_contains(sequence, phrase) for phrase in forbidden):
            return sequence
    raise ConfigError(f"{spec.name}: could not build a keyword-free negative")


@dataclass(frozen=True)
class _Job:
    locale: int
    split: Split
    positive: bool
    index: int


def _synthesize(job: _Job, config: CorpusConfig, specs: list[LocaleSpec]) -> Utterance:
    spec = specs[job.locale]
    uid = utterance_id(spec.name, job.split, job.positive, job.index)
    rng = stream(config.seed, "utterance", uid)

    if job.positive:
        sequence, first, width = _positive_sequence(spec, rng, config)
    elif job.split == Split.NEGATIVE_STREAM:
        every_phrase = [phrase for other in specs for phrase in other.phrases()]
        sequence = _negative_sequence(spec, rng, config, every_phrase, [])
    else:
        own = spec.phrases()
        decoys = sorted(
            {phrase for other in specs for phrase in other.phrases() if phrase not in own}
        )
        sequence = _negative_sequence(spec, rng, config, own, decoys)

    features, ids, segments = _render(sequence, rng, config)
    decoder = np.zeros(ids.size, dtype=np.uint8)
    span = None
    if job.positive:
        last_start, last_end = segments[first + width - 1]
        decoder[last_start:last_end] = 1
        span = (segments[first][0], last_end)

    snr_db = None
    if job.split == Split.EVAL_CHALLENGING:
        features, snr_db = add_noise(features, _tier_snr(rng, config.challenging_snr_db), rng)
    elif job.split in (Split.EVAL_REGULAR, Split.NEGATIVE_STREAM):
        features, snr_db = add_noise(features, _tier_snr(rng, config.regular_snr_db), rng)

    return Utterance(
        id=uid,
        locale=job.locale,
        features=features.astype(np.float32),
        labels=FrameLabels(encoder=ids, decoder=decoder, keyword_span=span),
        is_positive=job.positive,
        split=job.split,
        snr_db=snr_db,
    )


def _jobs(specs: list[LocaleSpec]) -> list[_Job]:
    jobs = []
    for locale, spec in enumerate(specs):
        plan = [
            (Split.TRAIN, True, spec.train_positives),
            (Split.TRAIN, False, spec.train_negatives),
            (Split.EVAL_REGULAR, True, spec.eval_regular),
            (Split.EVAL_REGULAR, False, spec.eval_regular),
            (Split.EVAL_CHALLENGING, True, spec.eval_challenging),
            (Split.EVAL_CHALLENGING, False, spec.eval_challenging),
            (Split.NEGATIVE_STREAM, False, spec.stream_negatives),
        ]
        for split, positive, count in plan:
            jobs.extend(_Job(locale, split, positive, index) for index in range(count))
    return jobs


def generate_corpus(
    config: CorpusConfig, locale_specs: list[LocaleSpec], jobs: int = 1
) -> Corpus:
    """Synthesizes train, eval-reg, eval-chall and negative-stream utterances.

    Eval splits carry as many negatives as positives. Output is sorted by id
    and does not depend on `jobs`.
    """
    specs = list(locale_specs)
    check_setup(config, specs)
    plan = _jobs(specs)
    logger.info(
        "generating %d utterances for %d locales (seed %d, %d workers)",
        len(plan), len(specs), config.seed, jobs,
    )
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            utterances = list(pool.map(lambda job: _synthesize(job, config, specs), plan))
    else:
        utterances = [_synthesize(job, config, specs) for job in plan]
    utterances.sort(key=lambda utt: utt.id)

    corpus = Corpus(config=config, locales=specs, utterances=utterances)
    for name, splits in corpus.summary().items():
        logger.debug("%s: %s", name, splits)
    return corpus


def augment(utterance: Utterance, config: CorpusConfig, replica_index: int) -> Utterance:
    """Replica `replica_index` of an utterance: gain, circular shift, then noise.

    The shift moves labels and keyword span with the features.
    """
    if not 0 <= replica_index < config.replica_count:
        raise ConfigError(
            f"replica_index {replica_index} outside [0, {config.replica_count})"
        )
    rng = stream(config.seed, "augment", utterance.id, replica_index)
    gain_db = rng.uniform(-config.max_gain_db, config.max_gain_db)
    shift = int(rng.integers(-config.max_shift_frames, config.max_shift_frames + 1))

    gain = 10.0 ** (gain_db / 20.0)
    features = np.roll(utterance.features.astype(np.float64) * gain, shift, axis=0)
    snr_db = utterance.snr_db
    if config.augment_snr_db is not None:
        features, snr_db = add_noise(features, float(rng.uniform(*config.augment_snr_db)), rng)

    span = utterance.labels.keyword_span
    labels = FrameLabels(
        encoder=np.roll(utterance.labels.encoder, shift),
        decoder=np.roll(utterance.labels.decoder, shift),
        keyword_span=None if span is None else (span[0] + shift, span[1] + shift),
    )
    return Utterance(
        id=f"{utterance.id}~r{replica_index}",
        locale=utterance.locale,
        features=features.astype(np.float32),
        labels=labels,
        is_positive=utterance.is_positive,
        split=utterance.split,
        snr_db=snr_db,
    )


def replicas(utterance: Utterance, config: CorpusConfig) -> list[Utterance]:
    return [augment(utterance, config, index) for index in range(config.replica_count)]


def build_negative_stream(
    utterances: list[Utterance], target_hours: float, config: CorpusConfig
) -> NegativeStream:
    """Tiles negatives into one contiguous stream of exactly target_hours.

    Each pass over the sources uses a seeded permutation; passes after the
    first use augmented replicas of the sources.
    """
    if target_hours <= 0:
        raise ConfigError(f"target_hours must be positive, got {target_hours}")
    sources = sorted(utterances, key=lambda utt: utt.id)
    if not sources:
        raise ConfigError("a negative stream needs at least one negative utterance")
    if any(utt.is_positive for utt in sources):
        raise DataError("negative stream sources must not contain keyword utterances")
    target_frames = int(round(target_hours * 3_600_000.0 / config.frame_period_ms))

    pieces, decoders, tile_ids = [], [], []
    total = 0
    round_index = 0
    while total < target_frames:
        order = stream(config.seed, "negative-stream", round_index).permutation(len(sources))
        for position in order:
            tile = sources[int(position)]
            if round_index > 0 and config.replica_count > 0:
                tile = augment(tile, config, (round_index - 1) % config.replica_count)
            take = min(tile.num_frames, target_frames - total)
            pieces.append(tile.features[:take])
            decoders.append(tile.labels.decoder[:take])
            tile_ids.append(tile.id)
            total += take
            if total >= target_frames:
                break
        round_index += 1

    built = NegativeStream(
        features=np.concatenate(pieces).astype(np.float32),
        decoder=np.concatenate(decoders),
        frame_period_ms=config.frame_period_ms,
        tile_ids=tile_ids,
    )
    logger.info(
        "negative stream: %d frames (%.3f h) from %d tiles",
        built.num_frames, built.duration_hours, len(tile_ids),
    )
    return built
