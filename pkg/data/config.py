"""Corpus configuration and the built-in locale rosters."""

from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from numerics.rng import stream

KEYWORD_MIN_PHONEMES = 3
KEYWORD_MAX_PHONEMES = 6
SILENCE_ID = 0


class LocaleSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str
    phonemes: tuple[int, ...]
    keyword: tuple[int, ...]
    alt_keyword: tuple[int, ...] | None = None
    train_positives: int = 2000
    train_negatives: int = 1000
    eval_regular: int = 200
    eval_challenging: int = 200
    stream_negatives: int = 100

    @field_validator(
        "train_positives",
        "train_negatives",
        "eval_regular",
        "eval_challenging",
        "stream_negatives",
    )
    @classmethod
    def check_count(cls, value: int) -> int:
        if value < 0:
            raise ValueError("utterance counts must be >= 0")
        return value

    @model_validator(mode="after")
    def check_keywords(self) -> "LocaleSpec":
        if not self.phonemes or min(self.phonemes) <= SILENCE_ID:
            raise ValueError("phoneme inventory must be non-empty ids >= 1 (0 is silence)")
        for phrase in (self.keyword, self.alt_keyword):
            if phrase is None:
                continue
            if not KEYWORD_MIN_PHONEMES <= len(phrase) <= KEYWORD_MAX_PHONEMES:
                raise ValueError(
                    f"{self.name}: keywords have {KEYWORD_MIN_PHONEMES}..{KEYWORD_MAX_PHONEMES} "
                    f"phonemes, got {len(phrase)}"
                )
            if not set(phrase) <= set(self.phonemes):
                raise ValueError(f"{self.name}: keyword phonemes must come from the inventory")
        return self

    def phrases(self) -> list[tuple[int, ...]]:
        return [self.keyword] + ([self.alt_keyword] if self.alt_keyword else [])


class CorpusConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    pool_size: int = 24
    feature_dim: int = 40
    frames_per_phoneme: float = 8.0
    frames_jitter: int = 3
    min_phoneme_frames: int = 3
    prototype_spread: float = 1.0
    within_phoneme_jitter: float = 0.35
    silence_frames: tuple[int, int] = (6, 14)
    filler_phonemes: tuple[int, int] = (0, 3)
    negative_phonemes: tuple[int, int] = (4, 10)
    regular_snr_db: tuple[float, float] = (12.0, 20.0)
    challenging_snr_db: tuple[float, float] = (0.0, 6.0)
    augment_snr_db: tuple[float, float] | None = (0.0, 20.0)
    max_shift_frames: int = 5
    max_gain_db: float = 3.0
    replica_count: int = 5
    frame_period_ms: float = 10.0
    negative_stream_hours: float = 2.0
    decoy_rate: float = 0.3
    seed: int = 0

    @model_validator(mode="after")
    def check_ranges(self) -> "CorpusConfig":
        ranges = {
            "silence_frames": self.silence_frames,
            "filler_phonemes": self.filler_phonemes,
            "negative_phonemes": self.negative_phonemes,
            "regular_snr_db": self.regular_snr_db,
            "challenging_snr_db": self.challenging_snr_db,
        }
        if self.augment_snr_db is not None:
            ranges["augment_snr_db"] = self.augment_snr_db
        for name, (low, high) in ranges.items():
            if low > high:
                raise ValueError(f"{name}: lower bound {low} exceeds upper bound {high}")
        if self.challenging_snr_db[1] > self.regular_snr_db[0]:
            raise ValueError("challenging and regular SNR tiers must be disjoint")
        if self.silence_frames[0] <= self.max_shift_frames:
            raise ValueError(
                "lead/trail silence must be longer than the largest time shift so "
                "shifted keywords never wrap around"
            )
        if min(self.feature_dim, self.min_phoneme_frames, self.negative_phonemes[0]) < 1:
            raise ValueError("feature_dim, min_phoneme_frames and negative lengths must be >= 1")
        if min(self.max_shift_frames, self.replica_count, self.frames_jitter) < 0:
            raise ValueError("shift, replica count and jitter must be >= 0")
        if self.max_gain_db < 0 or not 0.0 <= self.decoy_rate <= 1.0:
            raise ValueError("max_gain_db must be >= 0 and decoy_rate in [0, 1]")
        if self.frame_period_ms <= 0:
            raise ValueError("frame_period_ms must be positive")
        return self


def _span(start: int, stop: int) -> tuple[int, ...]:
    return tuple(range(start, stop + 1))


def default_locale_specs(twins: bool = False) -> list[LocaleSpec]:
    """The 4-locale desk roster: two full locales and two at a tenth of the volume.

    With twins=True a fifth locale NB_NO copies DA_DK's inventory, keyword and
    volume under another name.
    """
    small = dict(train_positives=200, train_negatives=100)
    specs = [
        LocaleSpec(name="DE_DE", phonemes=_span(1, 14), keyword=(3, 7, 12, 5)),
        LocaleSpec(name="ES_ES", phonemes=_span(8, 21), keyword=(9, 16, 11, 20, 14)),
        LocaleSpec(
            name="DA_DK",
            phonemes=_span(1, 6) + _span(15, 22),
            keyword=(4, 17, 2, 21),
            **small,
        ),
        LocaleSpec(
            name="SV_SE",
            phonemes=_span(5, 12) + _span(18, 24),
            keyword=(6, 19, 10, 23, 8),
            **small,
        ),
    ]
    if twins:
        specs.append(specs[2].model_copy(update={"name": "NB_NO"}))
    return specs


WIDE_LOCALES = (
    "DA_DK", "DE_DE", "ES_ES", "FR_FR", "IT_IT",
    "KO_KR", "NL_NL", "PT_BR", "SV_SE", "TH_TH",
)
LOW_RESOURCE_LOCALES = ("DA_DK", "SV_SE")


def wide_locale_specs(pool_size: int = 24, seed: int = 0) -> list[LocaleSpec]:
    """Ten locales; DA_DK and SV_SE carry a tenth of the training volume.

    Each locale owns a window of 14 pool ids starting at a locale-specific
    offset, so neighbouring locales overlap. Two keyword phrasings are drawn
    from the window.
    """
    specs = []
    width = min(14, pool_size)
    for index, name in enumerate(WIDE_LOCALES):
        start = (index * 5) % pool_size
        inventory = tuple(sorted(1 + (start + k) % pool_size for k in range(width)))
        rng = stream(seed, "wide-roster", name)
        keyword = tuple(int(p) for p in rng.choice(inventory, size=4, replace=False))
        alt = tuple(int(p) for p in rng.choice(inventory, size=4, replace=False))
        if alt == keyword:
            alt = keyword[::-1]
        volume = (
            dict(train_positives=200, train_negatives=100)
            if name in LOW_RESOURCE_LOCALES
            else {}
        )
        specs.append(
            LocaleSpec(
                name=name, phonemes=inventory, keyword=keyword, alt_keyword=alt, **volume
            )
        )
    return specs
