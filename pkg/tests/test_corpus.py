import numpy as np
import pytest
from pydantic import ValidationError

from data.config import CorpusConfig, LocaleSpec, default_locale_specs, wide_locale_specs
from data.corpus import (
    DataError,
    Split,
    add_noise,
    augment,
    build_negative_stream,
    check_setup,
    generate_corpus,
    replicas,
    utterance_id,
)
from numerics.errors import ConfigError, DegenerateInputError
from numerics.rng import stream
from tests.conftest import tiny_specs


def _measured_snr(clean: np.ndarray, noisy: np.ndarray) -> float:
    clean = clean.astype(np.float64)
    noise = noisy.astype(np.float64) - clean
    return 10.0 * np.log10(np.mean(clean * clean) / np.mean(noise * noise))


def _contains(sequence, phrase) -> int:
    width = len(phrase)
    return sum(
        1 for start in range(len(sequence) - width + 1)
        if tuple(sequence[start : start + width]) == tuple(phrase)
    )


def _phonemes(encoder_labels: np.ndarray) -> list[int]:
    """Collapses frame labels back to the phoneme sequence, silence dropped."""
    runs = [int(v) for i, v in enumerate(encoder_labels) if i == 0 or v != encoder_labels[i - 1]]
    return [p for p in runs if p != 0]


class TestLocaleSpecs:
    """Locale and corpus configuration validation"""

    def test_desk_roster(self):
        """Two full locales and two at a tenth of the volume"""
        specs = default_locale_specs()
        assert [spec.name for spec in specs] == ["DE_DE", "ES_ES", "DA_DK", "SV_SE"]
        assert [spec.train_positives for spec in specs] == [2000, 2000, 200, 200]

    def test_twin_roster(self):
        """The twin roster adds NB_NO as a copy of DA_DK"""
        specs = default_locale_specs(twins=True)
        assert specs[-1].name == "NB_NO"
        assert specs[-1].keyword == specs[2].keyword
        assert specs[-1].phonemes == specs[2].phonemes

    def test_wide_roster(self):
        """Ten locales, two of them low-resource, each with two phrasings"""
        specs = wide_locale_specs()
        assert len(specs) == 10
        small = [spec.name for spec in specs if spec.train_positives == 200]
        assert small == ["DA_DK", "SV_SE"]
        for spec in specs:
            assert spec.alt_keyword is not None
            assert spec.alt_keyword != spec.keyword
            assert set(spec.keyword) <= set(spec.phonemes)

    def test_keyword_length(self):
        """Keywords have three to six phonemes"""
        with pytest.raises(ValidationError):
            LocaleSpec(name="XX", phonemes=(1, 2, 3), keyword=(1, 2))
        with pytest.raises(ValidationError):
            LocaleSpec(name="XX", phonemes=tuple(range(1, 9)), keyword=tuple(range(1, 8)))

    def test_keyword_from_inventory(self):
        """Keyword phonemes must belong to the locale"""
        with pytest.raises(ValidationError):
            LocaleSpec(name="XX", phonemes=(1, 2, 3), keyword=(1, 2, 4))

    def test_silence_id_reserved(self):
        """Pool id 0 is silence and cannot be a phoneme"""
        with pytest.raises(ValidationError):
            LocaleSpec(name="XX", phonemes=(0, 1, 2, 3), keyword=(1, 2, 3))

    def test_snr_tiers_disjoint(self):
        """Challenging and regular tiers may not overlap"""
        with pytest.raises(ValidationError):
            CorpusConfig(challenging_snr_db=(0.0, 15.0))

    def test_shift_shorter_than_silence(self):
        """Shifts must stay inside the lead silence"""
        with pytest.raises(ValidationError):
            CorpusConfig(max_shift_frames=6)


class TestSetupChecks:
    """Cross-checks between locales and the phoneme pool"""

    def test_pool_fits_encoder_classes(self):
        """pool_size + 1 may not exceed the 32 encoder classes"""
        check_setup(CorpusConfig(pool_size=31), tiny_specs())
        with pytest.raises(ConfigError):
            check_setup(CorpusConfig(pool_size=32), tiny_specs())

    def test_ids_within_pool(self):
        """Inventory ids beyond the pool are rejected"""
        with pytest.raises(ConfigError):
            check_setup(CorpusConfig(pool_size=10), tiny_specs())

    def test_unique_names(self):
        """Two locales may not share a name"""
        specs = tiny_specs()
        with pytest.raises(ConfigError):
            check_setup(CorpusConfig(), specs + [specs[0]])

    def test_no_locales(self):
        """At least one locale is needed"""
        with pytest.raises(ConfigError):
            check_setup(CorpusConfig(), [])


class TestGeneration:
    """Synthetic corpus generation"""

    def test_split_counts(self, tiny_corpus):
        """Eval splits carry as many negatives as positives"""
        summary = tiny_corpus.summary()
        assert set(summary) == {"DE_DE", "ES_ES", "DA_DK", "SV_SE"}
        for splits in summary.values():
            assert splits["train"] == {"positive": 6, "negative": 4}
            assert splits["eval-reg"] == {"positive": 3, "negative": 3}
            assert splits["eval-chall"] == {"positive": 3, "negative": 3}
            assert splits["neg-stream"] == {"positive": 0, "negative": 3}

    def test_sorted_ids(self, tiny_corpus):
        """Utterances come out sorted by id"""
        ids = [utt.id for utt in tiny_corpus.utterances]
        assert ids == sorted(ids)
        assert utterance_id("DE_DE", Split.TRAIN, True, 7) == "DE_DE_train_p00007"

    def test_deterministic_and_parallel_safe(self, tiny_config):
        """Same seed gives identical data whatever the worker count"""
        specs = tiny_specs()[:1]
        serial = generate_corpus(tiny_config, specs, jobs=1)
        parallel = generate_corpus(tiny_config, specs, jobs=3)
        assert [u.id for u in serial.utterances] == [u.id for u in parallel.utterances]
        for a, b in zip(serial.utterances, parallel.utterances):
            np.testing.assert_array_equal(a.features, b.features)
            np.testing.assert_array_equal(a.labels.encoder, b.labels.encoder)

    def test_seed_changes_data(self, tiny_config):
        """A different seed gives different features"""
        specs = tiny_specs()[:1]
        first = generate_corpus(tiny_config, specs)
        second = generate_corpus(tiny_config.model_copy(update={"seed": 8}), specs)
        assert not np.array_equal(first.utterances[0].features, second.utterances[0].features)

    def test_features_are_float32(self, tiny_corpus):
        """Feature frames are stored as float32 with 40 dimensions"""
        for utt in tiny_corpus.utterances[:10]:
            assert utt.features.dtype == np.float32
            assert utt.features.shape[1] == 40

    def test_positive_labels(self, tiny_corpus):
        """Positives hold one keyword; its last phoneme carries the decoder target"""
        for utt in tiny_corpus.select(positive=True):
            spec = tiny_corpus.locales[utt.locale]
            sequence = _phonemes(utt.labels.encoder)
            assert sum(_contains(sequence, phrase) for phrase in spec.phrases()) >= 1

            start, end = utt.labels.keyword_span
            hot = np.flatnonzero(utt.labels.decoder)
            assert hot.size > 0
            assert np.all(np.diff(hot) == 1)
            assert hot[-1] == end - 1
            assert hot[0] > start
            assert set(utt.labels.encoder[hot].tolist()) == {spec.keyword[-1]}

    def test_negative_labels(self, tiny_corpus):
        """Negatives never contain their own locale's keyword"""
        for utt in tiny_corpus.select(positive=False):
            spec = tiny_corpus.locales[utt.locale]
            assert utt.labels.keyword_span is None
            assert not utt.labels.decoder.any()
            sequence = _phonemes(utt.labels.encoder)
            assert not any(_contains(sequence, phrase) for phrase in spec.phrases())

    def test_stream_sources_hold_no_keyword(self, tiny_corpus):
        """Stream negatives avoid every locale's keyword"""
        phrases = [phrase for spec in tiny_corpus.locales for phrase in spec.phrases()]
        for utt in tiny_corpus.select(Split.NEGATIVE_STREAM):
            sequence = _phonemes(utt.labels.encoder)
            assert not any(_contains(sequence, phrase) for phrase in phrases)

    def test_snr_tiers(self, tiny_corpus):
        """Eval utterances sit inside their tier; training originals are clean"""
        for utt in tiny_corpus.utterances:
            if utt.split == Split.TRAIN:
                assert utt.snr_db is None
            elif utt.split == Split.EVAL_CHALLENGING:
                assert 0.0 <= utt.snr_db <= 6.0
            else:
                assert 12.0 <= utt.snr_db <= 20.0

    def test_locale_lookup(self, tiny_corpus):
        """Locale names map to indices; unknown names raise DataError"""
        assert tiny_corpus.locale_index("DA_DK") == 2
        with pytest.raises(DataError):
            tiny_corpus.locale_index("FR_FR")


class TestNoise:
    """SNR-controlled noise"""

    def test_realized_snr(self):
        """Noise is scaled so the measured SNR equals the request"""
        clean = stream(1, "clean").normal(size=(200, 40))
        noisy, realized = add_noise(clean, 7.5, stream(1, "noise"))
        assert realized == pytest.approx(7.5, abs=1e-9)
        assert _measured_snr(clean, noisy) == pytest.approx(7.5, abs=1e-9)

    def test_all_zero_signal(self):
        """An all-zero signal has no defined SNR"""
        with pytest.raises(DegenerateInputError):
            add_noise(np.zeros((10, 4)), 10.0, stream(1, "noise"))


class TestAugmentation:
    """Replica generation"""

    def setup_method(self):
        self.config = CorpusConfig(replica_count=2, negative_stream_hours=0.01, seed=7)

    def test_degenerate_replica_is_identity(self, tiny_corpus):
        """Zero gain, zero shift and no noise reproduce the original bit for bit"""
        config = self.config.model_copy(
            update={"max_gain_db": 0.0, "max_shift_frames": 0, "augment_snr_db": None}
        )
        utt = tiny_corpus.select(Split.TRAIN, positive=True)[0]
        replica = augment(utt, config, 1)
        np.testing.assert_array_equal(replica.features, utt.features)
        np.testing.assert_array_equal(replica.labels.encoder, utt.labels.encoder)
        assert replica.labels.keyword_span == utt.labels.keyword_span
        assert replica.id == f"{utt.id}~r1"

    def test_noise_hits_requested_snr(self, tiny_corpus):
        """With gain and shift off, the added noise has the requested SNR"""
        config = self.config.model_copy(
            update={"max_gain_db": 0.0, "max_shift_frames": 0, "augment_snr_db": (10.0, 10.0)}
        )
        utt = tiny_corpus.select(Split.TRAIN, positive=False)[0]
        replica = augment(utt, config, 0)
        assert _measured_snr(utt.features, replica.features) == pytest.approx(10.0, abs=0.01)
        assert replica.snr_db == pytest.approx(10.0, abs=1e-9)

    def test_shift_moves_labels(self, tiny_corpus):
        """Labels and keyword span move with the features"""
        for utt in tiny_corpus.select(Split.TRAIN, positive=True)[:5]:
            for replica in replicas(utt, self.config):
                shift = replica.labels.keyword_span[0] - utt.labels.keyword_span[0]
                assert abs(shift) <= self.config.max_shift_frames
                np.testing.assert_array_equal(
                    replica.labels.decoder, np.roll(utt.labels.decoder, shift)
                )
                assert replica.labels.keyword_span[1] - utt.labels.keyword_span[1] == shift

    def test_replicas_are_reproducible(self, tiny_corpus):
        """A replica index always yields the same replica"""
        utt = tiny_corpus.utterances[0]
        first, second = augment(utt, self.config, 1), augment(utt, self.config, 1)
        np.testing.assert_array_equal(first.features, second.features)

    def test_index_range(self, tiny_corpus):
        """Replica indices run from 0 to replica_count - 1"""
        utt = tiny_corpus.utterances[0]
        with pytest.raises(ConfigError):
            augment(utt, self.config, 2)
        with pytest.raises(ConfigError):
            augment(utt, self.config, -1)
        assert len(replicas(utt, self.config)) == 2


class TestNegativeStream:
    """Tiled negative stream"""

    def test_exact_length(self, tiny_corpus):
        """The stream holds exactly hours * 3.6e6 / frame period frames"""
        built = tiny_corpus.negative_stream()
        assert built.num_frames == 3600
        assert built.duration_hours == pytest.approx(0.01)
        assert not built.decoder.any()
        assert built.features.dtype == np.float32

    def test_longer_than_sources_uses_replicas(self, tiny_corpus):
        """Passes after the first tile augmented replicas"""
        built = tiny_corpus.negative_stream(0.05)
        assert built.num_frames == 18000
        assert any("~r" in tile for tile in built.tile_ids)
        assert not any("~r" in tile for tile in built.tile_ids[:12])

    def test_reproducible(self, tiny_corpus):
        """Building the stream twice gives the same frames"""
        first = tiny_corpus.negative_stream()
        second = tiny_corpus.negative_stream()
        np.testing.assert_array_equal(first.features, second.features)
        assert first.tile_ids == second.tile_ids

    def test_rejects_positives(self, tiny_corpus):
        """Keyword utterances cannot be stream sources"""
        with pytest.raises(DataError):
            build_negative_stream(tiny_corpus.select(positive=True), 0.01, tiny_corpus.config)

    def test_rejects_bad_requests(self, tiny_corpus):
        """Non-positive durations and empty source lists are configuration errors"""
        sources = tiny_corpus.select(Split.NEGATIVE_STREAM)
        with pytest.raises(ConfigError):
            build_negative_stream(sources, 0.0, tiny_corpus.config)
        with pytest.raises(ConfigError):
            build_negative_stream([], 0.01, tiny_corpus.config)

