import numpy as np
import pytest

from data.corpus import Split
from evaluation.scoring import (
    detect_events,
    keyword_posterior,
    posterior_trace,
    score_stream,
    score_utterances,
    smooth,
    stream_detect,
    utterance_score,
)
from model.config import ConditioningMode, preset_config
from model.network import build, forward
from numerics.errors import ConfigError
from numerics.rng import stream


class TestSmoothing:
    """Trailing moving average"""

    def test_head_and_body(self):
        """Early frames average what exists so far"""
        np.testing.assert_allclose(smooth([0.0, 3.0, 6.0, 9.0], 3), [0.0, 1.5, 3.0, 6.0])

    def test_window_one_is_identity(self):
        """A window of one changes nothing"""
        values = stream(0, "posterior").uniform(size=20)
        np.testing.assert_allclose(smooth(values, 1), values)

    def test_window_longer_than_trace(self):
        """Short traces are averaged over every frame so far"""
        np.testing.assert_allclose(smooth([1.0, 0.0, 0.5], 30), [1.0, 0.5, 0.5])

    def test_matches_direct_average(self):
        """Every frame is the mean of the last `window` posteriors"""
        values = stream(1, "posterior").uniform(size=200)
        smoothed = smooth(values, 30)
        for t in (0, 10, 29, 30, 150, 199):
            start = max(0, t - 29)
            assert smoothed[t] == pytest.approx(values[start : t + 1].mean(), abs=1e-12)

    def test_bad_window(self):
        """Windows start at one frame"""
        with pytest.raises(ConfigError):
            smooth([0.5], 0)


class TestDetection:
    """Threshold crossings with lockout"""

    def test_separate_excursions(self):
        """Three excursions far apart give three events"""
        trace = np.zeros(1000)
        for start in (100, 400, 800):
            trace[start : start + 20] = 0.9
        np.testing.assert_array_equal(detect_events(trace, 0.5, lockout=100), [100, 400, 800])

    def test_long_excursion_refires_after_lockout(self):
        """A 150-frame excursion fires at its start and again 100 frames later"""
        trace = np.zeros(500)
        trace[50:200] = 0.8
        np.testing.assert_array_equal(detect_events(trace, 0.5, lockout=100), [50, 150])

    def test_close_excursions_within_lockout(self):
        """A second crossing inside the lockout is suppressed"""
        trace = np.zeros(400)
        trace[10:15] = 0.9
        trace[60:65] = 0.9
        trace[200:205] = 0.9
        np.testing.assert_array_equal(detect_events(trace, 0.5, lockout=100), [10, 200])

    def test_threshold_inclusive(self):
        """Reaching the threshold exactly counts as a crossing"""
        trace = np.array([0.0, 0.5, 0.0])
        assert detect_events(trace, 0.5).tolist() == [1]

    def test_zero_threshold_fires_nothing(self):
        """The trace starts from zero, so a zero threshold is never crossed"""
        assert detect_events(np.full(300, 0.2), 0.0).size == 0

    def test_bad_lockout(self):
        """Lockout is at least one frame"""
        with pytest.raises(ConfigError):
            detect_events(np.zeros(5), 0.5, lockout=0)


class TestModelScoring:
    """Posteriors and scores from a network"""

    def setup_method(self):
        self.params = build(preset_config("Desk"), 4, ConditioningMode.FILM, seed=2)

    def test_posterior_in_unit_interval(self):
        """The keyword posterior is a probability per decoder frame"""
        logits = forward(self.params, stream(0, "f").normal(size=(50, 40)), 0).decoder_logits
        posterior = keyword_posterior(logits)
        assert posterior.shape == (25,)
        assert np.all((posterior > 0) & (posterior < 1))

    def test_chunked_trace_matches_single_pass(self):
        """Chunked evaluation reproduces one full-length forward pass"""
        features = stream(3, "long").normal(size=(701, 40))
        whole = posterior_trace(self.params, features, 1, chunk_frames=10_000)
        chunked = posterior_trace(self.params, features, 1, chunk_frames=64)
        assert whole.shape == chunked.shape == (351,)
        np.testing.assert_allclose(chunked, whole, rtol=0, atol=1e-12)

    def test_utterance_score_is_smoothed_max(self, tiny_corpus):
        """An utterance scores the maximum of its smoothed posterior"""
        utt = tiny_corpus.select(Split.EVAL_REGULAR, positive=True)[0]
        logits = forward(self.params, utt.features, utt.locale).decoder_logits
        expected = smooth(keyword_posterior(logits), 30).max()
        score = utterance_score(self.params, utt, utt.locale)
        assert score.score == pytest.approx(expected, abs=1e-15)
        assert score.utterance_id == utt.id
        assert score.split == "eval-reg"

    def test_parallel_scoring_is_identical(self, tiny_corpus):
        """Worker count does not change scores or their order"""
        utterances = tiny_corpus.select(Split.EVAL_CHALLENGING, locale=0)
        serial = score_utterances(self.params, utterances, 0, jobs=1)
        parallel = score_utterances(self.params, utterances, 0, jobs=3)
        assert serial == parallel
        assert [s.utterance_id for s in serial] == sorted(u.id for u in utterances)

    def test_stream_trace(self, tiny_corpus):
        """A stream trace covers every decoder frame and carries the stream duration"""
        negative = tiny_corpus.negative_stream()
        trace = score_stream(self.params, negative, 2)
        assert trace.smoothed.shape == (1800,)
        assert trace.duration_hours == pytest.approx(0.01)

    def test_stream_detect_threshold_range(self, tiny_corpus):
        """Thresholds lie in [0, 1]"""
        with pytest.raises(ConfigError):
            stream_detect(self.params, tiny_corpus.negative_stream(), 0, 1.5)
        assert stream_detect(self.params, tiny_corpus.negative_stream(), 0, 1.0).size == 0
