import pytest

from data.config import CorpusConfig, default_locale_specs
from data.corpus import generate_corpus
from model.config import ConditioningMode, preset_config
from model.network import build

TINY_COUNTS = dict(
    train_positives=6,
    train_negatives=4,
    eval_regular=3,
    eval_challenging=3,
    stream_negatives=3,
)


def tiny_specs(twins: bool = False):
    return [spec.model_copy(update=TINY_COUNTS) for spec in default_locale_specs(twins)]


@pytest.fixture(scope="session")
def tiny_config():
    return CorpusConfig(replica_count=2, negative_stream_hours=0.01, seed=7)


@pytest.fixture(scope="session")
def tiny_corpus(tiny_config):
    """Four desk locales with a handful of utterances each."""
    return generate_corpus(tiny_config, tiny_specs())


@pytest.fixture
def desk_config():
    return preset_config("Desk")


@pytest.fixture
def film_params(desk_config):
    return build(desk_config, 4, ConditioningMode.FILM, seed=3)
