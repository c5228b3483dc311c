"""Training regimes over one shared step function.

locale-specific  one unconditioned model per locale, each on its own data
universal        one unconditioned model on the pooled data of every locale
concat / film    one model on the pooled data that also sees the locale
"""

import csv
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from data.corpus import Corpus, DataError, Utterance, augment
from model.checkpoint import SUFFIX, Checkpoint, save_checkpoint
from model.config import ConditioningMode, ModelConfig, SizePreset, preset_config
from model.network import ConditioningError, ParameterSet, backward_batch, build, forward_batch
from numerics.errors import ConfigError, KwsError
from numerics.kernels import softmax_cross_entropy
from numerics.optim import AdamState, adam_step
from numerics.rng import stream

logger = logging.getLogger(__name__)

TRACE_FIELDS = ("step", "loss_total", "loss_enc", "loss_dec")
# batch draws and the loss depend on these; a resume must keep them
RUN_SETTINGS = ("seed", "batch_size", "lambda_enc", "lambda_dec", "locale_balanced", "augment")


class TrainingError(KwsError):
    pass


class CompatibilityError(KwsError):
    pass


class Regime(str, Enum):
    LOCALE_SPECIFIC = "locale-specific"
    UNIVERSAL = "universal"
    CONCAT = "concat"
    FILM = "film"

    @property
    def mode(self) -> ConditioningMode:
        return {
            Regime.CONCAT: ConditioningMode.CONCAT,
            Regime.FILM: ConditioningMode.FILM,
        }.get(self, ConditioningMode.NONE)

    @property
    def conditioned(self) -> bool:
        return self.mode != ConditioningMode.NONE


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    steps: int = 2000
    batch_size: int = 16
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    lambda_enc: float = 1.0
    lambda_dec: float = 1.0
    seed: int = 0
    eval_every: int = 100
    size_preset: SizePreset = SizePreset.DESK
    locale_balanced: bool = False
    augment: bool = True

    @model_validator(mode="after")
    def check_values(self) -> "TrainConfig":
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("batch_size and eval_every must be >= 1")
        if self.lambda_enc < 0 or self.lambda_dec < 0:
            raise ValueError("loss weights must be >= 0")
        if self.lambda_enc == 0 and self.lambda_dec == 0:
            raise ValueError("at least one loss weight must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        return self


@dataclass(frozen=True)
class Batch:
    ids: list[str]
    features: np.ndarray
    frame_mask: np.ndarray
    encoder_labels: np.ndarray
    decoder_labels: np.ndarray
    locales: np.ndarray

    @classmethod
    def from_utterances(cls, utterances: list[Utterance]) -> "Batch":
        """Pads to the longest utterance; padded frames are masked out."""
        if not utterances:
            raise DataError("a batch needs at least one utterance")
        longest = max(utt.num_frames for utt in utterances)
        dims = utterances[0].features.shape[1]
        features = np.zeros((len(utterances), longest, dims))
        mask = np.zeros((len(utterances), longest), dtype=bool)
        encoder = np.zeros((len(utterances), longest), dtype=np.int64)
        decoder = np.zeros((len(utterances), longest), dtype=np.int64)
        for row, utt in enumerate(utterances):
            frames = utt.num_frames
            features[row, :frames] = utt.features
            mask[row, :frames] = True
            encoder[row, :frames] = utt.labels.encoder
            decoder[row, :frames] = utt.labels.decoder
        return cls(
            ids=[utt.id for utt in utterances],
            features=features,
            frame_mask=mask,
            encoder_labels=encoder,
            decoder_labels=decoder,
            locales=np.array([utt.locale for utt in utterances], dtype=np.int64),
        )

    @property
    def size(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class LossTerms:
    total: float
    encoder: float
    decoder: float


@dataclass(frozen=True)
class LossRow:
    step: int
    loss_total: float
    loss_enc: float
    loss_dec: float


@dataclass
class TrainedModel:
    checkpoint: Checkpoint
    trace: list[LossRow] = field(default_factory=list)

    @property
    def stem(self) -> str:
        return model_stem(Regime(self.checkpoint.regime), self.checkpoint.locale)


def model_stem(regime: Regime, locale: str | None) -> str:
    return regime.value if locale is None else f"{regime.value}_{locale}"


def sample_batch(
    corpus: Corpus,
    regime: Regime,
    rng: np.random.Generator,
    batch_size: int,
    locale_filter: str | int | None = None,
    locale_balanced: bool = False,
    use_replicas: bool = True,
) -> Batch:
    """Draws a batch from the training split.

    Draws are uniform over utterances of the filtered locale, or of every
    locale (so locale mass follows data volume) unless locale_balanced picks
    the locale uniformly first. Each draw then picks replica 0 (the original)
    or one of the corpus replicas uniformly.
    """
    regime = Regime(regime)
    if isinstance(locale_filter, str):
        locale_filter = corpus.locale_index(locale_filter)
    if regime == Regime.LOCALE_SPECIFIC and locale_filter is None:
        raise DataError("locale-specific batches need a locale filter")

    if locale_filter is not None or not locale_balanced:
        pool = corpus.training_pool(locale_filter)
        if not pool:
            raise DataError(f"no training utterances for locale filter {locale_filter}")
        picks = [pool[int(index)] for index in rng.integers(len(pool), size=batch_size)]
    else:
        pools = [corpus.training_pool(locale) for locale in range(corpus.num_locales)]
        pools = [pool for pool in pools if pool]
        if not pools:
            raise DataError("the corpus has no training utterances")
        chosen = rng.integers(len(pools), size=batch_size)
        picks = [pools[int(c)][int(rng.integers(len(pools[int(c)])))] for c in chosen]

    replica_count = corpus.config.replica_count if use_replicas else 0
    if replica_count:
        replica = rng.integers(replica_count + 1, size=batch_size)
        picks = [
            utt if r == 0 else augment(utt, corpus.config, int(r) - 1)
            for utt, r in zip(picks, replica)
        ]
    return Batch.from_utterances(picks)


def _encoder_targets(labels: np.ndarray, stride: int) -> np.ndarray:
    return labels[:, ::stride]


def _decoder_targets(labels: np.ndarray, stride: int) -> np.ndarray:
    # a decoder frame is a keyword frame if any input frame it covers is
    batch, length = labels.shape
    padded_length = math.ceil(length / stride) * stride
    padded = np.zeros((batch, padded_length), dtype=labels.dtype)
    padded[:, :length] = labels
    return padded.reshape(batch, -1, stride).max(axis=2)


def compute_loss(
    params: ParameterSet,
    batch: Batch,
    lambda_enc: float = 1.0,
    lambda_dec: float = 1.0,
    with_grads: bool = True,
) -> tuple[LossTerms, dict[str, np.ndarray] | None]:
    config = params.config
    locales = batch.locales if params.mode != ConditioningMode.NONE else None
    output, cache = forward_batch(
        params, batch.features, batch.frame_mask, locales, keep_cache=with_grads
    )
    encoder_stride = int(np.prod(config.encoder_strides))
    encoder_mask = batch.frame_mask[:, ::encoder_stride]
    decoder_mask = batch.frame_mask[:, :: config.total_stride]

    loss_enc, grad_enc = softmax_cross_entropy(
        output.encoder_logits,
        _encoder_targets(batch.encoder_labels, encoder_stride),
        encoder_mask,
    )
    loss_dec, grad_dec = softmax_cross_entropy(
        output.decoder_logits,
        _decoder_targets(batch.decoder_labels, config.total_stride),
        decoder_mask,
    )
    terms = LossTerms(
        total=lambda_enc * loss_enc + lambda_dec * loss_dec,
        encoder=loss_enc,
        decoder=loss_dec,
    )
    if not with_grads:
        return terms, None
    grads = backward_batch(params, cache, lambda_enc * grad_enc, lambda_dec * grad_dec)
    return terms, grads


def loss_and_grads(
    params: ParameterSet,
    batch: Batch,
    mode: ConditioningMode | str | None = None,
    lambda_enc: float = 1.0,
    lambda_dec: float = 1.0,
) -> tuple[float, dict[str, np.ndarray]]:
    """lambda_enc * CE(encoder logits) + lambda_dec * CE(decoder logits) and its gradients."""
    if mode is not None and ConditioningMode(mode) != params.mode:
        raise ConditioningError(
            f"batch prepared for mode {ConditioningMode(mode).value}, model is {params.mode.value}"
        )
    terms, grads = compute_loss(params, batch, lambda_enc, lambda_dec)
    return terms.total, grads


def _to_float32_grid(tensors: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {name: value.astype(np.float32).astype(np.float64) for name, value in tensors.items()}


def _run(
    params: ParameterSet,
    adam: AdamState,
    corpus: Corpus,
    regime: Regime,
    locale: str | None,
    config: TrainConfig,
    start_step: int,
) -> tuple[ParameterSet, AdamState, list[LossRow]]:
    scope = locale or "all"
    trace: list[LossRow] = []
    tensors = dict(params.tensors)
    for step in range(start_step, config.steps):
        rng = stream(config.seed, "batch", regime.value, scope, step)
        batch = sample_batch(
            corpus,
            regime,
            rng,
            config.batch_size,
            locale_filter=locale,
            locale_balanced=config.locale_balanced,
            use_replicas=config.augment,
        )
        terms, grads = compute_loss(
            params.with_tensors(tensors), batch, config.lambda_enc, config.lambda_dec
        )
        done = step + 1
        if not math.isfinite(terms.total):
            raise TrainingError(f"{model_stem(regime, locale)}: loss diverged at step {done}")
        updated, adam = adam_step(tensors, grads, adam)
        tensors = _to_float32_grid(updated)
        adam = AdamState(
            first_moment=_to_float32_grid(adam.first_moment),
            second_moment=_to_float32_grid(adam.second_moment),
            step=adam.step,
            lr=adam.lr,
            beta1=adam.beta1,
            beta2=adam.beta2,
            epsilon=adam.epsilon,
        )
        if done == 1 or done % config.eval_every == 0 or done == config.steps:
            row = LossRow(done, terms.total, terms.encoder, terms.decoder)
            trace.append(row)
            logger.info(
                "%s step %d: loss %.4f (enc %.4f, dec %.4f)",
                model_stem(regime, locale), done, row.loss_total, row.loss_enc, row.loss_dec,
            )
    return params.with_tensors(tensors), adam, trace


def _meta(
    regime: Regime, locale: str | None, corpus: Corpus, config: TrainConfig, step: int
) -> dict:
    return {
        "regime": regime.value,
        "locale": locale,
        "locale_names": corpus.locale_names,
        "step": step,
        "seed": config.seed,
        "batch_size": config.batch_size,
        "lambda_enc": config.lambda_enc,
        "lambda_dec": config.lambda_dec,
        "size_preset": config.size_preset.value,
        "locale_balanced": config.locale_balanced,
        "augment": config.augment,
    }


def resolve_model_config(
    corpus: Corpus, config: TrainConfig, model_config: ModelConfig | None = None
) -> ModelConfig:
    model_config = model_config or preset_config(config.size_preset, corpus.config.feature_dim)
    if model_config.feature_dim != corpus.config.feature_dim:
        raise ConfigError(
            f"model expects {model_config.feature_dim}-dim features, corpus has "
            f"{corpus.config.feature_dim}"
        )
    if corpus.config.pool_size + 1 > model_config.bottleneck_dim:
        raise ConfigError(
            f"{corpus.config.pool_size} phonemes + silence do not fit "
            f"{model_config.bottleneck_dim} encoder logits"
        )
    return model_config


def train(
    regime: Regime | str,
    corpus: Corpus,
    config: TrainConfig,
    model_config: ModelConfig | None = None,
) -> list[TrainedModel]:
    """Trains N locale-specific models, or one pooled model for the other regimes."""
    regime = Regime(regime)
    model_config = resolve_model_config(corpus, config, model_config)
    scopes = corpus.locale_names if regime == Regime.LOCALE_SPECIFIC else [None]
    for scope in scopes:
        index = None if scope is None else corpus.locale_index(scope)
        if not corpus.training_pool(index):
            raise DataError(f"no training utterances for {scope or 'any locale'}")

    trained = []
    for locale in scopes:
        params = build(model_config, corpus.num_locales, regime.mode, config.seed)
        adam = AdamState.fresh(
            params.tensors, config.learning_rate, config.beta1, config.beta2, config.epsilon
        )
        logger.info(
            "training %s: %d steps, batch %d", model_stem(regime, locale), config.steps,
            config.batch_size,
        )
        params, adam, trace = _run(params, adam, corpus, regime, locale, config, 0)
        checkpoint = Checkpoint(
            params=params, adam=adam, meta=_meta(regime, locale, corpus, config, config.steps)
        )
        trained.append(TrainedModel(checkpoint=checkpoint, trace=trace))
    return trained


def check_compatible(checkpoint: Checkpoint, corpus: Corpus, config: TrainConfig) -> Regime:
    if checkpoint.locale_names != corpus.locale_names:
        raise CompatibilityError(
            f"checkpoint serves locales {checkpoint.locale_names}, corpus has "
            f"{corpus.locale_names}"
        )
    if checkpoint.params.num_locales != corpus.num_locales:
        raise CompatibilityError(
            f"checkpoint built for N={checkpoint.params.num_locales}, corpus has "
            f"N={corpus.num_locales}"
        )
    preset = checkpoint.meta.get("size_preset")
    if preset != config.size_preset.value:
        raise CompatibilityError(
            f"checkpoint preset {preset} does not match configured {config.size_preset.value}"
        )
    try:
        regime = Regime(checkpoint.regime)
    except ValueError:
        raise CompatibilityError(f"unknown regime {checkpoint.regime!r} in checkpoint") from None
    if regime.mode != checkpoint.params.mode:
        raise CompatibilityError(
            f"regime {regime.value} does not match model mode {checkpoint.params.mode.value}"
        )
    if checkpoint.adam is None:
        raise CompatibilityError("checkpoint carries no optimizer state")
    stored = {key: checkpoint.meta.get(key) for key in RUN_SETTINGS}
    wanted = {key: getattr(config, key) for key in RUN_SETTINGS}
    changed = [key for key in RUN_SETTINGS if stored[key] != wanted[key]]
    if changed:
        raise CompatibilityError(
            "checkpoint was trained with "
            + ", ".join(f"{key}={stored[key]!r}" for key in changed)
            + "; configured "
            + ", ".join(f"{key}={wanted[key]!r}" for key in changed)
        )
    return regime


def resume(checkpoint: Checkpoint, corpus: Corpus, config: TrainConfig) -> TrainedModel:
    """Continues training from the stored step up to config.steps."""
    regime = check_compatible(checkpoint, corpus, config)
    if config.steps < checkpoint.step:
        raise CompatibilityError(
            f"checkpoint is at step {checkpoint.step}, beyond the target of {config.steps}"
        )
    if checkpoint.adam.step != checkpoint.step:
        raise CompatibilityError(
            f"optimizer step {checkpoint.adam.step} disagrees with checkpoint step "
            f"{checkpoint.step}"
        )
    if config.steps == checkpoint.step:
        return TrainedModel(checkpoint=checkpoint, trace=[])

    logger.info(
        "resuming %s from step %d to %d",
        model_stem(regime, checkpoint.locale), checkpoint.step, config.steps,
    )
    params, adam, trace = _run(
        checkpoint.params,
        checkpoint.adam,
        corpus,
        regime,
        checkpoint.locale,
        config,
        checkpoint.step,
    )
    meta = dict(checkpoint.meta)
    meta["step"] = config.steps
    return TrainedModel(checkpoint=Checkpoint(params=params, adam=adam, meta=meta), trace=trace)


def write_loss_trace(path: Path | str, rows: list[LossRow], append: bool = False) -> Path:
    path = Path(path)
    fresh = not append or not path.exists()
    with open(path, "w" if fresh else "a", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        if fresh:
            writer.writerow(TRACE_FIELDS)
        for row in rows:
            writer.writerow(
                [row.step] + [repr(float(v)) for v in (row.loss_total, row.loss_enc, row.loss_dec)]
            )
    return path


def read_loss_trace(path: Path | str) -> list[LossRow]:
    with open(path, newline="") as handle:
        return [
            LossRow(
                step=int(record["step"]),
                loss_total=float(record["loss_total"]),
                loss_enc=float(record["loss_enc"]),
                loss_dec=float(record["loss_dec"]),
            )
            for record in csv.DictReader(handle)
        ]


def save_trained(model: TrainedModel, directory: Path | str, append_trace: bool = False) -> Path:
    directory = Path(directory)
    path = save_checkpoint(model.checkpoint, directory / f"{model.stem}{SUFFIX}")
    write_loss_trace(directory / f"{model.stem}.loss.csv", model.trace, append=append_trace)
    return path
