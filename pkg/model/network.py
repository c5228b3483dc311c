"""Encoder / bottleneck / conditioning / decoder keyword-spotting network.

The encoder is four strided temporal convolutions with ReLU, followed by a
dense bottleneck that produces the encoder logits P (one row per encoder
frame, width M). P is conditioned on the locale (nothing, concatenation of
the locale one-hot, or FiLM modulation) and fed to a decoder of three
temporal convolutions whose last layer emits the background/keyword logits.

Everything here works on padded batches (B, T, F) with a boolean frame mask;
the single-utterance functions wrap a batch of one.
"""

from dataclasses import dataclass, field

import numpy as np

from model.config import ConditioningMode, ModelConfig
from numerics.errors import ConfigError, KwsError, ShapeError
from numerics.kernels import (
    conv1d_backward,
    conv1d_forward,
    dense_backward,
    dense_forward,
    relu,
    relu_backward,
)
from numerics.rng import stream

FILM_SCALE = "film/Wf"
FILM_SHIFT = "film/Wh"
BOTTLENECK = "bottleneck"


class ConditioningError(KwsError):
    pass


class SimilarityError(KwsError):
    pass


@dataclass(frozen=True)
class LocaleOneHot:
    vector: np.ndarray

    def __post_init__(self):
        vector = np.asarray(self.vector, dtype=np.float64)
        if vector.ndim != 1 or vector.size == 0:
            raise ShapeError(f"a locale one-hot is a non-empty vector, got {vector.shape}")
        if np.count_nonzero(vector == 1.0) != 1 or np.count_nonzero(vector) != 1:
            raise ConditioningError("a locale one-hot has exactly one 1 and zeros elsewhere")
        object.__setattr__(self, "vector", vector)

    @classmethod
    def of(cls, index: int, num_locales: int) -> "LocaleOneHot":
        if not 0 <= index < num_locales:
            raise ConditioningError(f"locale index {index} outside [0, {num_locales})")
        vector = np.zeros(num_locales)
        vector[index] = 1.0
        return cls(vector)

    @property
    def index(self) -> int:
        return int(np.flatnonzero(self.vector)[0])

    @property
    def size(self) -> int:
        return int(self.vector.size)


@dataclass(frozen=True)
class ParameterSet:
    tensors: dict[str, np.ndarray]
    config: ModelConfig
    mode: ConditioningMode
    num_locales: int

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def with_tensors(self, tensors: dict[str, np.ndarray]) -> "ParameterSet":
        if list(tensors) != list(self.tensors):
            raise ShapeError("replacement tensors must keep the parameter names and order")
        return ParameterSet(
            tensors=dict(tensors),
            config=self.config,
            mode=self.mode,
            num_locales=self.num_locales,
        )

    @property
    def decoder_input_width(self) -> int:
        return decoder_input_width(self.config, self.num_locales, self.mode)


@dataclass(frozen=True)
class ForwardOutput:
    encoder_logits: np.ndarray
    decoder_logits: np.ndarray


@dataclass
class ForwardCache:
    """Activations kept by forward_batch for backward_batch."""

    encoder_inputs: list[np.ndarray] = field(default_factory=list)
    encoder_preacts: list[np.ndarray] = field(default_factory=list)
    encoder_masks: list[np.ndarray] = field(default_factory=list)
    bottleneck_input: np.ndarray | None = None
    encoder_logits: np.ndarray | None = None
    locales: np.ndarray | None = None
    decoder_inputs: list[np.ndarray] = field(default_factory=list)
    decoder_preacts: list[np.ndarray] = field(default_factory=list)
    decoder_masks: list[np.ndarray] = field(default_factory=list)


def _conv_name(part: str, index: int) -> str:
    return f"{part}/conv{index + 1}"


def decoder_input_width(config: ModelConfig, num_locales: int, mode: ConditioningMode) -> int:
    if ConditioningMode(mode) == ConditioningMode.CONCAT:
        return config.bottleneck_dim + num_locales
    return config.bottleneck_dim


def tensor_shapes(
    config: ModelConfig, num_locales: int, mode: ConditioningMode
) -> dict[str, tuple[int, ...]]:
    """The ordered parameter name -> shape map for a configuration."""
    mode = ConditioningMode(mode)
    shapes: dict[str, tuple[int, ...]] = {}
    width = config.feature_dim
    for index, (channels, kernel) in enumerate(
        zip(config.encoder_channels, config.encoder_kernels)
    ):
        name = _conv_name("encoder", index)
        shapes[f"{name}/weights"] = (kernel, width, channels)
        shapes[f"{name}/bias"] = (channels,)
        width = channels
    shapes[f"{BOTTLENECK}/weights"] = (width, config.bottleneck_dim)
    shapes[f"{BOTTLENECK}/bias"] = (config.bottleneck_dim,)
    width = decoder_input_width(config, num_locales, mode)
    for index, (channels, kernel) in enumerate(
        zip(config.decoder_channels, config.decoder_kernels)
    ):
        name = _conv_name("decoder", index)
        shapes[f"{name}/weights"] = (kernel, width, channels)
        shapes[f"{name}/bias"] = (channels,)
        width = channels
    if mode == ConditioningMode.FILM:
        shapes[FILM_SCALE] = (num_locales, config.bottleneck_dim)
        shapes[FILM_SHIFT] = (num_locales, config.bottleneck_dim)
    return shapes


def _to_float32_grid(values: np.ndarray) -> np.ndarray:
    return values.astype(np.float32).astype(np.float64)


def build(
    config: ModelConfig, num_locales: int, mode: ConditioningMode, seed: int
) -> ParameterSet:
    """Builds freshly initialized parameters.

    Conv and dense weights are He-uniform, biases zero. FiLM starts as the
    identity modulation (Wf rows all ones, Wh all zeros). Each tensor draws
    from its own seeded stream keyed by name, so tensors shared between modes
    come out identical.
    """
    mode = ConditioningMode(mode)
    if num_locales < 0 or (mode != ConditioningMode.NONE and num_locales < 1):
        raise ConfigError(f"{mode.value} conditioning needs num_locales >= 1, got {num_locales}")

    tensors: dict[str, np.ndarray] = {}
    for name, shape in tensor_shapes(config, num_locales, mode).items():
        if name == FILM_SCALE:
            tensors[name] = np.ones(shape)
        elif name == FILM_SHIFT or name.endswith("/bias"):
            tensors[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[:-1]))
            limit = np.sqrt(6.0 / fan_in)
            rng = stream(seed, "init", name)
            tensors[name] = _to_float32_grid(rng.uniform(-limit, limit, size=shape))
    return ParameterSet(tensors=tensors, config=config, mode=mode, num_locales=num_locales)


def param_count(params: ParameterSet) -> int:
    return int(sum(value.size for value in params.tensors.values()))


def extra_param_count(config: ModelConfig, num_locales: int, mode: ConditioningMode) -> int:
    """Parameters a conditioning mode adds over the unconditioned network."""
    mode = ConditioningMode(mode)
    if mode == ConditioningMode.FILM:
        return 2 * config.bottleneck_dim * num_locales
    if mode == ConditioningMode.CONCAT:
        return config.decoder_kernels[0] * num_locales * config.decoder_channels[0]
    return 0


def size_summary(config: ModelConfig, num_locales: int) -> dict[str, int]:
    return {
        mode.value: int(
            sum(np.prod(shape) for shape in tensor_shapes(config, num_locales, mode).values())
        )
        for mode in ConditioningMode
    }


def receptive_field(config: ModelConfig) -> tuple[int, int]:
    """Input frames left and right of an output frame's anchor that influence it."""
    left = right = 0
    jump = 1
    for kernel, stride in config.layer_geometry():
        offset = (kernel - 1) // 2
        left += offset * jump
        right += (kernel - 1 - offset) * jump
        jump *= stride
    return left, right


def _as_mask(mask: np.ndarray) -> np.ndarray:
    return mask[..., None].astype(np.float64)


def _encode(
    params: ParameterSet, features: np.ndarray, frame_mask: np.ndarray, cache: ForwardCache | None
) -> tuple[np.ndarray, np.ndarray]:
    config = params.config
    if features.shape[-1] != config.feature_dim:
        raise ShapeError(
            f"features have {features.shape[-1]} dims, the model expects {config.feature_dim}"
        )
    hidden = features
    mask = frame_mask
    for index, stride in enumerate(config.encoder_strides):
        name = _conv_name("encoder", index)
        preact = conv1d_forward(
            hidden, params[f"{name}/weights"], params[f"{name}/bias"], stride, "same"
        )
        mask = mask[:, ::stride]
        if cache is not None:
            cache.encoder_inputs.append(hidden)
            cache.encoder_preacts.append(preact)
            cache.encoder_masks.append(mask)
        hidden = relu(preact) * _as_mask(mask)
    logits = dense_forward(
        hidden, params[f"{BOTTLENECK}/weights"], params[f"{BOTTLENECK}/bias"]
    ) * _as_mask(mask)
    if cache is not None:
        cache.bottleneck_input = hidden
        cache.encoder_logits = logits
    return logits, mask


def _condition_batch(
    params: ParameterSet, logits: np.ndarray, locales: np.ndarray | None, mask: np.ndarray
) -> np.ndarray:
    mode = params.mode
    if mode == ConditioningMode.NONE:
        return logits
    if locales is None:
        raise ConditioningError(f"{mode.value} conditioning needs a locale for every utterance")
    locales = np.asarray(locales)
    if locales.min() < 0 or locales.max() >= params.num_locales:
        raise ConditioningError(
            f"locale indices must lie in [0, {params.num_locales}), got {locales.tolist()}"
        )
    if mode == ConditioningMode.CONCAT:
        onehots = np.zeros(logits.shape[:2] + (params.num_locales,))
        onehots[np.arange(len(locales)), :, locales] = 1.0
        return np.concatenate([logits, onehots * _as_mask(mask)], axis=-1)
    gamma = params[FILM_SCALE][locales][:, None, :]
    beta = params[FILM_SHIFT][locales][:, None, :]
    return (gamma * logits + beta) * _as_mask(mask)


def _decode(
    params: ParameterSet, conditioned: np.ndarray, mask: np.ndarray, cache: ForwardCache | None
) -> np.ndarray:
    config = params.config
    expected = params.decoder_input_width
    if conditioned.shape[-1] != expected:
        raise ShapeError(
            f"decoder expects input width {expected} for mode {params.mode.value}, "
            f"got {conditioned.shape[-1]}"
        )
    hidden = conditioned
    last = len(config.decoder_strides) - 1
    for index, stride in enumerate(config.decoder_strides):
        name = _conv_name("decoder", index)
        preact = conv1d_forward(
            hidden, params[f"{name}/weights"], params[f"{name}/bias"], stride, "same"
        )
        mask = mask[:, ::stride]
        if cache is not None:
            cache.decoder_inputs.append(hidden)
            cache.decoder_preacts.append(preact)
            cache.decoder_masks.append(mask)
        activated = preact if index == last else relu(preact)
        hidden = activated * _as_mask(mask)
    return hidden


def forward_batch(
    params: ParameterSet,
    features: np.ndarray,
    frame_mask: np.ndarray,
    locales: np.ndarray | None = None,
    keep_cache: bool = False,
) -> tuple[ForwardOutput, ForwardCache | None]:
    """Forward pass over a padded batch (B, T, F) with a (B, T) frame mask."""
    if params.mode == ConditioningMode.NONE and locales is not None:
        raise ConditioningError("an unconditioned model takes no locale input")
    cache = None
    if keep_cache:
        cache = ForwardCache(locales=None if locales is None else np.asarray(locales))
    logits, mask = _encode(params, features, np.asarray(frame_mask, dtype=bool), cache)
    conditioned = _condition_batch(params, logits, locales, mask)
    decoded = _decode(params, conditioned, mask, cache)
    return ForwardOutput(encoder_logits=logits, decoder_logits=decoded), cache


def backward_batch(
    params: ParameterSet,
    cache: ForwardCache,
    grad_encoder_logits: np.ndarray,
    grad_decoder_logits: np.ndarray,
) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss given its gradients w.r.t. both logit tensors."""
    config = params.config
    grads = {name: np.zeros_like(value) for name, value in params.tensors.items()}

    upstream = grad_decoder_logits
    last = len(config.decoder_strides) - 1
    for index in reversed(range(len(config.decoder_strides))):
        name = _conv_name("decoder", index)
        upstream = upstream * _as_mask(cache.decoder_masks[index])
        if index != last:
            upstream = relu_backward(cache.decoder_preacts[index], upstream)
        upstream, grads[f"{name}/weights"], grads[f"{name}/bias"] = conv1d_backward(
            cache.decoder_inputs[index],
            params[f"{name}/weights"],
            upstream,
            config.decoder_strides[index],
            "same",
        )

    encoder_mask = cache.encoder_masks[-1]
    upstream = upstream * _as_mask(encoder_mask)
    mode = params.mode
    if mode == ConditioningMode.CONCAT:
        grad_logits = upstream[..., : config.bottleneck_dim]
    elif mode == ConditioningMode.FILM:
        locales = cache.locales
        gamma = params[FILM_SCALE][locales][:, None, :]
        grad_logits = upstream * gamma
        np.add.at(
            grads[FILM_SCALE], locales, (upstream * cache.encoder_logits).sum(axis=1)
        )
        np.add.at(grads[FILM_SHIFT], locales, upstream.sum(axis=1))
    else:
        grad_logits = upstream
    grad_logits = (grad_logits + grad_encoder_logits) * _as_mask(encoder_mask)

    upstream, grads[f"{BOTTLENECK}/weights"], grads[f"{BOTTLENECK}/bias"] = dense_backward(
        cache.bottleneck_input, params[f"{BOTTLENECK}/weights"], grad_logits
    )
    for index in reversed(range(len(config.encoder_strides))):
        name = _conv_name("encoder", index)
        upstream = relu_backward(
            cache.encoder_preacts[index], upstream * _as_mask(cache.encoder_masks[index])
        )
        upstream, grads[f"{name}/weights"], grads[f"{name}/bias"] = conv1d_backward(
            cache.encoder_inputs[index],
            params[f"{name}/weights"],
            upstream,
            config.encoder_strides[index],
            "same",
        )
    return grads


def _full_mask(features: np.ndarray) -> np.ndarray:
    return np.ones((1, features.shape[0]), dtype=bool)


def _check_sequence(params: ParameterSet, features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ShapeError(f"expected a (T, F) feature sequence, got shape {features.shape}")
    if features.shape[1] != params.config.feature_dim:
        raise ShapeError(
            f"features have {features.shape[1]} dims, the model expects "
            f"{params.config.feature_dim}"
        )
    return features


def encoder_forward(params: ParameterSet, features: np.ndarray) -> np.ndarray:
    features = _check_sequence(params, features)
    logits, _ = _encode(params, features[None], _full_mask(features), None)
    return logits[0]


def _resolve_locale(params: ParameterSet, locale) -> LocaleOneHot | None:
    if locale is None:
        return None
    if not isinstance(locale, LocaleOneHot):
        locale = LocaleOneHot.of(int(locale), params.num_locales)
    if locale.size != params.num_locales:
        raise ShapeError(
            f"locale one-hot has length {locale.size}, the model serves "
            f"{params.num_locales} locales"
        )
    return locale


def condition(
    encoder_logits: np.ndarray,
    locale: LocaleOneHot | None,
    mode: ConditioningMode,
    params: ParameterSet,
) -> np.ndarray:
    mode = ConditioningMode(mode)
    if mode == ConditioningMode.NONE:
        return encoder_logits
    if locale is None:
        raise ConditioningError(f"{mode.value} conditioning needs a locale one-hot")
    locale = _resolve_locale(params, locale)
    frames = encoder_logits.shape[0]
    if mode == ConditioningMode.CONCAT:
        return np.concatenate(
            [encoder_logits, np.broadcast_to(locale.vector, (frames, locale.size))], axis=1
        )
    no_bias = np.zeros(params.config.bottleneck_dim)
    gamma = dense_forward(locale.vector, params[FILM_SCALE], no_bias)
    beta = dense_forward(locale.vector, params[FILM_SHIFT], no_bias)
    return gamma * encoder_logits + beta


def decoder_forward(params: ParameterSet, conditioned: np.ndarray) -> np.ndarray:
    conditioned = np.asarray(conditioned, dtype=np.float64)
    if conditioned.ndim != 2:
        raise ShapeError(f"expected a (T, D) decoder input, got shape {conditioned.shape}")
    return _decode(params, conditioned[None], _full_mask(conditioned), None)[0]


def forward(params: ParameterSet, features: np.ndarray, locale=None) -> ForwardOutput:
    """encoder_forward -> condition -> decoder_forward for one utterance.

    `locale` is a LocaleOneHot or a locale index; it is required for Concat
    and FiLM models and rejected for unconditioned ones.
    """
    if params.mode == ConditioningMode.NONE and locale is not None:
        raise ConditioningError("an unconditioned model takes no locale input")
    if params.mode != ConditioningMode.NONE and locale is None:
        raise ConditioningError(f"{params.mode.value} model needs a locale input")
    locale = _resolve_locale(params, locale)
    logits = encoder_forward(params, features)
    conditioned = condition(logits, locale, params.mode, params)
    return ForwardOutput(
        encoder_logits=logits, decoder_logits=decoder_forward(params, conditioned)
    )


def locale_similarity(params: ParameterSet) -> np.ndarray:
    """Pearson correlation between the locales' learned FiLM modulations.

    Each locale is described by its departure from the identity modulation,
    concat(Wf[l] - 1, Wh[l]), rather than by the raw rows concat(Wf[l], Wh[l]).
    The raw rows start as ones next to zeros and correlate perfectly before
    any training; the departures start as zero vectors, whose correlation is
    undefined and raises SimilarityError.
    """
    if params.mode != ConditioningMode.FILM:
        raise SimilarityError(
            f"locale similarity needs a FiLM model, got mode {params.mode.value}"
        )
    rows = np.concatenate([params[FILM_SCALE] - 1.0, params[FILM_SHIFT]], axis=1)
    centered = rows - rows.mean(axis=1, keepdims=True)
    norms = np.sqrt((centered * centered).sum(axis=1))
    flat = np.flatnonzero(norms == 0.0)
    if flat.size:
        pairs = [(int(i), int(j)) for i in flat for j in range(rows.shape[0]) if i != j]
        raise SimilarityError(
            f"locales {flat.tolist()} have zero-variance modulation rows; "
            f"correlation undefined for pairs {pairs[:8]}"
            + (" ..." if len(pairs) > 8 else "")
        )
    corr = (centered @ centered.T) / np.outer(norms, norms)
    corr = 0.5 * (corr + corr.T)
    np.fill_diagonal(corr, 1.0)
    return corr
