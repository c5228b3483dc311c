from enum import Enum

from pydantic import BaseModel, ConfigDict, model_validator

ENCODER_LAYERS = 4
DECODER_LAYERS = 3
ENCODER_LOGITS_DIM = 32


class ConditioningMode(str, Enum):
    NONE = "none"
    CONCAT = "concat"
    FILM = "film"


class SizePreset(str, Enum):
    DESK = "Desk"
    R = "R"
    L = "L"
    XL = "XL"


# uniform hidden width per preset; totals land near 24K / 330K / 1.4M / 2.4M
PRESET_CHANNELS = {
    SizePreset.DESK: 24,
    SizePreset.R: 116,
    SizePreset.L: 252,
    SizePreset.XL: 334,
}


class ModelConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    feature_dim: int = 40
    encoder_channels: tuple[int, ...] = (24, 24, 24, 24)
    encoder_kernels: tuple[int, ...] = (8, 5, 5, 5)
    encoder_strides: tuple[int, ...] = (2, 1, 1, 1)
    decoder_channels: tuple[int, ...] = (24, 24, 2)
    decoder_kernels: tuple[int, ...] = (5, 5, 5)
    decoder_strides: tuple[int, ...] = (1, 1, 1)
    bottleneck_dim: int = ENCODER_LOGITS_DIM
    num_decoder_classes: int = 2
    size_preset: SizePreset = SizePreset.DESK

    @model_validator(mode="after")
    def check_geometry(self) -> "ModelConfig":
        encoder = (self.encoder_channels, self.encoder_kernels, self.encoder_strides)
        decoder = (self.decoder_channels, self.decoder_kernels, self.decoder_strides)
        if any(len(part) != ENCODER_LAYERS for part in encoder):
            raise ValueError(f"the encoder has exactly {ENCODER_LAYERS} layers")
        if any(len(part) != DECODER_LAYERS for part in decoder):
            raise ValueError(f"the decoder has exactly {DECODER_LAYERS} layers")
        dims = (
            [self.feature_dim, self.bottleneck_dim, self.num_decoder_classes]
            + [value for part in encoder + decoder for value in part]
        )
        if any(value <= 0 for value in dims):
            raise ValueError("every dimension, kernel size and stride must be positive")
        if self.decoder_channels[-1] != self.num_decoder_classes:
            raise ValueError(
                "the last decoder layer must emit num_decoder_classes channels"
            )
        if (
            self.size_preset != SizePreset.DESK
            and self.bottleneck_dim != ENCODER_LOGITS_DIM
        ):
            raise ValueError(
                f"presets R/L/XL fix the encoder logits at {ENCODER_LOGITS_DIM}"
            )
        return self

    @property
    def total_stride(self) -> int:
        total = 1
        for stride in self.encoder_strides + self.decoder_strides:
            total *= stride
        return total

    def layer_geometry(self) -> list[tuple[int, int]]:
        """(kernel, stride) of every temporal layer, bottleneck included as (1, 1)."""
        return (
            list(zip(self.encoder_kernels, self.encoder_strides))
            + [(1, 1)]
            + list(zip(self.decoder_kernels, self.decoder_strides))
        )


def preset_config(preset: SizePreset | str, feature_dim: int = 40) -> ModelConfig:
    preset = SizePreset(preset)
    width = PRESET_CHANNELS[preset]
    return ModelConfig(
        feature_dim=feature_dim,
        encoder_channels=(width,) * ENCODER_LAYERS,
        decoder_channels=(width, width, 2),
        size_preset=preset,
    )
