"""The experiment document shared by every command."""

import json
import os
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, ValidationError, model_validator

from data.config import CorpusConfig, LocaleSpec, default_locale_specs, wide_locale_specs
from evaluation.metrics import TARGET_FAH
from evaluation.scoring import LOCKOUT, SMOOTHING_WINDOW
from model.config import ModelConfig
from numerics.errors import ConfigError
from training.trainer import Regime, TrainConfig

SEED_VARIABLE = "KWS_LOCALE_SEED"


class PathsConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    corpus_dir: str = "runs/corpus"
    checkpoint_dir: str = "runs/checkpoints"
    report_dir: str = "runs/report"


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    paths: PathsConfig = PathsConfig()
    corpus: CorpusConfig = CorpusConfig()
    roster: Literal["desk", "desk-twins", "wide10"] = "desk"
    locales: list[LocaleSpec] | None = None
    model: ModelConfig | None = None
    train: TrainConfig = TrainConfig()
    regimes: list[Regime] = list(Regime)
    target_fah: float = TARGET_FAH
    smoothing_window: int = SMOOTHING_WINDOW
    lockout: int = LOCKOUT
    seed: int | None = None
    jobs: int = 1

    @model_validator(mode="after")
    def check_experiment(self) -> "ExperimentConfig":
        if not self.regimes:
            raise ValueError("regimes must name at least one training regime")
        if self.target_fah < 0:
            raise ValueError("target_fah must be >= 0")
        if self.smoothing_window < 1 or self.lockout < 1 or self.jobs < 1:
            raise ValueError("smoothing_window, lockout and jobs must be >= 1")
        return self

    def locale_specs(self) -> list[LocaleSpec]:
        if self.locales is not None:
            return list(self.locales)
        if self.roster == "wide10":
            return wide_locale_specs(self.corpus.pool_size, self.corpus.seed)
        return default_locale_specs(twins=self.roster == "desk-twins")

    def with_seed(self, flag: int | None = None) -> "ExperimentConfig":
        """Applies the master seed: flag, then config, then the environment, then 0."""
        seed = resolve_seed(flag, self.seed)
        return self.model_copy(
            update={
                "seed": seed,
                "corpus": self.corpus.model_copy(update={"seed": seed}),
                "train": self.train.model_copy(update={"seed": seed}),
            }
        )


def resolve_seed(flag: int | None, configured: int | None) -> int:
    if flag is not None:
        return flag
    if configured is not None:
        return configured
    raw = os.environ.get(SEED_VARIABLE)
    if raw is None or raw == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_VARIABLE} must be an integer, got {raw!r}") from None


def _describe(exc: ValidationError) -> str:
    return "; ".join(
        f"{'.'.join(str(part) for part in error['loc']) or '<root>'}: {error['msg']}"
        for error in exc.errors()
    )


def load_experiment_config(path: Path | str | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        document = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    try:
        return ExperimentConfig.model_validate(document)
    except ValidationError as exc:
        raise ConfigError(f"{path}: {_describe(exc)}") from exc


def schema() -> dict:
    return ExperimentConfig.model_json_schema()
