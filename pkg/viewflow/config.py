from __future__ import annotations

import logging
import os
from enum import Enum
from pathlib import Path
from typing import Any

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .errors import ConfigurationError
from .network import NetworkConfig, OutputMode
from .optim import AdamSettings


class TrainingMode(str, Enum):
    SingleFlow = "single-flow"
    SinglePixels = "single-pixels"
    Mask = "mask"
    MultiFlow = "multi-flow"
    MultiPixels = "multi-pixels"


NETWORK_MODES = {
    TrainingMode.SingleFlow: OutputMode.FLOW,
    TrainingMode.SinglePixels: OutputMode.PIXELS,
    TrainingMode.Mask: OutputMode.MASK,
    TrainingMode.MultiFlow: OutputMode.FLOW_WITH_CONFIDENCE,
    TrainingMode.MultiPixels: OutputMode.PIXELS_WITH_CONFIDENCE,
}

MULTI_VIEW_MODES = {TrainingMode.MultiFlow, TrainingMode.MultiPixels}


def training_mode_for(mode: OutputMode) -> TrainingMode:
    for training_mode, network_mode in NETWORK_MODES.items():
        if network_mode == mode:
            return training_mode
    raise ConfigurationError(f"no training mode produces {mode.value} networks")


class TrainingSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    mode: TrainingMode = TrainingMode.SingleFlow
    iterations: int = Field(default=2000, ge=0)
    batch_size: int = Field(default=16, gt=0)
    # source views per tuple in the multi-view modes
    views: int = Field(default=2, gt=0)
    checkpoint_every: int = Field(default=1000, ge=0)
    threads: int = Field(default=1, gt=0)


class RunConfig(BaseModel):
    """Everything a training run depends on besides the dataset."""

    model_config = ConfigDict(extra="forbid")

    seed: int = 0
    network: NetworkConfig = NetworkConfig()
    optimizer: AdamSettings = AdamSettings()
    training: TrainingSettings = TrainingSettings()

    def resolved_network(self) -> NetworkConfig:
        """The network config with the output head the training mode needs."""
        return self.network.model_copy(update={"mode": NETWORK_MODES[self.training.mode]})


def _validate(data: dict[str, Any], source: str) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigurationError(f"invalid configuration in {source}: {exc}") from exc


def load_run_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        return RunConfig.model_validate_json(Path(path).read_text(encoding="utf-8"))
    except ValidationError as exc:
        raise ConfigurationError(f"invalid configuration in {path}: {exc}") from exc


def apply_overrides(config: RunConfig, seed: int | None = None, **training: Any) -> RunConfig:
    """Return ``config`` with command-line values applied; ``None`` means not given."""
    data = config.model_dump(mode="json")
    if seed is not None:
        data["seed"] = seed
    for key, value in training.items():
        if value is not None:
            data["training"][key] = value.value if isinstance(value, Enum) else value
    data["network"] = config.resolved_network().model_dump(mode="json")
    data["network"]["mode"] = NETWORK_MODES[TrainingMode(data["training"]["mode"])].value
    return _validate(data, "command-line flags")


def dump_run_config(config: RunConfig, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(config.model_dump_json(indent=2) + "\n", encoding="utf-8")


def configured_threads(default: int | None = 1) -> int | None:
    """Worker cap from ``VIEWFLOW_THREADS``; 1 is the bit-exact serial path."""
    value = os.getenv("VIEWFLOW_THREADS")
    if not value:
        return default
    try:
        threads = int(value)
    except ValueError:
        raise ConfigurationError(f"VIEWFLOW_THREADS must be an integer, got {value!r}")
    if threads < 1:
        raise ConfigurationError("VIEWFLOW_THREADS must be at least 1")
    return threads


def configured_log_level() -> int:
    name = os.getenv("VIEWFLOW_LOG_LEVEL", "INFO").upper()
    level = logging.getLevelName(name)
    if not isinstance(level, int):
        raise ConfigurationError(f"unknown VIEWFLOW_LOG_LEVEL {name!r}")
    return level
