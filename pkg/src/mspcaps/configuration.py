import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Literal, Optional

from langchain_core.runnables import RunnableConfig
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from mspcaps.errors import ConfigError
from mspcaps.model import ModelConfig

DatasetName = Literal["mnist", "fashion_mnist", "svhn", "cifar10"]

IN_CHANNELS = {"mnist": 1, "fashion_mnist": 1, "svhn": 3, "cifar10": 3}


@dataclass(kw_only=True)
class Configuration:
    """Process-level knobs of a run."""

    mspcaps_threads: int = field(default_factory=lambda: os.cpu_count() or 1)  # Batch preparation workers
    mspcaps_log_level: str = "INFO"

    @classmethod
    def from_runnable_config(cls, config: Optional[RunnableConfig] = None) -> "Configuration":
        """Create a Configuration from the environment, then a RunnableConfig, then defaults."""
        configurable = config["configurable"] if config and "configurable" in config else {}
        values: dict[str, Any] = {}
        for f in fields(cls):
            if not f.init:
                continue
            value = os.environ.get(f.name.upper(), configurable.get(f.name))
            if value in (None, ""):
                continue
            try:
                values[f.name] = int(value) if f.type in (int, "int") else str(value)
            except ValueError:
                raise ConfigError(f"{f.name.upper()}={value!r} is not a valid {f.type}") from None
        return cls(**values)


class RunConfig(BaseModel):
    """Declarative description of one training or evaluation run; CLI flags override file values."""

    model_config = ConfigDict(extra="forbid")

    preset: Literal["tiny", "large"] = "tiny"
    routing_kind: Optional[Literal["car", "dr"]] = None
    scale_mask: Optional[tuple[bool, bool, bool]] = None
    patch_size: Optional[int] = Field(None, ge=1)
    weight_shared: Optional[bool] = None
    dropout_rate: Optional[float] = Field(None, ge=0.0, lt=1.0)
    model_overrides: dict[str, Any] = Field(default_factory=dict)
    """Any further ModelConfig fields."""

    dataset: DatasetName = "cifar10"
    data_dir: str = "data"
    limit_train: Optional[int] = Field(None, ge=1)
    limit_test: Optional[int] = Field(None, ge=1)

    init_seed: int = 0
    shuffle_seed: int = 0
    dropout_seed: int = 0

    epochs: Optional[int] = Field(None, ge=1)
    batch_size: int = Field(128, ge=1)
    lr: Optional[float] = Field(None, gt=0.0)
    weight_decay: float = Field(1e-4, ge=0.0)
    warmup_epochs: int = Field(5, ge=0)
    min_lr: float = Field(1e-6, ge=0.0)
    precision: Literal["float32", "float64"] = "float32"

    out_dir: str = "runs/mspcaps"
    timing: bool = True
    """Record wall-clock seconds in the metrics file; off makes reruns byte-identical."""

    def resolve(self) -> "RunConfig":
        """Return a copy with every dataset-dependent default made explicit."""
        updates: dict[str, Any] = {}
        if self.epochs is None:
            updates["epochs"] = 100 if self.dataset == "mnist" else 300
        if self.lr is None:
            updates["lr"] = 1e-4 if self.dataset == "fashion_mnist" else 5e-4
        if self.dropout_rate is None:
            updates["dropout_rate"] = 0.0 if self.dataset == "svhn" else 0.1
        resolved = self.model_copy(update=updates)
        resolved.model_config_for()
        return resolved

    def model_config_for(self) -> ModelConfig:
        """Build the model configuration for this run's preset, dataset and overrides."""
        overrides: dict[str, Any] = dict(self.model_overrides)
        for name in ("routing_kind", "scale_mask", "patch_size", "weight_shared", "dropout_rate"):
            value = getattr(self, name)
            if value is not None:
                overrides[name] = value
        overrides.setdefault("in_channels", IN_CHANNELS[self.dataset])
        try:
            return ModelConfig.preset(self.preset, **overrides)
        except ValidationError as e:
            raise ConfigError(_describe(e, prefix="model")) from None


def _describe(error: ValidationError, prefix: str = "") -> str:
    lines = []
    for item in error.errors():
        path = ".".join(str(part) for part in (prefix, *item["loc"]) if part != "")
        lines.append(f"{path or '<root>'}: {item['msg']}")
    return "; ".join(lines)


def parse_run_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse a JSON run config; errors name `source` with line and column."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{source}:{e.lineno}:{e.colno}: {e.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be a JSON object")
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"{source}: {_describe(e)}") from None


def load_run_config(path: Optional[str], **overrides: Any) -> RunConfig:
    """Read a JSON run config (or start from defaults) and apply non-None overrides."""
    config = RunConfig()
    if path is not None:
        file = Path(path)
        if not file.exists():
            raise ConfigError(f"config file {file} does not exist")
        config = parse_run_config(file.read_text(), str(file))
    updates = {k: v for k, v in overrides.items() if v is not None}
    if not updates:
        return config
    try:
        return RunConfig.model_validate({**config.model_dump(), **updates})
    except ValidationError as e:
        raise ConfigError(f"command-line override: {_describe(e)}") from None
