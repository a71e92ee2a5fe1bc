import operator
from dataclasses import dataclass, field
from typing import Annotated, Any, Optional

import numpy as np

from mspcaps.configuration import RunConfig
from mspcaps.data import Dataset
from mspcaps.model import MSPCaps
from mspcaps.optim import AdamW, Schedule
from mspcaps.train import EpochMetrics, MetricsRow


@dataclass(kw_only=True)
class InputState:
    """Input state defines the interface between the training graph and its caller."""

    run: RunConfig
    "Resolved run configuration."

    resume: Optional[str] = field(default=None)
    "Checkpoint to continue from; training restarts after its stored epoch."


@dataclass(kw_only=True)
class OverallState:
    """Everything the training graph carries between nodes."""

    run: RunConfig
    "Resolved run configuration."

    resume: Optional[str] = field(default=None)

    train_data: Optional[Dataset] = field(default=None)
    test_data: Optional[Dataset] = field(default=None)

    model: Optional[MSPCaps] = field(default=None)
    optimizer: Optional[AdamW] = field(default=None)
    schedule: Optional[Schedule] = field(default=None)
    dropout_rng: Optional[np.random.Generator] = field(default=None)
    "Single generator behind every dropout mask; its state is stored in checkpoints."

    epoch: int = field(default=0)
    "Number of completed epochs."

    global_step: int = field(default=0)
    "Number of completed optimizer steps."

    last_train: Optional[EpochMetrics] = field(default=None)

    history: Annotated[list[MetricsRow], operator.add] = field(default_factory=list)
    "Metric rows of every epoch run by this invocation."

    best: dict[str, Any] = field(default_factory=dict)
    "Epoch, accuracy and loss of the best test evaluation so far."

    param_total: int = field(default=0)


@dataclass(kw_only=True)
class OutputState:
    """The summary returned after the last epoch."""

    history: list[MetricsRow]
    """Train and test rows in the order they were written to the metrics file."""

    best: dict[str, Any] = field(default_factory=dict)
    "Best test metrics and the epoch they were reached."

    final: dict[str, Any] = field(default_factory=dict)
    "Test metrics after the last epoch."

    param_total: int = field(default=0)
