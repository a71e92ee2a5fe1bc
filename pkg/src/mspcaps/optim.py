"""AdamW with decoupled weight decay and the warmup + cosine learning-rate schedule."""

import math
from collections.abc import Iterable
from dataclasses import dataclass, field

import numpy as np

from mspcaps.errors import ContractError
from mspcaps.nn import Parameter


@dataclass
class Schedule:
    """Linear warmup from a fraction of `base_lr`, then cosine decay to `min_lr`, stepped per batch."""

    base_lr: float
    total_epochs: int
    steps_per_epoch: int
    warmup_epochs: int = 5
    warmup_start_fraction: float = 0.1
    min_lr: float = 1e-6

    def __post_init__(self) -> None:
        if self.min_lr > self.base_lr:
            raise ContractError(f"min_lr {self.min_lr} exceeds base_lr {self.base_lr}")
        if self.total_epochs < 1 or self.steps_per_epoch < 1 or self.warmup_epochs < 0:
            raise ContractError("schedule needs total_epochs >= 1, steps_per_epoch >= 1 and warmup_epochs >= 0")

    @property
    def total_steps(self) -> int:
        """Optimizer steps over the whole run."""
        return self.total_epochs * self.steps_per_epoch

    @property
    def warmup_steps(self) -> int:
        """Steps spent in linear warmup."""
        return self.warmup_epochs * self.steps_per_epoch


def lr_at(schedule: Schedule, global_step: int) -> float:
    """Learning rate for the optimizer step with index `global_step` (0-based)."""
    if global_step < 0:
        raise ContractError(f"global_step must be >= 0, got {global_step}")
    warmup = schedule.warmup_steps
    if global_step < warmup:
        start = schedule.warmup_start_fraction
        return schedule.base_lr * (start + (1 - start) * global_step / warmup)
    span = max(1, schedule.total_steps - 1 - warmup)
    progress = min(1.0, (global_step - warmup) / span)
    cosine = 0.5 * (1 + math.cos(math.pi * progress))
    return schedule.min_lr + (schedule.base_lr - schedule.min_lr) * cosine


@dataclass
class AdamWState:
    """Hyperparameters, step counter and moment estimates of AdamW."""

    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step: int = 0
    """Number of completed updates."""
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: Iterable[tuple[str, Parameter]], state: AdamWState) -> None:
    """Apply one in-place AdamW update to every named parameter using its `.grad`.

    Weight decay (p -= lr * wd * p) runs before the Adam update and only touches parameters
    with `decay=True`.
    """
    params = list(params)
    for name, p in params:
        if p.grad is None:
            raise ContractError(f"parameter {name} has no gradient")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    correction1 = 1 - b1**t
    correction2 = 1 - b2**t
    for name, p in params:
        dtype = p.data.dtype.type
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name] = dtype(b1) * state.m[name] + dtype(1 - b1) * g
        v = state.v[name] = dtype(b2) * state.v[name] + dtype(1 - b2) * (g * g)
        data = p.data
        if p.decay and state.weight_decay:
            data = data - dtype(state.lr * state.weight_decay) * data
        m_hat = m / dtype(correction1)
        v_hat = v / dtype(correction2)
        p.data = (data - dtype(state.lr) * m_hat / (np.sqrt(v_hat) + dtype(state.eps))).astype(p.data.dtype)


class AdamW:
    """Optimizer bound to a fixed list of named parameters."""

    def __init__(
        self,
        named_params: Iterable[tuple[str, Parameter]],
        *,
        lr: float = 5e-4,
        weight_decay: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.named_params = list(named_params)
        self.state = AdamWState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps, weight_decay=weight_decay)

    def step(self) -> None:
        """Apply one AdamW update from the current gradients."""
        adamw_step(self.named_params, self.state)

    def zero_grad(self) -> None:
        """Clear the gradient of every parameter."""
        for _, p in self.named_params:
            p.grad = None

    def set_lr(self, lr: float) -> None:
        """Set the learning rate for the next step."""
        self.state.lr = lr

    def state_dict(self) -> dict[str, np.ndarray]:
        """Moment tensors keyed `adam_m/<name>` and `adam_v/<name>`."""
        out = {f"adam_m/{k}": v.copy() for k, v in self.state.m.items()}
        out.update({f"adam_v/{k}": v.copy() for k, v in self.state.v.items()})
        return out

    def load_state_dict(self, tensors: dict[str, np.ndarray], step: int) -> None:
        """Restore moments and the step counter from a checkpoint."""
        names = {name for name, _ in self.named_params}
        m = {k.removeprefix("adam_m/"): v.copy() for k, v in tensors.items() if k.startswith("adam_m/")}
        v = {k.removeprefix("adam_v/"): v.copy() for k, v in tensors.items() if k.startswith("adam_v/")}
        if not set(m) <= names or set(m) != set(v):
            raise ContractError("optimizer moments do not match the model parameters")
        self.state.m, self.state.v, self.state.step = m, v, step
