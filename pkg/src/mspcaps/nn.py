"""Parameter containers and the layers built on `mspcaps.functional`."""

from collections.abc import Iterator
from typing import Any, Optional

import numpy as np

from mspcaps import functional as F
from mspcaps.tensor import Tensor, get_default_dtype


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ("decay",)

    def __init__(self, data: Any, *, decay: bool = True, dtype: Any = None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.decay = decay
        """Whether decoupled weight decay applies to this tensor."""


class Module:
    """Base class: parameters, buffers and child modules are discovered from attributes."""

    training: bool = True

    def forward(self, *args: Any, **kwargs: Any) -> Any:
        """Compute the module output."""
        raise NotImplementedError

    def __call__(self, *args: Any, **kwargs: Any) -> Any:
        return self.forward(*args, **kwargs)

    def named_children(self) -> Iterator[tuple[str, "Module"]]:
        """Yield direct child modules with their attribute names."""
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        """Yield every parameter with its dotted path."""
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        """Return every parameter in discovery order."""
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        """Yield non-trainable state such as BatchNorm running statistics."""
        for name, value in vars(self).items():
            if isinstance(value, np.ndarray):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")

    def train(self, mode: bool = True) -> "Module":
        """Switch this module and its children between training and eval mode."""
        self.training = mode
        for _, child in self.named_children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        """Switch to eval mode."""
        return self.train(False)

    def zero_grad(self) -> None:
        """Clear the gradient of every parameter."""
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        """Return copies of every parameter (`param/…`) and buffer (`buffer/…`)."""
        state = {f"param/{name}": p.data.copy() for name, p in self.named_parameters()}
        state.update({f"buffer/{name}": b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        """Load arrays produced by `state_dict`; the key sets must match exactly."""
        expected = self.state_dict()
        if set(expected) != set(state):
            missing = sorted(set(expected) - set(state))
            unexpected = sorted(set(state) - set(expected))
            raise KeyError(f"state mismatch: missing {missing}, unexpected {unexpected}")
        for name, p in self.named_parameters():
            p.data = np.array(state[f"param/{name}"], dtype=p.dtype).reshape(p.shape)
        for name, _ in self.named_buffers():
            self._set_buffer(name.split("."), state[f"buffer/{name}"])

    def _set_buffer(self, path: list[str], value: np.ndarray) -> None:
        owner: Any = self
        for part in path[:-1]:
            owner = getattr(owner, part)
        current = getattr(owner, path[-1])
        setattr(owner, path[-1], np.array(value, dtype=current.dtype).reshape(current.shape))


class ModuleList(Module):
    """An indexable sequence of modules, named `0`, `1`, …"""

    def __init__(self, modules: Optional[list[Module]] = None):
        for module in modules or []:
            self.append(module)

    def append(self, module: Module) -> None:
        """Add `module` under the next index."""
        setattr(self, str(len(self)), module)

    def __len__(self) -> int:
        return sum(1 for _ in self.named_children())

    def __iter__(self) -> Iterator[Module]:
        return (child for _, child in self.named_children())

    def __getitem__(self, index: int) -> Any:
        return getattr(self, str(index % len(self)))


class Conv2d(Module):
    """2D convolution with a square kernel and an optional bias."""

    def __init__(
        self,
        in_ch: int,
        out_ch: int,
        k: int,
        rng: np.random.Generator,
        *,
        stride: int = 1,
        padding: int = 0,
        bias: bool = False,
        init: str = "kaiming",
        dtype: Any = None,
    ):
        dtype = dtype or get_default_dtype()
        shape = (out_ch, in_ch, k, k)
        if init == "xavier":
            weight = F.init_xavier_normal(shape, rng, dtype=dtype)
        else:
            weight = F.init_kaiming(shape, rng, dtype=dtype)
        self.weight = Parameter(weight, dtype=dtype)
        self.bias = Parameter(np.zeros(out_ch), decay=False, dtype=dtype) if bias else None
        self.stride = stride
        self.padding = padding

    @property
    def params(self) -> F.ConvParams:
        """Current weights and geometry as `ConvParams`."""
        return F.ConvParams(self.weight, self.bias, self.stride, self.padding)

    def forward(self, x: Tensor) -> Tensor:
        """Convolve `x`."""
        return F.conv2d(x, self.params)


class BatchNorm2d(Module):
    """Per-channel batch normalization with running statistics."""

    def __init__(self, channels: int, *, momentum: float = 0.1, eps: float = 1e-5, dtype: Any = None):
        dtype = dtype or get_default_dtype()
        self.gamma = Parameter(np.ones(channels), decay=False, dtype=dtype)
        self.beta = Parameter(np.zeros(channels), decay=False, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        """Normalize `x` with batch or running statistics."""
        return F.batchnorm2d(x, self)


class LayerNorm(Module):
    """Layer normalization over the last axis."""

    def __init__(self, dim: int, *, eps: float = 1e-5, dtype: Any = None):
        dtype = dtype or get_default_dtype()
        self.gamma = Parameter(np.ones(dim), decay=False, dtype=dtype)
        self.beta = Parameter(np.zeros(dim), decay=False, dtype=dtype)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        """Normalize `x` over its last axis."""
        return F.layernorm(x, self)
