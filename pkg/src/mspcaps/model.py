"""MSPCaps: multi-scale residual backbone, patchify capsules and routing heads."""

import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import Any, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from mspcaps.capsule import (
    CapsuleSet,
    CarBlock,
    DynamicRoutingBlock,
    PatchifyCaps,
    SoftmaxAxis,
)
from mspcaps.errors import ContractError, ShapeError
from mspcaps.nn import BatchNorm2d, Conv2d, Module, ModuleList
from mspcaps.tensor import Tensor, concat, get_default_dtype

logger = logging.getLogger(__name__)

SCALE_NAMES = ("32x32", "16x16", "8x8")


class ModelConfig(BaseModel):
    """Every architectural hyperparameter plus routing and ablation switches."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    channels: tuple[int, int, int] = (32, 64, 128)
    """Backbone channels C1, C2, C3."""
    convs_per_block: int = Field(2, ge=1)
    """Convolutions per residual block: the entry conv plus N-1 residual modules."""
    caps_dims: tuple[int, int, int] = (8, 8, 16)
    """Primary capsule dimensions d1, d2, d3."""
    d_mid: int = Field(16, ge=1)
    d_out: int = Field(32, ge=1)
    n_mid: Optional[int] = Field(None, ge=1)
    """Intermediate capsule count; defaults to the capsule count of the middle scale."""
    patch_size: int = Field(4, ge=1)
    weight_shared: bool = True
    num_classes: int = Field(10, ge=1)
    dropout_rate: float = Field(0.1, ge=0.0, lt=1.0)
    routing_kind: Literal["car", "dr"] = "car"
    dr_iters: int = Field(3, ge=1)
    scale_mask: tuple[bool, bool, bool] = (True, True, True)
    softmax_axis: SoftmaxAxis = "out"
    in_channels: int = Field(3, ge=1)
    resolution: int = Field(32, ge=1)

    @model_validator(mode="after")
    def _check(self) -> "ModelConfig":
        if not any(self.scale_mask):
            raise ValueError("scale_mask must select at least one scale")
        if self.resolution % 4:
            raise ValueError(f"resolution {self.resolution} cannot be halved twice")
        coarsest = self.resolution // 4
        if coarsest % self.patch_size:
            raise ValueError(f"patch size {self.patch_size} does not divide the {coarsest}x{coarsest} map")
        if self.full_scales and self.routing_kind == "car" and self.weight_shared:
            d1, d2, d3 = self.caps_dims
            if d1 != d2 or self.d_mid != d3:
                raise ValueError("weight sharing needs d1 == d2 and d_mid == d3")
        return self

    @classmethod
    def preset(cls, name: str, **overrides: Any) -> "ModelConfig":
        """Return preset `name` with `overrides` applied."""
        try:
            base = PRESETS[name]
        except KeyError:
            raise ContractError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
        return cls(**{**base, **overrides})

    @property
    def full_scales(self) -> bool:
        """Whether all three scales are used."""
        return all(self.scale_mask)

    def grid(self, scale: int) -> tuple[int, int]:
        """Patch grid of scale `scale`."""
        side = (self.resolution >> scale) // self.patch_size
        return side, side

    def num_caps(self, scale: int) -> int:
        """Number of primary capsules at scale `scale`."""
        h, w = self.grid(scale)
        return h * w

    def fingerprint(self) -> bytes:
        """SHA-256 over the canonical JSON of the configuration."""
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).digest()


PRESETS: dict[str, dict[str, Any]] = {
    "tiny": dict(
        channels=(32, 64, 128),
        convs_per_block=2,
        caps_dims=(8, 8, 16),
        d_mid=16,
        d_out=32,
        patch_size=4,
        weight_shared=True,
    ),
    "large": dict(
        channels=(128, 256, 512),
        convs_per_block=3,
        caps_dims=(16, 32, 64),
        d_mid=64,
        d_out=128,
        patch_size=4,
        weight_shared=False,
    ),
}


# Backbone


class ConvBnRelu(Module):
    """3x3 convolution, batch normalization and ReLU."""

    def __init__(self, in_ch: int, out_ch: int, stride: int, rng: np.random.Generator, dtype: Any):
        self.conv = Conv2d(in_ch, out_ch, 3, rng, stride=stride, padding=1, dtype=dtype)
        self.bn = BatchNorm2d(out_ch, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        """Apply conv, BN and ReLU."""
        return self.bn(self.conv(x)).relu()


class ResidualModule(ConvBnRelu):
    """Shape-preserving conv + BN + ReLU with an additive skip."""

    def forward(self, x: Tensor) -> Tensor:
        """Return `x` plus the conv, BN and ReLU of `x`."""
        return x + super().forward(x)


class ResidualBlock(Module):
    """An entry conv followed by residual modules at constant width."""

    def __init__(
        self,
        in_ch: int,
        out_ch: int,
        n_convs: int,
        stride: int,
        rng: np.random.Generator,
        dtype: Any = None,
    ):
        self.entry = ConvBnRelu(in_ch, out_ch, stride, rng, dtype)
        self.modules = ModuleList([ResidualModule(out_ch, out_ch, 1, rng, dtype) for _ in range(n_convs - 1)])

    def forward(self, x: Tensor) -> Tensor:
        """Run the entry conv, then every residual module."""
        x = self.entry(x)
        for module in self.modules:
            x = module(x)
        return x


class MSRB(Module):
    """Shared trunk producing feature maps at full, half and quarter resolution."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator, *, depth: int = 3, dtype: Any = None):
        self.resolution = config.resolution
        self.blocks = ModuleList()
        in_ch = config.in_channels
        for i, out_ch in enumerate(config.channels[:depth]):
            stride = 1 if i == 0 else 2
            self.blocks.append(ResidualBlock(in_ch, out_ch, config.convs_per_block, stride, rng, dtype))
            in_ch = out_ch

    def forward(self, x: Tensor) -> list[Tensor]:
        """Return one feature map per block, finest first."""
        return msrb_forward(x, self)


def msrb_forward(x: Tensor, backbone: MSRB) -> list[Tensor]:
    """Return one feature map per backbone block, finest first."""
    r = backbone.resolution
    if x.ndim != 4 or x.shape[2:] != (r, r):
        raise ShapeError(f"backbone expects (B, C, {r}, {r}) input, got {x.shape}")
    features = []
    for block in backbone.blocks:
        x = block(x)
        features.append(x)
    return features


# Routing heads


class CarHead(Module):
    """Two CAR blocks: (u1 -> u2) gives u_{1-2} on u2's grid, then (u_{1-2} -> u3) gives classes."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator, dtype: Any):
        d1, d2, d3 = config.caps_dims
        n1, n2, n3 = (config.num_caps(i) for i in range(3))
        n_mid = config.n_mid or n2
        if n_mid == n2:
            mid_grid: Optional[tuple[int, int]] = config.grid(1)
        elif n_mid % n3 == 0:
            mid_grid = None
        else:
            raise ContractError(f"n_mid={n_mid} must be a multiple of the {n3} coarse capsules")
        shared = config.weight_shared
        common = dict(dropout_rate=config.dropout_rate, softmax_axis=config.softmax_axis, dtype=dtype)
        self.car1 = CarBlock(n1, d1, n2, d2, n_mid, config.d_mid, rng, share_weight=shared, out_grid=mid_grid, **common)
        self.car2 = CarBlock(n_mid, config.d_mid, n3, d3, config.num_classes, config.d_out, rng, share_weight=shared, **common)

    def forward(self, caps: list[CapsuleSet], rng: Optional[np.random.Generator]) -> CapsuleSet:
        """Fuse the three capsule sets into class capsules."""
        u1, u2, u3 = caps
        fused = self.car1(u1, u2, rng)
        return self.car2(fused, u3, rng)


class SingleCarHead(Module):
    """Scale ablation: one CAR block from the selected capsule sets straight to the classes."""

    def __init__(self, config: ModelConfig, scales: list[int], rng: np.random.Generator, dtype: Any):
        fine, coarse = scales[0], scales[-1]
        d = config.caps_dims[0]
        self.car = CarBlock(
            config.num_caps(fine),
            d,
            config.num_caps(coarse),
            d,
            config.num_classes,
            config.d_mid,
            rng,
            share_weight=config.weight_shared,
            dropout_rate=config.dropout_rate,
            softmax_axis=config.softmax_axis,
            dtype=dtype,
        )

    def forward(self, caps: list[CapsuleSet], rng: Optional[np.random.Generator]) -> CapsuleSet:
        """Route the finest selected set against the coarsest."""
        return self.car(caps[0], caps[-1], rng)


class DynamicRoutingHead(Module):
    """Three independent routing blocks, concatenated, then a fourth to the classes."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator, dtype: Any):
        n_branch = config.n_mid or config.num_caps(1)
        self.branches = ModuleList(
            [
                DynamicRoutingBlock(
                    config.num_caps(i), config.caps_dims[i], n_branch, config.d_mid, rng, iters=config.dr_iters, dtype=dtype
                )
                for i in range(3)
            ]
        )
        self.classes = DynamicRoutingBlock(
            3 * n_branch, config.d_mid, config.num_classes, config.d_out, rng, iters=config.dr_iters, dtype=dtype
        )

    def forward(self, caps: list[CapsuleSet], rng: Optional[np.random.Generator]) -> CapsuleSet:
        """Route every scale, concatenate, then route to the classes."""
        routed = [branch(u).caps for branch, u in zip(self.branches, caps)]
        return self.classes(CapsuleSet(concat(routed, axis=1)))


class MSPCaps(Module):
    """Multi-scale patchify capsule network: backbone, patchify per scale and a routing head."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator, dtype: Any = None):
        dtype = dtype or get_default_dtype()
        self.config = config
        self.scales = [i for i, used in enumerate(config.scale_mask) if used]
        self.backbone = MSRB(config, rng, depth=self.scales[-1] + 1, dtype=dtype)
        full = config.full_scales
        self.patchify = ModuleList(
            [
                PatchifyCaps(
                    config.channels[i],
                    config.caps_dims[i] if full else config.caps_dims[0],
                    config.grid(i),
                    config.patch_size,
                    rng,
                    scale_id=i,
                    dtype=dtype,
                )
                for i in self.scales
            ]
        )
        if config.routing_kind == "dr":
            if not full:
                raise ContractError("the dynamic-routing ablation uses all three scales")
            self.head: Module = DynamicRoutingHead(config, rng, dtype)
        elif full:
            self.head = CarHead(config, rng, dtype)
        else:
            self.head = SingleCarHead(config, self.scales, rng, dtype)

    def forward(self, x: Tensor, rng: Optional[np.random.Generator] = None) -> CapsuleSet:
        """Return class capsules (B, K, d_out) for images `x`."""
        return mspcaps_forward(x, self, rng)

    def primary_capsules(self, x: Tensor) -> list[CapsuleSet]:
        """Return the primary capsule set of every selected scale."""
        features = self.backbone(x)
        return [patchify(features[i]) for patchify, i in zip(self.patchify, self.scales)]

    def group_sizes(self) -> list[int]:
        """Return the group size of every CAR block in the head."""
        return [m.group_size for m in _car_blocks(self.head)]


def mspcaps_forward(x: Tensor, model: MSPCaps, rng: Optional[np.random.Generator] = None) -> CapsuleSet:
    """Backbone, patchify per scale, then the routing head; returns (B, K, d_out) class capsules."""
    return model.head(model.primary_capsules(x), rng)


def _car_blocks(module: Module) -> list[CarBlock]:
    found = []
    for _, child in module.named_children():
        if isinstance(child, CarBlock):
            found.append(child)
        else:
            found.extend(_car_blocks(child))
    return found


def build_model(config: ModelConfig, seed: int = 0, dtype: Any = None) -> MSPCaps:
    """Build a freshly initialized model; the same seed always gives identical parameters."""
    model = MSPCaps(config, np.random.default_rng(seed), dtype=dtype)
    logger.info(
        "built %s-routing model over scales %s: %s trainable parameters",
        config.routing_kind.upper(),
        [SCALE_NAMES[i] for i in model.scales],
        f"{count_params(model).total:,}",
    )
    return model


def build_dr_ablation(config: ModelConfig, seed: int = 0, dtype: Any = None) -> MSPCaps:
    """Build the four-block dynamic-routing variant of `config`."""
    if config.routing_kind != "dr":
        raise ContractError("build_dr_ablation needs routing_kind='dr'")
    return build_model(config, seed, dtype)


# Parameter accounting


@dataclass
class ParamReport:
    """Trainable parameter counts of a model."""

    total: int
    breakdown: dict[str, int] = field(default_factory=dict)
    """Trainable parameter count per module path."""


def _module_key(name: str) -> str:
    parts = name.split(".")
    # backbone.blocks.0.… -> backbone.blocks.0 ; patchify.1.… -> patchify.1 ; head.car1.W2 -> head.car1
    depth = 3 if parts[0] == "backbone" else 2
    return ".".join(parts[: min(depth, len(parts) - 1)])


def count_params(model: Module) -> ParamReport:
    """Count trainable elements per module; BatchNorm running statistics are excluded."""
    breakdown: dict[str, int] = {}
    for name, p in model.named_parameters():
        key = _module_key(name)
        breakdown[key] = breakdown.get(key, 0) + p.size
    return ParamReport(sum(breakdown.values()), breakdown)
