"""Capsule primitives: squash, patchify capsules, cross-agreement and dynamic routing, margin loss."""

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Any, Literal, Optional

import numpy as np

from mspcaps import functional as F
from mspcaps.errors import ContractError, ShapeError
from mspcaps.nn import Conv2d, LayerNorm, Module, Parameter
from mspcaps.tensor import Tensor, get_default_dtype, matmul, reduce, softmax, take, vector_norm

Grid = tuple[int, int]
SoftmaxAxis = Literal["out", "in"]

M_PLUS = 0.9
M_MINUS = 0.1
LAMBDA_ABSENT = 0.5


@dataclass
class CapsuleSet:
    """A batch of capsule vectors, optionally laid out on the patch grid they came from."""

    caps: Tensor
    """Capsules of shape (B, n, d)."""
    grid: Optional[Grid] = None
    """(grid_h, grid_w) with grid_h * grid_w == n, absent for routed outputs."""
    scale_id: Optional[int] = None
    """Backbone scale that produced the capsules."""

    def __post_init__(self) -> None:
        if self.caps.ndim != 3:
            raise ShapeError(f"capsules must be (B, n, d), got {self.caps.shape}")
        if self.grid is not None and self.grid[0] * self.grid[1] != self.caps.shape[1]:
            raise ShapeError(f"grid {self.grid} does not hold {self.caps.shape[1]} capsules")

    @property
    def n(self) -> int:
        """Number of capsules."""
        return self.caps.shape[1]

    @property
    def dim(self) -> int:
        """Capsule dimension."""
        return self.caps.shape[2]

    def with_grid(self, grid: Optional[Grid]) -> "CapsuleSet":
        """Return the same capsules laid out on `grid`."""
        return CapsuleSet(self.caps, grid, self.scale_id)


def squash(v: Tensor) -> Tensor:
    """Shrink each vector along the last axis to norm |v|^2 / (1 + |v|^2), keeping its direction."""
    norm = vector_norm(v, axis=-1, keepdims=True)
    return v * (norm / (1 + norm * norm))


# PatchifyCaps


class PatchifyCaps(Module):
    """One capsule per p x p patch: pool, 1x1 projection, positional embedding, layer norm."""

    def __init__(
        self,
        in_ch: int,
        dim: int,
        grid: Grid,
        patch_size: int,
        rng: np.random.Generator,
        *,
        scale_id: Optional[int] = None,
        dtype: Any = None,
    ):
        dtype = dtype or get_default_dtype()
        self.conv = Conv2d(in_ch, dim, 1, rng, bias=True, init="xavier", dtype=dtype)
        self.pos_embedding = Parameter(np.zeros((grid[0] * grid[1], dim)), decay=False, dtype=dtype)
        self.norm = LayerNorm(dim, dtype=dtype)
        self.grid = grid
        self.patch_size = patch_size
        self.scale_id = scale_id

    def forward(self, f: Tensor) -> CapsuleSet:
        """Return the capsules of feature map `f`."""
        return patchify_caps(f, self.patch_size, self)


def patchify_caps(f: Tensor, p: int, params: PatchifyCaps) -> CapsuleSet:
    """Turn a (B, C, H, W) feature map into (H/p)(W/p) capsules, grid cells in row-major order."""
    _, _, h, w = f.shape
    if h % p or w % p:
        raise ShapeError(f"feature map {h}x{w} is not divisible by patch size p={p}")
    grid = (h // p, w // p)
    n = grid[0] * grid[1]
    if params.pos_embedding.shape[0] != n:
        raise ShapeError(f"positional embedding has {params.pos_embedding.shape[0]} rows, grid {grid} needs {n}")
    pooled = F.avgpool2d(f, p, p)
    projected = params.conv(pooled)
    batch, dim = projected.shape[0], projected.shape[1]
    flat = projected.transpose(0, 2, 3, 1).reshape(batch, n, dim)
    caps = params.norm(flat + params.pos_embedding)
    return CapsuleSet(caps, grid, params.scale_id)


# Spatial grouping


def group_map(grid_fine: Grid, grid_coarse: Grid) -> np.ndarray:
    """Map each fine capsule index to its (coarse group k, within-group index m).

    Returns an (n_fine, 2) integer array. Fine cell (r, c) belongs to the coarse cell
    covering it, and m enumerates the covering block in row-major order.
    """
    (h1, w1), (h2, w2) = grid_fine, grid_coarse
    if h1 % h2 or w1 % w2:
        raise ContractError(f"fine grid {grid_fine} is not divisible by coarse grid {grid_coarse}")
    bh, bw = h1 // h2, w1 // w2
    rows, cols = np.divmod(np.arange(h1 * w1), w1)
    k = (rows // bh) * w2 + cols // bw
    m = (rows % bh) * bw + cols % bw
    return np.stack([k, m], axis=1)


@lru_cache(maxsize=64)
def group_gather_index(grid_fine: Grid, grid_coarse: Grid) -> np.ndarray:
    """Return the (n_coarse, s) array of fine indices, i.e. the inverse of `group_map`."""
    mapping = group_map(grid_fine, grid_coarse)
    n_coarse = grid_coarse[0] * grid_coarse[1]
    s = mapping.shape[0] // n_coarse
    index = np.empty((n_coarse, s), dtype=np.intp)
    index[mapping[:, 0], mapping[:, 1]] = np.arange(mapping.shape[0])
    index.setflags(write=False)
    return index


# Cross-agreement routing


@dataclass
class CarParams:
    """Projection tensors and switches of one cross-agreement routing block."""

    W2: Tensor
    """Coarse projections (n_out, n_in2, d_in2, d_out)."""
    W1: Optional[Tensor] = None
    """Fine projections (n_out, n_in1, d_in1, d_out); absent when weights are shared."""
    share_weight: bool = True
    dropout_rate: float = 0.0
    softmax_axis: SoftmaxAxis = "out"

    def __post_init__(self) -> None:
        if self.share_weight and self.W1 is not None:
            raise ContractError("shared-weight CAR must not carry W1")
        if not self.share_weight and self.W1 is None:
            raise ContractError("unshared CAR needs W1")
        if self.W1 is not None and (self.W1.shape[0], self.W1.shape[3]) != (self.W2.shape[0], self.W2.shape[3]):
            raise ShapeError(f"W1 {self.W1.shape} and W2 {self.W2.shape} disagree on n_out or d_out")

    @property
    def n_out(self) -> int:
        """Number of output capsules."""
        return self.W2.shape[0]

    @property
    def d_out(self) -> int:
        """Output capsule dimension."""
        return self.W2.shape[3]


def project_votes(u: Tensor, W: Tensor) -> Tensor:
    """Compute votes W[j, i] u[i] for every output j: (B, n_in, d_in) -> (B, n_out, n_in, d_out)."""
    batch, n_in, d_in = u.shape
    if W.shape[1:3] != (n_in, d_in):
        raise ShapeError(f"projection {W.shape} does not accept capsules {u.shape}")
    votes = matmul(u.reshape(batch, 1, n_in, 1, d_in), W)
    return votes.reshape(batch, W.shape[0], n_in, W.shape[3])


def _fine_votes(u1: CapsuleSet, u2: CapsuleSet, params: CarParams) -> Tensor:
    """Fine votes arranged as (B, n_out, n_in2, s, d_out)."""
    n1, n2 = u1.n, u2.n
    if n1 % n2:
        raise ContractError(f"group size s = {n1}/{n2} is not an integer")
    s = n1 // n2
    if u1.grid is not None and u2.grid is not None:
        index = group_gather_index(u1.grid, u2.grid)
    else:
        index = np.arange(n1).reshape(n2, s)
    batch = u1.caps.shape[0]

    if params.share_weight:
        if u1.dim != u2.dim:
            raise ContractError(f"shared weights need equal capsule dims, got {u1.dim} and {u2.dim}")
        grouped = take(u1.caps, index, axis=1)  # (B, n2, s, d)
        votes = matmul(grouped.reshape(batch, 1, n2, s, u1.dim), params.W2)
        return votes  # (B, n_out, n2, s, d_out)
    assert params.W1 is not None
    flat = project_votes(u1.caps, params.W1)  # (B, n_out, n1, d_out)
    return take(flat, index, axis=2)


def car_agreement(u1: CapsuleSet, u2: CapsuleSet, params: CarParams) -> tuple[Tensor, Tensor]:
    """Return the coarse votes (B, n_out, n_in2, d_out) and agreement scores A (B, n_out, n_in2)."""
    if u1.n < u2.n:
        raise ContractError(f"u1 must be the finer set, got {u1.n} < {u2.n} capsules")
    votes2 = project_votes(u2.caps, params.W2)
    votes1 = _fine_votes(u1, u2, params)
    batch, n_out, n2, d_out = votes2.shape
    similarity = (votes1 * votes2.reshape(batch, n_out, n2, 1, d_out)).sum(axis=-1)
    scores = reduce("max", similarity / math.sqrt(d_out), axis=-1)
    return votes2, scores


def car_forward(
    u1: CapsuleSet,
    u2: CapsuleSet,
    params: CarParams,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> CapsuleSet:
    """Route (u1 fine, u2 coarse) to n_out squashed capsules in one pass."""
    votes2, scores = car_agreement(u1, u2, params)
    coupling = softmax(scores, axis=1 if params.softmax_axis == "out" else 2)
    coupling = F.dropout(coupling, params.dropout_rate, training, rng)
    batch, n_out, n2, d_out = votes2.shape
    v = (coupling.reshape(batch, n_out, n2, 1) * votes2).sum(axis=2)
    return CapsuleSet(squash(v))


class CarBlock(Module):
    """Cross-agreement routing of a fine and a coarse capsule set, with its projection weights."""

    def __init__(
        self,
        n_in1: int,
        d_in1: int,
        n_in2: int,
        d_in2: int,
        n_out: int,
        d_out: int,
        rng: np.random.Generator,
        *,
        share_weight: bool,
        dropout_rate: float = 0.0,
        softmax_axis: SoftmaxAxis = "out",
        out_grid: Optional[Grid] = None,
        dtype: Any = None,
    ):
        dtype = dtype or get_default_dtype()
        if n_in1 % n_in2:
            raise ContractError(f"group size s = {n_in1}/{n_in2} is not an integer")
        if share_weight and d_in1 != d_in2:
            raise ContractError(f"shared weights need d_in1 == d_in2, got {d_in1} and {d_in2}")
        self.W2 = Parameter(F.init_kaiming((n_out, n_in2, d_in2, d_out), rng, fan_in=d_in2, dtype=dtype))
        self.W1 = None
        if not share_weight:
            self.W1 = Parameter(F.init_kaiming((n_out, n_in1, d_in1, d_out), rng, fan_in=d_in1, dtype=dtype))
        self.share_weight = share_weight
        self.dropout_rate = dropout_rate
        self.softmax_axis = softmax_axis
        self.out_grid = out_grid
        self.group_size = n_in1 // n_in2

    @property
    def params(self) -> CarParams:
        """Current weights and switches as a `CarParams`."""
        return CarParams(self.W2, self.W1, self.share_weight, self.dropout_rate, self.softmax_axis)

    def forward(
        self, u1: CapsuleSet, u2: CapsuleSet, rng: Optional[np.random.Generator] = None
    ) -> CapsuleSet:
        """Route `u1` against `u2`; dropout on the coupling coefficients draws from `rng`."""
        out = car_forward(u1, u2, self.params, self.training, rng)
        return out.with_grid(self.out_grid)


# Dynamic routing


def dynamic_routing(u: CapsuleSet, W: Tensor, iters: int = 3) -> CapsuleSet:
    """Iterative routing-by-agreement with coupling logits starting at zero."""
    if iters < 1:
        raise ContractError(f"dynamic routing needs at least one iteration, got {iters}")
    votes = project_votes(u.caps, W)  # (B, n_out, n_in, d_out)
    batch, n_out, n_in, d_out = votes.shape
    logits = Tensor(np.zeros((batch, n_out, n_in)), dtype=votes.dtype)
    for it in range(iters):
        coupling = softmax(logits, axis=1)
        v = squash((coupling.reshape(batch, n_out, n_in, 1) * votes).sum(axis=2))
        if it + 1 < iters:
            logits = logits + (votes * v.reshape(batch, n_out, 1, d_out)).sum(axis=-1)
    return CapsuleSet(v)


class DynamicRoutingBlock(Module):
    """Dynamic routing with its own projection tensor."""

    def __init__(
        self,
        n_in: int,
        d_in: int,
        n_out: int,
        d_out: int,
        rng: np.random.Generator,
        *,
        iters: int = 3,
        dtype: Any = None,
    ):
        self.W = Parameter(F.init_kaiming((n_out, n_in, d_in, d_out), rng, fan_in=d_in, dtype=dtype))
        self.iters = iters

    def forward(self, u: CapsuleSet) -> CapsuleSet:
        """Route `u` to the output capsules."""
        return dynamic_routing(u, self.W, self.iters)


# Loss and readout


def margin_loss(class_caps: CapsuleSet, labels: Any) -> Tensor:
    """Hinge-squared loss on capsule lengths, summed over classes and averaged over the batch."""
    batch, num_classes, _ = class_caps.caps.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != batch:
        raise ContractError(f"{labels.shape[0]} labels for a batch of {batch}")
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise ContractError(f"labels must lie in [0, {num_classes})")
    dtype = class_caps.caps.dtype
    present = np.zeros((batch, num_classes), dtype=dtype)
    present[np.arange(batch), labels] = 1
    lengths = vector_norm(class_caps.caps, axis=-1)
    hit = (M_PLUS - lengths).relu()
    miss = (lengths - M_MINUS).relu()
    per_class = present * hit * hit + LAMBDA_ABSENT * (1 - present) * miss * miss
    return per_class.sum(axis=1).mean()


def capsule_lengths(class_caps: CapsuleSet) -> np.ndarray:
    """Return the Euclidean length of every capsule as a (B, n) array."""
    caps = class_caps.caps.data
    return np.sqrt(np.sum(caps * caps, axis=-1))


def predict(class_caps: CapsuleSet) -> np.ndarray:
    """Return the index of the longest capsule per batch item (lowest index on ties)."""
    return np.argmax(capsule_lengths(class_caps), axis=-1)
