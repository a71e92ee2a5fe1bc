"""FGSM and BIM L-infinity attacks in pixel space, and robustness sweeps over epsilon."""

import csv
import logging
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np

from mspcaps.capsule import margin_loss
from mspcaps.data import AugmentPolicy, Dataset
from mspcaps.errors import ContractError
from mspcaps.model import MSPCaps
from mspcaps.tensor import Tensor, backward
from mspcaps.train import evaluate, model_dtype

logger = logging.getLogger(__name__)

AttackKind = Literal["fgsm", "bim"]
DEFAULT_EPSILONS = (0.0, 0.01, 0.02, 0.05, 0.1, 0.15, 0.2)
ROBUSTNESS_HEADER = ("epsilon", "accuracy", "attack", "model")


@dataclass
class AttackConfig:
    """Budget and step settings of one L-infinity attack."""

    epsilon: float
    """L-infinity budget in [0, 1] pixel units."""
    steps: int = 1
    alpha: Optional[float] = None
    """Per-step size; defaults to epsilon / steps."""
    pixel_lo: float = 0.0
    pixel_hi: float = 1.0

    def __post_init__(self) -> None:
        if self.epsilon < 0:
            raise ContractError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.steps < 1:
            raise ContractError(f"steps must be >= 1, got {self.steps}")
        if self.alpha is None:
            self.alpha = self.epsilon / self.steps
        if self.steps > 1 and self.epsilon > 0 and self.alpha <= 0:
            raise ContractError("alpha must be > 0 for iterative attacks")

    @classmethod
    def for_kind(cls, kind: AttackKind, epsilon: float, steps: int = 10) -> "AttackConfig":
        """Return the settings for `kind`; FGSM always takes a single step."""
        return cls(epsilon, 1 if kind == "fgsm" else steps)


def _normalization(policy: AugmentPolicy, channels: int, dtype: np.dtype) -> tuple[np.ndarray, np.ndarray]:
    mean, std = policy.normalize_mean, policy.normalize_std
    if len(mean) == 1:
        mean, std = mean * channels, std * channels
    shape = (1, channels, 1, 1)
    return np.asarray(mean, dtype=dtype).reshape(shape), np.asarray(std, dtype=dtype).reshape(shape)


def pixel_gradient(model: MSPCaps, x: np.ndarray, y: np.ndarray, policy: AugmentPolicy) -> np.ndarray:
    """Gradient of the margin loss with respect to raw pixels, normalization included."""
    dtype = model_dtype(model)
    pixels = Tensor(x, requires_grad=True, dtype=dtype)
    mean, std = _normalization(policy, x.shape[1], dtype)
    loss = margin_loss(model((pixels - mean) / std), y)
    backward(loss)
    assert pixels.grad is not None
    return pixels.grad


def _within_budget(x_adv: np.ndarray, x: np.ndarray, epsilon: float) -> np.ndarray:
    """Cast float64 `x_adv` to the dtype of `x`, nudging values that rounding pushed past epsilon."""
    out = x_adv.astype(x.dtype)
    if out.dtype == np.float64:
        return out
    distance = out.astype(np.float64) - x.astype(np.float64)
    over = np.abs(distance) > epsilon
    # one ulp toward x suffices: the float64 value itself lies inside the ball
    out[over] = np.nextafter(out[over], x[over])
    return out


def _signed_steps(model: MSPCaps, x: np.ndarray, y: np.ndarray, cfg: AttackConfig, policy: AugmentPolicy) -> np.ndarray:
    assert cfg.alpha is not None
    was_training = model.training
    model.eval()
    origin = x.astype(np.float64)
    lo, hi = origin - cfg.epsilon, origin + cfg.epsilon
    x_adv = origin
    try:
        for _ in range(cfg.steps):
            grad = pixel_gradient(model, x_adv.astype(x.dtype), y, policy)
            x_adv = x_adv + cfg.alpha * np.sign(grad)
            x_adv = np.clip(x_adv, lo, hi)
            x_adv = np.clip(x_adv, cfg.pixel_lo, cfg.pixel_hi)
    finally:
        model.zero_grad()
        model.train(was_training)
    return _within_budget(x_adv, x, cfg.epsilon)


def fgsm(model: MSPCaps, x: np.ndarray, y: np.ndarray, cfg: AttackConfig, policy: AugmentPolicy = AugmentPolicy()) -> np.ndarray:
    """One signed-gradient step of size epsilon on raw [0, 1] pixels."""
    return _signed_steps(model, x, y, replace(cfg, steps=1, alpha=cfg.epsilon), policy)


def bim(model: MSPCaps, x: np.ndarray, y: np.ndarray, cfg: AttackConfig, policy: AugmentPolicy = AugmentPolicy()) -> np.ndarray:
    """`cfg.steps` signed-gradient steps of size alpha, each projected onto the epsilon ball and [0, 1]."""
    return _signed_steps(model, x, y, cfg, policy)


def attack_dataset(model: MSPCaps, data: Dataset, kind: AttackKind, cfg: AttackConfig, batch_size: int = 128) -> Dataset:
    """Return a copy of `data` whose images are replaced by their adversarial versions."""
    run = fgsm if kind == "fgsm" else bim
    adversarial = np.empty_like(data.images)
    for start in range(0, len(data), batch_size):
        stop = start + batch_size
        adversarial[start:stop] = run(model, data.images[start:stop], data.labels[start:stop], cfg, data.policy)
    return replace(data, images=adversarial, split="test")


@dataclass
class RobustnessCurve:
    """Accuracy of one model at increasing attack budgets."""

    model: str
    attack: AttackKind
    points: list[tuple[float, float]] = field(default_factory=list)
    """(epsilon, accuracy) pairs with strictly increasing epsilon."""

    def __post_init__(self) -> None:
        epsilons = [eps for eps, _ in self.points]
        if any(b <= a for a, b in zip(epsilons, epsilons[1:])):
            raise ContractError(f"epsilons must be strictly increasing, got {epsilons}")


def robustness_sweep(
    model: MSPCaps,
    data: Dataset,
    epsilons: Sequence[float] = DEFAULT_EPSILONS,
    attack_kind: AttackKind = "fgsm",
    *,
    steps: int = 10,
    model_name: str = "mspcaps",
    batch_size: int = 128,
) -> RobustnessCurve:
    """Accuracy under attack for each epsilon; epsilon 0 is scored on the clean images."""
    ordered = sorted(set(epsilons))
    points = []
    for eps in ordered:
        attacked = data if eps == 0 else attack_dataset(model, data, attack_kind, AttackConfig.for_kind(attack_kind, eps, steps), batch_size)
        accuracy = evaluate(model, attacked, batch_size=batch_size).accuracy
        logger.info("%s eps=%.3f: accuracy %.4f", attack_kind.upper(), eps, accuracy)
        points.append((float(eps), accuracy))
    return RobustnessCurve(model_name, attack_kind, points)


def write_robustness_csv(path: Union[str, Path], curves: Sequence[RobustnessCurve], append: bool = True) -> None:
    """Write one row per (curve, epsilon); the header is written when the file is new."""
    path = Path(path)
    new = not append or not path.exists() or path.stat().st_size == 0
    with path.open("w" if new else "a", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        if new:
            writer.writerow(ROBUSTNESS_HEADER)
        for curve in curves:
            writer.writerows([repr(eps), repr(acc), curve.attack, curve.model] for eps, acc in curve.points)
