from dataclasses import dataclass

from mspcaps.model import SCALE_NAMES, MSPCaps, count_params


@dataclass
class ModelSummary:
    """Parameter and capsule counts of a built model."""

    total: int
    breakdown: dict[str, int]
    capsules_per_scale: dict[str, int]
    group_sizes: list[int]

    @property
    def primary_capsules(self) -> int:
        """Total number of primary capsules."""
        return sum(self.capsules_per_scale.values())


def summarize_model(model: MSPCaps) -> ModelSummary:
    """Collect parameter counts, primary capsule counts per scale and CAR group sizes."""
    report = count_params(model)
    config = model.config
    capsules = {SCALE_NAMES[i]: config.num_caps(i) for i in model.scales}
    return ModelSummary(report.total, report.breakdown, capsules, model.group_sizes())


def format_model_summary(summary: ModelSummary, title: str = "model") -> str:
    """Format a summary as an aligned plain-text report.

    Args:
        summary: Output of `summarize_model`.
        title: Heading of the report.

    Returns:
        str: Parameter breakdown followed by capsule layout and group sizes.
    """
    width = max(len(name) for name in summary.breakdown) if summary.breakdown else 10
    lines = [f"{title}", "=" * len(title), "Trainable parameters:"]
    for name, count in summary.breakdown.items():
        lines.append(f"  {name:<{width}}  {count:>12,}")
    lines.append(f"  {'total':<{width}}  {summary.total:>12,}")
    lines.append("Primary capsules:")
    for scale, count in summary.capsules_per_scale.items():
        lines.append(f"  {scale:<8} {count}")
    lines.append(f"  {'total':<8} {summary.primary_capsules}")
    if summary.group_sizes:
        lines.append("CAR group sizes: " + ", ".join(str(s) for s in summary.group_sizes))
    return "\n".join(lines)
