"""Sensor energy, accuracy and memory accounting over inference traces.

Sensors draw constant power while on and nothing once switched off, so the
energy a segment costs relative to an always-on baseline is the fraction of
the window that was sensed. Switching transients are not modelled.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, UsageError
from .forest import ForestCascade, forest_memory_kb
from .inference import InferenceTrace
from .model import SeeCnnModel, exit_macs, memory_kb, parameter_breakdown, BYTES_PER_PARAM


@dataclass(frozen=True)
class SensorPowerModel:
    """Relative power draw per channel (default: all channels equal)."""

    channel_weights: tuple[float, ...] | None = None

    def validate(self) -> None:
        w = self.channel_weights
        if w is None:
            return
        if any(not np.isfinite(x) or x < 0 for x in w) or not sum(w) > 0:
            raise ConfigurationError(f"channel weights must be >= 0 with a positive sum: {w}")


def energy_ratio(traces: Sequence[InferenceTrace], power_model: SensorPowerModel | None = None) -> float:
    """Mean per-segment sensor energy relative to sensing every full window.

    All channels switch off together, so each channel is on for the sensed
    fraction and the power-weighted mean reduces to the plain mean whatever the
    weights are; they are only validated.
    """
    if not traces:
        raise UsageError("energy ratio of an empty trace list")
    pm = power_model or SensorPowerModel()
    pm.validate()
    # exact rational mean, correctly rounded: segments that all stop at c give exactly c
    counts = Counter(float(t.sensed_fraction) for t in traces)
    return float(sum(Fraction(f) * n for f, n in counts.items()) / len(traces))


def accuracy(traces: Sequence[InferenceTrace]) -> float:
    if not traces:
        raise UsageError("accuracy of an empty trace list")
    if any(t.true_label is None for t in traces):
        raise UsageError("traces carry no true labels")
    return sum(t.correct for t in traces) / len(traces)


def per_class_accuracy(traces: Sequence[InferenceTrace], num_classes: int) -> list[float | None]:
    """Correct fraction per class; ``None`` marks a class with no segments."""
    correct = np.zeros(num_classes, dtype=np.int64)
    total = np.zeros(num_classes, dtype=np.int64)
    for t in traces:
        if t.true_label is None:
            raise UsageError(f"segment {t.segment_id} has no true label")
        total[t.true_label] += 1
        correct[t.true_label] += t.correct
    return [None if total[c] == 0 else float(correct[c] / total[c]) for c in range(num_classes)]


def exit_usage(traces: Sequence[InferenceTrace], num_exits: int) -> list[int]:
    counts = [0] * num_exits
    for t in traces:
        counts[t.exit_taken - 1] += 1
    return counts


def params_to_kb(n_params: int) -> float:
    return n_params * BYTES_PER_PARAM / 1024


def memory_overhead(see, baseline=None) -> dict[str, float]:
    """``{"baseline_kb", "see_kb"}`` for a CNN or a forest cascade.

    For a CNN without an explicit baseline, the baseline is the SEE model's
    own trunk and terminal head. A cascade's baseline is the forest it was
    budgeted against.
    """
    if isinstance(see, SeeCnnModel):
        base = memory_kb(baseline) if baseline is not None else params_to_kb(parameter_breakdown(see)["baseline"])
        return {"baseline_kb": base, "see_kb": memory_kb(see)}
    if isinstance(see, ForestCascade):
        if baseline is not None:
            base_nodes = baseline.node_count
        elif see.baseline_nodes is not None:
            base_nodes = see.baseline_nodes
        elif len(see.stages) == 1:
            base_nodes = see.node_count
        else:
            raise UsageError("cascade has no recorded baseline node count")
        return {"baseline_kb": forest_memory_kb(base_nodes), "see_kb": forest_memory_kb(see.node_count)}
    raise UsageError(f"cannot account memory for {type(see).__name__}")


@dataclass
class EnergyReport:
    accuracy: float
    mean_energy_ratio: float
    exit_usage: list[int]
    exit_fractions: list[float]
    per_class_accuracy: list[float | None]
    class_names: list[str]
    memory_kb: dict[str, float] = field(default_factory=dict)
    exit_macs: list[int] | None = None
    baseline_accuracy: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def table(self) -> str:
        """Plain-text summary: per-class accuracy, exit usage, energy and memory."""
        lines = ["Per-class accuracy (%)", f"{'class':<16}{'accuracy':>10}"]
        for name, acc in zip(self.class_names, self.per_class_accuracy):
            lines.append(f"{name:<16}{'absent' if acc is None else f'{100 * acc:.1f}':>10}")
        lines.append(f"{'overall':<16}{100 * self.accuracy:>10.1f}")
        if self.baseline_accuracy is not None:
            lines.append(f"{'baseline':<16}{100 * self.baseline_accuracy:>10.1f}")
        lines += ["", "Exit usage", f"{'exit':<6}{'data %':>8}{'segments':>10}{'share %':>9}"]
        n = sum(self.exit_usage)
        for i, (c, u) in enumerate(zip(self.exit_fractions, self.exit_usage), start=1):
            lines.append(f"{i:<6}{100 * c:>8.1f}{u:>10d}{100 * u / n:>9.1f}")
        if self.exit_macs:
            lines += ["", "Operations to reach each exit (MACs)"]
            lines += [f"exit {i}: {m}" for i, m in enumerate(self.exit_macs, start=1)]
        lines += ["", f"Sensor energy ratio (SEE / baseline): {self.mean_energy_ratio:.4f}"]
        if self.memory_kb:
            lines += [
                "",
                "Memory (KB)",
                f"{'baseline':<10}{self.memory_kb['baseline_kb']:>10.2f}",
                f"{'SEE':<10}{self.memory_kb['see_kb']:>10.2f}",
            ]
        return "\n".join(lines) + "\n"


def build_report(traces: Sequence[InferenceTrace], classifier, class_names: Sequence[str],
                 power_model: SensorPowerModel | None = None, baseline=None,
                 baseline_accuracy: float | None = None) -> EnergyReport:
    fractions = list(classifier.fractions)
    macs = exit_macs(classifier) if isinstance(classifier, SeeCnnModel) else None
    return EnergyReport(
        accuracy=accuracy(traces),
        mean_energy_ratio=energy_ratio(traces, power_model),
        exit_usage=exit_usage(traces, len(fractions)),
        exit_fractions=fractions,
        per_class_accuracy=per_class_accuracy(traces, len(class_names)),
        class_names=list(class_names),
        memory_kb=memory_overhead(classifier, baseline),
        exit_macs=macs,
        baseline_accuracy=baseline_accuracy,
    )
