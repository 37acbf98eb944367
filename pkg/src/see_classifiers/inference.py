"""Entropy-gated staged inference.

A segment source hands out raw slices only when asked. Each exit's class
distribution is scored by its Shannon entropy (natural log); the first early
exit with entropy strictly below its threshold answers, and no later slice is
ever requested. The terminal exit always answers.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Protocol, Sequence

import numpy as np

from .errors import ConfigurationError, DataError, SeeError, UsageError
from .model import prefix_length

NORMALISATION_TOL = 1e-9


def entropy(probs: np.ndarray) -> float | np.ndarray:
    """``-sum p log p`` with ``0 log 0 = 0``; rows of a 2-D array are scored separately."""
    p = np.asarray(probs, dtype=np.float64)
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > NORMALISATION_TOL):
        raise UsageError("entropy needs non-negative probabilities summing to 1")
    logs = np.log(np.where(p > 0, p, 1.0))
    out = -(p * logs).sum(axis=-1)
    return float(out) if out.ndim == 0 else out


@dataclass
class InferenceTrace:
    segment_id: int
    predicted_label: int
    exit_taken: int  # 1-based
    entropy_at_exit: float
    sensed_fraction: float
    true_label: int | None = None

    @property
    def correct(self) -> bool:
        return self.true_label is not None and self.true_label == self.predicted_label


class SegmentSource(Protocol):
    def next_slice(self) -> np.ndarray: ...


class ArraySegmentSource:
    """Serves consecutive slices of a stored window, counting every read."""

    def __init__(self, segment: np.ndarray, fractions: Sequence[float]):
        self.segment = np.asarray(segment, dtype=np.float64)
        length = self.segment.shape[-1]
        self.bounds = [prefix_length(c, length) for c in fractions]
        self.reads = 0

    def next_slice(self) -> np.ndarray:
        if self.reads >= len(self.bounds):
            raise DataError(f"segment source exhausted after {self.reads} slices")
        start = 0 if self.reads == 0 else self.bounds[self.reads - 1]
        out = self.segment[..., start : self.bounds[self.reads]]
        self.reads += 1
        return out

    @property
    def sensed_samples(self) -> int:
        return 0 if self.reads == 0 else self.bounds[self.reads - 1]


def resolve_thresholds(classifier, thresholds) -> list[float]:
    n_early = len(classifier.fractions) - 1
    if thresholds is None:
        thresholds = classifier.thresholds
    elif np.isscalar(thresholds):
        thresholds = [float(thresholds)] * n_early
    thresholds = [float(t) for t in thresholds]
    if len(thresholds) != n_early:
        raise ConfigurationError(f"{len(thresholds)} thresholds for {n_early} early exits")
    if any(not math.isfinite(t) or t < 0 for t in thresholds):
        raise ConfigurationError(f"thresholds must be finite and >= 0: {thresholds}")
    return thresholds


def infer_segment(classifier, source: SegmentSource, thresholds=None, segment_id: int = 0,
                  true_label: int | None = None) -> InferenceTrace:
    """Run exits in order, pulling one slice per exit, and stop at the first confident one.

    ``classifier`` is a :class:`~see_classifiers.model.SeeCnnModel` or a
    :class:`~see_classifiers.forest.ForestCascade`; ``thresholds`` is one value per
    early exit, a scalar shared by all of them, or ``None`` for the stored ones.
    """
    T = resolve_thresholds(classifier, thresholds)
    fractions = classifier.fractions
    runner = classifier.stage_runner()
    last = len(fractions) - 1
    for n in range(len(fractions)):
        probs = runner.step(source.next_slice())
        e = entropy(probs)
        if n == last or e < T[n]:
            return InferenceTrace(int(segment_id), int(np.argmax(probs)), n + 1, e, fractions[n],
                                  None if true_label is None else int(true_label))
    raise AssertionError("unreachable")


def infer_dataset(classifier, dataset, thresholds=None) -> list[InferenceTrace]:
    traces = []
    for seg in dataset.segments:
        source = ArraySegmentSource(seg.data, classifier.fractions)
        try:
            traces.append(infer_segment(classifier, source, thresholds, seg.segment_id, seg.label))
        except SeeError as exc:
            raise type(exc)(f"segment {seg.segment_id}: {exc}") from exc
    return traces


def gate_exit_probabilities(exit_probs: Sequence[np.ndarray], fractions, thresholds,
                            segment_ids, labels=None) -> list[InferenceTrace]:
    """Apply the gating rule to precomputed per-exit probabilities.

    Equivalent to :func:`infer_dataset` when the probabilities come from the same
    classifier (its arithmetic is batch independent); used to sweep thresholds
    without re-running the model.
    """
    n_exits = len(fractions)
    if len(exit_probs) != n_exits:
        raise ConfigurationError(f"{len(exit_probs)} probability blocks for {n_exits} exits")
    T = [float(t) for t in thresholds] if not np.isscalar(thresholds) else [float(thresholds)] * (n_exits - 1)
    if len(T) != n_exits - 1 or any(not math.isfinite(t) or t < 0 for t in T):
        raise ConfigurationError(f"invalid thresholds {thresholds} for {n_exits - 1} early exits")
    ents = [entropy(p) for p in exit_probs]
    n_seg = len(segment_ids)
    taken = np.full(n_seg, n_exits - 1)
    for n in range(n_exits - 2, -1, -1):
        taken = np.where(ents[n] < T[n], n, taken)
    traces = []
    for i in range(n_seg):
        n = int(taken[i])
        traces.append(InferenceTrace(int(segment_ids[i]), int(np.argmax(exit_probs[n][i])), n + 1,
                                     float(ents[n][i]), fractions[n],
                                     None if labels is None else int(labels[i])))
    return traces


def traces_to_jsonl(traces: Sequence[InferenceTrace]) -> str:
    return "".join(json.dumps(asdict(t), sort_keys=True) + "\n" for t in traces)


def traces_from_jsonl(text: str) -> list[InferenceTrace]:
    return [InferenceTrace(**json.loads(line)) for line in text.splitlines() if line.strip()]
