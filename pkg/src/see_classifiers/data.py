"""Segment datasets: CSV ingestion, splitting, imputation, synthetic generation.

CSV layout (one row per sample)::

    segment_id,t,ch_0,...,ch_{C-1},label

Rows are sorted by ``(segment_id, t)``, ``t`` is the 0-based sample index and the
label is constant within a segment.
"""
from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ParseError, UsageError
from .model import prefix_length


@dataclass
class Segment:
    segment_id: int
    data: np.ndarray  # (C, L)
    label: int


@dataclass
class Dataset:
    X: np.ndarray  # (n, C, L)
    y: np.ndarray  # (n,) class indices
    segment_ids: np.ndarray
    class_names: list[str]
    channel_names: list[str] = field(default_factory=list)
    sample_rate: float | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.segment_ids = np.asarray(self.segment_ids, dtype=np.int64)
        if self.X.ndim != 3 or len(self.y) != len(self.X) or len(self.segment_ids) != len(self.X):
            raise ConfigurationError(f"inconsistent dataset arrays: X {self.X.shape}, y {self.y.shape}")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= len(self.class_names)):
            raise ConfigurationError("labels outside the class list")
        if not self.channel_names:
            self.channel_names = [f"ch_{c}" for c in range(self.X.shape[1])]

    def __len__(self) -> int:
        return len(self.y)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def channels(self) -> int:
        return self.X.shape[1]

    @property
    def length(self) -> int:
        return self.X.shape[2]

    @property
    def segments(self) -> list[Segment]:
        return [Segment(int(i), x, int(c)) for i, x, c in zip(self.segment_ids, self.X, self.y)]

    def subset(self, index) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.X[index], self.y[index], self.segment_ids[index], list(self.class_names),
                       list(self.channel_names), self.sample_rate)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.num_classes)

    def equals(self, other: "Dataset") -> bool:
        return (
            np.array_equal(self.X, other.X)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.segment_ids, other.segment_ids)
            and list(self.class_names) == list(other.class_names)
            and list(self.channel_names) == list(other.channel_names)
        )


def _class_order(labels: set[str]) -> list[str]:
    try:
        return sorted(labels, key=int)
    except ValueError:
        return sorted(labels)


def load_csv(path, class_names: list[str] | None = None) -> Dataset:
    """Parse a segment CSV with strict validation.

    Without ``class_names`` the class list is the sorted set of labels (numeric
    order when every label is an integer). With it, unknown labels are rejected.
    """
    text = Path(path).read_text(encoding="utf-8")
    return parse_csv(text, class_names)


def parse_csv(text: str, class_names: list[str] | None = None) -> Dataset:
    reader = csv.reader(io.StringIO(text, newline=""))
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("empty file", 1) from None
    if len(header) < 4 or header[0] != "segment_id" or header[1] != "t" or header[-1] != "label":
        raise ParseError(f"header must be segment_id,t,ch_0,...,label; got {','.join(header)}", 1)
    channel_names = header[2:-1]
    expected = [f"ch_{c}" for c in range(len(channel_names))]
    if channel_names != expected:
        raise ParseError(f"channel columns must be {','.join(expected)}", 1)
    n_ch = len(channel_names)

    segments: list[tuple[int, str, list[list[float]]]] = []
    last_key = None
    for lineno, row in enumerate(reader, start=2):
        if not row:
            raise ParseError("blank line", lineno)
        if len(row) != n_ch + 3:
            raise ParseError(f"expected {n_ch + 3} columns, got {len(row)}", lineno)
        try:
            seg_id, t = int(row[0]), int(row[1])
        except ValueError:
            raise ParseError("segment_id and t must be integers", lineno) from None
        try:
            values = [float(v) for v in row[2:-1]]
        except ValueError:
            raise ParseError("non-numeric channel value", lineno) from None
        if not all(math.isfinite(v) for v in values):
            raise ParseError("non-finite channel value", lineno)
        label = row[-1]
        if not label:
            raise ParseError("missing label", lineno)
        if class_names is not None and label not in class_names:
            raise ParseError(f"unknown label {label!r}", lineno)
        if last_key is not None and (seg_id, t) <= last_key:
            raise ParseError(f"rows not sorted by (segment_id, t) at segment {seg_id}, t={t}", lineno)
        if not segments or segments[-1][0] != seg_id:
            if segments and len(segments[-1][2]) != len(segments[0][2]):
                raise ParseError(
                    f"segment {segments[-1][0]} has {len(segments[-1][2])} samples, "
                    f"expected {len(segments[0][2])}", lineno - 1)
            if t != 0:
                raise ParseError(f"segment {seg_id} does not start at t=0", lineno)
            segments.append((seg_id, label, []))
        else:
            if t != last_key[1] + 1:
                raise ParseError(f"segment {seg_id} skips from t={last_key[1]} to t={t}", lineno)
            if label != segments[-1][1]:
                raise ParseError(f"label changes within segment {seg_id}", lineno)
        segments[-1][2].append(values)
        last_key = (seg_id, t)
        if len(segments) > 1 and len(segments[-1][2]) > len(segments[0][2]):
            raise ParseError(f"segment {seg_id} longer than the first segment", lineno)
    if not segments:
        raise ParseError("no data rows", 2)
    if len(segments[-1][2]) != len(segments[0][2]):
        raise ParseError(
            f"segment {segments[-1][0]} has {len(segments[-1][2])} samples, "
            f"expected {len(segments[0][2])}", lineno)

    classes = list(class_names) if class_names is not None else _class_order({s[1] for s in segments})
    lookup = {c: i for i, c in enumerate(classes)}
    X = np.array([np.asarray(s[2]).T for s in segments], dtype=np.float64)
    y = np.array([lookup[s[1]] for s in segments])
    ids = np.array([s[0] for s in segments])
    return Dataset(X, y, ids, classes, channel_names)


def format_csv(dataset: Dataset) -> str:
    buf = io.StringIO(newline="")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["segment_id", "t"] + [f"ch_{c}" for c in range(dataset.channels)] + ["label"])
    for seg_id, x, label in zip(dataset.segment_ids, dataset.X, dataset.y):
        name = dataset.class_names[label]
        for t in range(dataset.length):
            w.writerow([int(seg_id), t] + [repr(float(v)) for v in x[:, t]] + [name])
    return buf.getvalue()


def save_csv(dataset: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(format_csv(dataset))


def split(dataset: Dataset, train_fraction: float = 0.6, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Stratified, seeded train/test partition; each part keeps the input order."""
    if len(dataset) == 0:
        raise UsageError("cannot split an empty dataset")
    if not 0.0 < train_fraction < 1.0:
        raise ConfigurationError(f"train_fraction must be in (0, 1), got {train_fraction}")
    rng = np.random.default_rng(seed)
    train_idx = []
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.y == c)
        if len(idx) == 0:
            continue
        if len(idx) == 1:
            warnings.warn(f"class {dataset.class_names[c]!r} has a single segment; assigned to train",
                          stacklevel=2)
            train_idx.extend(idx)
            continue
        n_train = int(math.floor(len(idx) * train_fraction + 0.5))
        n_train = min(max(n_train, 1), len(idx) - 1)
        train_idx.extend(rng.permutation(idx)[:n_train])
    mask = np.zeros(len(dataset), dtype=bool)
    mask[np.asarray(train_idx, dtype=np.int64)] = True
    return dataset.subset(np.flatnonzero(mask)), dataset.subset(np.flatnonzero(~mask))


def impute_hold_last(segment: np.ndarray, observed_fraction: float) -> np.ndarray:
    """Keep the first ``floor(fraction * L)`` samples; repeat each channel's last one.

    Accepts ``(C, L)`` or a batch ``(B, C, L)``.
    """
    if not 0.0 < observed_fraction <= 1.0:
        raise UsageError(f"observed fraction must be in (0, 1], got {observed_fraction}")
    x = np.array(segment, dtype=np.float64)
    k = prefix_length(observed_fraction, x.shape[-1])
    if k < 1:
        raise UsageError(f"fraction {observed_fraction} keeps no samples of {x.shape[-1]}")
    x[..., k:] = x[..., k - 1 : k]
    return x


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the easy/hard synthetic task.

    Easy classes carry a class-specific constant offset from the first sample.
    Hard classes are zero-mean noise until ``onset`` of the window, after which a
    linear ramp grows on a class-specific channel (sign alternates when classes
    outnumber channels).
    """

    num_classes: int = 6
    easy_class_count: int = 3
    channels: int = 4
    length: int = 128
    n_per_class: int = 300
    noise_sigma: float = 0.5
    seed: int = 0
    offset_step: float = 2.0
    ramp_amplitude: float = 4.0
    onset: float = 0.5


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    if spec.length < 8:
        raise ConfigurationError(f"segment length {spec.length} < 8")
    if spec.num_classes < 2 or spec.channels < 1 or spec.n_per_class < 1:
        raise ConfigurationError(f"degenerate synthetic spec {spec}")
    if not 0 <= spec.easy_class_count <= spec.num_classes:
        raise ConfigurationError("easy_class_count must be between 0 and num_classes")
    if spec.noise_sigma < 0 or not 0.0 < spec.onset < 1.0:
        raise ConfigurationError("noise_sigma must be >= 0 and onset in (0, 1)")
    rng = np.random.default_rng(spec.seed)
    C, L = spec.channels, spec.length
    onset = prefix_length(spec.onset, L)
    ramp = np.zeros(L)
    ramp[onset:] = np.arange(L - onset) / max(L - onset - 1, 1)
    templates = np.zeros((spec.num_classes, C, L))
    for e in range(spec.easy_class_count):
        # +1, -1, +2, -2, ... steps, never zero (zero is the hard-class level)
        templates[e] = (-1) ** e * (e // 2 + 1) * spec.offset_step
    for j in range(spec.num_classes - spec.easy_class_count):
        sign = (-1) ** (j // C)
        templates[spec.easy_class_count + j, j % C] = sign * spec.ramp_amplitude * ramp * (1 + j // (2 * C))
    labels = np.repeat(np.arange(spec.num_classes), spec.n_per_class)
    X = templates[labels] + rng.normal(0.0, spec.noise_sigma, size=(len(labels), C, L))
    return Dataset(X, labels, np.arange(len(labels)), [str(c) for c in range(spec.num_classes)])


def fit_normalisation(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std over all segments and samples (std floored at 1e-8)."""
    mean = X.mean(axis=(0, 2))
    std = X.std(axis=(0, 2))
    return mean, np.where(std > 1e-8, std, 1.0)
