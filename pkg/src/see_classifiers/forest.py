"""Random forests over window prefixes and their entropy-gated cascade.

Each cascade stage is an independent forest trained on features of a growing
prefix of the window. Stages are evaluated in order while more of the window
arrives; the first stage whose averaged vote has entropy below its threshold
answers. The whole cascade must use fewer tree nodes than the baseline forest
trained on full windows.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, UsageError
from .model import prefix_length

FORMAT_NAME = "see-forest-cascade"
FORMAT_VERSION = 1
BYTES_PER_NODE = 32
MAX_EARLY_STAGES = 4
STATS_PER_CHANNEL = 6
TIE_TOL = 1e-12


def featurize_prefix(segment: np.ndarray, fraction: float, featurizer: str = "stats") -> np.ndarray:
    """Features of the first ``floor(fraction * L)`` samples.

    ``"stats"`` gives per-channel ``mean, std, min, max, first, last`` (population
    std), laid out channel by channel, so the length is ``6 * C`` for any prefix.
    ``"raw"`` flattens the prefix itself. Accepts ``(C, L)`` or ``(B, C, L)``.
    """
    x = np.asarray(segment, dtype=np.float64)
    if not 0.0 < fraction <= 1.0:
        raise UsageError(f"fraction must be in (0, 1], got {fraction}")
    k = prefix_length(fraction, x.shape[-1])
    if k < 1:
        raise UsageError(f"fraction {fraction} of {x.shape[-1]} samples is an empty prefix")
    p = x[..., :k]
    if featurizer == "raw":
        return p.reshape(p.shape[:-2] + (-1,))
    if featurizer != "stats":
        raise ConfigurationError(f"unknown featurizer {featurizer!r}")
    feats = np.stack([p.mean(-1), p.std(-1), p.min(-1), p.max(-1), p[..., 0], p[..., -1]], axis=-1)
    return feats.reshape(feats.shape[:-2] + (-1,))


@dataclass
class DecisionTree:
    """Array-encoded binary tree; ``feature == -1`` marks a leaf.

    Internal nodes send ``x[feature] <= threshold`` to ``left``. ``value`` holds the
    class histogram of training samples (bootstrap duplicates included) reaching
    each node.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray  # (nodes, classes)
    max_depth: int

    @property
    def node_count(self) -> int:
        return len(self.feature)

    def leaf_index(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        while True:
            f = self.feature[node]
            active = f >= 0
            if not active.any():
                return node
            go_left = X[rows[active], f[active]] <= self.threshold[node[active]]
            node[active] = np.where(go_left, self.left[node[active]], self.right[node[active]])

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        v = self.value[self.leaf_index(X)]
        return v / v.sum(axis=1, keepdims=True)

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "max_depth": self.max_depth,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DecisionTree":
        return cls(
            np.asarray(d["feature"], dtype=np.int64),
            np.asarray(d["threshold"], dtype=np.float64),
            np.asarray(d["left"], dtype=np.int64),
            np.asarray(d["right"], dtype=np.int64),
            np.asarray(d["value"], dtype=np.float64).reshape(len(d["feature"]), -1),
            int(d["max_depth"]),
        )


def split_score(left_counts: np.ndarray, right_counts: np.ndarray) -> float:
    """``sum(left^2)/n_left + sum(right^2)/n_right``; higher means lower weighted Gini.

    Weighted child Gini equals ``1 - score / n``, so maximising the score minimises
    impurity. Integer sums keep the value exactly reproducible.
    """
    nl, nr = int(left_counts.sum()), int(right_counts.sum())
    return int((left_counts.astype(np.int64) ** 2).sum()) / nl + int((right_counts.astype(np.int64) ** 2).sum()) / nr


def _best_split(X, y_onehot, features):
    """Best ``(score, feature, threshold)`` over the given features, or ``None``.

    Ties go to the lowest feature index, then the lowest threshold. Scores
    within ``TIE_TOL * n`` count as tied, so exact ties are not split by
    rounding in the float sums.
    """
    n = len(X)
    tol = TIE_TOL * n
    best = None
    for f in features:
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        valid = np.flatnonzero(xs[:-1] < xs[1:])
        if len(valid) == 0:
            continue
        cum = np.cumsum(y_onehot[order], axis=0)[valid]
        total = y_onehot.sum(axis=0)
        nl = valid + 1
        nr = n - nl
        lsq = (cum**2).sum(axis=1)
        rsq = ((total - cum) ** 2).sum(axis=1)
        scores = lsq / nl + rsq / nr
        i = int(np.argmax(scores >= scores.max() - tol))
        if best is None or scores[i] > best[0] + tol:
            lo, hi = xs[valid[i]], xs[valid[i] + 1]
            thr = (lo + hi) / 2.0
            if not lo <= thr < hi:
                thr = lo
            best = (float(scores[i]), int(f), float(thr))
    return best


def _parent_score(counts: np.ndarray) -> float:
    return int((counts.astype(np.int64) ** 2).sum()) / int(counts.sum())


def grow_tree(X: np.ndarray, y: np.ndarray, num_classes: int, max_depth: int,
              rng: np.random.Generator | None = None, max_features: int | None = None) -> DecisionTree:
    """Greedy Gini CART tree. ``rng=None`` or ``max_features=None`` tries every feature."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    d = X.shape[1]
    onehot = np.zeros((len(y), num_classes), dtype=np.int64)
    onehot[np.arange(len(y)), y] = 1
    feature, threshold, left, right, value = [], [], [], [], []

    def build(idx, depth):
        node = len(feature)
        counts = onehot[idx].sum(axis=0)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(counts)
        if depth >= max_depth or len(idx) < 2 or np.count_nonzero(counts) <= 1:
            return node
        if max_features is None or max_features >= d or rng is None:
            feats = range(d)
        else:
            feats = np.sort(rng.choice(d, size=max_features, replace=False))
        best = _best_split(X[idx], onehot[idx], feats)
        # require a strict impurity decrease
        if best is None or not best[0] > _parent_score(counts) + TIE_TOL * len(idx):
            return node
        _, f, thr = best
        mask = X[idx, f] <= thr
        feature[node], threshold[node] = f, thr
        left[node] = build(idx[mask], depth + 1)
        right[node] = build(idx[~mask], depth + 1)
        return node

    build(np.arange(len(y)), 0)
    return DecisionTree(
        np.asarray(feature, dtype=np.int64),
        np.asarray(threshold, dtype=np.float64),
        np.asarray(left, dtype=np.int64),
        np.asarray(right, dtype=np.int64),
        np.asarray(value, dtype=np.float64),
        max_depth,
    )


@dataclass
class Forest:
    trees: list[DecisionTree]
    num_classes: int
    feature_schema: dict = field(default_factory=dict)

    @property
    def node_count(self) -> int:
        return sum(t.node_count for t in self.trees)

    @property
    def n_features(self) -> int | None:
        return self.feature_schema.get("n_features")

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "feature_schema": self.feature_schema,
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Forest":
        return cls([DecisionTree.from_dict(t) for t in d["trees"]], int(d["num_classes"]), dict(d["feature_schema"]))


def train_forest(features: np.ndarray, labels: np.ndarray, num_trees: int, max_depth: int, seed: int = 0,
                 num_classes: int | None = None, bootstrap: bool = True, max_features: int | str | None = "sqrt",
                 feature_schema: dict | None = None) -> Forest:
    """Bootstrap-aggregated Gini trees with ``sqrt(d)`` candidate features per split.

    Tree ``t`` draws from ``default_rng([seed, t])``, so trees are independent of
    each other and of training order.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if X.ndim != 2 or len(X) != len(y) or len(y) == 0:
        raise ConfigurationError(f"features {X.shape} and labels {y.shape} do not match")
    if num_trees < 1 or max_depth < 0:
        raise ConfigurationError("num_trees must be >= 1 and max_depth >= 0")
    k = int(num_classes if num_classes is not None else y.max() + 1)
    d = X.shape[1]
    if max_features == "sqrt":
        m = max(1, int(math.isqrt(d)))
    elif max_features is None:
        m = None
    else:
        m = int(max_features)
    trees = []
    for t in range(num_trees):
        rng = np.random.default_rng([seed, t])
        idx = rng.integers(0, len(y), size=len(y)) if bootstrap else np.arange(len(y))
        trees.append(grow_tree(X[idx], y[idx], k, max_depth, rng if m is not None else None, m))
    schema = dict(feature_schema or {})
    schema["n_features"] = d
    return Forest(trees, k, schema)


def predict_proba(forest: Forest, features: np.ndarray) -> np.ndarray:
    """Mean of the per-tree leaf class distributions."""
    X = np.asarray(features, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X[None]
    if forest.n_features is not None and X.shape[1] != forest.n_features:
        raise UsageError(f"feature dim {X.shape[1]} does not match forest schema ({forest.n_features})")
    acc = np.zeros((len(X), forest.num_classes))
    for tree in forest.trees:
        acc += tree.predict_proba(X)
    acc /= len(forest.trees)
    return acc[0] if single else acc


@dataclass
class CascadeStage:
    forest: Forest
    fraction: float
    threshold: float | None  # None on the final stage


@dataclass
class ForestCascade:
    stages: list[CascadeStage]
    featurizer: str = "stats"
    baseline_nodes: int | None = None

    @property
    def fractions(self) -> tuple[float, ...]:
        return tuple(s.fraction for s in self.stages)

    @property
    def thresholds(self) -> tuple[float, ...]:
        return tuple(s.threshold for s in self.stages[:-1])

    @property
    def num_exits(self) -> int:
        return len(self.stages)

    @property
    def node_counts(self) -> list[int]:
        return [s.forest.node_count for s in self.stages]

    @property
    def node_count(self) -> int:
        return sum(self.node_counts)

    def stage_runner(self) -> "CascadeRunner":
        return CascadeRunner(self)

    def stage_probabilities(self, X: np.ndarray) -> list[np.ndarray]:
        """Per-stage probabilities for a batch of full windows."""
        return [predict_proba(s.forest, featurize_prefix(X, s.fraction, self.featurizer)) for s in self.stages]


class CascadeRunner:
    """Feeds accumulated slices to successive stages."""

    def __init__(self, cascade: ForestCascade):
        self.cascade = cascade
        self.parts: list[np.ndarray] = []

    def step(self, raw_slice: np.ndarray) -> np.ndarray:
        n = len(self.parts)
        if n >= len(self.cascade.stages):
            raise UsageError("all cascade stages already evaluated")
        self.parts.append(np.asarray(raw_slice, dtype=np.float64))
        prefix = np.concatenate(self.parts, axis=-1)
        stage = self.cascade.stages[n]
        return predict_proba(stage.forest, featurize_prefix(prefix, 1.0, self.cascade.featurizer))


def build_cascade(dataset, fractions, stage_sizes, baseline_nodes: int | None = None, seed: int = 0,
                  thresholds=None, featurizer: str = "stats") -> ForestCascade:
    """Train one forest per prefix fraction and check the node budget.

    ``stage_sizes`` is a list of ``(num_trees, max_depth)``, one per stage. When
    ``baseline_nodes`` is given, the total node count must be strictly smaller.
    """
    fractions = [float(c) for c in fractions]
    if not fractions or fractions[-1] != 1.0:
        raise ConfigurationError(f"stage fractions must end at 1.0: {fractions}")
    if any(not 0.0 < c for c in fractions) or any(b <= a for a, b in zip(fractions, fractions[1:])):
        raise ConfigurationError(f"stage fractions must be strictly increasing: {fractions}")
    if len(fractions) - 1 > MAX_EARLY_STAGES:
        raise ConfigurationError(f"at most {MAX_EARLY_STAGES} early stages, got {len(fractions) - 1}")
    if len(stage_sizes) != len(fractions):
        raise ConfigurationError(f"{len(stage_sizes)} stage sizes for {len(fractions)} stages")
    trees = [int(s[0]) for s in stage_sizes]
    if any(b < a for a, b in zip(trees, trees[1:])):
        raise ConfigurationError(f"stage tree counts must not decrease: {trees}")
    if thresholds is None:
        thresholds = [0.5] * (len(fractions) - 1)
    elif np.isscalar(thresholds):
        thresholds = [float(thresholds)] * (len(fractions) - 1)
    if len(thresholds) != len(fractions) - 1:
        raise ConfigurationError(f"{len(thresholds)} thresholds for {len(fractions) - 1} early stages")

    stages = []
    for k, (c, (n_trees, depth)) in enumerate(zip(fractions, stage_sizes)):
        feats = featurize_prefix(dataset.X, c, featurizer)
        forest = train_forest(feats, dataset.y, int(n_trees), int(depth), seed + k, dataset.num_classes,
                              feature_schema={"fraction": c, "featurizer": featurizer})
        stages.append(CascadeStage(forest, c, float(thresholds[k]) if k < len(thresholds) else None))
    cascade = ForestCascade(stages, featurizer, baseline_nodes)
    if baseline_nodes is not None and cascade.node_count >= baseline_nodes:
        raise ConfigurationError(
            f"cascade uses {cascade.node_count} nodes (per stage {cascade.node_counts}), "
            f"not fewer than the baseline forest's {baseline_nodes}"
        )
    return cascade


def cascade_infer(cascade: ForestCascade, source, thresholds=None, segment_id: int = 0, true_label=None):
    from .inference import infer_segment

    return infer_segment(cascade, source, thresholds, segment_id, true_label)


def forest_memory_kb(node_count: int) -> float:
    return node_count * BYTES_PER_NODE / 1024


def cascade_to_dict(cascade: ForestCascade) -> dict:
    return {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "featurizer": cascade.featurizer,
        "baseline_nodes": cascade.baseline_nodes,
        "stages": [
            {"fraction": s.fraction, "threshold": s.threshold, "forest": s.forest.to_dict()}
            for s in cascade.stages
        ],
    }


def cascade_from_dict(d: dict) -> ForestCascade:
    if d.get("format") != FORMAT_NAME:
        raise ConfigurationError(f"not a {FORMAT_NAME} file (format={d.get('format')!r})")
    if d.get("version") != FORMAT_VERSION:
        raise ConfigurationError(f"unsupported cascade version {d.get('version')!r}")
    stages = [CascadeStage(Forest.from_dict(s["forest"]), float(s["fraction"]), s["threshold"]) for s in d["stages"]]
    return ForestCascade(stages, d["featurizer"], d["baseline_nodes"])


def save_cascade(cascade: ForestCascade, path) -> None:
    Path(path).write_text(json.dumps(cascade_to_dict(cascade), sort_keys=True) + "\n", encoding="utf-8")


def load_cascade(path) -> ForestCascade:
    return cascade_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
