"""Grid design-space exploration over exit placement, data fractions, loss
weights and entropy thresholds.

Each distinct model (architecture plus loss weights, or cascade layout) is
trained once; thresholds only change gating, so they are swept over stored
per-exit probabilities. Records are appended to a JSONL file keyed by config id
so an interrupted sweep resumes where it stopped.
"""
from __future__ import annotations

import itertools
import json
import logging
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset
from .errors import ConfigurationError, SeeError
from .energy import energy_ratio, params_to_kb
from .forest import build_cascade, featurize_prefix, forest_memory_kb, predict_proba, train_forest
from .inference import gate_exit_probabilities
from .model import MAX_EARLY_EXITS, ArchitectureSpec, assemble, parameter_count, resolve_shapes
from .trainer import TrainConfig, exit_probabilities, train

log = logging.getLogger(__name__)

PERCENT_RANGE = (10, 50)
THRESHOLD_RANGE = (0.1, 1.5)
LOSS_WEIGHT_RANGE = (1.0, 4.0)
MAX_FOREST_EARLY_STAGES = 4
FLOOR_SLACK = 1e-12


class NoFeasibleConfigError(SeeError):
    """No configuration reaches the accuracy floor."""

    def __init__(self, floor: float, nearest: list[dict]):
        self.floor = floor
        self.nearest = nearest
        misses = ", ".join(f"{r['config_id']} (acc {r['accuracy']:.4f}, energy {r['energy_ratio']:.4f})"
                           for r in nearest)
        super().__init__(f"no configuration reaches accuracy {floor:.4f}; nearest: {misses or 'none'}")


@dataclass
class SweepGrid:
    """Candidate values per hyperparameter.

    ``data_percents`` are per-slice sizes: with two early exits, percents
    ``(30, 40)`` put the exits at 30% and 70% of the window. ``loss_weights``
    is the first exit's weight; later exits interpolate linearly down to 1 at
    the terminal exit. One shared threshold is applied at every early exit.
    """

    model_type: str = "cnn"
    data_percents: tuple[int, ...] = (10, 20, 30, 40, 50)
    num_early_exits: tuple[int, ...] = (1, 2)
    thresholds: tuple[float, ...] = (0.1, 0.3, 0.5, 0.8, 1.0, 1.5)
    loss_weights: tuple[float, ...] = (1.0, 2.0, 3.0, 4.0)
    # None: every increasing combination of trunk layers before the last
    placements: tuple[tuple[int, ...], ...] | None = None
    arch: dict = field(default_factory=dict)
    train: dict = field(default_factory=lambda: {"epochs": 30, "batch_size": 32, "learning_rate": 3e-3})
    # forest layouts: (trees, depth)
    forest_early_sizes: tuple[tuple[int, int], ...] = ((5, 3), (8, 4))
    forest_final_size: tuple[int, int] = (10, 8)
    forest_baseline_size: tuple[int, int] = (30, 10)
    featurizer: str = "stats"
    allow_out_of_range: bool = False

    def validate(self) -> None:
        if self.model_type not in ("cnn", "forest"):
            raise ConfigurationError(f"model_type must be 'cnn' or 'forest', got {self.model_type!r}")
        for name in ("data_percents", "num_early_exits", "thresholds", "loss_weights"):
            if not getattr(self, name):
                raise ConfigurationError(f"grid dimension {name} is empty")
        max_exits = MAX_EARLY_EXITS if self.model_type == "cnn" else MAX_FOREST_EARLY_STAGES
        if any(not 0 <= n <= max_exits for n in self.num_early_exits):
            raise ConfigurationError(f"{self.model_type} supports 0..{max_exits} early exits: {self.num_early_exits}")
        if any(not 0 < p < 100 for p in self.data_percents) or any(t < 0 for t in self.thresholds):
            raise ConfigurationError("percents must be in (0, 100) and thresholds >= 0")
        if self.allow_out_of_range:
            return
        checks = [
            ("data_percents", self.data_percents, PERCENT_RANGE),
            ("thresholds", self.thresholds, THRESHOLD_RANGE),
            ("loss_weights", self.loss_weights, LOSS_WEIGHT_RANGE),
        ]
        for name, values, (lo, hi) in checks:
            bad = [v for v in values if not lo <= v <= hi]
            if bad:
                raise ConfigurationError(f"{name} {bad} outside [{lo}, {hi}] (set allow_out_of_range to override)")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "SweepGrid":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown sweep grid keys {sorted(unknown)}")
        for key in ("data_percents", "num_early_exits", "thresholds", "loss_weights"):
            if key in d:
                d[key] = tuple(d[key])
        if d.get("placements") is not None:
            d["placements"] = tuple(tuple(p) for p in d["placements"])
        if "forest_early_sizes" in d:
            d["forest_early_sizes"] = tuple(tuple(s) for s in d["forest_early_sizes"])
        for key in ("forest_final_size", "forest_baseline_size"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def _fmt(x: float) -> str:
    return f"{x:g}"


def _weights(first: float, n_exits: int) -> list[float]:
    if n_exits == 1:
        return [1.0]
    return [float(w) for w in np.linspace(first, 1.0, n_exits)]


@dataclass(frozen=True)
class ModelConfig:
    """One trainable model of the grid; thresholds are swept on top of it."""

    model_key: str
    model_type: str
    data_percents: tuple[int, ...]
    placements: tuple[int, ...] = ()
    first_loss_weight: float = 1.0
    early_size: tuple[int, int] | None = None

    @property
    def num_early_exits(self) -> int:
        return len(self.data_percents)

    @property
    def fractions(self) -> list[float]:
        return [float(c) / 100 for c in np.cumsum(self.data_percents)] + [1.0]

    @property
    def is_baseline(self) -> bool:
        return not self.data_percents


def _cnn_spec(cfg: ModelConfig, grid: SweepGrid, shape, threshold: float = 0.5) -> ArchitectureSpec:
    C, L, K = shape
    n = cfg.num_early_exits
    arch = {k: tuple(v) if isinstance(v, list) else v for k, v in grid.arch.items()}
    return ArchitectureSpec.build(C, L, K, cfg.placements, cfg.fractions[:-1], [threshold] * n,
                                  _weights(cfg.first_loss_weight, n + 1), **arch)


def baseline_config(grid: SweepGrid) -> ModelConfig:
    return ModelConfig(f"{grid.model_type}-baseline", grid.model_type, ())


def enumerate_models(grid: SweepGrid, channels: int, segment_length: int, num_classes: int) -> list[ModelConfig]:
    """Feasible models in a fixed order (the baseline first when requested)."""
    grid.validate()
    shape = (channels, segment_length, num_classes)
    out: list[ModelConfig] = []
    for n in sorted(set(grid.num_early_exits)):
        if n == 0:
            out.append(baseline_config(grid))
            continue
        for percents in itertools.product(sorted(set(grid.data_percents)), repeat=n):
            if sum(percents) >= 100:
                continue
            pct = ".".join(str(p) for p in percents)
            if grid.model_type == "forest":
                for trees, depth in grid.forest_early_sizes:
                    if trees > grid.forest_final_size[0]:
                        continue
                    key = f"forest-e{n}-p{pct}-s{trees}x{depth}"
                    out.append(ModelConfig(key, "forest", percents, early_size=(int(trees), int(depth))))
                continue
            layers = ArchitectureSpec.__dataclass_fields__["trunk_channels"].default
            n_layers = len(grid.arch.get("trunk_channels", layers))
            placements = grid.placements or tuple(itertools.combinations(range(1, n_layers), n))
            for place in placements:
                if len(place) != n or any(b <= a for a, b in zip(place, place[1:])):
                    continue
                for w in sorted(set(grid.loss_weights)):
                    key = f"cnn-e{n}-p{pct}-l{'.'.join(map(str, place))}-w{_fmt(w)}"
                    cfg = ModelConfig(key, "cnn", percents, tuple(int(a) for a in place), float(w))
                    try:
                        resolve_shapes(_cnn_spec(cfg, grid, shape))
                    except ConfigurationError:
                        continue
                    out.append(cfg)
    if not out:
        raise ConfigurationError("no feasible configuration in the grid")
    return out


def enumerate_grid(grid: SweepGrid, channels: int, segment_length: int, num_classes: int) -> list[dict]:
    """Every (model, threshold) configuration, deterministic order."""
    configs = []
    for m in enumerate_models(grid, channels, segment_length, num_classes):
        for t in ([None] if m.is_baseline else sorted(set(grid.thresholds))):
            configs.append(_config_dict(m, t))
    return configs


def _config_dict(m: ModelConfig, threshold) -> dict:
    cid = m.model_key if threshold is None else f"{m.model_key}-t{_fmt(threshold)}"
    return {
        "config_id": cid,
        "model_key": m.model_key,
        "model_type": m.model_type,
        "num_early_exits": m.num_early_exits,
        "data_percents": list(m.data_percents),
        "fractions": m.fractions,
        "placements": list(m.placements),
        "first_loss_weight": m.first_loss_weight,
        "early_size": list(m.early_size) if m.early_size else None,
        "threshold": threshold,
    }


def model_seed(seed: int, model_key: str) -> int:
    return (seed * 1_000_003 + zlib.crc32(model_key.encode())) % (2**32)


@dataclass
class SweepResult:
    records: list[dict]
    baseline_accuracy: float | None
    training_runs: dict[str, int] = field(default_factory=dict)
    complete: bool = True

    @property
    def ok_records(self) -> list[dict]:
        return [r for r in self.records if r["status"] == "ok"]

    def pareto_ids(self) -> set[str]:
        return {r["config_id"] for r in self.records if r.get("pareto")}

    def pareto_front(self) -> list[dict]:
        """Pareto-optimal records sorted by energy ratio, then accuracy descending."""
        front = [r for r in self.records if r.get("pareto")]
        return sorted(front, key=lambda r: (r["energy_ratio"], -r["accuracy"], r["config_id"]))


def mark_pareto(records: list[dict]) -> None:
    """Flag records not dominated in (higher accuracy, lower energy)."""
    ok = [r for r in records if r["status"] == "ok"]
    for r in records:
        r["pareto"] = False
    ok.sort(key=lambda r: (r["energy_ratio"], -r["accuracy"]))
    best_acc = -np.inf
    i = 0
    while i < len(ok):
        # records with identical energy form one group
        j = i
        while j < len(ok) and ok[j]["energy_ratio"] == ok[i]["energy_ratio"]:
            j += 1
        top = ok[i]["accuracy"]
        if top > best_acc:
            for r in ok[i:j]:
                if r["accuracy"] == top:
                    r["pareto"] = True
            best_acc = top
        i = j


def _read_records(path: Path) -> dict[str, dict]:
    done = {}
    if path.exists():
        for line in path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                rec = json.loads(line)
                done[rec["config_id"]] = rec
    return done


def _metrics(exit_probs, fractions, threshold, test: Dataset) -> dict:
    traces = gate_exit_probabilities(exit_probs, fractions, threshold if threshold is not None else [],
                                     test.segment_ids, test.y)
    usage = [0] * len(fractions)
    for t in traces:
        usage[t.exit_taken - 1] += 1
    return {
        "accuracy": float(np.mean([t.correct for t in traces])),
        "energy_ratio": energy_ratio(traces),
        "exit_accuracy": [float(np.mean(p.argmax(axis=1) == test.y)) for p in exit_probs],
        "exit_usage": usage,
    }


def _train_cnn(cfg: ModelConfig, grid: SweepGrid, train_set: Dataset, test: Dataset, seed: int):
    shape = (train_set.channels, train_set.length, train_set.num_classes)
    model = assemble(_cnn_spec(cfg, grid, shape), seed)
    tc = TrainConfig(**{**grid.train, "seed": seed})
    train(model, train_set, tc)
    return exit_probabilities(model, test.X), {"memory_kb": params_to_kb(parameter_count(model)),
                                               "param_count": parameter_count(model)}


def _train_forest(cfg: ModelConfig, grid: SweepGrid, train_set: Dataset, test: Dataset, seed: int,
                  baseline_nodes: int | None):
    if cfg.is_baseline:
        trees, depth = grid.forest_baseline_size
        feats = featurize_prefix(train_set.X, 1.0, grid.featurizer)
        forest = train_forest(feats, train_set.y, trees, depth, seed, train_set.num_classes,
                              feature_schema={"fraction": 1.0, "featurizer": grid.featurizer})
        probs = [predict_proba(forest, featurize_prefix(test.X, 1.0, grid.featurizer))]
        return probs, {"memory_kb": forest_memory_kb(forest.node_count), "node_count": forest.node_count}
    sizes = [cfg.early_size] * cfg.num_early_exits + [grid.forest_final_size]
    cascade = build_cascade(train_set, cfg.fractions, sizes, baseline_nodes, seed, featurizer=grid.featurizer)
    return cascade.stage_probabilities(test.X), {"memory_kb": forest_memory_kb(cascade.node_count),
                                                 "node_count": cascade.node_count,
                                                 "stage_node_counts": cascade.node_counts}


def run_sweep(train_set: Dataset, test: Dataset, grid: SweepGrid, budget: int | None = None, seed: int = 0,
              results_path=None) -> SweepResult:
    """Train every model of the grid once and evaluate it at every threshold.

    The baseline model is always evaluated first, and recorded, so the
    accuracy floor is known. ``budget`` caps the number of models trained in this call; the
    result is then marked incomplete and a later call with the same
    ``results_path`` continues. A model that fails to train or violates a
    constraint yields ``status == "failed"`` records and the sweep moves on.
    """
    grid.validate()
    shape = (train_set.channels, train_set.length, train_set.num_classes)
    models = enumerate_models(grid, *shape)
    base = baseline_config(grid)
    if not models[0].is_baseline:
        models.insert(0, base)
    path = Path(results_path) if results_path is not None else None
    done = _read_records(path) if path is not None else {}
    result = SweepResult([], None)
    trained = 0
    baseline_nodes = None
    for cfg in models:
        thresholds = [None] if cfg.is_baseline else sorted(set(grid.thresholds))
        configs = [_config_dict(cfg, t) for t in thresholds]
        if all(c["config_id"] in done for c in configs):
            recs = [done[c["config_id"]] for c in configs]
        else:
            if budget is not None and trained >= budget:
                result.complete = False
                break
            trained += 1
            result.training_runs[cfg.model_key] = result.training_runs.get(cfg.model_key, 0) + 1
            s = model_seed(seed, cfg.model_key)
            recs = []
            try:
                if cfg.model_type == "cnn":
                    probs, extra = _train_cnn(cfg, grid, train_set, test, s)
                else:
                    probs, extra = _train_forest(cfg, grid, train_set, test, s, baseline_nodes)
                for c in configs:
                    recs.append({**c, "status": "ok", "error": None, **extra,
                                 **_metrics(probs, cfg.fractions, c["threshold"], test)})
            except (SeeError, FloatingPointError) as exc:
                log.warning("config %s failed: %s", cfg.model_key, exc)
                recs = [{**c, "status": "failed", "error": f"{type(exc).__name__}: {exc}"} for c in configs]
            if path is not None:
                with path.open("a", encoding="utf-8") as fh:
                    for r in recs:
                        if r["config_id"] not in done:
                            fh.write(json.dumps(r, sort_keys=True) + "\n")
        if cfg.is_baseline:
            if recs[0]["status"] != "ok":
                raise SeeError(f"baseline model failed: {recs[0]['error']}")
            result.baseline_accuracy = recs[0]["accuracy"]
            baseline_nodes = recs[0].get("node_count")
        result.records.extend(recs)
    mark_pareto(result.records)
    return result


def select_deployment(result: SweepResult, accuracy_floor: float | None = None) -> dict:
    """Least-energy configuration meeting the accuracy floor.

    Ties go to higher accuracy, then lower memory, then the smaller config id.
    The floor defaults to one point below the baseline accuracy.
    """
    if not result.records:
        raise ConfigurationError("empty sweep result")
    if accuracy_floor is None:
        if result.baseline_accuracy is None:
            raise ConfigurationError("no baseline accuracy to derive the floor from")
        accuracy_floor = result.baseline_accuracy - 0.01
    ok = result.ok_records
    # a hair of slack so "exactly one point below" survives float subtraction
    feasible = [r for r in ok if r["accuracy"] >= accuracy_floor - FLOOR_SLACK]
    if not feasible:
        nearest = sorted(ok, key=lambda r: (-r["accuracy"], r["energy_ratio"], r["config_id"]))[:3]
        raise NoFeasibleConfigError(accuracy_floor, nearest)
    return min(feasible, key=lambda r: (r["energy_ratio"], -r["accuracy"], r.get("memory_kb", 0.0), r["config_id"]))


def average_results(results: list[SweepResult]) -> SweepResult:
    """Average metrics per config id over sweeps run with different seeds.

    A config is kept only if it succeeded in every sweep.
    """
    if not results:
        raise ConfigurationError("nothing to average")
    by_id: dict[str, list[dict]] = {}
    for res in results:
        for r in res.ok_records:
            by_id.setdefault(r["config_id"], []).append(r)
    order = [r["config_id"] for r in results[0].records]
    records = []
    for cid in order:
        group = by_id.get(cid, [])
        if len(group) != len(results):
            continue
        rec = dict(group[0])
        for key in ("accuracy", "energy_ratio", "memory_kb"):
            rec[key] = float(np.mean([g[key] for g in group]))
        rec["exit_accuracy"] = [float(x) for x in np.mean([g["exit_accuracy"] for g in group], axis=0)]
        rec["exit_usage"] = [int(x) for x in np.sum([g["exit_usage"] for g in group], axis=0)]
        records.append(rec)
    bases = [r.baseline_accuracy for r in results]
    out = SweepResult(records, None if None in bases else float(np.mean(bases)),
                      complete=all(r.complete for r in results))
    mark_pareto(out.records)
    return out


def pareto_table(result: SweepResult) -> str:
    lines = [f"{'config':<40}{'accuracy %':>12}{'energy':>9}{'memory KB':>11}"]
    for r in result.pareto_front():
        lines.append(f"{r['config_id']:<40}{100 * r['accuracy']:>12.2f}{r['energy_ratio']:>9.4f}"
                     f"{r.get('memory_kb', 0.0):>11.2f}")
    return "\n".join(lines) + "\n"
