"""Command-line entry point: ``see {gen-data,train,eval,sweep,report}``.

Settings come from command defaults, then a ``key = <json>`` config file
(``--config``), then ``--key value`` overrides. Every run writes the fully
resolved settings to ``run-manifest.txt`` in the output directory; passing
that file back as ``--config`` repeats the run.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import dse, energy, forest, inference, model as M, trainer
from .data import SyntheticSpec, generate_synthetic, load_csv, save_csv, split
from .errors import ConfigurationError, SeeError

log = logging.getLogger("see_classifiers")

MANIFEST = "run-manifest.txt"

ARCH_KEYS = ("trunk_channels", "kernel_width", "pool_width", "pool_stride", "fc_hidden", "head_filters",
             "head_kernel_width", "head_pool_width", "late_kernel_width")

DEFAULTS: dict[str, dict] = {
    "gen-data": {
        "num_classes": 6, "easy_class_count": 3, "channels": 4, "length": 128, "n_per_class": 300,
        "noise_sigma": 0.5, "offset_step": 2.0, "ramp_amplitude": 4.0, "onset": 0.5,
    },
    "train": {
        "model_type": "cnn", "train_fraction": 0.6,
        # cnn
        "exit_layers": [2, 3], "fractions": [0.4, 0.7], "thresholds": [0.3, 0.3], "loss_weights": None,
        "epochs": 30, "batch_size": 32, "learning_rate": 3e-3, "patience": 0,
        **{k: None for k in ARCH_KEYS},
        # forest
        "stage_fractions": [0.3, 1.0], "stage_sizes": [[5, 3], [10, 8]], "baseline_size": [30, 10],
        "stage_thresholds": [0.5], "featurizer": "stats",
    },
    "eval": {"train_fraction": 0.6, "split": "test", "thresholds": None, "baseline_model": None},
    "sweep": {
        "train_fraction": 0.6, "budget": None, "accuracy_floor": None,
        **{k: v for k, v in dse.SweepGrid().to_dict().items()},
    },
    "report": {},
}
GLOBAL_KEYS = ("seed", "out", "dataset", "model")


def parse_config_text(text: str) -> dict:
    """``key = value`` lines; values are JSON, bare words are strings; ``#`` starts a comment line."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigurationError(f"config line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigurationError(f"config line {lineno}: empty key")
        if key in out:
            raise ConfigurationError(f"config line {lineno}: duplicate key {key!r}")
        out[key] = _parse_value(value)
    return out


def _parse_value(value: str):
    try:
        return json.loads(value)
    except json.JSONDecodeError:
        return value


def format_config(cfg: dict) -> str:
    return "".join(f"{k} = {json.dumps(cfg[k], sort_keys=True)}\n" for k in sorted(cfg))


def resolve_config(command: str, args: argparse.Namespace, overrides: list[str]) -> dict:
    cfg = dict(DEFAULTS[command])
    cfg.update({"seed": 0, "out": ".", "dataset": None, "model": None})
    if args.config:
        loaded = parse_config_text(Path(args.config).read_text(encoding="utf-8"))
        cmd = loaded.pop("command", command)
        if cmd != command:
            raise ConfigurationError(f"config was written for {cmd!r}, not {command!r}")
        _merge(cfg, loaded, command)
    _merge(cfg, _parse_overrides(overrides), command)
    for key in GLOBAL_KEYS:
        val = getattr(args, key)
        if val is not None:
            cfg[key] = val
    for key in ("out", "dataset", "model", "baseline_model"):
        if cfg.get(key) is not None:
            cfg[key] = str(Path(cfg[key]).resolve())
    if not isinstance(cfg["seed"], int):
        raise ConfigurationError(f"seed must be an integer, got {cfg['seed']!r}")
    return cfg


def _merge(cfg: dict, new: dict, command: str) -> None:
    unknown = set(new) - set(cfg)
    if unknown:
        raise ConfigurationError(f"unknown {command} setting(s): {', '.join(sorted(unknown))}")
    cfg.update(new)


def _parse_overrides(tokens: list[str]) -> dict:
    out = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise ConfigurationError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigurationError(f"missing value for {tok}")
            value = tokens[i + 1]
            i += 2
        out[key.replace("-", "_")] = _parse_value(value)
    return out


def _write_manifest(out: Path, command: str, cfg: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    body = {"command": command, **cfg}
    (out / MANIFEST).write_text(format_config(body), encoding="utf-8")


def _require(cfg: dict, key: str) -> str:
    if not cfg.get(key):
        raise ConfigurationError(f"--{key} is required for this command")
    return cfg[key]


def _splits(cfg: dict):
    ds = load_csv(_require(cfg, "dataset"))
    return ds, split(ds, cfg["train_fraction"], cfg["seed"])


def load_classifier(path):
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    fmt = d.get("format")
    if fmt == M.FORMAT_NAME:
        return M.from_dict(d)
    if fmt == forest.FORMAT_NAME:
        return forest.cascade_from_dict(d)
    raise ConfigurationError(f"{path}: unknown model format {fmt!r}")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: dict) -> int:
    spec = SyntheticSpec(seed=cfg["seed"], **{k: cfg[k] for k in DEFAULTS["gen-data"]})
    ds = generate_synthetic(spec)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    path = Path(cfg["dataset"]) if cfg["dataset"] else out / "dataset.csv"
    save_csv(ds, path)
    print(f"wrote {len(ds)} segments ({ds.channels}x{ds.length}, {ds.num_classes} classes) to {path}")
    return 0


def _train_cnn(cfg: dict, train_set, test_set, out: Path) -> None:
    arch = {k: (tuple(cfg[k]) if isinstance(cfg[k], list) else cfg[k]) for k in ARCH_KEYS if cfg[k] is not None}
    spec = M.ArchitectureSpec.build(train_set.channels, train_set.length, train_set.num_classes,
                                    cfg["exit_layers"], cfg["fractions"], cfg["thresholds"],
                                    cfg["loss_weights"], **arch)
    M.resolve_shapes(spec)
    model = M.assemble(spec, cfg["seed"])
    tc = trainer.TrainConfig(cfg["epochs"], cfg["batch_size"], cfg["learning_rate"], None, cfg["seed"],
                             cfg["patience"])
    model, report = trainer.train(model, train_set, tc, heldout=None)
    M.save_model(model, out / "model.json")
    (out / "train_report.jsonl").write_text(report.to_jsonl(), encoding="utf-8")
    accs = [trainer.evaluate_exit(model, test_set, n) for n in range(1, model.num_exits + 1)]
    print(f"saved {out / 'model.json'}: {M.parameter_count(model)} parameters, "
          f"held-out exit accuracy {', '.join(f'{a:.4f}' for a in accs)}")


def _train_forest(cfg: dict, train_set, test_set, out: Path) -> None:
    trees, depth = cfg["baseline_size"]
    feats = forest.featurize_prefix(train_set.X, 1.0, cfg["featurizer"])
    base = forest.train_forest(feats, train_set.y, trees, depth, cfg["seed"], train_set.num_classes,
                               feature_schema={"fraction": 1.0, "featurizer": cfg["featurizer"]})
    base_cascade = forest.ForestCascade([forest.CascadeStage(base, 1.0, None)], cfg["featurizer"])
    cascade = forest.build_cascade(train_set, cfg["stage_fractions"], cfg["stage_sizes"], base.node_count,
                                   cfg["seed"], cfg["stage_thresholds"], cfg["featurizer"])
    forest.save_cascade(cascade, out / "model.json")
    forest.save_cascade(base_cascade, out / "baseline.json")
    print(f"saved {out / 'model.json'}: {cascade.node_count} nodes (stages {cascade.node_counts}), "
          f"baseline {base.node_count} nodes")


def cmd_train(cfg: dict) -> int:
    _, (train_set, test_set) = _splits(cfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    if cfg["model_type"] == "cnn":
        _train_cnn(cfg, train_set, test_set, out)
    elif cfg["model_type"] == "forest":
        _train_forest(cfg, train_set, test_set, out)
    else:
        raise ConfigurationError(f"model_type must be 'cnn' or 'forest', got {cfg['model_type']!r}")
    return 0


def cmd_eval(cfg: dict) -> int:
    clf = load_classifier(_require(cfg, "model"))
    ds, (train_set, test_set) = _splits(cfg)
    data = {"test": test_set, "train": train_set, "all": ds}.get(cfg["split"])
    if data is None:
        raise ConfigurationError(f"split must be test, train or all, got {cfg['split']!r}")
    traces = inference.infer_dataset(clf, data, cfg["thresholds"])
    baseline, base_acc = None, None
    if cfg["baseline_model"]:
        baseline = load_classifier(cfg["baseline_model"])
        base_traces = inference.infer_dataset(baseline, data, [])
        base_acc = energy.accuracy(base_traces)
        if isinstance(baseline, forest.ForestCascade):
            baseline = baseline.stages[0].forest
    rep = energy.build_report(traces, clf, data.class_names, baseline=baseline, baseline_accuracy=base_acc)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "traces.jsonl").write_text(inference.traces_to_jsonl(traces), encoding="utf-8")
    (out / "report.json").write_text(rep.to_json() + "\n", encoding="utf-8")
    (out / "report.txt").write_text(rep.table(), encoding="utf-8")
    print(rep.table(), end="")
    return 0


def cmd_sweep(cfg: dict) -> int:
    _, (train_set, test_set) = _splits(cfg)
    grid = dse.SweepGrid.from_dict({k: cfg[k] for k in dse.SweepGrid().to_dict()})
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    result = dse.run_sweep(train_set, test_set, grid, cfg["budget"], cfg["seed"], out / "sweep.jsonl")
    (out / "pareto.txt").write_text(dse.pareto_table(result), encoding="utf-8")
    print(dse.pareto_table(result), end="")
    if not result.complete:
        print(f"budget exhausted; re-run with the same --out to continue ({len(result.records)} records so far)")
        return 0
    chosen = dse.select_deployment(result, cfg["accuracy_floor"])
    (out / "selected.json").write_text(json.dumps(chosen, sort_keys=True) + "\n", encoding="utf-8")
    print(f"selected {chosen['config_id']}: accuracy {chosen['accuracy']:.4f}, "
          f"energy ratio {chosen['energy_ratio']:.4f} (baseline accuracy {result.baseline_accuracy:.4f})")
    return 0


def cmd_report(cfg: dict) -> int:
    out = Path(cfg["out"])
    shown = False
    if (out / "report.txt").exists():
        print((out / "report.txt").read_text(encoding="utf-8"), end="")
        shown = True
    sweep_file = out / "sweep.jsonl"
    if sweep_file.exists():
        records = list(dse._read_records(sweep_file).values())
        base = [r for r in records if r["num_early_exits"] == 0 and r["status"] == "ok"]
        result = dse.SweepResult(records, base[0]["accuracy"] if base else None)
        dse.mark_pareto(result.records)
        print(dse.pareto_table(result), end="")
        failed = [r["config_id"] for r in records if r["status"] != "ok"]
        if failed:
            print(f"{len(failed)} failed configuration(s): {', '.join(failed)}")
        shown = True
    if not shown:
        raise ConfigurationError(f"nothing to report in {out} (expected report.txt or sweep.jsonl)")
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep,
            "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="see", description="Sensor-aware early-exit classifiers")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=f"{name} (extra --key value pairs override config keys)")
        p.add_argument("--config", help="key = value settings file (a run-manifest works)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--dataset", help="segment CSV")
        p.add_argument("--model", help="model file")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.command, args, extra)
        _write_manifest(Path(cfg["out"]), args.command, cfg)
        return COMMANDS[args.command](cfg)
    except dse.NoFeasibleConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except SeeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
