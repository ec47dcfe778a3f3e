"""Command-line front end.

Subcommands: extract, synth, dataset-split, train, finetune, sample,
predict, replay, tune, eval. Every command reads a line-oriented
`key = value` config file (unknown keys rejected), seeds everything, and
writes its artifacts plus a checksum manifest into the --out directory, so
a rerun with identical inputs produces identical bytes.

Exit codes: 0 success, 2 input error, 64 usage error, 70 internal error.
Set TPCOST_LOG to error/info/debug to control stderr logging.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import costmodel as cm
from . import dataset as dsmod
from . import replayer, sampling
from .errors import DomainError, TpcostError
from .features import (build_compact_ast, load_device_catalog,
                       save_device_catalog)
from .ir import parse_program
from .dataset import (DEFAULT_SYNTH_DEVICE, SynthOracleConfig,
                      compact_json_fields, load_dataset, save_dataset,
                      skewness, split_dataset)

log = logging.getLogger("tpcost")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_USAGE = 64
EXIT_INTERNAL = 70


class UsageError(Exception):
    pass


def _json_float(x: float):
    """JSON has no Infinity; map non-finite metric values to None."""
    return x if x == x and abs(x) != float("inf") else None


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        raise UsageError(message)


# ---------------------------------------------------------------------------
# Run configuration: `key = value` lines, '#' comments, schema-validated
# ---------------------------------------------------------------------------

def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in text.split(",") if part.strip())


def _strs(text: str) -> tuple[str, ...]:
    return tuple(part.strip() for part in text.split(",") if part.strip())


_SCHEMA: dict[str, tuple] = {
    # paths
    "dataset": (str, None),
    "target_dataset": (str, None),
    "devices": (str, None),
    "splits": (str, None),
    "checkpoint": (str, None),
    "graph": (str, None),
    "programs": (str, None),
    "rules": (str, None),
    # names
    "device": (str, None),
    # synthetic oracle
    "n": (int, 1000),
    "flops_efficiency": (float, 0.6),
    "mem_efficiency": (float, 0.7),
    "per_leaf_overhead_s": (float, 2e-6),
    "noise_sigma": (float, 0.0),
    "oracle_seed": (int, 0),
    # model architecture / optimization
    "d_model": (int, 64),
    "n_layers": (int, 2),
    "n_heads": (int, 2),
    "d_ff": (int, 128),
    "d_embed": (int, 32),
    "d_device": (int, 16),
    "decoder_dims": (_ints, (64, 64)),
    "n_leaf_max": (int, 16),
    "lambda_hybrid": (float, 1e-3),
    "alpha_cmd": (float, 0.0),
    "cmd_order": (int, 5),
    "lr": (float, 1e-3),
    "weight_decay": (float, 0.0),
    "optimizer": (str, "adam"),
    "lr_schedule": (str, "constant"),
    "batch_size": (int, 64),
    "epochs": (int, 300),
    "loss_mode": (str, "hybrid"),
    "mape_space": (str, "transformed"),
    # splitting
    "split_seed": (int, 0),
    "holdout_models": (_strs, ()),
    "ratio_train": (int, 8),
    "ratio_valid": (int, 1),
    "ratio_test": (int, 1),
    # sampling / tuning
    "kappa": (int, 4),
    "budget": (int, 8),
    "tune_epochs": (int, 10),
    # global
    "seed": (int, 0),
}

_MODEL_KEYS = ("d_model", "n_layers", "n_heads", "d_ff", "d_embed",
               "d_device", "decoder_dims", "n_leaf_max", "lambda_hybrid",
               "alpha_cmd", "cmd_order", "lr", "weight_decay", "optimizer",
               "lr_schedule", "batch_size", "epochs", "loss_mode",
               "mape_space", "seed")


class RunConfig:
    def __init__(self, values: dict, source_text: str = ""):
        self.values = values
        self.source_text = source_text

    def __getattr__(self, key):
        try:
            return self.values[key]
        except KeyError:
            raise AttributeError(key) from None

    def require(self, key: str):
        value = self.values.get(key)
        if value is None:
            raise TpcostError(f"config key '{key}' is required for this command")
        return value

    def model_config(self, seed_override: int | None = None) -> cm.CostModelConfig:
        kwargs = {k: self.values[k] for k in _MODEL_KEYS}
        if seed_override is not None:
            kwargs["seed"] = seed_override
        return cm.CostModelConfig(**kwargs)


def load_run_config(path: str | None, seed_override: int | None = None) -> RunConfig:
    values = {key: default for key, (_, default) in _SCHEMA.items()}
    text = ""
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise TpcostError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if key not in _SCHEMA:
                raise TpcostError(f"{path}:{lineno}: unknown config key '{key}'")
            parser_fn = _SCHEMA[key][0]
            try:
                values[key] = parser_fn(value)
            except ValueError as e:
                raise TpcostError(
                    f"{path}:{lineno}: bad value for '{key}': {e}") from e
    if seed_override is not None:
        values["seed"] = seed_override
    return RunConfig(values, source_text=text)


# ---------------------------------------------------------------------------
# Run directory helpers
# ---------------------------------------------------------------------------

class RunDir:
    def __init__(self, path: str, config: RunConfig):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        self.artifacts: list[str] = []
        if config.source_text:
            self.write_text("config.txt", config.source_text)

    def file(self, name: str) -> Path:
        return self.path / name

    def register(self, name: str) -> None:
        if name not in self.artifacts:
            self.artifacts.append(name)

    def write_text(self, name: str, text: str) -> Path:
        target = self.file(name)
        target.write_text(text, encoding="utf-8")
        self.register(name)
        return target

    def write_json(self, name: str, obj) -> Path:
        return self.write_text(name, json.dumps(obj, indent=2, sort_keys=True)
                               + "\n")

    def finalize(self) -> None:
        manifest = {}
        for name in sorted(self.artifacts):
            digest = hashlib.sha256(self.file(name).read_bytes()).hexdigest()
            manifest[name] = digest
        self.write_text("manifest.json",
                        json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _write_log_csv(run: RunDir, name: str, rows: list[cm.EpochLog]) -> None:
    target = run.file(name)
    with open(target, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "train_loss", "val_mape", "val_rmse", "lr",
                         "cmd"])
        for row in rows:
            writer.writerow([row.epoch, repr(row.train_loss),
                             repr(row.val_mape), repr(row.val_rmse),
                             repr(row.lr), repr(row.cmd)])
    run.register(name)


def _load_devices(config: RunConfig) -> dict:
    path = config.values.get("devices")
    if path is None:
        return {DEFAULT_SYNTH_DEVICE.name: DEFAULT_SYNTH_DEVICE}
    return load_device_catalog(path)


def _load_split_dataset(config: RunConfig) -> dsmod.Dataset:
    ds = load_dataset(config.require("dataset"))
    splits_path = config.values.get("splits")
    if splits_path is not None:
        with open(splits_path, "r", encoding="utf-8") as f:
            ds.splits = {str(k): str(v) for k, v in json.load(f).items()}
    else:
        ratios = (config.ratio_train, config.ratio_valid, config.ratio_test)
        ds = split_dataset(ds, ratios=ratios, seed=config.split_seed,
                           holdout_models=set(config.holdout_models))
    return ds


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_extract(args, config: RunConfig) -> int:
    failures = 0
    lines = []
    for path in args.ir_files:
        try:
            text = Path(path).read_text(encoding="utf-8")
            ast = parse_program(text, max_leaves=config.n_leaf_max)
            compact = build_compact_ast(ast)
            lines.append("{"
                         f"\"id\":{json.dumps(ast.name)},"
                         f"\"source\":{json.dumps(str(path))},"
                         f"{compact_json_fields(compact)}"
                         "}")
        except (TpcostError, OSError, OverflowError) as e:
            failures += 1
            print(f"error: {path}: {e}", file=sys.stderr)
    out_path = Path(args.out_jsonl)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text("".join(line + "\n" for line in lines),
                        encoding="utf-8")
    log.info("extracted %d programs to %s", len(lines), out_path)
    return EXIT_INPUT if failures else EXIT_OK


def cmd_synth(args, config: RunConfig, run: RunDir) -> int:
    devices = _load_devices(config)
    oracle = SynthOracleConfig(
        flops_efficiency=config.flops_efficiency,
        mem_efficiency=config.mem_efficiency,
        per_leaf_overhead_s=config.per_leaf_overhead_s,
        noise_sigma=config.noise_sigma, seed=config.oracle_seed)
    ds = dsmod.generate_synthetic(config.n, list(devices.values()), oracle,
                                  seed=config.seed)
    save_dataset(ds, run.file("dataset.jsonl"))
    run.register("dataset.jsonl")
    save_device_catalog(devices, run.file("devices.json"))
    run.register("devices.json")
    labels = ds.labels()
    norm = dsmod.fit_boxcox(labels)
    report = {
        "n": len(ds.samples),
        "skewness_raw": skewness(labels),
        "skewness_boxcox": skewness(norm.transform(labels)),
        "boxcox_lambda": norm.lambda_bc,
    }
    run.write_json("skew_report.json", report)
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_dataset_split(args, config: RunConfig, run: RunDir) -> int:
    ds = load_dataset(config.require("dataset"))
    ratios = (config.ratio_train, config.ratio_valid, config.ratio_test)
    ds = split_dataset(ds, ratios=ratios, seed=config.split_seed,
                       holdout_models=set(config.holdout_models))
    run.write_json("splits.json", ds.splits)
    counts = {}
    for name in ds.splits.values():
        counts[name] = counts.get(name, 0) + 1
    run.write_json("split_summary.json", counts)
    print(json.dumps(counts, sort_keys=True))
    return EXIT_OK


def cmd_train(args, config: RunConfig, run: RunDir) -> int:
    devices = _load_devices(config)
    ds = _load_split_dataset(config)
    model_config = config.model_config()
    result = cm.train(model_config, ds, devices)
    cm.save_checkpoint(run.file("checkpoint.npz"), result.params,
                       result.normalizer)
    run.register("checkpoint.npz")
    _write_log_csv(run, "train_log.csv", result.log)
    test_samples = ds.subset("test")
    summary = {"best_epoch": result.best_epoch,
               "best_val_mape": _json_float(result.best_val_mape),
               "n_params": result.params.n_params()}
    if test_samples:
        inputs = cm.encode_dataset(test_samples, devices)
        try:
            pred = cm.predict_batch(result.params, inputs, result.normalizer)
            summary["test"] = cm.metrics(pred,
                                         [s.latency_s for s in test_samples])
        except DomainError:
            # model predicts outside the invertible label range
            summary["test"] = None
    run.write_json("summary.json", summary)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_finetune(args, config: RunConfig, run: RunDir) -> int:
    devices = _load_devices(config)
    params, normalizer = cm.load_checkpoint(config.require("checkpoint"))
    if normalizer is None:
        raise TpcostError("checkpoint has no fitted normalizer")
    source = _load_split_dataset(config)
    target = load_dataset(config.require("target_dataset"))
    target_inputs = cm.encode_dataset(target.samples, devices)
    model_config = replace(config.model_config(), alpha_cmd=config.alpha_cmd)
    source_train_inputs = cm.encode_dataset(source.subset("train"), devices)
    cmd_before = cm.cmd_between(params, source_train_inputs, target_inputs,
                                model_config.cmd_order)
    result = cm.finetune(params, source, target_inputs, model_config,
                         devices, normalizer)
    cmd_after = cm.cmd_between(result.params, source_train_inputs,
                               target_inputs, model_config.cmd_order)
    cm.save_checkpoint(run.file("checkpoint.npz"), result.params, normalizer)
    run.register("checkpoint.npz")
    _write_log_csv(run, "finetune_log.csv", result.log)
    summary = {"cmd_before": cmd_before, "cmd_after": cmd_after,
               "val_mape": _json_float(result.best_val_mape)}
    if target.samples:
        try:
            pred = cm.predict_batch(result.params, target_inputs, normalizer)
            summary["target"] = cm.metrics(
                pred, [s.latency_s for s in target.samples])
        except DomainError:
            summary["target"] = None
    run.write_json("summary.json", summary)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_sample(args, config: RunConfig, run: RunDir) -> int:
    ds = load_dataset(config.require("dataset"))
    by_task: dict[str, list[np.ndarray]] = {}
    for s in ds.samples:
        by_task.setdefault(s.task_id, []).append(
            s.compact.leaf_vectors.mean(axis=0))
    task_ids = sorted(by_task)
    tasks = [sampling.TaskFeatureSet(task_id=t,
                                     features=np.stack(by_task[t]))
             for t in task_ids]
    x = np.concatenate([t.features for t in tasks], axis=0)
    kappa = args.kappa if args.kappa is not None else config.kappa
    selected = sampling.select_tasks(x, kappa, tasks, seed=config.seed)
    run.write_json("selected_tasks.json", selected)
    print(json.dumps(selected))
    return EXIT_OK


def _predict_over_dataset(params, normalizer, devices,
                          samples) -> tuple[np.ndarray, np.ndarray]:
    inputs = cm.encode_dataset(samples, devices)
    pred = cm.predict_batch(params, inputs, normalizer)
    actual = np.array([s.latency_s for s in samples])
    return pred, actual


def cmd_predict(args, config: RunConfig, run: RunDir) -> int:
    devices = _load_devices(config)
    params, normalizer = cm.load_checkpoint(config.require("checkpoint"))
    if normalizer is None:
        raise TpcostError("checkpoint has no fitted normalizer")
    ds = load_dataset(config.require("dataset"))
    pred, actual = _predict_over_dataset(params, normalizer, devices,
                                         ds.samples)
    with open(run.file("predictions.csv"), "w", newline="",
              encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["id", "predicted_s", "actual_s"])
        for s, p in zip(ds.samples, pred):
            writer.writerow([s.id, repr(float(p)), repr(s.latency_s)])
    run.register("predictions.csv")
    result = cm.metrics(pred, actual)
    run.write_json("metrics.json", result)
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def cmd_eval(args, config: RunConfig, run: RunDir) -> int:
    devices = _load_devices(config)
    params, normalizer = cm.load_checkpoint(config.require("checkpoint"))
    if normalizer is None:
        raise TpcostError("checkpoint has no fitted normalizer")
    ds = load_dataset(config.require("dataset"))
    samples = ds.samples
    if config.values.get("splits") is not None:
        with open(config.values["splits"], "r", encoding="utf-8") as f:
            ds.splits = {str(k): str(v) for k, v in json.load(f).items()}
        samples = ds.subset(args.split)
        if not samples:
            raise TpcostError(f"split '{args.split}' is empty")
    pred, actual = _predict_over_dataset(params, normalizer, devices, samples)
    result = cm.metrics(pred, actual)
    run.write_json("metrics.json", result)
    if args.emit_plot_data:
        with open(run.file("plot_data.csv"), "w", newline="",
                  encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["id", "actual_s", "predicted_s"])
            for s, p in zip(samples, pred):
                writer.writerow([s.id, repr(s.latency_s), repr(float(p))])
        run.register("plot_data.csv")
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def cmd_replay(args, config: RunConfig, run: RunDir) -> int:
    devices = _load_devices(config)
    params, normalizer = cm.load_checkpoint(config.require("checkpoint"))
    if normalizer is None:
        raise TpcostError("checkpoint has no fitted normalizer")
    device_name = config.require("device")
    if device_name not in devices:
        raise TpcostError(f"unknown device '{device_name}'")
    rules = {}
    if config.values.get("rules") is not None:
        with open(config.values["rules"], "r", encoding="utf-8") as f:
            rules = {str(k): int(v) for k, v in json.load(f).items()}
    result = replayer.replay_model(config.require("graph"),
                                   config.require("programs"), params,
                                   devices[device_name], normalizer,
                                   rules=rules)
    payload = {"iteration_time_s": result.iteration_time,
               "schedule": {k: list(v) for k, v in
                            sorted(result.schedule.items())}}
    run.write_json("simresult.json", payload)
    if args.timeline:
        with open(run.file("timeline.csv"), "w", newline="",
                  encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["node", "start_s", "end_s"])
            for node_id, (start, end) in sorted(result.schedule.items()):
                writer.writerow([node_id, repr(start), repr(end)])
        run.register("timeline.csv")
    print(json.dumps({"iteration_time_s": result.iteration_time}))
    return EXIT_OK


def cmd_tune(args, config: RunConfig, run: RunDir) -> int:
    devices = _load_devices(config)
    ds = _load_split_dataset(config)
    space = {
        "n_layers": [1, 2],
        "d_model": [32, 64],
        "d_ff": [64, 128],
        "lr": ("loguniform", 1e-4, 1e-2),
        "weight_decay": ("loguniform", 1e-6, 1e-2),
        "optimizer": ["adam", "sgd"],
        "lr_schedule": ["constant", "cyclic"],
        "batch_size": [32, 64],
        "alpha_cmd": [0.0, 0.1, 1.0],
    }
    base = config.model_config()
    best, trials = cm.tune(space, config.budget, ds, devices,
                           seed=config.seed, base=base,
                           epochs_cap=config.tune_epochs)
    run.write_json("best_config.json", asdict(best))
    with open(run.file("trials.csv"), "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["trial", "val_mape", "config"])
        for trial in trials:
            writer.writerow([trial.index, repr(trial.val_mape),
                             json.dumps(asdict(trial.config), sort_keys=True)])
    run.register("trials.csv")
    print(json.dumps(
        {"best_val_mape": _json_float(min(t.val_mape for t in trials))},
        sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def _build_parser() -> _Parser:
    parser = _Parser(prog="tpcost",
                     description="Tensor-program latency prediction toolkit")
    parser.add_argument("--config", help="run configuration file")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", default="runs/out", help="run directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="parse IR files into feature JSONL")
    p.add_argument("ir_files", nargs="+")
    p.add_argument("--out-jsonl", required=True)

    sub.add_parser("synth", help="generate a synthetic dataset")
    sub.add_parser("dataset-split", help="assign train/valid/test/holdout")
    sub.add_parser("train", help="pre-train the cost model")
    sub.add_parser("finetune", help="CMD-regularized fine-tuning")

    p = sub.add_parser("sample", help="select tasks to profile")
    p.add_argument("--kappa", type=int, help="number of tasks to select")

    sub.add_parser("predict", help="predict latencies for a dataset")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--split", default="test")
    p.add_argument("--emit-plot-data", action="store_true")

    p = sub.add_parser("replay", help="simulate a dataflow graph end to end")
    p.add_argument("--timeline", action="store_true")

    sub.add_parser("tune", help="random hyper-parameter search")
    return parser


def _setup_logging() -> None:
    level_name = os.environ.get("TPCOST_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO,
              "debug": logging.DEBUG}
    if level_name not in levels:
        print(f"warning: ignoring invalid TPCOST_LOG={level_name!r}",
              file=sys.stderr)
        level_name = "info"
    logging.basicConfig(stream=sys.stderr, level=levels[level_name],
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    try:
        config = load_run_config(args.config, seed_override=args.seed)
        if args.command == "extract":
            return cmd_extract(args, config)
        run = RunDir(args.out, config)
        handler = {
            "synth": cmd_synth,
            "dataset-split": cmd_dataset_split,
            "train": cmd_train,
            "finetune": cmd_finetune,
            "sample": cmd_sample,
            "predict": cmd_predict,
            "eval": cmd_eval,
            "replay": cmd_replay,
            "tune": cmd_tune,
        }[args.command]
        code = handler(args, config, run)
        run.finalize()
        return code
    except (TpcostError, OSError, json.JSONDecodeError, OverflowError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except Exception:  # pragma: no cover - defensive
        import traceback
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
