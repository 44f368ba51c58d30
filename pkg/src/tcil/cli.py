"""Command line: ``tcil train``, ``tcil analyze`` and ``tcil prune``.

Every failure prints exactly one line ``error[CODE]: message`` to stderr and
exits with a nonzero status.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .analysis import accuracy_metrics, emit_report, error_breakdown, read_prediction_log
from .checkpoint import load_checkpoint, save_checkpoint
from .config import config_diff, hashed_view, load_config, to_run_spec
from .data import load_dataset
from .errors import ConfigError, InputError, ResumeError, StateError, TCILError
from .manifest import RUN_MANIFEST, RunManifest, config_hash
from .protocol import build_stream, read_class_order
from .pruning import PruneConfig, prune_model, ratio_for_shrink
from .trainer import run_experiment

logger = logging.getLogger("tcil")

CONFIG_COPY = "config.json"
RUN_LOG = "run_log.jsonl"
PRUNE_REPORT = "prune_report.json"
PRUNED_CHECKPOINT = "checkpoint"


def cmd_train(config_path: str | Path, out_dir: str | Path, resume: bool = False) -> int:
    config = load_config(config_path)
    spec = to_run_spec(config)
    out = Path(out_dir)
    digest = config_hash(hashed_view(config))

    if resume:
        manifest = RunManifest.load(out)
        if manifest.config_hash != digest:
            stored = out / CONFIG_COPY
            previous = json.loads(stored.read_text()) if stored.exists() else {}
            diff = config_diff(hashed_view(previous), hashed_view(config)) or ["(stored config unavailable)"]
            raise ResumeError("config differs from the run being resumed: " + "; ".join(diff))
        if manifest.finished:
            logger.info("run in %s already finished", out)
            return 0
    else:
        if (out / RUN_MANIFEST).exists():
            raise StateError(f"{out} already holds a run; pass --resume or choose a clean directory")
        manifest = RunManifest(digest, spec.dataset, spec.protocol, spec.num_steps, config["seed"])

    data = load_dataset(spec.dataset)
    order = read_class_order(spec.class_order) if spec.class_order else None
    stream = build_stream(data.train_labels(), spec.protocol, spec.num_steps, config["seed"], class_order=order)

    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_COPY).write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
    with open(out / RUN_LOG, "a") as run_log:

        def write_record(record: dict) -> None:
            run_log.write(json.dumps(record, sort_keys=True) + "\n")
            run_log.flush()

        result = run_experiment(
            stream, spec.experiment, data, out, resume=resume, manifest=manifest,
            log=write_record, onc_rule=spec.onc_rule,
        )
    metrics = result.metrics
    print(f"avg {metrics.avg:.2f}  last {metrics.last:.2f}  steps {len(result.reports)}/{stream.num_steps}")
    return 0


def cmd_analyze(log_path: str | Path, map_path: str | Path, out_dir: str | Path, onc_rule: str = "either") -> int:
    log = read_prediction_log(log_path, map_path)
    if not log.records:
        raise InputError(f"{log_path}: prediction log is empty")
    breakdown = error_breakdown(log, onc_rule)
    metrics = accuracy_metrics(log)
    emit_report(breakdown, metrics, out_dir)
    print(f"avg {metrics.avg:.2f}  last {metrics.last:.2f}  report in {out_dir}")
    return 0


def _prune_config(path: str | Path, model) -> PruneConfig:
    try:
        payload = yaml.safe_load(Path(path).read_text()) or {}
    except FileNotFoundError:
        raise ConfigError(f"prune config not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML/JSON: {exc}".replace("\n", " ")) from None
    if not isinstance(payload, dict):
        raise ConfigError("prune config must be a mapping")
    config = PruneConfig.from_dict(payload)
    if "target_shrink" in payload:
        if config.mode != "ratio" or "ratio" in payload:
            raise ConfigError("target_shrink picks the ratio itself; do not combine it with ratio or threshold")
        config = PruneConfig("ratio", ratio_for_shrink(model, float(payload["target_shrink"])))
    return config


def cmd_prune(checkpoint_path: str | Path, config_path: str | Path, out_dir: str | Path) -> int:
    model, manifest = load_checkpoint(checkpoint_path)
    config = _prune_config(config_path, model)
    result = prune_model(model, config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.model, out / PRUNED_CHECKPOINT, metadata=manifest.get("metadata"), pruning=result.manifest())
    report = {
        "mode": config.mode,
        "ratio": config.ratio,
        "threshold": config.threshold,
        "params_before": result.params_before,
        "params_after": result.params_after,
        "shrink": result.ratio,
    }
    (out / PRUNE_REPORT).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"params {result.params_before} -> {result.params_after} ({result.ratio:.2f}x smaller)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tcil", description="Task-correlated class-incremental learning")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run an incremental experiment")
    train.add_argument("--config", required=True, help="flat YAML or JSON config")
    train.add_argument("--out", required=True, help="run directory")
    train.add_argument("--resume", action="store_true", help="continue after the last completed step")

    analyze = sub.add_parser("analyze", help="error taxonomy from a prediction log")
    analyze.add_argument("--log", required=True, help="predictions CSV (sample_id,true_class,pred_class,step)")
    analyze.add_argument("--map", required=True, help="class-to-task CSV (class_id,task_id)")
    analyze.add_argument("--out", required=True, help="report directory")
    analyze.add_argument("--onc-rule", choices=["either", "predicted"], default="either")

    prune = sub.add_parser("prune", help="shrink a checkpoint by geometric-median filter pruning")
    prune.add_argument("--ckpt", required=True, help="checkpoint directory")
    prune.add_argument("--config", required=True, help="prune config (mode, ratio | threshold | target_shrink)")
    prune.add_argument("--out", required=True, help="output directory")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "train":
            return cmd_train(args.config, args.out, args.resume)
        if args.command == "analyze":
            return cmd_analyze(args.log, args.map, args.out, args.onc_rule)
        return cmd_prune(args.ckpt, args.config, args.out)
    except TCILError as exc:
        message = str(exc).replace("\n", " ")
        print(f"error[{exc.code}]: {message}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error[IO_ERROR]: {exc}".replace("\n", " "), file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
