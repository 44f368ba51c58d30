"""Incremental training loop.

Each step expands the model (from step 2 on), trains the newest extractor,
fusion module and classifier on the new data plus the exemplar memory,
computes the re-scoring coefficient, refreshes the memory, evaluates on
every seen class, and optionally checkpoints. Steps are seeded individually
so a resumed run reproduces an uninterrupted one exactly.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .analysis import (
    AccuracyMetrics,
    ErrorBreakdown,
    PredictionLog,
    PredictionRecord,
    accuracy_metrics,
    emit_report,
    error_breakdown,
    read_prediction_records,
    topk_correct,
    write_class_task_map,
    write_prediction_log,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .data import ImageDataset
from .errors import ConfigError, InputError, ResumeError, StateError
from .losses import (
    KdConfig,
    LossParts,
    classification_loss,
    divergence_loss,
    feature_kd_loss,
    logit_kd_loss,
    total_loss,
)
from .manifest import RunManifest
from .model import TCILModel
from .protocol import ExemplarMemory, SelectionMethod, TaskStream, rebalance_memory, write_class_order

logger = logging.getLogger(__name__)

AUGMENTATIONS = ("crop", "flip", "rotation", "brightness", "cutout")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    epochs_per_step: int = 30
    warmup_epochs: int = 3
    lr_milestones: tuple[int, ...] = (20, 25)
    lr_decay: float = 0.1
    seed: int = 0
    augmentation: tuple[str, ...] = ("crop", "flip")
    eval_batch_size: int = 512
    grad_clip: float | None = None  # max global gradient norm; None disables clipping

    def __post_init__(self):
        object.__setattr__(self, "lr_milestones", tuple(int(m) for m in self.lr_milestones))
        object.__setattr__(self, "augmentation", tuple(self.augmentation))
        if self.warmup_epochs >= self.epochs_per_step:
            raise ConfigError("warmup_epochs must be smaller than epochs_per_step")
        if any(b <= a for a, b in zip(self.lr_milestones, self.lr_milestones[1:])):
            raise ConfigError("lr_milestones must be strictly increasing")
        bad = set(self.augmentation) - set(AUGMENTATIONS)
        if bad:
            raise ConfigError(f"unknown augmentation(s): {sorted(bad)}")
        if self.batch_size < 1 or self.epochs_per_step < 1:
            raise ConfigError("batch_size and epochs_per_step must be positive")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError("grad_clip must be positive or null")

    @classmethod
    def cifar_recipe(cls, **overrides) -> "TrainConfig":
        """CIFAR100 schedule: 10 warmup epochs to 0.1, x0.1 at epochs 100 and 120."""
        base = dict(
            lr=0.1, weight_decay=5e-4, batch_size=128, epochs_per_step=140,
            warmup_epochs=10, lr_milestones=(100, 120), augmentation=("crop", "flip"),
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def imagenet_recipe(cls, **overrides) -> "TrainConfig":
        base = dict(
            lr=0.1, weight_decay=5e-4, batch_size=128, epochs_per_step=200,
            warmup_epochs=20, lr_milestones=(60, 120, 180), augmentation=("crop", "flip"),
        )
        base.update(overrides)
        return cls(**base)


def learning_rate(config: TrainConfig, epoch: int, iteration: int = 0, iters_per_epoch: int = 1) -> float:
    """Linear warmup from 0 to ``lr`` across the warmup epochs (per iteration),
    then piecewise constant with a ``lr_decay`` factor at each milestone epoch."""
    if epoch < config.warmup_epochs:
        done = epoch * iters_per_epoch + iteration + 1
        return config.lr * done / (config.warmup_epochs * iters_per_epoch)
    passed = sum(1 for m in config.lr_milestones if epoch >= m)
    return config.lr * config.lr_decay**passed


@dataclass(frozen=True)
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    kd: KdConfig = field(default_factory=KdConfig)
    memory_budget: int = 2000
    selection_method: str = "herding"
    arch: dict = field(default_factory=lambda: {"kind": "convnet", "in_channels": 3, "widths": [32, 64, 64]})
    reduction: int = 16
    expand: bool = True
    use_fusion: bool = True
    use_rescore: bool = True
    classifier_bias: bool = False

    def __post_init__(self):
        if self.memory_budget < 0:
            raise ConfigError("memory_budget must be non-negative")
        SelectionMethod(self.selection_method)

    def effective(self) -> "ExperimentConfig":
        """Non-rehearsal runs (budget 0) force the feature-distillation weight to 0."""
        if self.memory_budget == 0 and self.kd.lam != 0:
            logger.info("memory budget is 0: forcing lam=0 (non-rehearsal)")
            return dataclasses.replace(self, kd=dataclasses.replace(self.kd, lam=0.0))
        return self

    @classmethod
    def finetune(cls, base: "ExperimentConfig | None" = None) -> "ExperimentConfig":
        """Naive fine-tuning: one shared extractor, no memory, no distillation."""
        base = base or cls()
        return dataclasses.replace(
            base,
            kd=dataclasses.replace(base.kd, lam=0.0, mu=0.0, beta=0.0),
            memory_budget=0,
            expand=False,
            use_fusion=False,
            use_rescore=False,
        )


# --- augmentation -----------------------------------------------------------------


def augment(x: torch.Tensor, policy: Sequence[str], gen: torch.Generator) -> torch.Tensor:
    if not policy:
        return x
    b, _, h, w = x.shape
    if "crop" in policy:
        pad = 4
        padded = nn.functional.pad(x, (pad, pad, pad, pad))
        offs = torch.randint(0, 2 * pad + 1, (b, 2), generator=gen).tolist()
        x = torch.stack([padded[i, :, dy : dy + h, dx : dx + w] for i, (dy, dx) in enumerate(offs)])
    if "flip" in policy:
        flip = torch.rand(b, generator=gen) < 0.5
        x = torch.where(flip[:, None, None, None], x.flip(3), x)
    if "rotation" in policy:
        angle = (torch.rand(b, generator=gen) * 2 - 1) * (15 * np.pi / 180)
        cos, sin = torch.cos(angle), torch.sin(angle)
        theta = torch.zeros(b, 2, 3, dtype=x.dtype)
        theta[:, 0, 0], theta[:, 0, 1], theta[:, 1, 0], theta[:, 1, 1] = cos, -sin, sin, cos
        grid = nn.functional.affine_grid(theta, list(x.shape), align_corners=False)
        x = nn.functional.grid_sample(x, grid, align_corners=False)
    if "brightness" in policy:
        x = x + (torch.rand(b, 1, 1, 1, generator=gen, dtype=x.dtype) - 0.5) * 0.4
    if "cutout" in policy:
        size = max(h // 4, 1)
        ys = torch.randint(0, h, (b,), generator=gen).tolist()
        xs = torch.randint(0, w, (b,), generator=gen).tolist()
        x = x.clone()
        for i, (cy, cx) in enumerate(zip(ys, xs)):
            x[i, :, max(cy - size // 2, 0) : cy + size // 2, max(cx - size // 2, 0) : cx + size // 2] = 0
    return x


# --- reports ------------------------------------------------------------------------


@dataclass
class StepReport:
    step: int
    losses: dict[str, float]
    epochs: list[dict]
    accuracy: float
    accuracy_no_cr: float
    top5: float
    gamma: float | None
    param_count: int
    checksums: list[str]
    memory_size: int
    seconds: float
    records: list[PredictionRecord] = field(default_factory=list, repr=False)
    records_no_cr: list[PredictionRecord] = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        out = dataclasses.asdict(self)
        out.pop("records")
        out.pop("records_no_cr")
        return out


@dataclass
class ExperimentResult:
    reports: list[StepReport]
    class_to_task: dict[int, int]
    model: TCILModel | None = None
    memory: ExemplarMemory | None = None
    onc_rule: str = "either"

    @property
    def log(self) -> PredictionLog:
        return PredictionLog([r for rep in self.reports for r in rep.records], self.class_to_task)

    @property
    def log_no_cr(self) -> PredictionLog:
        return PredictionLog([r for rep in self.reports for r in rep.records_no_cr], self.class_to_task)

    @property
    def metrics(self) -> AccuracyMetrics:
        return accuracy_metrics([r.accuracy for r in self.reports])

    @property
    def metrics_no_cr(self) -> AccuracyMetrics:
        return accuracy_metrics([r.accuracy_no_cr for r in self.reports])

    @property
    def breakdown(self) -> ErrorBreakdown:
        return error_breakdown(self.log, self.onc_rule)

    @property
    def breakdown_no_cr(self) -> ErrorBreakdown:
        return error_breakdown(self.log_no_cr, self.onc_rule)


# --- one step -----------------------------------------------------------------------


def step_seed(seed: int, t: int) -> int:
    return seed * 1_000_003 + t


def exemplar_feature_kd(feats, origin, exemplar_mask, pooled: bool = False) -> torch.Tensor:
    """Per-exemplar L2 between the newest extractor and the extractor of the sample's own task.

    ``origin`` holds the 1-based task of each sample; exemplars must come from
    a previous task (``1 <= origin < len(feats)``).
    """
    student = feats[-1]
    tagged = origin[exemplar_mask]
    if tagged.numel() and (tagged.min() < 1 or tagged.max() >= len(feats)):
        raise InputError("exemplar without a previous-task origin tag")
    values = []
    for task in sorted(set(origin[exemplar_mask].tolist())):
        rows = exemplar_mask & (origin == task)
        values.append(feature_kd_loss(student[rows], feats[task - 1][rows], pooled=pooled))
    return torch.cat(values) if values else student.new_zeros(0)


@torch.no_grad()
def evaluate_logits(model: TCILModel, images: torch.Tensor, batch_size: int = 512) -> torch.Tensor:
    model.eval()
    return torch.cat([model(images[i : i + batch_size]) for i in range(0, len(images), batch_size)])


@torch.no_grad()
def pooled_newest_features(model: TCILModel, images: torch.Tensor, batch_size: int = 512) -> np.ndarray:
    model.eval()
    ext = model.stack.extractors[-1]
    out = [ext(images[i : i + batch_size]).mean(dim=(2, 3)) for i in range(0, len(images), batch_size)]
    return torch.cat(out).double().numpy()


def run_step(
    model: TCILModel | None,
    stream: TaskStream,
    memory: ExemplarMemory,
    t: int,
    config: ExperimentConfig,
    data: ImageDataset,
    log: Callable[[dict], None] | None = None,
) -> tuple[TCILModel, ExemplarMemory, StepReport]:
    """Train and evaluate incremental step ``t`` (1-indexed)."""
    done = 0 if model is None else model.num_tasks
    if t != done + 1:
        raise StateError(f"step {t} requested but the model has completed {done} step(s)")
    if t > stream.num_steps:
        raise StateError(f"stream has only {stream.num_steps} steps")
    config = config.effective()
    kd, tc = config.kd, config.train
    started = time.perf_counter()
    seed = step_seed(tc.seed, t)
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)

    new_classes = list(stream.classes_at(t))
    seen = list(stream.seen_classes(t))
    class_to_task = stream.class_to_task
    column = torch.full((data.num_classes,), -1, dtype=torch.long)
    column[torch.tensor(seen)] = torch.arange(len(seen))
    task_of = torch.zeros(data.num_classes, dtype=torch.long)
    for c, task in class_to_task.items():
        task_of[c] = task

    teacher = None
    if t == 1:
        model = TCILModel(
            config.arch, len(new_classes), config.reduction, config.use_fusion, config.expand, config.classifier_bias
        )
    else:
        if kd.mu > 0:
            teacher = model.snapshot()
        model.expand(len(new_classes))
    dtype = next(model.parameters()).dtype
    train_x = data.train_x.to(dtype)

    aux_head = None
    if t > 1 and kd.beta > 0 and model.expand_extractors:
        aux_head = nn.Linear(model.stack.extractors[-1].out_channels, len(new_classes) + 1).to(dtype)

    ids = list(stream.samples_at(t))
    n_new = len(ids)
    if memory.budget > 0 and not memory.is_empty:
        ids += memory.sample_ids()
    ids_t = torch.tensor(ids, dtype=torch.long)
    exemplar = torch.zeros(len(ids), dtype=torch.bool)
    exemplar[n_new:] = True
    labels = data.train_y[ids_t]
    if (column[labels] < 0).any():
        raise InputError("training data contains a class not seen by this step")

    params = [p for p in model.parameters() if p.requires_grad]
    if aux_head is not None:
        params += list(aux_head.parameters())
    opt = torch.optim.SGD(params, lr=0.0, momentum=tc.momentum, weight_decay=tc.weight_decay)

    n = len(ids)
    iters = (n + tc.batch_size - 1) // tc.batch_size
    epoch_logs = []
    last_bundle = {}
    for epoch in range(tc.epochs_per_step):
        model.train()
        perm = torch.randperm(n, generator=gen)
        sums = {"clf": 0.0, "feat_kd": 0.0, "logit_kd": 0.0, "div": 0.0, "total": 0.0}
        for it in range(iters):
            lr = learning_rate(tc, epoch, it, iters)
            for g in opt.param_groups:
                g["lr"] = lr
            batch = perm[it * tc.batch_size : (it + 1) * tc.batch_size]
            x = augment(train_x[ids_t[batch]], tc.augmentation, gen)
            y_raw = labels[batch]
            y = column[y_raw]
            is_ex = exemplar[batch]

            out = model.forward_all(x)
            parts = LossParts(clf=classification_loss(out.logits, y), batch_size=len(batch))
            if t > 1 and kd.lam > 0 and model.expand_extractors and is_ex.any():
                parts.feat_kd = exemplar_feature_kd(out.features, task_of[y_raw], is_ex, kd.feature_kd_on == "pooled")
            if teacher is not None:
                with torch.no_grad():
                    if model.expand_extractors:
                        teacher_logits = teacher.head([f.detach() for f in out.features[:-1]])
                    else:
                        teacher_logits = teacher(x)
                parts.logit_kd = logit_kd_loss(out.logits, teacher_logits, kd.temperature)
            if aux_head is not None:
                aux_logits = aux_head(out.features[-1].mean(dim=(2, 3)))
                parts.div = divergence_loss(aux_logits, y_raw, new_classes)
            bundle = total_loss(parts, kd, memory.budget)

            opt.zero_grad(set_to_none=True)
            bundle.total.backward()
            if tc.grad_clip is not None:
                nn.utils.clip_grad_norm_(params, tc.grad_clip)
            opt.step()
            last_bundle = bundle.as_dict()
            for k, v in last_bundle.items():
                sums[k] += v * len(batch)
        record = {"step": t, "epoch": epoch + 1, "iteration": (epoch + 1) * iters, "lr": lr}
        record.update({k: v / n for k, v in sums.items()})
        epoch_logs.append(record)
        if log is not None:
            log(record)
    logger.info("step %d trained: %s", t, epoch_logs[-1] if epoch_logs else {})

    model.eval()
    rescore = model.compute_rescore()

    if memory.budget > 0:
        per_class = {}
        new_ids = np.asarray(stream.samples_at(t))
        new_labels = data.train_y[torch.as_tensor(new_ids)].numpy()
        feats = pooled_newest_features(model, train_x[torch.as_tensor(new_ids)], tc.eval_batch_size)
        for c in new_classes:
            rows = new_labels == c
            per_class[c] = (new_ids[rows].tolist(), feats[rows])
        memory = rebalance_memory(memory, new_classes, per_class, seed=seed)
    else:
        memory = rebalance_memory(memory, new_classes, {}, seed=seed)

    test_rows = torch.nonzero(torch.isin(data.test_y, torch.tensor(seen))).flatten()
    raw = evaluate_logits(model, data.test_x[test_rows].to(dtype), tc.eval_batch_size)
    cols = column[data.test_y[test_rows]].numpy()
    with_cr = model.apply_rescore(raw) if (config.use_rescore and t > 1) else raw
    seen_arr = np.asarray(seen)

    def records(logits):
        pred = seen_arr[logits.argmax(dim=1).numpy()]
        return [
            PredictionRecord(int(i), int(c), int(p), t)
            for i, c, p in zip(test_rows.tolist(), data.test_y[test_rows].tolist(), pred.tolist())
        ]

    recs, recs_no_cr = records(with_cr), records(raw)
    acc = 100.0 * float((with_cr.argmax(dim=1).numpy() == cols).mean())
    acc_no_cr = 100.0 * float((raw.argmax(dim=1).numpy() == cols).mean())
    top5 = 100.0 * float(topk_correct(with_cr.numpy(), cols, 5).mean())

    report = StepReport(
        step=t,
        losses=last_bundle,
        epochs=epoch_logs,
        accuracy=acc,
        accuracy_no_cr=acc_no_cr,
        top5=top5,
        gamma=None if rescore is None else rescore.gamma,
        param_count=model.parameter_count(),
        checksums=model.extractor_checksums(),
        memory_size=len(memory),
        seconds=time.perf_counter() - started,
        records=recs,
        records_no_cr=recs_no_cr,
    )
    logger.info(
        "step %d: acc %.2f (no CR %.2f) gamma %s params %d",
        t, acc, acc_no_cr, report.gamma, report.param_count,
    )
    return model, memory, report


# --- whole experiment ------------------------------------------------------------------


def step_dir(out_dir: Path, t: int) -> Path:
    return out_dir / "steps" / f"step_{t:02d}"


def _save_step(out_dir: Path, model: TCILModel, memory: ExemplarMemory, report: StepReport) -> dict[str, str]:
    d = step_dir(out_dir, report.step)
    d.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, d / "checkpoint", metadata={"step": report.step})
    memory.save(d / "memory.json")
    write_prediction_log(report.records, d / "predictions.csv")
    write_prediction_log(report.records_no_cr, d / "predictions_no_cr.csv")
    (d / "report.json").write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n")
    rel = d.relative_to(out_dir)
    return {f"step_{report.step:02d}": str(rel)}


def _load_step(out_dir: Path, t: int) -> StepReport:
    d = step_dir(out_dir, t)
    summary = json.loads((d / "report.json").read_text())

    return StepReport(
        **summary,
        records=read_prediction_records(d / "predictions.csv"),
        records_no_cr=read_prediction_records(d / "predictions_no_cr.csv"),
    )


def run_experiment(
    stream: TaskStream,
    config: ExperimentConfig,
    data: ImageDataset,
    out_dir: str | Path | None = None,
    resume: bool = False,
    manifest: RunManifest | None = None,
    stop_after: int | None = None,
    log: Callable[[dict], None] | None = None,
    onc_rule: str = "either",
) -> ExperimentResult:
    """Run every step of ``stream`` in order, evaluating after each.

    With ``out_dir`` every finished step is persisted (checkpoint, memory,
    predictions, report) and marked complete in ``manifest``; ``resume=True``
    continues after the last completed step. ``stop_after`` ends the run
    early, leaving it resumable.
    """
    config = config.effective()
    out = Path(out_dir) if out_dir is not None else None
    model: TCILModel | None = None
    memory = ExemplarMemory(config.memory_budget, selection_method=config.selection_method)
    reports: list[StepReport] = []
    first = 1

    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if manifest is None:
            manifest = RunManifest("", {}, stream.protocol.value, stream.num_steps, config.train.seed)
        if resume:
            if manifest.num_steps != stream.num_steps or manifest.protocol != stream.protocol.value:
                raise ResumeError("run manifest protocol does not match the stream")
            for t in manifest.completed_steps:
                reports.append(_load_step(out, t))
            if manifest.completed_steps:
                last = manifest.last_completed
                model, ck = load_checkpoint(step_dir(out, last) / "checkpoint")
                expected = [len(stream.classes_at(s)) for s in range(1, last + 1)]
                if ck["task_sizes"] != expected:
                    raise ResumeError(
                        f"checkpoint task sizes {ck['task_sizes']} do not match the stream {expected}"
                    )
                memory = ExemplarMemory.load(step_dir(out, last) / "memory.json")
                if memory.budget != config.memory_budget:
                    raise ResumeError("memory budget differs from the checkpointed run")
                first = last + 1
        write_class_task_map(stream.class_to_task, out / "class_task_map.csv")
        write_class_order(stream.class_order, out / "class_order.txt")
        manifest.artifacts.update({"class_task_map": "class_task_map.csv", "class_order": "class_order.txt"})
        manifest.save(out)

    last_step = stream.num_steps if stop_after is None else min(stop_after, stream.num_steps)
    for t in range(first, last_step + 1):
        model, memory, report = run_step(model, stream, memory, t, config, data, log=log)
        reports.append(report)
        if out is not None:
            artifacts = _save_step(out, model, memory, report)
            manifest.mark_complete(t, artifacts)
            manifest.save(out)

    result = ExperimentResult(reports, stream.class_to_task, model, memory, onc_rule)
    if out is not None and reports:
        write_prediction_log(result.log.records, out / "predictions.csv")
        write_prediction_log(result.log_no_cr.records, out / "predictions_no_cr.csv")
        if manifest.finished:
            emit_report(result.breakdown, result.metrics, out / "report")
            summary = {
                "avg": result.metrics.avg,
                "last": result.metrics.last,
                "per_step": list(result.metrics.per_step),
                "avg_no_cr": result.metrics_no_cr.avg,
                "param_counts": [r.param_count for r in reports],
                "gammas": [r.gamma for r in reports],
            }
            (out / "results.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
            manifest.artifacts.update({"report": "report", "results": "results.json"})
            manifest.save(out)
    return result
