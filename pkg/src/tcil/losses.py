"""Classification, distillation and divergence losses and their weighted total.

Per-sample distillation terms are summed over the samples they apply to and
then divided by the batch size, so the weights do not depend on batch size.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn.functional as F

from .errors import ConfigError, InputError


@dataclass(frozen=True)
class KdConfig:
    """Loss weights.

    ``lam`` weighs feature distillation, ``mu`` logit distillation, ``alpha``
    the whole distillation term and ``beta`` the divergence loss.
    """

    temperature: float = 2.0
    lam: float = 0.5
    mu: float = 0.5
    alpha: float = 1.0
    beta: float = 1.0
    feature_kd_on: str = "maps"

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.feature_kd_on not in ("maps", "pooled"):
            raise ConfigError(f"feature_kd_on must be 'maps' or 'pooled', got {self.feature_kd_on!r}")
        for name in ("lam", "mu", "alpha", "beta"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")


@dataclass
class LossBundle:
    clf: torch.Tensor
    feat_kd: torch.Tensor
    logit_kd: torch.Tensor
    div: torch.Tensor
    total: torch.Tensor

    def as_dict(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("clf", "feat_kd", "logit_kd", "div", "total")}


def classification_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean softmax cross-entropy; ``labels`` index the columns of ``logits``."""
    logits = torch.as_tensor(logits)
    labels = torch.as_tensor(labels, dtype=torch.long)
    if logits.dim() == 1:
        logits, labels = logits[None], labels.reshape(1)
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[-1]):
        raise InputError(f"label out of range for {logits.shape[-1]} classes")
    return F.cross_entropy(logits, labels)


def feature_kd_loss(student_feat: torch.Tensor, teacher_feat: torch.Tensor, pooled: bool = False) -> torch.Tensor:
    """Per-sample L2 norm of ``student - teacher`` over the flattened feature.

    Inputs carry a leading batch axis. The teacher side is detached.
    """
    if student_feat.shape != teacher_feat.shape:
        raise InputError(f"feature shapes differ: {tuple(student_feat.shape)} vs {tuple(teacher_feat.shape)}")
    if pooled and student_feat.dim() == 4:
        student_feat = student_feat.mean(dim=(2, 3))
        teacher_feat = teacher_feat.mean(dim=(2, 3))
    diff = student_feat - teacher_feat.detach()
    return diff.flatten(1).norm(dim=1)


def logit_kd_loss(student_logits: torch.Tensor, teacher_logits: torch.Tensor, temperature: float = 2.0) -> torch.Tensor:
    """Per-sample ``sum_c q_c log(q_c / q_hat_c)`` over the teacher's classes.

    ``q`` is the temperature softmax of the first ``K_old`` student logits and
    ``q_hat`` that of the (detached) teacher logits.
    """
    if not temperature > 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    k_old = teacher_logits.shape[-1]
    if student_logits.shape[-1] < k_old:
        raise InputError("student has fewer logits than the teacher")
    log_q = F.log_softmax(student_logits[..., :k_old] / temperature, dim=-1)
    log_q_hat = F.log_softmax(teacher_logits.detach() / temperature, dim=-1)
    return (log_q.exp() * (log_q - log_q_hat)).sum(dim=-1)


def divergence_targets(labels: torch.Tensor, new_classes: Sequence[int]) -> torch.Tensor:
    """Map labels to the auxiliary head: position within ``new_classes``, else ``len(new_classes)``."""
    lookup = {int(c): i for i, c in enumerate(new_classes)}
    other = len(new_classes)
    return torch.tensor([lookup.get(int(y), other) for y in labels], dtype=torch.long)


def divergence_loss(aux_logits: torch.Tensor | None, labels: torch.Tensor, new_classes: Sequence[int]) -> torch.Tensor:
    """Cross-entropy of the ``(|C_t| + 1)``-way auxiliary head; zero at step 1 (``aux_logits=None``)."""
    if aux_logits is None:
        return torch.zeros(())
    if aux_logits.shape[-1] != len(new_classes) + 1:
        raise InputError(f"auxiliary head has {aux_logits.shape[-1]} outputs, expected {len(new_classes) + 1}")
    targets = divergence_targets(labels, new_classes).to(aux_logits.device)
    return F.cross_entropy(aux_logits, targets)


@dataclass
class LossParts:
    """Raw loss terms for one batch.

    ``feat_kd`` holds one value per exemplar sample (those flagged in
    ``exemplar_mask``); ``logit_kd`` one value per batch sample.
    """

    clf: torch.Tensor
    batch_size: int
    feat_kd: torch.Tensor = field(default_factory=lambda: torch.zeros(0))
    logit_kd: torch.Tensor = field(default_factory=lambda: torch.zeros(0))
    div: torch.Tensor = field(default_factory=lambda: torch.zeros(()))


def total_loss(parts: LossParts, config: KdConfig, memory_budget: int | None = None) -> LossBundle:
    """``clf + alpha * (lam * sum(feat_kd) + mu * sum(logit_kd)) / B + beta * div``."""
    if config.lam > 0 and memory_budget == 0:
        raise ConfigError("lam > 0 requires a rehearsal memory (budget is 0)")
    if parts.batch_size <= 0:
        raise InputError("empty batch")
    feat = parts.feat_kd.sum() / parts.batch_size
    logit = parts.logit_kd.sum() / parts.batch_size
    total = parts.clf + config.alpha * (config.lam * feat + config.mu * logit) + config.beta * parts.div
    return LossBundle(parts.clf, feat, logit, parts.div, total)
