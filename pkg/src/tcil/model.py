"""Dynamically expandable network with attention fusion and classifier re-scoring.

At step ``t`` the model holds extractors ``F_1..F_t`` (all but the newest
frozen), a fusion module sized for their concatenated channels, and one
classifier over every class seen so far::

    u = [F_1(x), ..., F_t(x)]              channel concat
    f = A_s(A_c(u) * u) * (A_c(u) * u)     attention fusion
    o = G(avgpool(f))                       logits over seen classes
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import torch
from torch import nn

from .backbones import build_extractor
from .errors import ConfigError, DegenerateWeightsError, InputError, InvariantViolation, StateError


def module_checksum(module: nn.Module) -> str:
    """sha256 over every parameter and buffer, in state-dict order."""
    h = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class ChannelAttention(nn.Module):
    """``sigmoid(MLP(avgpool(u)) + MLP(maxpool(u)))`` with one MLP shared by both branches."""

    def __init__(self, channels: int, reduction: int = 16, hidden: int | None = None):
        super().__init__()
        hidden = hidden if hidden is not None else max(channels // reduction, 1)
        self.fc1 = nn.Linear(channels, hidden, bias=False)
        self.fc2 = nn.Linear(hidden, channels, bias=False)

    def mlp(self, v):
        return self.fc2(torch.relu(self.fc1(v)))

    def forward(self, u):
        avg = u.mean(dim=(2, 3))
        mx = u.amax(dim=(2, 3))
        return torch.sigmoid(self.mlp(avg) + self.mlp(mx))[:, :, None, None]


class SpatialAttention(nn.Module):
    """``sigmoid(conv7x7([mean_c(u); max_c(u)]))``, padded so H and W are preserved."""

    def __init__(self, kernel_size: int = 7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2, bias=True)

    def forward(self, u):
        pooled = torch.cat([u.mean(dim=1, keepdim=True), u.amax(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.conv(pooled))


def channel_attention(module: ChannelAttention, u: torch.Tensor) -> torch.Tensor:
    return module(u)


def spatial_attention(module: SpatialAttention, u: torch.Tensor) -> torch.Tensor:
    return module(u)


def fuse(
    u: torch.Tensor,
    channel_att: Callable[[torch.Tensor], torch.Tensor],
    spatial_att: Callable[[torch.Tensor], torch.Tensor],
) -> torch.Tensor:
    refined = channel_att(u) * u
    return spatial_att(refined) * refined


class FusionModule(nn.Module):
    """Channel then spatial attention over the concatenated feature map.

    With ``enabled=False`` the module is the identity (plain concatenation
    baseline).
    """

    def __init__(
        self,
        channels: int,
        reduction: int = 16,
        kernel_size: int = 7,
        enabled: bool = True,
        hidden: int | None = None,
    ):
        super().__init__()
        self.channels = channels
        self.reduction = reduction
        self.enabled = enabled
        self.channel = ChannelAttention(channels, reduction, hidden)
        self.spatial = SpatialAttention(kernel_size)

    @property
    def hidden(self) -> int:
        return self.channel.fc1.out_features

    def forward(self, u):
        if u.shape[1] != self.channels:
            raise ConfigError(
                f"fusion sized for {self.channels} channels, got input with {u.shape[1]}"
            )
        if not self.enabled:
            return u
        return fuse(u, self.channel, self.spatial)


class GrowingClassifier(nn.Module):
    """Linear layer over globally average-pooled fused features (bias optional)."""

    def __init__(self, in_features: int, num_classes: int, bias: bool = False):
        super().__init__()
        self.fc = nn.Linear(in_features, num_classes, bias=bias)

    @property
    def has_bias(self) -> bool:
        return self.fc.bias is not None

    @property
    def in_features(self) -> int:
        return self.fc.in_features

    @property
    def num_classes(self) -> int:
        return self.fc.out_features

    @property
    def weight(self) -> torch.Tensor:
        return self.fc.weight

    def forward(self, pooled):
        return self.fc(pooled)

    def expanded(self, in_features: int, new_classes: int) -> "GrowingClassifier":
        """A wider, taller copy: old block copied, new rows fresh, new columns of old rows zero."""
        if in_features < self.in_features:
            raise InputError("classifier input can only grow")
        grown = GrowingClassifier(in_features, self.num_classes + new_classes, self.has_bias)
        grown.to(self.fc.weight.dtype)
        old_rows, old_cols = self.num_classes, self.in_features
        with torch.no_grad():
            grown.fc.weight[:old_rows, :old_cols] = self.fc.weight
            grown.fc.weight[:old_rows, old_cols:] = 0.0
            if self.has_bias:
                grown.fc.bias[:old_rows] = self.fc.bias
        return grown


@dataclass(frozen=True)
class RescoreState:
    gamma: float
    old_count: int
    new_count: int

    def __post_init__(self):
        if not self.gamma > 0:
            raise InvariantViolation(f"gamma must be positive, got {self.gamma}")


def compute_gamma(
    classifier: GrowingClassifier | torch.Tensor, old_count: int, new_count: int
) -> RescoreState:
    """Mean Euclidean row norm of old classes over that of new classes (bias excluded)."""
    weight = classifier.weight if isinstance(classifier, GrowingClassifier) else classifier
    weight = torch.as_tensor(weight).detach().double()
    if old_count < 1 or new_count < 1:
        raise InputError("re-scoring needs at least one old and one new class")
    if weight.shape[0] != old_count + new_count:
        raise InputError(f"weight has {weight.shape[0]} rows, expected {old_count + new_count}")
    norms = weight.norm(dim=1)
    mean_old = norms[:old_count].mean().item()
    mean_new = norms[old_count:].mean().item()
    if mean_new == 0.0:
        raise DegenerateWeightsError("mean new-class weight norm is zero")
    return RescoreState(mean_old / mean_new, old_count, new_count)


def rescore_logits(state: RescoreState, logits):
    """Scale the new-class block of ``logits`` (last axis) by gamma; old block untouched."""
    tensor = torch.as_tensor(logits)
    if tensor.shape[-1] != state.old_count + state.new_count:
        raise InputError(
            f"logits have {tensor.shape[-1]} entries, expected {state.old_count + state.new_count}"
        )
    scale = torch.ones(tensor.shape[-1], dtype=tensor.dtype if tensor.is_floating_point() else torch.float64)
    scale[state.old_count :] = state.gamma
    return tensor * scale


class ExtractorStack(nn.Module):
    def __init__(self, extractors: Sequence[nn.Module] = ()):
        super().__init__()
        self.extractors = nn.ModuleList(extractors)
        self.frozen: list[bool] = [False] * len(self.extractors)

    def __len__(self) -> int:
        return len(self.extractors)

    def append(self, extractor: nn.Module, freeze_previous: bool = True) -> None:
        if freeze_previous:
            for i in range(len(self.extractors)):
                self.freeze(i)
        self.extractors.append(extractor)
        self.frozen.append(False)

    def freeze(self, i: int) -> None:
        self.frozen[i] = True
        ext = self.extractors[i]
        ext.eval()
        for p in ext.parameters():
            p.requires_grad_(False)

    def train(self, mode: bool = True):
        super().train(mode)
        # frozen extractors keep BN running stats fixed
        for ext, frozen in zip(self.extractors, self.frozen):
            if frozen:
                ext.eval()
        return self

    @property
    def channels(self) -> list[int]:
        return [e.out_channels for e in self.extractors]

    def forward(self, x) -> list[torch.Tensor]:
        return [e(x) for e in self.extractors]


def concat_features(stack: ExtractorStack | Sequence[torch.Tensor], image=None) -> torch.Tensor:
    """Channel-wise concatenation of per-extractor maps, in extractor order."""
    feats = stack(image) if isinstance(stack, ExtractorStack) else list(stack)
    spatial = {tuple(f.shape[2:]) for f in feats}
    if len(spatial) != 1:
        raise InvariantViolation(f"extractors disagree on spatial shape: {sorted(spatial)}")
    return feats[0] if len(feats) == 1 else torch.cat(feats, dim=1)


def expand(
    stack: ExtractorStack,
    classifier: GrowingClassifier,
    new_class_count: int,
    arch: dict,
    reduction: int = 16,
    use_fusion: bool = True,
) -> tuple[ExtractorStack, FusionModule, GrowingClassifier]:
    """Append a fresh extractor, freeze the rest, and grow fusion and classifier."""
    if new_class_count <= 0:
        raise InputError(f"new_class_count must be positive, got {new_class_count}")
    extractor = build_extractor(arch)
    dtype = next(classifier.parameters()).dtype
    extractor.to(dtype)
    stack.append(extractor)
    channels = sum(stack.channels)
    fusion = FusionModule(channels, reduction, enabled=use_fusion).to(dtype)
    return stack, fusion, classifier.expanded(channels, new_class_count)


class ModelOutput(NamedTuple):
    logits: torch.Tensor
    features: list[torch.Tensor]


class TCILModel(nn.Module):
    """Extractor stack + fusion + growing classifier + per-step re-scoring state.

    ``expand_extractors=False`` keeps a single trainable extractor and only
    grows the classifier (the naive fine-tuning baseline).
    """

    def __init__(
        self,
        arch: dict,
        num_classes: int,
        reduction: int = 16,
        use_fusion: bool = True,
        expand_extractors: bool = True,
        classifier_bias: bool = False,
    ):
        super().__init__()
        if num_classes <= 0:
            raise InputError("first task needs at least one class")
        self.arch = dict(arch)
        self.reduction = reduction
        self.use_fusion = use_fusion
        self.expand_extractors = expand_extractors
        self.stack = ExtractorStack([build_extractor(self.arch)])
        channels = sum(self.stack.channels)
        self.fusion = FusionModule(channels, reduction, enabled=use_fusion)
        self.classifier = GrowingClassifier(channels, num_classes, classifier_bias)
        self.task_sizes: list[int] = [num_classes]
        self.rescore: RescoreState | None = None

    @property
    def num_tasks(self) -> int:
        return len(self.task_sizes)

    @property
    def num_classes(self) -> int:
        return self.classifier.num_classes

    @property
    def old_class_count(self) -> int:
        return sum(self.task_sizes[:-1])

    def expand(self, new_class_count: int) -> None:
        if self.expand_extractors:
            self.stack, self.fusion, self.classifier = expand(
                self.stack, self.classifier, new_class_count, self.arch, self.reduction, self.use_fusion
            )
        else:
            if new_class_count <= 0:
                raise InputError(f"new_class_count must be positive, got {new_class_count}")
            self.classifier = self.classifier.expanded(self.classifier.in_features, new_class_count)
        self.task_sizes.append(new_class_count)
        self.rescore = None

    def train(self, mode: bool = True):
        super().train(mode)
        self.stack.train(mode)
        return self

    def head(self, features: Sequence[torch.Tensor]) -> torch.Tensor:
        """Logits from precomputed per-extractor maps (no re-scoring)."""
        fused = self.fusion(concat_features(features))
        return self.classifier(fused.mean(dim=(2, 3)))

    def forward_all(self, x) -> ModelOutput:
        feats = self.stack(x)
        return ModelOutput(self.head(feats), feats)

    def forward(self, x, apply_rescore: bool = False):
        logits = self.head(self.stack(x))
        return self.apply_rescore(logits) if apply_rescore else logits

    def apply_rescore(self, logits):
        if self.num_tasks == 1:
            return logits
        state = self.rescore
        if state is None or state.old_count != self.old_class_count or state.new_count != self.task_sizes[-1]:
            raise StateError(f"re-scoring requested before compute_gamma at step {self.num_tasks}")
        return rescore_logits(state, logits)

    def compute_rescore(self) -> RescoreState | None:
        if self.num_tasks == 1:
            self.rescore = None
        else:
            self.rescore = compute_gamma(self.classifier, self.old_class_count, self.task_sizes[-1])
        return self.rescore

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def extractor_checksums(self) -> list[str]:
        return [module_checksum(e) for e in self.stack.extractors]

    def snapshot(self) -> "TCILModel":
        """Frozen deep copy used as the distillation teacher."""
        teacher = copy.deepcopy(self)
        teacher.eval()
        for p in teacher.parameters():
            p.requires_grad_(False)
        return teacher
