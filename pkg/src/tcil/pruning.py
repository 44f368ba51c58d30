"""Geometric-median filter pruning for the extractor stack.

Filters lying closest to the geometric median of their layer are the ones
best represented by the others, so they are removed first. Removing a
filter slices the conv's output, its batch norm, and the input of whatever
consumes it; when the conv is an extractor's last layer, the fusion module
and classifier columns for that channel are dropped too.
"""

from __future__ import annotations

import copy
import logging
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, InputError

logger = logging.getLogger(__name__)


def median_objective(point: np.ndarray, points: np.ndarray) -> float:
    return float(np.linalg.norm(points - point[None, :], axis=1).sum())


def geometric_median(
    filters: np.ndarray | Sequence[Sequence[float]],
    tol: float = 1e-10,
    max_iter: int = 10_000,
) -> np.ndarray:
    """Point minimizing the sum of Euclidean distances to ``filters``.

    Weiszfeld iteration with the Vardi-Zhang correction for iterates that
    coincide with an input point. Stops when the update norm drops below
    ``tol``; after ``max_iter`` iterations the best iterate is returned with
    a warning.
    """
    pts = np.asarray(filters, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[None, :]
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise InputError("need at least one filter vector")
    pts = pts.reshape(pts.shape[0], -1)
    if pts.shape[0] == 1:
        return pts[0].copy()

    y = pts.mean(axis=0)
    best, best_obj = y, median_objective(y, pts)
    scale = max(float(np.abs(pts).max()), 1.0)
    for _ in range(max_iter):
        diff = pts - y[None, :]
        dist = np.linalg.norm(diff, axis=1)
        coincident = dist <= 1e-14 * scale
        inv = np.zeros_like(dist)
        inv[~coincident] = 1.0 / dist[~coincident]
        if not inv.any():
            return y
        weiszfeld = (inv[:, None] * pts).sum(axis=0) / inv.sum()
        eta = int(coincident.sum())
        if eta == 0:
            y_new = weiszfeld
        else:
            pull = np.linalg.norm((inv[:, None] * diff).sum(axis=0))
            if pull <= eta:
                # subgradient condition: the coincident input point is optimal
                y_new = y
            else:
                shrink = eta / pull
                y_new = (1.0 - shrink) * weiszfeld + shrink * y
        step = np.linalg.norm(y_new - y)
        y = y_new
        obj = median_objective(y, pts)
        if obj < best_obj:
            best, best_obj = y, obj
        if step < tol:
            return best
    warnings.warn(f"geometric median did not converge in {max_iter} iterations", stacklevel=2)
    return best


@dataclass(frozen=True)
class PruneConfig:
    """``mode="ratio"`` removes ``floor(ratio * n)`` filters per layer;
    ``mode="threshold"`` removes filters whose cosine similarity to the
    layer's geometric median is at least ``threshold``."""

    mode: str = "ratio"
    ratio: float | None = 0.0
    threshold: float | None = None

    def __post_init__(self):
        if self.mode == "ratio":
            if self.ratio is None or self.threshold is not None:
                raise ConfigError("ratio mode needs ratio set and threshold unset")
            if not 0.0 <= self.ratio <= 1.0:
                raise ConfigError(f"ratio must lie in [0, 1], got {self.ratio}")
        elif self.mode == "threshold":
            if self.threshold is None or self.ratio is not None:
                raise ConfigError("threshold mode needs threshold set and ratio unset")
            if not 0.0 <= self.threshold <= 1.0:
                raise ConfigError(f"threshold must lie in [0, 1], got {self.threshold}")
        else:
            raise ConfigError(f"unknown prune mode {self.mode!r}")

    @classmethod
    def from_dict(cls, payload: dict) -> "PruneConfig":
        unknown = set(payload) - {"mode", "ratio", "threshold", "target_shrink"}
        if unknown:
            raise ConfigError(f"unknown prune config keys: {sorted(unknown)}")
        mode = payload.get("mode", "ratio")
        if mode == "ratio":
            return cls("ratio", float(payload.get("ratio", 0.0)), None)
        return cls(mode, None, payload.get("threshold"))


def prune_layer(filters, config: PruneConfig) -> tuple[list[int], list[int]]:
    """Split filter indices of one layer into (kept, removed), both ascending."""
    w = np.asarray(filters.detach().cpu() if isinstance(filters, torch.Tensor) else filters, dtype=np.float64)
    n = w.shape[0]
    if n < 2:
        raise InputError(f"layer needs at least 2 filters to prune, has {n}")
    flat = w.reshape(n, -1)

    if config.mode == "ratio":
        n_remove = int(np.floor(config.ratio * n + 1e-9))
        if n_remove == 0:
            return list(range(n)), []
        median = geometric_median(flat)
        dist = np.linalg.norm(flat - median[None, :], axis=1)
        order = np.argsort(dist, kind="stable")
    else:
        median = geometric_median(flat)
        norms = np.linalg.norm(flat, axis=1) * np.linalg.norm(median)
        cos = np.divide(flat @ median, norms, out=np.zeros(n), where=norms > 0)
        order = np.argsort(-cos, kind="stable")
        n_remove = int((cos >= config.threshold).sum())

    if n_remove >= n:
        warnings.warn(f"pruning would remove all {n} filters; keeping one", stacklevel=2)
        n_remove = n - 1
    removed = sorted(int(i) for i in order[:n_remove])
    kept = [i for i in range(n) if i not in set(removed)]
    return kept, removed


# --- structural surgery ------------------------------------------------------


def _slice_conv_out(conv: nn.Conv2d, idx: torch.Tensor) -> None:
    conv.weight = nn.Parameter(conv.weight.data[idx].clone(), requires_grad=conv.weight.requires_grad)
    if conv.bias is not None:
        conv.bias = nn.Parameter(conv.bias.data[idx].clone(), requires_grad=conv.bias.requires_grad)
    conv.out_channels = len(idx)


def _slice_conv_in(conv: nn.Conv2d, idx: torch.Tensor) -> None:
    conv.weight = nn.Parameter(conv.weight.data[:, idx].clone(), requires_grad=conv.weight.requires_grad)
    conv.in_channels = len(idx)


def _slice_bn(bn: nn.BatchNorm2d, idx: torch.Tensor) -> None:
    bn.weight = nn.Parameter(bn.weight.data[idx].clone(), requires_grad=bn.weight.requires_grad)
    bn.bias = nn.Parameter(bn.bias.data[idx].clone(), requires_grad=bn.bias.requires_grad)
    bn.running_mean = bn.running_mean[idx].clone()
    bn.running_var = bn.running_var[idx].clone()
    bn.num_features = len(idx)


def _slice_linear(layer: nn.Linear, rows=None, cols=None) -> None:
    w = layer.weight.data
    if rows is not None:
        w = w[rows]
        if layer.bias is not None:
            layer.bias = nn.Parameter(layer.bias.data[rows].clone(), requires_grad=layer.bias.requires_grad)
        layer.out_features = len(rows)
    if cols is not None:
        w = w[:, cols]
        layer.in_features = len(cols)
    layer.weight = nn.Parameter(w.clone(), requires_grad=layer.weight.requires_grad)


def apply_kept(model, kept: Sequence[dict[str, list[int]]]) -> None:
    """Slice ``model`` in place to the kept filter indices (one dict per extractor)."""
    widths = [e.out_channels for e in model.stack.extractors]
    out_keep = []
    for extractor, layer_kept in zip(model.stack.extractors, kept):
        out = list(range(extractor.out_channels))
        for unit in extractor.prunable_units():
            if unit.name not in layer_kept:
                continue
            idx = torch.as_tensor(layer_kept[unit.name], dtype=torch.long)
            _slice_conv_out(unit.conv, idx)
            _slice_bn(unit.bn, idx)
            if unit.consumer is not None:
                _slice_conv_in(unit.consumer, idx)
            else:
                out = [out[i] for i in layer_kept[unit.name]]
        out_keep.append(out)

    offsets = np.cumsum([0] + widths)
    fused = [int(offsets[i] + c) for i, cols in enumerate(out_keep) for c in cols]
    if len(fused) != model.fusion.channels:
        idx = torch.as_tensor(fused, dtype=torch.long)
        _slice_linear(model.fusion.channel.fc1, cols=idx)
        _slice_linear(model.fusion.channel.fc2, rows=idx)
        model.fusion.channels = len(fused)
        _slice_linear(model.classifier.fc, cols=idx)


@dataclass
class PruneResult:
    model: object
    kept: list[dict[str, list[int]]]
    params_before: int
    params_after: int

    @property
    def ratio(self) -> float:
        return self.params_before / self.params_after

    def manifest(self) -> dict:
        return {
            "params_before": self.params_before,
            "params_after": self.params_after,
            "shrink": self.ratio,
            "kept": self.kept,
        }


def _select(model, config: PruneConfig, extractors: Sequence[int] | None, fake: bool) -> list[dict]:
    kept = []
    for i, extractor in enumerate(model.stack.extractors):
        layer_kept: dict[str, list[int]] = {}
        if extractors is None or i in extractors:
            for unit in extractor.prunable_units():
                n = unit.conv.out_channels
                if n < 2:
                    continue
                if fake:
                    n_remove = min(int(np.floor(config.ratio * n + 1e-9)), n - 1)
                    keep = list(range(n - n_remove))
                else:
                    keep, _ = prune_layer(unit.conv.weight.data, config)
                if len(keep) < n:
                    layer_kept[unit.name] = keep
        kept.append(layer_kept)
    return kept


def prune_model(model, config: PruneConfig, extractors: Sequence[int] | None = None) -> PruneResult:
    """Return a pruned copy of ``model``; the original is untouched.

    ``extractors`` restricts pruning to the given stack indices (default: all).
    """
    before = model.parameter_count()
    pruned = copy.deepcopy(model)
    kept = _select(pruned, config, extractors, fake=False)
    apply_kept(pruned, kept)
    pruned.rescore = model.rescore
    after = pruned.parameter_count()
    logger.info("pruned %d -> %d parameters (%.2fx)", before, after, before / after)
    return PruneResult(pruned, kept, before, after)


def count_after_ratio(model, ratio: float) -> int:
    """Parameter count ``prune_model`` would produce at ``ratio`` (no median computation)."""
    probe = copy.deepcopy(model)
    apply_kept(probe, _select(probe, PruneConfig("ratio", ratio), None, fake=True))
    return probe.parameter_count()


def ratio_for_shrink(model, target: float = 4.0, grid: int = 96) -> float:
    """Per-layer ratio whose parameter shrink factor is closest to ``target``."""
    before = model.parameter_count()
    best_ratio, best_gap = 0.0, float("inf")
    for ratio in np.linspace(0.0, 0.95, grid):
        gap = abs(before / count_after_ratio(model, float(ratio)) - target)
        if gap < best_gap:
            best_ratio, best_gap = float(ratio), gap
    return round(best_ratio, 6)


def lite_config(model, target: float = 4.0) -> PruneConfig:
    return PruneConfig("ratio", ratio_for_shrink(model, target))


def recovery_tune(model, images: torch.Tensor, labels: torch.Tensor, epochs: int = 1, lr: float = 0.01, batch_size: int = 64, seed: int = 0):
    """Short cross-entropy fine-tune of a pruned model on the given samples."""
    gen = torch.Generator().manual_seed(seed)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.SGD(params, lr=lr, momentum=0.9)
    model.train()
    for _ in range(epochs):
        perm = torch.randperm(len(labels), generator=gen)
        for start in range(0, len(perm), batch_size):
            idx = perm[start : start + batch_size]
            loss = nn.functional.cross_entropy(model(images[idx]), labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    model.eval()
    return model
