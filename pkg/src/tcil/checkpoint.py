"""Portable model checkpoints.

A checkpoint is a directory holding

``arrays.npz``
    every parameter and buffer, keyed by its state-dict name;
``manifest.json``
    architecture (per-extractor widths, fusion and classifier sizes), task
    sizes, re-scoring state, optional pruning manifest, and the sha256 of
    ``arrays.npz``.

Nothing framework-specific is pickled, so another implementation can rebuild
the network from the manifest and the named arrays.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from .backbones import build_extractor
from .errors import IntegrityError
from .model import ExtractorStack, FusionModule, GrowingClassifier, RescoreState, TCILModel

FORMAT = "tcil-checkpoint/1"
ARRAYS = "arrays.npz"
MANIFEST = "manifest.json"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_checkpoint(model: TCILModel, path: str | Path, metadata: dict | None = None, pruning: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    arrays = path / ARRAYS
    with open(arrays, "wb") as fh:
        np.savez(fh, **state)
    manifest = {
        "format": FORMAT,
        "step": model.num_tasks,
        "arch": model.arch,
        "reduction": model.reduction,
        "use_fusion": model.use_fusion,
        "expand_extractors": model.expand_extractors,
        "extractors": [e.arch() for e in model.stack.extractors],
        "frozen": list(model.stack.frozen),
        "fusion": {
            "channels": model.fusion.channels,
            "hidden": model.fusion.hidden,
            "kernel_size": model.fusion.spatial.conv.kernel_size[0],
            "enabled": model.fusion.enabled,
        },
        "classifier": {
            "in_features": model.classifier.in_features,
            "num_classes": model.classifier.num_classes,
            "bias": model.classifier.has_bias,
        },
        "task_sizes": list(model.task_sizes),
        "rescore": None
        if model.rescore is None
        else {"gamma": model.rescore.gamma, "old_count": model.rescore.old_count, "new_count": model.rescore.new_count},
        "pruning": pruning,
        "dtype": str(next(model.parameters()).dtype).replace("torch.", ""),
        "arrays": {k: {"shape": list(v.shape), "dtype": str(v.dtype)} for k, v in state.items()},
        "sha256": _sha256(arrays),
        "metadata": metadata or {},
    }
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path: str | Path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except FileNotFoundError:
        raise IntegrityError(f"{path}: missing {MANIFEST}") from None
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"{path}: corrupt {MANIFEST}: {exc}") from None
    if manifest.get("format") != FORMAT:
        raise IntegrityError(f"{path}: unsupported checkpoint format {manifest.get('format')!r}")
    return manifest


def load_checkpoint(path: str | Path) -> tuple[TCILModel, dict]:
    """Rebuild the model stored at ``path``; returns ``(model, manifest)``."""
    path = Path(path)
    manifest = read_manifest(path)
    arrays = path / ARRAYS
    if not arrays.exists():
        raise IntegrityError(f"{path}: missing {ARRAYS}")
    if _sha256(arrays) != manifest["sha256"]:
        raise IntegrityError(f"{path}: {ARRAYS} does not match the manifest checksum")

    model = TCILModel(
        manifest["arch"],
        manifest["task_sizes"][0],
        reduction=manifest["reduction"],
        use_fusion=manifest["use_fusion"],
        expand_extractors=manifest["expand_extractors"],
    )
    model.stack = ExtractorStack([build_extractor(a) for a in manifest["extractors"]])
    fus = manifest["fusion"]
    model.fusion = FusionModule(
        fus["channels"], manifest["reduction"], fus["kernel_size"], fus["enabled"], hidden=fus["hidden"]
    )
    clf = manifest["classifier"]
    model.classifier = GrowingClassifier(clf["in_features"], clf["num_classes"], clf.get("bias", False))
    model.task_sizes = list(manifest["task_sizes"])
    model.to(getattr(torch, manifest.get("dtype", "float32")))

    try:
        with np.load(arrays) as data:
            state = {k: torch.from_numpy(data[k].copy()) for k in data.files}
        model.load_state_dict(state, strict=True)
    except (RuntimeError, ValueError, KeyError, OSError) as exc:
        raise IntegrityError(f"{path}: arrays do not fit the manifest architecture: {exc}") from None

    for i, frozen in enumerate(manifest["frozen"]):
        if frozen:
            model.stack.freeze(i)
    if manifest["rescore"] is not None:
        model.rescore = RescoreState(**manifest["rescore"])
    model.eval()
    return model, manifest
