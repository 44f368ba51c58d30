"""Datasets as in-memory tensors.

Sample ids are row indices into ``train_x``; test rows are only used for
evaluation.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, InputError

DATA_ROOT_ENV = "TCIL_DATA_ROOT"

CIFAR_MEAN = {
    "cifar10": (0.4914, 0.4822, 0.4465),
    "cifar100": (0.5071, 0.4865, 0.4409),
}
CIFAR_STD = {
    "cifar10": (0.2470, 0.2435, 0.2616),
    "cifar100": (0.2673, 0.2564, 0.2762),
}


@dataclass
class ImageDataset:
    name: str
    train_x: torch.Tensor
    train_y: torch.Tensor
    test_x: torch.Tensor
    test_y: torch.Tensor

    @property
    def num_classes(self) -> int:
        return int(torch.cat([self.train_y, self.test_y]).max()) + 1

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.train_x.shape[1:])

    def train_labels(self) -> dict[int, int]:
        return {i: int(y) for i, y in enumerate(self.train_y.tolist())}


def make_gaussian_images(
    num_classes: int = 10,
    image_size: int = 32,
    channels: int = 3,
    train_per_class: int = 200,
    test_per_class: int = 100,
    noise: float = 1.0,
    template_res: int = 4,
    shared: float = 0.0,
    max_shift: int = 2,
    seed: int = 0,
) -> ImageDataset:
    """Gaussian images around smooth per-class templates.

    Each class template is a ``template_res x template_res`` Gaussian field
    upsampled to ``image_size``. With ``shared > 0`` every template is mixed
    with one common field, which makes classes harder to tell apart. Samples
    are the template rolled by up to ``max_shift`` pixels plus i.i.d. noise of
    standard deviation ``noise``.
    """
    gen = torch.Generator().manual_seed(seed)

    def field(n):
        low = torch.randn(n, channels, template_res, template_res, generator=gen)
        up = F.interpolate(low, size=(image_size, image_size), mode="bicubic", align_corners=False)
        return up / up.flatten(1).std(dim=1)[:, None, None, None]

    templates = field(num_classes)
    if shared > 0:
        common = field(1)
        templates = (1 - shared) * templates + shared * common
        templates = templates / templates.flatten(1).std(dim=1)[:, None, None, None]

    def draw(per_class):
        xs, ys = [], []
        for c in range(num_classes):
            base = templates[c].expand(per_class, -1, -1, -1).clone()
            if max_shift:
                shifts = torch.randint(-max_shift, max_shift + 1, (per_class, 2), generator=gen)
                for i, (dy, dx) in enumerate(shifts.tolist()):
                    base[i] = torch.roll(base[i], shifts=(dy, dx), dims=(1, 2))
            xs.append(base + noise * torch.randn(base.shape, generator=gen))
            ys.append(torch.full((per_class,), c, dtype=torch.long))
        return torch.cat(xs), torch.cat(ys)

    train_x, train_y = draw(train_per_class)
    test_x, test_y = draw(test_per_class)
    return ImageDataset("gaussian", train_x, train_y, test_x, test_y)


def data_root(root: str | os.PathLike | None) -> Path:
    """Resolve the dataset root; the ``TCIL_DATA_ROOT`` environment variable wins."""
    env = os.environ.get(DATA_ROOT_ENV)
    if env:
        return Path(env)
    if root is None:
        raise ConfigError(f"dataset root not given and {DATA_ROOT_ENV} unset")
    return Path(root)


def load_torchvision(name: str, root: str | os.PathLike | None) -> ImageDataset:
    """CIFAR10/CIFAR100 from a local torchvision layout, normalized per channel.

    Files are never downloaded.
    """
    try:
        from torchvision import datasets
    except ImportError as exc:  # pragma: no cover - optional dependency
        raise ConfigError("torchvision is required for CIFAR datasets") from exc
    cls = {"cifar10": datasets.CIFAR10, "cifar100": datasets.CIFAR100}.get(name)
    if cls is None:
        raise ConfigError(f"unknown dataset {name!r}")
    root = data_root(root)
    mean = torch.tensor(CIFAR_MEAN[name])[None, :, None, None]
    std = torch.tensor(CIFAR_STD[name])[None, :, None, None]

    def split(train):
        try:
            ds = cls(str(root), train=train, download=False)
        except RuntimeError as exc:
            raise InputError(f"{name} not found under {root} (set dataset_root or ${DATA_ROOT_ENV}): {exc}") from None
        x = torch.from_numpy(np.asarray(ds.data)).permute(0, 3, 1, 2).float() / 255.0
        return (x - mean) / std, torch.as_tensor(ds.targets, dtype=torch.long)

    train_x, train_y = split(True)
    test_x, test_y = split(False)
    return ImageDataset(name, train_x, train_y, test_x, test_y)


def load_dataset(descriptor: dict) -> ImageDataset:
    """Build a dataset from a config descriptor (``dataset`` key selects the loader)."""
    name = descriptor.get("dataset", "gaussian")
    if name == "gaussian":
        return make_gaussian_images(
            num_classes=descriptor.get("num_classes", 10),
            image_size=descriptor.get("image_size", 32),
            channels=descriptor.get("channels", 3),
            train_per_class=descriptor.get("train_per_class", 200),
            test_per_class=descriptor.get("test_per_class", 100),
            noise=descriptor.get("noise", 1.0),
            template_res=descriptor.get("template_res", 4),
            shared=descriptor.get("shared", 0.0),
            max_shift=descriptor.get("max_shift", 2),
            seed=descriptor.get("data_seed", 0),
        )
    return load_torchvision(name, descriptor.get("dataset_root"))
