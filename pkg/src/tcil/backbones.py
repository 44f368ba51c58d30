"""Convolutional feature extractors.

Each extractor maps an image batch ``[B, C_in, H, W]`` to a feature map
``[B, C_f, h, w]``. Both backbones expose ``prunable_units()`` so the pruning
code can remove filters without knowing the architecture.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn


@dataclass
class PrunableUnit:
    """A conv whose output filters can be removed.

    ``bn`` follows ``conv``; ``consumer`` is the next conv reading its
    channels, or ``None`` when the conv produces the extractor output.
    """

    name: str
    conv: nn.Conv2d
    bn: nn.BatchNorm2d
    consumer: nn.Conv2d | None


class ConvBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, pool: bool):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False)
        self.bn = nn.BatchNorm2d(out_ch)
        self.pool = pool

    def forward(self, x):
        x = torch.relu(self.bn(self.conv(x)))
        return nn.functional.max_pool2d(x, 2) if self.pool else x


class ConvExtractor(nn.Module):
    """Small VGG-style extractor: conv-bn-relu blocks, 2x2 max-pool between them.

    The default ``widths=(32, 64, 64)`` turns a 32x32 image into a
    ``[64, 8, 8]`` map.
    """

    kind = "convnet"

    def __init__(self, in_channels: int = 3, widths: Sequence[int] = (32, 64, 64)):
        super().__init__()
        widths = [int(w) for w in widths]
        self.in_channels = in_channels
        chans = [in_channels] + widths
        self.blocks = nn.ModuleList(
            ConvBlock(chans[i], chans[i + 1], pool=i < len(widths) - 1)
            for i in range(len(widths))
        )

    @property
    def widths(self) -> list[int]:
        return [b.conv.out_channels for b in self.blocks]

    @property
    def out_channels(self) -> int:
        return self.blocks[-1].conv.out_channels

    def arch(self) -> dict:
        return {"kind": self.kind, "in_channels": self.in_channels, "widths": self.widths}

    def forward(self, x):
        for block in self.blocks:
            x = block(x)
        return x

    def prunable_units(self) -> list[PrunableUnit]:
        units = []
        for i, block in enumerate(self.blocks):
            nxt = self.blocks[i + 1].conv if i + 1 < len(self.blocks) else None
            units.append(PrunableUnit(f"blocks.{i}", block.conv, block.bn, nxt))
        return units


class BasicBlock(nn.Module):
    def __init__(self, in_ch: int, mid_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, mid_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(mid_ch)
        self.conv2 = nn.Conv2d(mid_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False), nn.BatchNorm2d(out_ch)
            )

    def forward(self, x):
        out = torch.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return torch.relu(out + self.shortcut(x))


class ResNet18Extractor(nn.Module):
    """CIFAR-style ResNet-18 trunk (3x3 stem, no stem pooling), 512 output channels.

    ``mid_widths`` lists the inner width of each of the eight basic blocks;
    only those inner channels are prunable so residual sums stay aligned.
    """

    kind = "resnet18"
    stage_widths = (64, 128, 256, 512)

    def __init__(self, in_channels: int = 3, mid_widths: Sequence[int] | None = None):
        super().__init__()
        self.in_channels = in_channels
        if mid_widths is None:
            mid_widths = [w for w in self.stage_widths for _ in range(2)]
        mid_widths = [int(w) for w in mid_widths]
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, 64, 3, padding=1, bias=False), nn.BatchNorm2d(64), nn.ReLU()
        )
        blocks = []
        in_ch = 64
        for s, width in enumerate(self.stage_widths):
            for b in range(2):
                stride = 2 if (s > 0 and b == 0) else 1
                blocks.append(BasicBlock(in_ch, mid_widths[2 * s + b], width, stride))
                in_ch = width
        self.blocks = nn.ModuleList(blocks)

    @property
    def widths(self) -> list[int]:
        return [b.conv1.out_channels for b in self.blocks]

    @property
    def out_channels(self) -> int:
        return self.stage_widths[-1]

    def arch(self) -> dict:
        return {"kind": self.kind, "in_channels": self.in_channels, "widths": self.widths}

    def forward(self, x):
        x = self.stem(x)
        for block in self.blocks:
            x = block(x)
        return x

    def prunable_units(self) -> list[PrunableUnit]:
        return [
            PrunableUnit(f"blocks.{i}.conv1", b.conv1, b.bn1, b.conv2)
            for i, b in enumerate(self.blocks)
        ]


def build_extractor(arch: dict) -> nn.Module:
    kind = arch.get("kind", "convnet")
    if kind == "convnet":
        return ConvExtractor(arch.get("in_channels", 3), arch.get("widths", (32, 64, 64)))
    if kind == "resnet18":
        return ResNet18Extractor(arch.get("in_channels", 3), arch.get("widths"))
    raise ValueError(f"unknown extractor kind {kind!r}")
