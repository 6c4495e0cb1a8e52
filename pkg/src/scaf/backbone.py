"""Multi-scale feature extractors.

Any module returning four stage maps with strides 4, 8, 16 and 32 can stand in
for the default convnet; the rest of the model only relies on that contract.
"""
from __future__ import annotations

from typing import Sequence

import torch
import torch.nn as nn

DEFAULT_WIDTHS = (32, 64, 128, 256)
STRIDES = (4, 8, 16, 32)
SEMANTIC_DIM = 256


def check_widths(widths: Sequence[int]) -> tuple[int, ...]:
    widths = tuple(int(c) for c in widths)
    if len(widths) != 4:
        raise ValueError(f"expected 4 stage widths, got {len(widths)}")
    for c in widths:
        if c <= 0 or c % 4:
            raise ValueError(f"stage widths must be positive multiples of 4, got {widths}")
    return widths


def check_input_size(h: int, w: int, multiple: int = STRIDES[-1]) -> None:
    if h % multiple or w % multiple:
        raise ValueError(f"input size {h}x{w} must be divisible by {multiple}")


NORMS = ("group", "batch")


def _norm(channels: int, kind: str) -> nn.Module:
    if kind == "group":
        groups = max(1, min(8, channels // 4))
        while channels % groups:
            groups -= 1
        return nn.GroupNorm(groups, channels)
    if kind == "batch":
        return nn.BatchNorm2d(channels)
    raise ValueError(f"norm must be one of {NORMS}, got {kind!r}")


def conv_block(c_in: int, c_out: int, stride: int = 1, norm: str = "group") -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False),
        _norm(c_out, norm),
        nn.ReLU(inplace=True),
    )


class ToyBackbone(nn.Module):
    """Small convnet on the PVTv2 stride schedule: a stride-4 stem, then four
    stages of two conv-norm-relu blocks, stages 2-4 downsampling by 2.

    Outputs are post-ReLU, so every feature is nonnegative.
    """

    def __init__(self, widths: Sequence[int] = DEFAULT_WIDTHS, in_channels: int = 3,
                 norm: str = "group"):
        super().__init__()
        self.widths = check_widths(widths)
        c1 = self.widths[0]
        self.stem = nn.Sequential(conv_block(in_channels, c1 // 2, 2, norm),
                                  conv_block(c1 // 2, c1, 2, norm))
        stages = []
        c_prev = c1
        for i, c in enumerate(self.widths):
            stride = 1 if i == 0 else 2
            stages.append(nn.Sequential(conv_block(c_prev, c, stride, norm), conv_block(c, c, norm=norm)))
            c_prev = c
        self.stages = nn.ModuleList(stages)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        check_input_size(*x.shape[-2:])
        x = self.stem(x)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


def extract(backbone: nn.Module, image: torch.Tensor) -> list[torch.Tensor]:
    """Run ``backbone`` on an N x 3 x H x W batch (or a single 3 x H x W image)."""
    single = image.dim() == 3
    feats = backbone(image.unsqueeze(0) if single else image)
    return [f[0] for f in feats] if single else feats


class SemanticReducer(nn.Module):
    """Global average pooling followed by a linear projection to 256-d.

    Because the projection is affine, ``forward(f)`` equals the spatial mean of
    ``local(f)``; the discriminator uses the per-location form as the semantic
    key of each patch.
    """

    def __init__(self, in_channels: int, dim: int = SEMANTIC_DIM):
        super().__init__()
        self.proj = nn.Linear(in_channels, dim)

    def forward(self, feature: torch.Tensor) -> torch.Tensor:
        # feature: (..., C, H, W) -> (..., dim)
        return self.proj(feature.mean(dim=(-2, -1)))

    def local(self, feature: torch.Tensor) -> torch.Tensor:
        # (..., C, H, W) -> (..., H, W, dim)
        return self.proj(feature.movedim(-3, -1))


def reduce_semantic(reducer: SemanticReducer, feature: torch.Tensor) -> torch.Tensor:
    return reducer(feature)
