"""Gated adaptive fusion: pairwise stage merge, 4-way channel split with
progressive gated fusion, and the prediction heads."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

ENHANCE_MODES = ("attention", "plain")
DIFF_MODES = ("post_residual", "pre_residual")


def conv3(c_in: int, c_out: int) -> nn.Conv2d:
    return nn.Conv2d(c_in, c_out, 3, padding=1)


def conv1(c_in: int, c_out: int, bias: bool = True) -> nn.Conv2d:
    return nn.Conv2d(c_in, c_out, 1, bias=bias)


def split4(ex: torch.Tensor) -> list[torch.Tensor]:
    c = ex.shape[1]
    if c % 4:
        raise ValueError(f"channel count {c} is not divisible by 4")
    return list(torch.split(ex, c // 4, dim=1))


class FusePair(nn.Module):
    """Merge a stage map with the next (coarser) one: upsample, project, add, conv3."""

    def __init__(self, c_hi: int, c_lo: int):
        super().__init__()
        if c_hi % 4:
            raise ValueError(f"fused width {c_hi} must be divisible by 4")
        self.proj = conv1(c_lo, c_hi, bias=False)
        self.conv = conv3(c_hi, c_hi)

    def forward(self, x_hi: torch.Tensor, x_lo: torch.Tensor) -> torch.Tensor:
        if tuple(x_lo.shape[-2:]) != (x_hi.shape[-2] // 2, x_hi.shape[-1] // 2):
            raise ValueError(f"coarse map {tuple(x_lo.shape[-2:])} is not half of {tuple(x_hi.shape[-2:])}")
        up = F.interpolate(x_lo, size=x_hi.shape[-2:], mode="bilinear", align_corners=False)
        return self.conv(x_hi + self.proj(up))


@dataclass
class GateOutputs:
    L: torch.Tensor
    C: torch.Tensor
    theta: torch.Tensor
    O: torch.Tensor
    Me: torch.Tensor
    D: torch.Tensor
    ey: torch.Tensor


class GatedModulation(nn.Module):
    """Local/context branches, a per-pixel scalar gate, and a reverse-mask
    difference path.

    ``theta_override`` pins the gate to a constant (test hook).
    """

    def __init__(self, channels: int, enhance: str = "attention", diff: str = "post_residual"):
        super().__init__()
        if enhance not in ENHANCE_MODES:
            raise ValueError(f"enhance mode must be one of {ENHANCE_MODES}")
        if diff not in DIFF_MODES:
            raise ValueError(f"diff mode must be one of {DIFF_MODES}")
        self.enhance, self.diff = enhance, diff
        self.local1, self.local2 = conv3(channels, channels), conv3(channels, channels)
        self.ctx1, self.ctx2 = conv3(channels, channels), conv3(channels, channels)
        self.gate = conv1(2 * channels, 1)
        self.out = conv1(channels, channels)
        self.theta_override: Optional[float] = None

    def gates(self, y: torch.Tensor) -> GateOutputs:
        L = self.local2(F.relu(self.local1(y)))
        C = self.ctx2(F.relu(self.ctx1(L + y)))
        if self.theta_override is None:
            theta = torch.sigmoid(self.gate(torch.cat([L, C], dim=1)))
        else:
            theta = torch.full_like(y[:, :1], float(self.theta_override))
        O = y + theta * L + (1 - theta) * C
        A = torch.sigmoid(O)
        background = (1 - A) * C
        boost = A * L if self.enhance == "attention" else L
        Me = O + boost
        D = Me - background if self.diff == "post_residual" else boost - background
        ey = self.out(Me + D)
        return GateOutputs(L, C, theta, O, Me, D, ey)

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        return self.gates(y).ey


def progressive_widths(channels: int) -> list[int]:
    """Input width of the k-th 3x3 conv in the progressive flow."""
    g = channels // 4
    return [(4 - k) * g + (g if k > 0 else 0) for k in range(4)]


class ProgressiveFusion(nn.Module):
    """Channel split into 4 groups, fused step by step: step k sees groups k..3
    and the previous step's gated output."""

    def __init__(self, channels: int, enhance: str = "attention", diff: str = "post_residual"):
        super().__init__()
        if channels % 4:
            raise ValueError(f"channel count {channels} is not divisible by 4")
        g = channels // 4
        self.convs = nn.ModuleList(conv3(c_in, g) for c_in in progressive_widths(channels))
        self.gmms = nn.ModuleList(GatedModulation(g, enhance, diff) for _ in range(4))

    def steps(self, ex: torch.Tensor):
        groups = split4(ex)
        ys, eys = [], []
        for k in range(4):
            parts = groups[k:] + ([eys[-1]] if k > 0 else [])
            y = self.convs[k](torch.cat(parts, dim=1))
            ys.append(y)
            eys.append(self.gmms[k](y))
        return ys, eys

    def forward(self, ex: torch.Tensor) -> torch.Tensor:
        _, eys = self.steps(ex)
        return torch.cat(eys, dim=1)


class GAFM(nn.Module):
    def __init__(self, c_hi: int, c_lo: int, enhance: str = "attention", diff: str = "post_residual"):
        super().__init__()
        self.pair = FusePair(c_hi, c_lo)
        self.cfem = ProgressiveFusion(c_hi, enhance, diff)

    def forward(self, x_hi, x_lo):
        return self.cfem(self.pair(x_hi, x_lo))


class Head(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = conv1(channels, 1)

    def forward(self, x, size):
        return F.interpolate(self.conv(x), size=size, mode="bilinear", align_corners=False)
