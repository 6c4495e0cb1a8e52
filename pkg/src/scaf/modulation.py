"""Prior-driven feature modulation followed by coordinate attention."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


def response(mp: torch.Tensor, ap: torch.Tensor, alpha, beta, eps: float = 1e-6) -> torch.Tensor:
    """Manipulated-region probability ``alpha*MP / (alpha*MP + beta*AP + eps)``."""
    if mp.shape != ap.shape:
        raise ValueError(f"prior shapes differ: {tuple(mp.shape)} vs {tuple(ap.shape)}")
    num = alpha * mp
    return num / (num + beta * ap + eps)


class CoordinateAttention(nn.Module):
    """Factorised H/W pooled attention (Hou et al. style).

    ``bypass=True`` forces both attention maps to 1, turning the block into the
    identity; tests use it to isolate the surrounding projection.
    """

    def __init__(self, channels: int, reduction: int = 8, min_mid: int = 8):
        super().__init__()
        mid = max(min_mid, channels // reduction)
        self.reduce = nn.Sequential(
            nn.Conv2d(channels, mid, 1, bias=False),
            nn.BatchNorm2d(mid),
            nn.ReLU(inplace=True),
        )
        self.attn_h = nn.Conv2d(mid, channels, 1)
        self.attn_w = nn.Conv2d(mid, channels, 1)
        self.bypass = False

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.bypass:
            return x
        h, w = x.shape[-2:]
        pooled_h = x.mean(dim=-1, keepdim=True)                    # N C H 1
        pooled_w = x.mean(dim=-2, keepdim=True).transpose(-1, -2)  # N C W 1
        y = self.reduce(torch.cat([pooled_h, pooled_w], dim=2))
        y_h, y_w = torch.split(y, [h, w], dim=2)
        a_h = torch.sigmoid(self.attn_h(y_h))                      # N C H 1
        a_w = torch.sigmoid(self.attn_w(y_w.transpose(-1, -2)))    # N C 1 W
        return x * a_h * a_w


class FeatureModulation(nn.Module):
    """One backbone stage: priors -> response G -> residual modulation -> CA.

    alpha/beta start at 1 and gamma at 0, so an untrained block passes the
    stage features through a 1x1 projection only.
    """

    def __init__(self, channels: int, reduction: int = 8, eps: float = 1e-6,
                 alpha: float = 1.0, beta: float = 1.0, gamma: float = 0.0):
        super().__init__()
        if eps <= 0:
            raise ValueError("epsilon must be positive")
        self.eps = eps
        self.alpha = nn.Parameter(torch.tensor(float(alpha)))
        self.beta = nn.Parameter(torch.tensor(float(beta)))
        self.gamma = nn.Parameter(torch.tensor(float(gamma)))
        self.enhance = nn.Sequential(nn.Conv2d(1, channels, 1), nn.BatchNorm2d(channels), nn.Sigmoid())
        self.proj = nn.Conv2d(channels, channels, 1)
        self.attention = CoordinateAttention(2 * channels, reduction)
        self.out = nn.Conv2d(2 * channels, channels, 1)

    @torch.no_grad()
    def clamp_(self):
        self.alpha.clamp_(min=0.0)
        self.beta.clamp_(min=0.0)

    def response(self, mp, ap):
        return response(mp, ap, self.alpha, self.beta, self.eps)

    def modulate(self, f: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
        if g.shape[-2:] != f.shape[-2:]:
            raise ValueError(f"response size {tuple(g.shape[-2:])} != feature size {tuple(f.shape[-2:])}")
        ge = self.enhance(g)
        return self.proj(f + self.gamma * ge * f)

    def coord_attention(self, big_f: torch.Tensor, f: torch.Tensor) -> torch.Tensor:
        return self.out(self.attention(torch.cat([big_f, f], dim=1)))

    def forward(self, f: torch.Tensor, mp: torch.Tensor, ap: torch.Tensor) -> torch.Tensor:
        size = f.shape[-2:]
        if mp.shape[-2:] != size:
            mp = F.interpolate(mp, size=size, mode="bilinear", align_corners=False)
            ap = F.interpolate(ap, size=size, mode="bilinear", align_corners=False)
        g = self.response(mp.to(f.dtype), ap.to(f.dtype))
        return self.coord_attention(self.modulate(f, g), f)
