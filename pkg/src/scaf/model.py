"""Full network: backbone -> per-stage prior modulation -> three gated fusion
levels -> three logit heads."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn

from .backbone import DEFAULT_WIDTHS, ToyBackbone, check_input_size, check_widths
from .fusion import GAFM, Head
from .modulation import FeatureModulation


@dataclass
class PredictionBundle:
    m1: torch.Tensor  # primary logits, N x 1 x H x W
    m2: torch.Tensor
    m3: torch.Tensor
    m1_aug: Optional[torch.Tensor] = None

    def heads(self):
        return (self.m1, self.m2, self.m3)


class SCAF(nn.Module):
    def __init__(self, widths: Sequence[int] = DEFAULT_WIDTHS, backbone: Optional[nn.Module] = None,
                 reduction: int = 8, eps: float = 1e-6, alpha: float = 1.0, beta: float = 1.0,
                 gamma: float = 0.0, enhance: str = "attention", diff: str = "post_residual"):
        super().__init__()
        self.widths = check_widths(widths)
        self.backbone = backbone if backbone is not None else ToyBackbone(self.widths)
        self.fmm = nn.ModuleList(FeatureModulation(c, reduction, eps, alpha, beta, gamma)
                                 for c in self.widths)
        # level 0 merges stages 1+2 and feeds the primary head
        self.gafm = nn.ModuleList(GAFM(self.widths[i], self.widths[i + 1], enhance, diff)
                                  for i in range(3))
        self.heads = nn.ModuleList(Head(self.widths[i]) for i in range(3))

    def clamp_(self):
        for m in self.fmm:
            m.clamp_()

    def stage_outputs(self, image, mp, ap) -> list[torch.Tensor]:
        feats = self.backbone(image)
        return [m(f, mp, ap) for m, f in zip(self.fmm, feats)]

    def forward(self, image: torch.Tensor, mp: torch.Tensor, ap: torch.Tensor) -> PredictionBundle:
        check_input_size(*image.shape[-2:])
        xs = self.stage_outputs(image, mp, ap)
        size = image.shape[-2:]
        logits = [head(g(xs[i], xs[i + 1]), size)
                  for i, (g, head) in enumerate(zip(self.gafm, self.heads))]
        return PredictionBundle(*logits)
