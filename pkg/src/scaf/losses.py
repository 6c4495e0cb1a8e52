"""Weak-supervision objective: partial cross-entropy, context affinity,
structural consistency and confidence-aware entropy minimisation."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F

from .dataio import MANIPULATED_SCRIBBLE, UNLABELED, AugmentationSpec, apply_transform

SC_MODES = ("l1_ssim", "l1")


@dataclass
class CEMConfig:
    w_max: float = 0.1
    w_weak: float = 0.1
    entropy_threshold: float = 0.5  # nats
    ramp: int = 20
    eps: float = 1e-8

    def __post_init__(self):
        if not self.entropy_threshold < math.log(2):
            raise ValueError(f"entropy threshold {self.entropy_threshold} must be below ln 2")
        if self.ramp < 1:
            raise ValueError(f"ramp must be >= 1, got {self.ramp}")


@dataclass
class LossConfig:
    ca_window: int = 5
    sigma_rgb: float = 0.1
    sigma_xy: float = 3.0
    sc_mode: str = "l1_ssim"
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    cem: CEMConfig = field(default_factory=CEMConfig)

    def __post_init__(self):
        if isinstance(self.cem, dict):
            self.cem = CEMConfig(**self.cem)
        if self.sc_mode not in SC_MODES:
            raise ValueError(f"sc_mode must be one of {SC_MODES}, got {self.sc_mode!r}")


@dataclass
class LossReport:
    """Scalar summary of one step. ``pce`` and ``ca`` are summed over the
    primary and both auxiliary heads, so ``total`` is their plain sum."""
    pce: float
    ca: float
    sc: float
    cem_un: float
    cem_la: float
    lambda_t: float
    total: float

    def as_dict(self):
        return asdict(self)


def _labels(scribble, like: torch.Tensor) -> torch.Tensor:
    labels = getattr(scribble, "labels", scribble)
    labels = torch.as_tensor(labels)
    return labels.reshape(like.shape) if labels.numel() == like.numel() else labels


def pce(logits: torch.Tensor, scribble) -> torch.Tensor:
    """Binary cross-entropy over scribbled pixels only (0 when none are)."""
    labels = _labels(scribble, logits)
    if labels.shape != logits.shape:
        raise ValueError(f"scribble shape {tuple(labels.shape)} != logits {tuple(logits.shape)}")
    labeled = labels != UNLABELED
    if not labeled.any():
        return logits.sum() * 0.0
    target = (labels[labeled] == MANIPULATED_SCRIBBLE).to(logits.dtype)
    return F.binary_cross_entropy_with_logits(logits[labeled], target)


def _offsets(window: int):
    r = window // 2
    return [(dy, dx) for dy in range(0, r + 1) for dx in range(-r, r + 1)
            if dy > 0 or (dy == 0 and dx > 0)]


def ca(probs: torch.Tensor, image: torch.Tensor, window: int = 5, sigma_rgb: float = 0.1,
       sigma_xy: float = 3.0) -> torch.Tensor:
    """Mean over all in-window pixel pairs of ``k_rgbxy(i, j) * |p_i - p_j|``.

    ``probs`` is N x 1 x H x W, ``image`` N x 3 x H x W. Each unordered pair is
    counted once.
    """
    h, w = probs.shape[-2:]
    image = image.to(probs.dtype)
    total = probs.new_zeros(())
    pairs = 0
    for dy, dx in _offsets(window):
        ys, ye = 0, h - dy
        xs, xe = max(0, -dx), min(w, w - dx)
        if ye <= ys or xe <= xs:
            continue
        p_a = probs[..., ys:ye, xs:xe]
        p_b = probs[..., ys + dy:ye + dy, xs + dx:xe + dx]
        i_a = image[..., ys:ye, xs:xe]
        i_b = image[..., ys + dy:ye + dy, xs + dx:xe + dx]
        colour = ((i_a - i_b) ** 2).sum(dim=1, keepdim=True)
        kernel = torch.exp(-colour / (2 * sigma_rgb ** 2) - (dy * dy + dx * dx) / (2 * sigma_xy ** 2))
        total = total + (kernel * (p_a - p_b).abs()).sum()
        pairs += p_a.numel()
    if pairs == 0:
        return total
    return total / pairs


def _gaussian_window(size: int, sigma: float, dtype) -> torch.Tensor:
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-x * x / (2 * sigma * sigma))
    g = g / g.sum()
    return (g[:, None] * g[None, :])[None, None]


def ssim(a: torch.Tensor, b: torch.Tensor, window: int = 11, sigma: float = 1.5,
         c1: float = 0.01 ** 2, c2: float = 0.03 ** 2) -> torch.Tensor:
    """Mean SSIM of two N x 1 x H x W maps in [0, 1], replicate padded."""
    kern = _gaussian_window(window, sigma, a.dtype)
    pad = window // 2

    def blur(x):
        return F.conv2d(F.pad(x, (pad, pad, pad, pad), mode="replicate"), kern)

    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a ** 2
    var_b = blur(b * b) - mu_b ** 2
    cov = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return (num / den).mean()


def sc(m1: torch.Tensor, m1_aug: torch.Tensor, spec: AugmentationSpec, mode: str = "l1_ssim",
       window: int = 11, sigma: float = 1.5) -> torch.Tensor:
    """Consistency between the prediction on T(I) and T applied to the
    prediction on I (both probability maps)."""
    target = apply_transform(m1, spec, mode="nearest")
    if target.shape != m1_aug.shape:
        raise ValueError(f"transported map {tuple(target.shape)} != augmented map {tuple(m1_aug.shape)}")
    loss = (m1_aug - target).abs().mean()
    if mode == "l1_ssim":
        loss = loss + (1 - ssim(m1_aug, target, window, sigma)) / 2
    elif mode != "l1":
        raise ValueError(f"unknown sc mode {mode!r}")
    return loss


def pixel_entropy(m):
    """Binary Shannon entropy in nats with 0 ln 0 = 0."""
    if not torch.is_tensor(m):
        m = torch.as_tensor(m, dtype=torch.float64)
    inside = (m > 0) & (m < 1)
    safe = torch.where(inside, m, torch.full_like(m, 0.5))
    h = -(safe * torch.log(safe) + (1 - safe) * torch.log1p(-safe))
    return torch.where(inside, h, torch.zeros_like(h))


def ramp_weight(epoch, w_max: float = 0.1, ramp: int = 20) -> float:
    t = min(epoch, ramp) / ramp
    return w_max * math.exp(-((1.0 - t) ** 2))


def cem(probs: torch.Tensor, scribble, cfg: CEMConfig, epoch: int):
    """Return ``(l_un, l_la, lambda)``; the loss contribution is
    ``lambda * (l_un + l_la)``. The confidence filter is a hard selection and
    carries no gradient."""
    labels = _labels(scribble, probs)
    h = pixel_entropy(probs)
    unlabeled = labels == UNLABELED
    confident = unlabeled & (h.detach() < cfg.entropy_threshold)
    l_un = (h * confident).sum() / (confident.sum() + cfg.eps)
    labeled = ~unlabeled
    l_la = cfg.w_weak * (h * labeled).sum() / (labeled.sum() + cfg.eps)
    return l_un, l_la, ramp_weight(epoch, cfg.w_max, cfg.ramp)


def objective(bundle, scribbles: torch.Tensor, images: torch.Tensor, augmented, cfg: LossConfig,
              epoch: int):
    """Total loss for a batch plus its report.

    ``augmented`` is a list of ``(spec, m1_aug_logits)`` per image (aligned
    with the batch); M2/M3 receive only the partial CE and affinity terms.
    """
    loss_pce = sum(pce(m, scribbles) for m in bundle.heads())
    loss_ca = sum(ca(torch.sigmoid(m), images, cfg.ca_window, cfg.sigma_rgb, cfg.sigma_xy)
                  for m in bundle.heads())
    p1 = torch.sigmoid(bundle.m1)
    if augmented:
        loss_sc = sum(sc(p1[i:i + 1], torch.sigmoid(logit), spec, cfg.sc_mode, cfg.ssim_window,
                         cfg.ssim_sigma)
                      for i, (spec, logit) in enumerate(augmented)) / len(augmented)
    else:
        loss_sc = p1.new_zeros(())
    l_un, l_la, lam = cem(p1, scribbles, cfg.cem, epoch)
    terms = {"pce": loss_pce, "ca": loss_ca, "sc": loss_sc, "cem_un": l_un, "cem_la": l_la}
    total = loss_pce + loss_ca + loss_sc + lam * (l_un + l_la)
    report = LossReport(**{k: float(v.detach()) for k, v in terms.items()}, lambda_t=lam,
                        total=float(total.detach()))
    return total, terms, report
