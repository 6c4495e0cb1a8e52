"""Training loop: dual-branch forward on I and T(I), four-term objective,
AdamW with step decay, JSONL logging and resumable checkpoints."""
from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import config as config_mod
from .config import RunConfig
from .dataio import Sample, apply_transform, load_dataset, load_images, sample_augmentation
from .discriminator import BankConfig, ManipulatedDiscriminator
from .losses import LossReport, objective
from .model import SCAF

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "scaf-checkpoint"
CHECKPOINT_VERSION = 1
PRIOR_STRIDE = 8


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class Batch:
    images: torch.Tensor   # N x 3 x S x S
    labels: torch.Tensor   # N x 1 x S x S uint8 scribble codes
    mp: torch.Tensor       # N x 1 x S/8 x S/8
    ap: torch.Tensor
    ids: list


def lr_at(epoch: int, lr_init: float, decay_factor: float, decay_every: int) -> float:
    return lr_init * decay_factor ** (epoch // decay_every)


def seed_everything(seed: int, deterministic: bool = False) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)


def to_tensor_images(images: Sequence[np.ndarray], size: Optional[int] = None) -> torch.Tensor:
    x = torch.from_numpy(np.stack(images)).permute(0, 3, 1, 2).float()
    if size is not None and tuple(x.shape[-2:]) != (size, size):
        x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
    return x


def to_tensor_labels(samples: Sequence[Sample], size: Optional[int] = None) -> torch.Tensor:
    y = torch.from_numpy(np.stack([s.scribble.labels for s in samples]))[:, None]
    if size is not None and tuple(y.shape[-2:]) != (size, size):
        y = F.interpolate(y.float(), size=(size, size), mode="nearest").to(torch.uint8)
    return y


def build_model(cfg: RunConfig) -> SCAF:
    m = cfg.modulation
    return SCAF(cfg.backbone.widths, reduction=m.reduction, eps=m.epsilon, alpha=m.alpha_init,
                beta=m.beta_init, gamma=m.gamma_init, enhance=cfg.fusion.enhance, diff=cfg.fusion.diff)


def build_discriminator(cfg: RunConfig, authentic: torch.Tensor,
                        manipulated: Optional[torch.Tensor] = None) -> ManipulatedDiscriminator:
    md = ManipulatedDiscriminator.from_seed(cfg.backbone.widths, cfg.seed, cfg.bank)
    return md.build(authentic, manipulated)


def transport_prior(prior: torch.Tensor, spec, image_size) -> torch.Tensor:
    """Move a cached prior map into the frame of T(I)."""
    if spec.kind == "scaling":
        size = (image_size[0] // PRIOR_STRIDE, image_size[1] // PRIOR_STRIDE)
        return F.interpolate(prior, size=size, mode="bilinear", align_corners=False)
    return apply_transform(prior, spec)


class Trainer:
    def __init__(self, cfg: RunConfig, discriminator: ManipulatedDiscriminator,
                 model: Optional[SCAF] = None):
        self.cfg = cfg
        seed_everything(cfg.seed, cfg.train.deterministic)
        self.model = model if model is not None else build_model(cfg)
        self.md = discriminator
        self.optimizer = torch.optim.AdamW(self.model.parameters(), lr=cfg.train.lr_init,
                                           weight_decay=cfg.train.weight_decay)
        self.rng = np.random.default_rng(cfg.seed)
        self.epoch = 0
        self.step = 0

    # -- data ---------------------------------------------------------------

    def make_batch(self, samples: Sequence[Sample]) -> Batch:
        size = self.cfg.train.image_size
        images = to_tensor_images([s.image for s in samples], size)
        pp = self.md.prior_map(images)
        return Batch(images, to_tensor_labels(samples, size), pp.mp, pp.ap, [s.id for s in samples])

    def lr(self, epoch: int) -> float:
        t = self.cfg.train
        return lr_at(epoch, t.lr_init, t.lr_decay_factor, t.lr_decay_every)

    # -- optimisation ---------------------------------------------------------

    def train_step(self, batch: Batch, epoch: int) -> LossReport:
        self.model.train()
        for group in self.optimizer.param_groups:
            group["lr"] = self.lr(epoch)
        bundle = self.model(batch.images, batch.mp, batch.ap)
        augmented = []
        for i in range(batch.images.shape[0]):
            spec = sample_augmentation(self.rng, seed=self.step)
            image_t = apply_transform(batch.images[i:i + 1], spec)
            mp_t = transport_prior(batch.mp[i:i + 1], spec, image_t.shape[-2:])
            ap_t = transport_prior(batch.ap[i:i + 1], spec, image_t.shape[-2:])
            augmented.append((spec, self.model(image_t, mp_t, ap_t).m1))
        total, terms, report = objective(bundle, batch.labels, batch.images, augmented,
                                         self.cfg.losses, epoch)
        for name, value in terms.items():
            if not torch.isfinite(value):
                raise NonFiniteLossError(f"loss term {name!r} is not finite ({float(value.detach())})")
        self.optimizer.zero_grad(set_to_none=True)
        if total.requires_grad:
            total.backward()
            self.optimizer.step()
            self.model.clamp_()
        self.step += 1
        return report

    def fit(self, samples: Sequence[Sample], out_dir=None, log_path=None) -> Path:
        if len(samples) == 0:
            raise ValueError("training dataset is empty")
        t = self.cfg.train
        out_dir = Path(out_dir or self.cfg.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = Path(log_path) if log_path else out_dir / "train_log.jsonl"
        full = self.make_batch(samples)
        n = len(samples)
        final = out_dir / "checkpoint_final.pt"
        with open(log_path, "a" if self.epoch else "w") as fh:
            while self.epoch < t.epochs:
                epoch = self.epoch
                order = self.rng.permutation(n)
                for start in range(0, n, t.batch_size):
                    idx = torch.from_numpy(np.sort(order[start:start + t.batch_size]))
                    batch = Batch(full.images[idx], full.labels[idx], full.mp[idx], full.ap[idx],
                                  [full.ids[i] for i in idx.tolist()])
                    report = self.train_step(batch, epoch)
                    record = {"step": self.step, "epoch": epoch, "lr": self.lr(epoch), **report.as_dict()}
                    fh.write(json.dumps(record) + "\n")
                fh.flush()
                self.epoch += 1
                log.info("epoch %d done: total %.4f", epoch, report.total)
                if t.checkpoint_every and self.epoch % t.checkpoint_every == 0 and self.epoch < t.epochs:
                    self.save(out_dir / f"checkpoint_epoch{self.epoch:04d}.pt")
        self.save(final)
        return final

    # -- checkpoints ----------------------------------------------------------

    def state(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": config_mod.to_dict(self.cfg),
            "config_hash": config_mod.config_hash(self.cfg),
            "model": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "epoch": self.epoch,
            "step": self.step,
            "rng": {"numpy": self.rng.bit_generator.state, "torch": torch.random.get_rng_state()},
            "discriminator": {
                "seed": self.md.seed,
                "widths": list(self.md.extractor.widths),
                "extractor": self.md.extractor.state_dict(),
                "reducer": self.md.reducer.state_dict(),
                "banks": self.md.bank_state(),
            },
        }

    def save(self, path) -> Path:
        torch.save(self.state(), path)
        return Path(path)

    @classmethod
    def resume(cls, path) -> "Trainer":
        state = load_checkpoint(path)
        cfg = config_mod.from_dict(state["config"])
        trainer = cls(cfg, discriminator_from_state(state, cfg.bank))
        trainer.model.load_state_dict(state["model"])
        trainer.optimizer.load_state_dict(state["optimizer"])
        trainer.epoch, trainer.step = state["epoch"], state["step"]
        trainer.rng.bit_generator.state = state["rng"]["numpy"]
        torch.random.set_rng_state(state["rng"]["torch"])
        return trainer


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    state = torch.load(path, weights_only=False)
    if not isinstance(state, dict) or state.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a checkpoint file")
    if state.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {state.get('version')}")
    return state


def discriminator_from_state(state: dict, bank_cfg: BankConfig) -> ManipulatedDiscriminator:
    d = state["discriminator"]
    md = ManipulatedDiscriminator.from_seed(d["widths"], d["seed"], bank_cfg)
    md.extractor.load_state_dict(d["extractor"])
    md.reducer.load_state_dict(d["reducer"])
    md.load_bank_state(d["banks"])
    return md


def model_from_checkpoint(path):
    """Return ``(model, discriminator, cfg)`` ready for inference."""
    state = load_checkpoint(path)
    cfg = config_mod.from_dict(state["config"])
    model = build_model(cfg)
    model.load_state_dict(state["model"])
    model.eval()
    return model, discriminator_from_state(state, cfg.bank), cfg


def run_training(cfg: RunConfig, samples=None, out_dir=None) -> Path:
    """Bank-building phase followed by ``fit``; data comes from ``cfg.data``
    unless ``samples`` is given."""
    root = Path(cfg.data.root)
    if samples is None:
        samples = load_dataset(root, cfg.data.train_split)
    if not samples:
        raise ValueError("training dataset is empty")
    size = cfg.train.image_size
    authentic = to_tensor_images([img for _, img in load_images(root, cfg.data.authentic_split)], size)
    manipulated = to_tensor_images([s.image for s in samples], size)
    seed_everything(cfg.seed, cfg.train.deterministic)
    md = build_discriminator(cfg, authentic, manipulated)
    trainer = Trainer(cfg, md)
    return trainer.fit(samples, out_dir)
