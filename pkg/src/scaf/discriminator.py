"""Memory-bank discriminator producing manipulated / authentic prior maps.

Patch banks hold neighbourhood-fused local features, semantic banks hold
unit-norm global descriptors. A query location is first suppressed by its
best cosine match in the semantic bank, then scored by its distance to the
nearest patch-bank entry.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import SEMANTIC_DIM, SemanticReducer, ToyBackbone

BANK_MAGIC = b"SCAFBANK"
BANK_VERSION = 1
_HEADER = struct.Struct("<8sIQI")  # magic, version, count, dim
UNIFORM_WEIGHTS = torch.full((3, 3), 1.0 / 9.0, dtype=torch.float64)
# bound on the (queries x candidates x dim) temporary in nearest-neighbour search
_CHUNK_ELEMS = 1 << 22
# candidates re-checked exactly after the fast matmul ranking
_SHORTLIST = 8


class BankError(ValueError):
    pass


# ---------------------------------------------------------------------------
# banks

@dataclass
class PatchBank:
    entries: torch.Tensor  # (M, D)
    capacity: Optional[int] = None

    def __post_init__(self):
        if self.entries.dim() != 2:
            raise BankError(f"bank entries must be 2-D, got {tuple(self.entries.shape)}")
        if not torch.isfinite(self.entries).all():
            raise BankError("bank entries must be finite")

    def __len__(self):
        return self.entries.shape[0]

    @property
    def dim(self):
        return self.entries.shape[1]


@dataclass
class SemanticBank:
    entries: torch.Tensor  # (N, D), unit rows

    def __len__(self):
        return self.entries.shape[0]


@dataclass
class BankSet:
    """Semantic bank plus one patch bank per backbone stage (0-based index)."""
    semantic: SemanticBank
    patches: dict = field(default_factory=dict)


def save_bank(path, entries: torch.Tensor) -> None:
    arr = np.ascontiguousarray(entries.detach().cpu().numpy(), dtype="<f4")
    count, dim = arr.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(BANK_MAGIC, BANK_VERSION, count, dim))
        fh.write(arr.tobytes(order="C"))


def load_bank(path) -> torch.Tensor:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise BankError(f"{path}: truncated header")
        magic, version, count, dim = _HEADER.unpack(head)
        if magic != BANK_MAGIC:
            raise BankError(f"{path}: not a bank file")
        if version != BANK_VERSION:
            raise BankError(f"{path}: unsupported bank version {version}")
        payload = fh.read()
    if len(payload) != 4 * count * dim:
        raise BankError(f"{path}: expected {count}x{dim} floats, found {len(payload) // 4}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(count, dim)
    return torch.from_numpy(arr.copy())


# ---------------------------------------------------------------------------
# primitive operations

def fuse_neighborhood(patches: torch.Tensor, weights: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Weighted 3x3 neighbourhood fusion of a (..., C, H, W) grid, replicate padded."""
    if weights is None:
        weights = UNIFORM_WEIGHTS
    weights = torch.as_tensor(weights, dtype=patches.dtype)
    if weights.shape != (3, 3):
        raise ValueError(f"weights must be 3x3, got {tuple(weights.shape)}")
    if abs(float(weights.sum()) - 1.0) > 1e-6:
        raise ValueError(f"neighbourhood weights must sum to 1, got {float(weights.sum()):.8f}")
    lead = patches.shape[:-2]
    h, w = patches.shape[-2:]
    flat = patches.reshape(1, -1, h, w)
    padded = F.pad(flat, (1, 1, 1, 1), mode="replicate")
    out = torch.zeros_like(flat)
    for dy in range(3):
        for dx in range(3):
            out = out + weights[dy, dx] * padded[:, :, dy:dy + h, dx:dx + w]
    return out.reshape(*lead, h, w)


def build_semantic_bank(descriptors: Sequence[torch.Tensor]) -> SemanticBank:
    rows = torch.stack([torch.as_tensor(d).reshape(-1) for d in descriptors])
    norms = rows.norm(dim=1)
    zero = (norms == 0).nonzero()
    if len(zero):
        raise BankError(f"descriptor of sample {int(zero[0])} has zero norm")
    return SemanticBank(rows / norms[:, None])


def max_cosine(keys: torch.Tensor, bank: SemanticBank) -> torch.Tensor:
    """Largest cosine similarity of each key row against the bank (0 for zero keys)."""
    entries = bank.entries.to(keys.dtype)
    norms = keys.norm(dim=-1, keepdim=True)
    unit = keys / norms.clamp_min(torch.finfo(keys.dtype).tiny)
    cos = (unit @ (entries / entries.norm(dim=1, keepdim=True)).T).amax(dim=-1)
    return torch.where(norms[..., 0] > 0, cos, torch.zeros_like(cos))


def suppress(q: torch.Tensor, bank: SemanticBank, key: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Scale ``q`` by ``1 - max cosine`` against the semantic bank.

    ``key`` is the vector compared with the bank (defaults to ``q``); it lets a
    local feature be suppressed by its semantic projection. Zero keys leave
    ``q`` unchanged.
    """
    if len(bank) == 0:
        raise BankError("semantic bank is empty")
    key = q if key is None else key
    zero = key.norm(dim=-1) == 0
    factor = 1.0 - max_cosine(key, bank)
    factor = torch.where(zero, torch.ones_like(factor), factor)
    return factor[..., None] * q


def score(q_sup: torch.Tensor, bank: PatchBank) -> torch.Tensor:
    """Distance from each query row to its nearest bank entry."""
    if len(bank) == 0:
        raise BankError("patch bank is empty")
    single = q_sup.dim() == 1
    queries = q_sup.reshape(-1, q_sup.shape[-1])
    entries = bank.entries.to(queries.dtype)
    if len(entries) > _SHORTLIST:
        # rank with the expanded form, then measure the shortlist directly
        approx = (entries * entries).sum(1)[None] - 2.0 * queries @ entries.T
        idx = approx.topk(_SHORTLIST, dim=1, largest=False).indices
        diff = queries[:, None, :] - entries[idx]
        dist = (diff * diff).sum(-1).amin(dim=1).sqrt()
    else:
        step = max(1, _CHUNK_ELEMS // max(1, entries.numel()))
        out = []
        for i in range(0, queries.shape[0], step):
            diff = queries[i:i + step, None, :] - entries[None]
            out.append((diff * diff).sum(-1).amin(dim=1).sqrt())
        dist = torch.cat(out) if out else queries.new_zeros(0)
    return dist[0] if single else dist.reshape(q_sup.shape[:-1])


def grid_to_rows(grid: torch.Tensor) -> torch.Tensor:
    """(C, H, W) -> (H*W, C), row-major over positions."""
    return grid.reshape(grid.shape[0], -1).T


def build_patch_bank(features: Sequence[torch.Tensor], capacity: Optional[int] = None,
                     rng_seed: int = 0, weights: Optional[torch.Tensor] = None,
                     transform=None) -> PatchBank:
    """Pool stride-1 fused patches of one stage over all images.

    ``features`` holds one (C, H, W) map per image. ``transform(i, rows)`` may
    rewrite the fused rows of image ``i`` before pooling (used to store entries
    in suppressed space). Over capacity, entries are subsampled uniformly.
    """
    if len(features) == 0:
        raise BankError("cannot build a patch bank from zero images")
    rows = []
    for i, f in enumerate(features):
        r = grid_to_rows(fuse_neighborhood(f, weights))
        rows.append(transform(i, r) if transform is not None else r)
    entries = torch.cat(rows)
    if capacity is not None and entries.shape[0] > capacity:
        gen = torch.Generator().manual_seed(int(rng_seed))
        keep = torch.randperm(entries.shape[0], generator=gen)[:capacity].sort().values
        entries = entries[keep]
    return PatchBank(entries.contiguous(), capacity)


def minmax_normalize(x: torch.Tensor) -> torch.Tensor:
    """Per-map min-max to [0, 1] over the last two axes; constant maps -> 0."""
    lo = x.amin(dim=(-2, -1), keepdim=True)
    hi = x.amax(dim=(-2, -1), keepdim=True)
    span = hi - lo
    return torch.where(span > 0, (x - lo) / torch.where(span > 0, span, torch.ones_like(span)),
                       torch.zeros_like(x))


def local_cosine(a: torch.Tensor, b: torch.Tensor, window: int = 7) -> torch.Tensor:
    """Cosine similarity of the ``window`` x ``window`` neighbourhoods of two
    (..., H, W) maps, zero padded; 0 where either window is all zero."""
    h, w = a.shape[-2:]
    a4, b4 = a.reshape(-1, 1, h, w), b.reshape(-1, 1, h, w)
    box = torch.ones(1, 1, window, window, dtype=a.dtype)
    pad = window // 2
    dot = F.conv2d(a4 * b4, box, padding=pad)
    na = F.conv2d(a4 * a4, box, padding=pad).clamp_min(0).sqrt()
    nb = F.conv2d(b4 * b4, box, padding=pad).clamp_min(0).sqrt()
    denom = na * nb
    cos = torch.where(denom > 0, dot / torch.where(denom > 0, denom, torch.ones_like(denom)),
                      torch.zeros_like(dot))
    return cos.reshape(a.shape)


def purify(mp: torch.Tensor, ap_raw: torch.Tensor, tau: float = 0.7, gate: float = 0.5,
           window: int = 7) -> torch.Tensor:
    """Zero the authentic prior where it locally mirrors a strong manipulated prior."""
    if mp.shape != ap_raw.shape:
        raise ValueError(f"prior shapes differ: {tuple(mp.shape)} vs {tuple(ap_raw.shape)}")
    false_hit = (local_cosine(mp, ap_raw, window) > tau) & (mp > gate)
    return torch.where(false_hit, torch.zeros_like(ap_raw), ap_raw)


# ---------------------------------------------------------------------------
# discriminator

@dataclass
class PriorPair:
    mp: torch.Tensor
    ap: torch.Tensor


@dataclass
class BankConfig:
    capacity: int = 10000
    stages: tuple = (1, 2)  # 0-based: backbone stages 2 and 3
    semantic_stage: int = 3
    purify_tau: float = 0.7
    purify_gate: float = 0.5
    purify_window: int = 7
    suppress_entries: bool = True


class ManipulatedDiscriminator(nn.Module):
    """Frozen feature extractor plus authentic/manipulated bank sets.

    Banks are built once and never updated; the module always runs in
    inference mode.
    """

    def __init__(self, extractor: nn.Module, reducer: SemanticReducer, cfg: BankConfig = None,
                 seed: int = 0):
        super().__init__()
        self.extractor = extractor
        self.reducer = reducer
        self.cfg = cfg or BankConfig()
        self.seed = seed
        self.authentic: Optional[BankSet] = None
        self.manipulated: Optional[BankSet] = None
        self.requires_grad_(False)
        self.eval()

    @classmethod
    def from_seed(cls, widths, seed: int, cfg: BankConfig = None,
                  norm: str = "batch") -> "ManipulatedDiscriminator":
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        extractor = ToyBackbone(widths, norm=norm)
        reducer = SemanticReducer(extractor.widths[-1], SEMANTIC_DIM)
        torch.random.set_rng_state(gen_state)
        return cls(extractor, reducer, cfg, seed)

    def train(self, mode: bool = True):
        # frozen: batch statistics never update
        return super().train(False)

    @torch.no_grad()
    def features(self, images: torch.Tensor) -> list[torch.Tensor]:
        return self.extractor(images.to(torch.float32))

    def _keys(self, deep: torch.Tensor, size) -> torch.Tensor:
        """Per-location semantic keys (N, H, W, 256) at the resolution ``size``.
        Bilinear so a key blends the coarse cells around each finer position."""
        local = self.reducer.local(deep)  # (N, h, w, D)
        local = F.interpolate(local.movedim(-1, 1), size=size, mode="bilinear", align_corners=False)
        return local.movedim(1, -1)

    @torch.no_grad()
    def build_bankset(self, images: torch.Tensor, batch_size: int = 8) -> BankSet:
        feats = [[] for _ in range(4)]
        for i in range(0, images.shape[0], batch_size):
            for s, f in enumerate(self.features(images[i:i + batch_size])):
                feats[s].append(f)
        feats = [torch.cat(f) for f in feats]
        deep = feats[self.cfg.semantic_stage]
        semantic = build_semantic_bank(list(self.reducer(deep)))
        patches = {}
        for s in self.cfg.stages:
            grid = feats[s]
            keys = self._keys(deep, grid.shape[-2:])
            transform = None
            if self.cfg.suppress_entries:
                def transform(i, rows, keys=keys):
                    return suppress(rows, semantic, keys[i].reshape(-1, keys.shape[-1]))
            patches[s] = build_patch_bank(list(grid), self.cfg.capacity, self.seed + s,
                                          transform=transform)
        return BankSet(semantic, patches)

    def build(self, authentic_images: torch.Tensor, manipulated_images: Optional[torch.Tensor] = None):
        self.authentic = self.build_bankset(authentic_images)
        if manipulated_images is not None and len(manipulated_images):
            self.manipulated = self.build_bankset(manipulated_images)
        return self

    @torch.no_grad()
    def raw_scores(self, images: torch.Tensor, banks: BankSet) -> torch.Tensor:
        """Unnormalised score maps (N, 1, H/8, W/8), averaged over bank stages."""
        feats = self.features(images)
        deep = feats[self.cfg.semantic_stage]
        size = feats[self.cfg.stages[0]].shape[-2:]
        maps = []
        for s in self.cfg.stages:
            grid = fuse_neighborhood(feats[s])  # (N, C, h, w)
            q = grid.movedim(1, -1)
            q_sup = suppress(q, banks.semantic, self._keys(deep, grid.shape[-2:]))
            m = score(q_sup, banks.patches[s])[:, None]
            if m.shape[-2:] != size:
                m = F.interpolate(m, size=size, mode="bilinear", align_corners=False)
            maps.append(m)
        return torch.stack(maps).mean(0)

    @torch.no_grad()
    def prior_map(self, images: torch.Tensor) -> PriorPair:
        if self.authentic is None:
            raise BankError("authentic banks have not been built")
        single = images.dim() == 3
        if single:
            images = images[None]
        mp = minmax_normalize(self.raw_scores(images, self.authentic))
        if self.manipulated is not None:
            ap_raw = minmax_normalize(self.raw_scores(images, self.manipulated))
            ap = purify(mp, ap_raw, self.cfg.purify_tau, self.cfg.purify_gate, self.cfg.purify_window)
        else:
            ap = 1.0 - mp
        if single:
            mp, ap = mp[0], ap[0]
        return PriorPair(mp, ap)

    # -- persistence -------------------------------------------------------

    def bank_state(self) -> dict:
        state = {}
        for name, banks in (("authentic", self.authentic), ("manipulated", self.manipulated)):
            if banks is None:
                continue
            state[f"{name}.semantic"] = banks.semantic.entries
            for s, bank in banks.patches.items():
                state[f"{name}.patch{s}"] = bank.entries
        return state

    def load_bank_state(self, state: dict) -> None:
        for name in ("authentic", "manipulated"):
            key = f"{name}.semantic"
            if key not in state:
                setattr(self, name, None)
                continue
            patches = {s: PatchBank(state[f"{name}.patch{s}"], self.cfg.capacity)
                       for s in self.cfg.stages}
            setattr(self, name, BankSet(SemanticBank(state[key]), patches))

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for key, entries in self.bank_state().items():
            save_bank(directory / f"{key}.bin", entries)
        torch.save({"extractor": self.extractor.state_dict(), "reducer": self.reducer.state_dict()},
                   directory / "extractor.pt")
        meta = {"seed": self.seed, "widths": list(self.extractor.widths),
                "config": {k: list(v) if isinstance(v, tuple) else v
                           for k, v in self.cfg.__dict__.items()}}
        (directory / "meta.json").write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, directory) -> "ManipulatedDiscriminator":
        directory = Path(directory)
        meta = json.loads((directory / "meta.json").read_text())
        cfg_dict = dict(meta["config"])
        cfg_dict["stages"] = tuple(cfg_dict["stages"])
        md = cls.from_seed(meta["widths"], meta["seed"], BankConfig(**cfg_dict))
        weights = torch.load(directory / "extractor.pt", weights_only=True)
        md.extractor.load_state_dict(weights["extractor"])
        md.reducer.load_state_dict(weights["reducer"])
        state = {p.stem: load_bank(p) for p in directory.glob("*.bin")}
        md.load_bank_state(state)
        return md
