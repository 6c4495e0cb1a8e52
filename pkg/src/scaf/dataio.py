"""Dataset layout, scribble synthesis and the geometric augmentations used for
consistency training.

On-disk layout::

    <root>/<split>/images/<id>.png
    <root>/<split>/scribbles/<id>.png     # 0 authentic, 1 manipulated, 255 unlabeled
    <root>/<split>/masks/<id>.png         # optional, 0 authentic, 255 manipulated
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage

AUTHENTIC_SCRIBBLE = 0
MANIPULATED_SCRIBBLE = 1
UNLABELED = 255
_VALID_LABELS = (AUTHENTIC_SCRIBBLE, MANIPULATED_SCRIBBLE, UNLABELED)

AUGMENTATION_KINDS = ("rotation", "scaling", "horizontal-flip")
ROTATION_ANGLES = (90, 180, 270)
SCALE_RANGE = (0.5, 1.5)
# scaled images must stay valid backbone inputs
SIZE_MULTIPLE = 32


class DatasetError(ValueError):
    """Raised for malformed dataset directories or label files."""


@dataclass
class TriStateMask:
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.labels.ndim != 2:
            raise ValueError(f"scribble must be 2-D, got shape {self.labels.shape}")
        bad = ~np.isin(self.labels, _VALID_LABELS)
        if bad.any():
            raise DatasetError(f"invalid scribble label value {int(self.labels[bad][0])}")

    @property
    def shape(self):
        return self.labels.shape

    @property
    def labeled(self) -> np.ndarray:
        return self.labels != UNLABELED

    @property
    def unlabeled(self) -> np.ndarray:
        return self.labels == UNLABELED

    @property
    def manipulated(self) -> np.ndarray:
        return self.labels == MANIPULATED_SCRIBBLE

    @property
    def authentic(self) -> np.ndarray:
        return self.labels == AUTHENTIC_SCRIBBLE

    @classmethod
    def unlabeled_like(cls, shape) -> "TriStateMask":
        return cls(np.full(shape, UNLABELED, dtype=np.uint8))


@dataclass
class Sample:
    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    scribble: TriStateMask
    id: str
    dense_mask: Optional[np.ndarray] = None  # H x W bool

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"{self.id}: image must be H x W x 3, got {self.image.shape}")
        h, w = self.image.shape[:2]
        if self.scribble.shape != (h, w):
            raise ValueError(f"{self.id}: scribble shape {self.scribble.shape} != image {(h, w)}")
        if self.dense_mask is not None and self.dense_mask.shape != (h, w):
            raise ValueError(f"{self.id}: mask shape {self.dense_mask.shape} != image {(h, w)}")


# ---------------------------------------------------------------------------
# raster io

def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def write_image(path, image: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def decode_scribble(path) -> TriStateMask:
    with Image.open(path) as im:
        if im.mode not in ("L", "P"):
            raise DatasetError(f"{path}: scribble must be 8-bit single channel, got mode {im.mode}")
        arr = np.asarray(im, dtype=np.uint8)
    bad = ~np.isin(arr, _VALID_LABELS)
    if bad.any():
        raise DatasetError(f"{path}: invalid scribble label value {int(arr[bad][0])}")
    return TriStateMask(arr)


def encode_scribble(path, scribble: TriStateMask) -> None:
    Image.fromarray(scribble.labels.astype(np.uint8), mode="L").save(path)


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127


def write_mask(path, mask: np.ndarray) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path)


# ---------------------------------------------------------------------------
# dataset

def list_ids(directory: Path) -> list[str]:
    return sorted(p.stem for p in Path(directory).glob("*.png"))


def load_images(root, split: str) -> list[tuple[str, np.ndarray]]:
    """Images only (e.g. the authentic split used to build memory banks)."""
    image_dir = Path(root) / split / "images"
    if not image_dir.is_dir():
        raise DatasetError(f"missing directory {image_dir}")
    return [(i, read_image(image_dir / f"{i}.png")) for i in list_ids(image_dir)]


def load_dataset(root, split: str, require_scribbles: bool = True) -> list[Sample]:
    base = Path(root) / split
    image_dir, scribble_dir, mask_dir = base / "images", base / "scribbles", base / "masks"
    if not image_dir.is_dir():
        raise DatasetError(f"missing directory {image_dir}")
    ids = list_ids(image_dir)
    scribble_ids = set(list_ids(scribble_dir)) if scribble_dir.is_dir() else set()
    for orphan in sorted(scribble_ids - set(ids)):
        raise DatasetError(f"sample {orphan!r}: scribble without image")

    samples = []
    for sample_id in ids:
        image = read_image(image_dir / f"{sample_id}.png")
        if sample_id in scribble_ids:
            scribble = decode_scribble(scribble_dir / f"{sample_id}.png")
        elif require_scribbles:
            raise DatasetError(f"sample {sample_id!r}: missing scribble file")
        else:
            scribble = TriStateMask.unlabeled_like(image.shape[:2])
        mask_path = mask_dir / f"{sample_id}.png"
        dense = read_mask(mask_path) if mask_path.exists() else None
        try:
            samples.append(Sample(image=image, scribble=scribble, id=sample_id, dense_mask=dense))
        except ValueError as exc:
            raise DatasetError(str(exc)) from exc
    return samples


def save_sample(root, split: str, sample: Sample) -> None:
    base = Path(root) / split
    for sub in ("images", "scribbles", "masks"):
        (base / sub).mkdir(parents=True, exist_ok=True)
    write_image(base / "images" / f"{sample.id}.png", sample.image)
    encode_scribble(base / "scribbles" / f"{sample.id}.png", sample.scribble)
    if sample.dense_mask is not None:
        write_mask(base / "masks" / f"{sample.id}.png", sample.dense_mask)


# ---------------------------------------------------------------------------
# scribble synthesis

_STEPS = ((-1, 0), (1, 0), (0, -1), (0, 1))


def _allocate(target: int, areas: Sequence[int]) -> list[int]:
    """Split ``target`` across components proportionally (largest remainder)."""
    total = sum(areas)
    raw = [target * a / total for a in areas]
    alloc = [min(int(math.floor(r)), a) for r, a in zip(raw, areas)]
    order = sorted(range(len(areas)), key=lambda k: raw[k] - alloc[k], reverse=True)
    short = target - sum(alloc)
    for k in order:
        if short <= 0:
            break
        if alloc[k] < areas[k]:
            alloc[k] += 1
            short -= 1
    return alloc


def _walk(component: np.ndarray, n_pixels: int, rng: np.random.Generator) -> np.ndarray:
    """Persistent 4-connected random walk confined to ``component`` that stops
    once ``n_pixels`` distinct pixels are visited."""
    visited = np.zeros_like(component)
    coords = np.argwhere(component)
    if n_pixels >= len(coords):
        return component.copy()
    h, w = component.shape
    y, x = coords[rng.integers(len(coords))]
    visited[y, x] = True
    count, stall = 1, 0
    direction = int(rng.integers(4))
    max_stall = 4 * int(math.sqrt(len(coords))) + 16
    while count < n_pixels:
        if rng.random() < 0.3:
            direction = int(rng.integers(4))
        dy, dx = _STEPS[direction]
        ny, nx = y + dy, x + dx
        if not (0 <= ny < h and 0 <= nx < w and component[ny, nx]):
            direction = int(rng.integers(4))
            stall += 1
        else:
            y, x = ny, nx
            if visited[y, x]:
                stall += 1
            else:
                visited[y, x] = True
                count += 1
                stall = 0
        if stall > max_stall:
            # lift the pen and start a new stroke elsewhere in the region
            free = np.argwhere(component & ~visited)
            y, x = free[rng.integers(len(free))]
            visited[y, x] = True
            count += 1
            stall = 0
    return visited


def _scribble_region(region: np.ndarray, coverage: float, rng: np.random.Generator) -> np.ndarray:
    out = np.zeros_like(region)
    area = int(region.sum())
    if area == 0:
        return out
    target = int(round(coverage * area))
    components, n = ndimage.label(region)
    areas = [int((components == k).sum()) for k in range(1, n + 1)]
    for k, quota in enumerate(_allocate(target, areas), start=1):
        if quota > 0:
            out |= _walk(components == k, quota, rng)
    return out


def synthesize_scribble(dense_mask: np.ndarray, coverage: float, rng_seed: int,
                        authentic_coverage: Optional[float] = None) -> TriStateMask:
    """Draw 1-px random-walk strokes inside each class region of a dense mask.

    Each class receives ``round(coverage * area)`` scribble pixels, spread over
    its connected components. Authentic strokes use ``authentic_coverage``
    (defaults to ``coverage``; pass 0 to skip them).
    """
    mask = np.asarray(dense_mask).astype(bool)
    if not mask.any():
        raise ValueError("dense mask has no foreground pixels")
    if not 0.0 < coverage <= 1.0:
        raise ValueError(f"coverage must lie in (0, 1], got {coverage}")
    if authentic_coverage is None:
        authentic_coverage = coverage
    if not 0.0 <= authentic_coverage <= 1.0:
        raise ValueError(f"authentic coverage must lie in [0, 1], got {authentic_coverage}")

    rng = np.random.default_rng(rng_seed)
    labels = np.full(mask.shape, UNLABELED, dtype=np.uint8)
    labels[_scribble_region(mask, coverage, rng)] = MANIPULATED_SCRIBBLE
    if authentic_coverage > 0:
        labels[_scribble_region(~mask, authentic_coverage, rng)] = AUTHENTIC_SCRIBBLE
    return TriStateMask(labels)


# ---------------------------------------------------------------------------
# augmentations

@dataclass(frozen=True)
class AugmentationSpec:
    kind: str
    parameter: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        if self.kind == "rotation":
            if self.parameter not in ROTATION_ANGLES:
                raise ValueError(f"rotation angle must be one of {ROTATION_ANGLES}, got {self.parameter}")
        elif self.kind == "scaling":
            if self.parameter is None or not SCALE_RANGE[0] <= self.parameter <= SCALE_RANGE[1]:
                raise ValueError(f"scale factor must lie in {SCALE_RANGE}, got {self.parameter}")
        elif self.kind in ("horizontal-flip", "identity"):
            pass
        else:
            raise ValueError(f"unsupported augmentation kind {self.kind!r}")


IDENTITY = AugmentationSpec("identity")


def sample_augmentation(rng: np.random.Generator, seed: int = 0) -> AugmentationSpec:
    kind = AUGMENTATION_KINDS[int(rng.integers(len(AUGMENTATION_KINDS)))]
    if kind == "rotation":
        return AugmentationSpec(kind, ROTATION_ANGLES[int(rng.integers(3))], seed)
    if kind == "scaling":
        return AugmentationSpec(kind, float(rng.uniform(*SCALE_RANGE)), seed)
    return AugmentationSpec(kind, None, seed)


def scaled_size(size: int, factor: float, multiple: int = SIZE_MULTIPLE) -> int:
    """Target side length for a scale factor, kept on the backbone grid when
    the source already is. Grid sizes never drop below two grid cells, so the
    deepest stage keeps at least 2 x 2 positions for batch statistics."""
    if size % multiple == 0:
        return max(min(size, 2 * multiple), int(round(size * factor / multiple)) * multiple)
    return max(1, int(round(size * factor)))


def apply_transform(x, spec: AugmentationSpec, mode: str = "bilinear"):
    """Apply ``spec`` to the last two (spatial) axes of a tensor or array.

    ``mode`` only matters for scaling: bilinear for images, nearest for
    prediction/label maps.
    """
    if isinstance(x, np.ndarray):
        return apply_transform(torch.from_numpy(np.ascontiguousarray(x)), spec, mode).numpy()
    if spec.kind == "identity":
        return x
    if spec.kind == "horizontal-flip":
        return torch.flip(x, dims=(-1,))
    if spec.kind == "rotation":
        return torch.rot90(x, k=int(spec.parameter) // 90, dims=(-2, -1))
    if spec.kind == "scaling":
        h, w = x.shape[-2:]
        size = (scaled_size(h, spec.parameter), scaled_size(w, spec.parameter))
        lead = x.shape[:-2]
        flat = x.reshape(-1, 1, h, w)
        dtype = flat.dtype
        if not flat.is_floating_point():
            flat = flat.float()
        if mode == "nearest":
            out = F.interpolate(flat, size=size, mode="nearest")
        else:
            out = F.interpolate(flat, size=size, mode="bilinear", align_corners=False)
        return out.to(dtype).reshape(*lead, *size)
    raise ValueError(f"unsupported augmentation kind {spec.kind!r}")


def invert_transform(x, spec: AugmentationSpec, size=None, mode: str = "nearest"):
    """Map a transformed map back to the original frame. ``size`` is the
    original spatial size and is required for scaling."""
    if spec.kind in ("identity", "horizontal-flip"):
        return apply_transform(x, spec)
    if spec.kind == "rotation":
        return apply_transform(x, AugmentationSpec("rotation", 360 - int(spec.parameter)))
    if spec.kind == "scaling":
        if size is None:
            raise ValueError("inverting a scaling needs the original size")
        if isinstance(x, np.ndarray):
            return invert_transform(torch.from_numpy(np.ascontiguousarray(x)), spec, size, mode).numpy()
        h, w = x.shape[-2:]
        flat = x.reshape(-1, 1, h, w)
        if not flat.is_floating_point():
            flat = flat.float()
        kwargs = {} if mode == "nearest" else {"align_corners": False}
        out = F.interpolate(flat, size=tuple(size), mode=mode, **kwargs)
        return out.to(x.dtype).reshape(*x.shape[:-2], *size)
    raise ValueError(f"unsupported augmentation kind {spec.kind!r}")
