"""Procedural splice fixtures.

Authentic images are smooth mid-grey textures plus Gaussian "camera" noise.
A manipulated image pastes a rectangle cut from a striped donor texture with
arbitrary colours and no camera noise, so the pasted region differs in both
content and low-level statistics.
"""
from __future__ import annotations

import shutil
from pathlib import Path

import numpy as np
from scipy import ndimage

from .dataio import Sample, save_sample, synthesize_scribble, write_image

CAMERA_NOISE = 0.04


def smooth_texture(rng: np.random.Generator, size: int) -> np.ndarray:
    """Low-frequency colour texture in [0, 1] built from three oriented sinusoids
    around a mid-grey base; all authentic scenes share this family."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    tex = np.broadcast_to(rng.uniform(0.4, 0.6, size=3), (size, size, 3)).copy()
    for _ in range(3):
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(1.0, 4.0)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
        tex += wave[..., None] * rng.uniform(-0.08, 0.08, size=3)
    return np.clip(tex, 0, 1)


def camera(rng: np.random.Generator, texture: np.ndarray) -> np.ndarray:
    return np.clip(texture + rng.normal(0.0, CAMERA_NOISE, texture.shape), 0, 1)


def donor(rng: np.random.Generator, size: int) -> np.ndarray:
    """Foreign content: a striped texture, colour shifted and free of camera noise."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    theta = rng.uniform(0, np.pi)
    period = rng.uniform(4.0, 8.0)
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * (np.cos(theta) * xx + np.sin(theta) * yy) / period)
    colour_a, colour_b = rng.uniform(0, 1, size=3), rng.uniform(0, 1, size=3)
    tex = colour_a + stripes[..., None] * (colour_b - colour_a)
    return np.clip(ndimage.gaussian_filter(tex, sigma=(0.7, 0.7, 0)), 0, 1)


def authentic_image(rng: np.random.Generator, size: int = 128) -> np.ndarray:
    return camera(rng, smooth_texture(rng, size)).astype(np.float32)


def spliced_image(rng: np.random.Generator, size: int = 128):
    """Return (image, dense_mask) with one pasted rectangle."""
    image = authentic_image(rng, size).astype(np.float64)
    h = int(rng.integers(size // 4, size // 2 + 1))
    w = int(rng.integers(size // 4, size // 2 + 1))
    top = int(rng.integers(0, size - h + 1))
    left = int(rng.integers(0, size - w + 1))
    mask = np.zeros((size, size), dtype=bool)
    mask[top:top + h, left:left + w] = True
    image[mask] = donor(rng, size)[mask]
    return image.astype(np.float32), mask


def make_samples(n: int, seed: int, size: int = 128, coverage: float = 0.1,
                 authentic_coverage=None, prefix: str = "splice") -> list[Sample]:
    if n <= 0:
        raise ValueError(f"number of samples must be positive, got {n}")
    rng = np.random.default_rng(seed)
    samples = []
    for k in range(n):
        image, mask = spliced_image(rng, size)
        scribble = synthesize_scribble(mask, coverage, int(rng.integers(2**31)), authentic_coverage)
        samples.append(Sample(image=image, scribble=scribble, id=f"{prefix}_{k:04d}", dense_mask=mask))
    return samples


def make_authentic(n: int, seed: int, size: int = 128) -> list[np.ndarray]:
    rng = np.random.default_rng(seed + 7919)
    return [authentic_image(rng, size) for _ in range(n)]


def write_fixture(out_dir, n_samples: int, seed: int, size: int = 128, coverage: float = 0.1,
                  n_authentic=None, n_test: int = 0, force: bool = False) -> Path:
    """Write train (and optional test) splice splits plus an ``authentic`` image split."""
    out = Path(out_dir)
    if n_samples <= 0:
        raise ValueError(f"number of samples must be positive, got {n_samples}")
    if out.exists() and any(out.iterdir()):
        if not force:
            raise FileExistsError(f"{out} is not empty (use --force to overwrite)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    for s in make_samples(n_samples, seed, size, coverage):
        save_sample(out, "train", s)
    if n_test:
        for s in make_samples(n_test, seed + 1, size, coverage, prefix="test"):
            save_sample(out, "test", s)
    auth_dir = out / "authentic" / "images"
    auth_dir.mkdir(parents=True, exist_ok=True)
    for k, img in enumerate(make_authentic(n_authentic or n_samples, seed, size)):
        write_image(auth_dir / f"auth_{k:04d}.png", img)
    return out

