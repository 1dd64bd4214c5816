"""Procedural H&E / PHH3 patch pairs with known mitosis ground truth.

Each patch is rendered in stain-concentration space and mapped to RGB through
the Beer-Lambert model, so color deconvolution with the same stain matrix
recovers the concentrations up to noise and 8-bit quantization.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .domain import DatasetManifest, Label, Patch, SampleRecord, Split, StainDomain, save_image
from .stainprep import DAB, DEFAULT_STAIN_VECTORS, EOSIN, HEMATOXYLIN, ConfigurationError, from_concentrations

PROTOCOL_SPLIT = (5, 9, 4)  # gan_train, cls_train, test slides out of 18


@dataclass(frozen=True)
class PhantomConfig:
    seed: int = 0
    patch_size: int = 100
    nuclei_per_patch: tuple[int, int] = (3, 6)
    # None means 1 / (1 + imbalance_target), i.e. 1:60 gives 1/61.
    mitosis_rate: Optional[float] = None
    stain_od_matrix: tuple[tuple[float, ...], ...] = tuple(map(tuple, DEFAULT_STAIN_VECTORS.tolist()))
    noise_level: float = 0.001
    imbalance_target: float = 60.0
    min_nucleus_distance: float = 20.0

    def __post_init__(self):
        lo, hi = self.nuclei_per_patch
        if lo < 1 or hi < lo:
            raise ConfigurationError(f"empty nuclei_per_patch range {self.nuclei_per_patch}")
        m = np.asarray(self.stain_od_matrix, dtype=np.float64)
        if m.shape != (3, 3) or not np.allclose(np.linalg.norm(m, axis=1), 1.0, atol=1e-6):
            raise ConfigurationError("stain_od_matrix must be 3x3 with unit-norm rows")
        if not 0.0 <= self.rate <= 1.0:
            raise ConfigurationError("mitosis_rate must be in [0, 1]")
        if self.noise_level < 0:
            raise ConfigurationError("noise_level must be >= 0")
        if self.patch_size < 32:
            raise ConfigurationError("patch_size must be at least 32")

    @property
    def rate(self) -> float:
        if self.mitosis_rate is not None:
            return float(self.mitosis_rate)
        return 1.0 / (1.0 + self.imbalance_target)

    @property
    def stain_matrix(self) -> np.ndarray:
        return np.asarray(self.stain_od_matrix, dtype=np.float64)


@dataclass
class PhantomPair:
    he: Patch
    phh3: Patch
    ground_truth: list[tuple[tuple[int, int], Label]]
    he_concentrations: np.ndarray
    phh3_concentrations: np.ndarray


def _smooth_noise(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    field_ = ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma, mode="wrap")
    return field_ / (field_.std() + 1e-12)


def _place_nuclei(rng, n: int, size: int, min_dist: float) -> list[tuple[int, int]]:
    centers = [(size // 2, size // 2)]
    margin = 8
    attempts = 0
    while len(centers) < n:
        attempts += 1
        if attempts > 10_000:
            raise ConfigurationError(f"cannot place {n} nuclei {min_dist}px apart in a {size}px patch")
        r, c = rng.integers(margin, size - margin, size=2)
        if all(math.hypot(r - a, c - b) >= min_dist for a, b in centers):
            centers.append((int(r), int(c)))
    return centers


def _ellipse_blob(rows, cols, center, rng) -> np.ndarray:
    sigma = rng.uniform(3.5, 5.0)
    ratio = rng.uniform(0.6, 1.0)
    theta = rng.uniform(0, np.pi)
    dr, dc = rows - center[0], cols - center[1]
    u = dr * np.cos(theta) + dc * np.sin(theta)
    v = -dr * np.sin(theta) + dc * np.cos(theta)
    return np.exp(-0.5 * ((u / sigma) ** 2 + (v / (sigma * ratio)) ** 2))


def _lobed_blob(rows, cols, center, rng) -> np.ndarray:
    k = int(rng.integers(3, 6))
    base = rng.uniform(0, 2 * np.pi)
    # Condensed chromatin core keeps the stain maximum near the center.
    out = 1.5 * np.exp(-0.5 * ((rows - center[0]) ** 2 + (cols - center[1]) ** 2) / 2.0**2)
    for j in range(k):
        ang = base + 2 * np.pi * j / k + rng.uniform(-0.3, 0.3)
        rad = rng.uniform(2.5, 4.0)
        s = rng.uniform(1.6, 2.4)
        lr, lc = center[0] + rad * np.sin(ang), center[1] + rad * np.cos(ang)
        out += np.exp(-0.5 * ((rows - lr) ** 2 + (cols - lc) ** 2) / s**2)
    return out / out.max()


def render_pair(config: PhantomConfig, index: int, source_id: str = "", center: tuple[int, int] = (0, 0)) -> PhantomPair:
    """Render pair ``index``; a pure function of ``(config, index)``."""
    rng = np.random.default_rng([config.seed, int(index)])
    size = config.patch_size
    lo, hi = config.nuclei_per_patch
    n = int(rng.integers(lo, hi + 1))
    centers = _place_nuclei(rng, n, size, config.min_nucleus_distance)
    mitotic = rng.random(n) < config.rate

    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    he = np.zeros((size, size, 3))
    ph = np.zeros((size, size, 3))
    he[..., EOSIN] = np.clip(0.25 + 0.07 * _smooth_noise(rng, size, 8.0), 0.02, None)
    he[..., HEMATOXYLIN] = np.clip(0.04 + 0.015 * _smooth_noise(rng, size, 6.0), 0.0, None)
    ph[..., HEMATOXYLIN] = np.clip(0.07 + 0.025 * _smooth_noise(rng, size, 8.0), 0.0, None)

    truth = []
    for (r, c), is_mit in zip(centers, mitotic):
        if is_mit:
            blob = _lobed_blob(rows, cols, (r, c), rng)
            he[..., HEMATOXYLIN] += rng.uniform(1.3, 1.7) * blob
            ph[..., DAB] += rng.uniform(0.9, 1.3) * blob
            ph[..., HEMATOXYLIN] += 0.15 * blob
        else:
            blob = _ellipse_blob(rows, cols, (r, c), rng)
            he[..., HEMATOXYLIN] += rng.uniform(0.6, 1.0) * blob
            ph[..., HEMATOXYLIN] += rng.uniform(0.35, 0.55) * blob
        truth.append(((r, c), Label.MITOSIS if is_mit else Label.NON_MITOSIS))

    stains = config.stain_matrix
    images = []
    for conc in (he, ph):
        px = from_concentrations(conc, stains)
        if config.noise_level > 0:
            px = px + config.noise_level * rng.normal(size=px.shape)
        images.append(np.round(np.clip(px, 0.0, 1.0) * 255.0) / 255.0)

    return PhantomPair(
        he=Patch(images[0], StainDomain.HE, source_id, center),
        phh3=Patch(images[1], StainDomain.PHH3, source_id, center),
        ground_truth=truth,
        he_concentrations=he,
        phh3_concentrations=ph,
    )


def generate_pair(config: PhantomConfig, index: int) -> tuple[Patch, Patch, list[tuple[tuple[int, int], Label]]]:
    """Aligned (H&E, PHH3) patches plus (center, label) for every nucleus.

    The first ground-truth entry is the focal nucleus at the patch center.
    """
    pair = render_pair(config, index)
    return pair.he, pair.phh3, pair.ground_truth


def protocol_split_sizes(n_slides: int) -> tuple[int, int, int]:
    """Slide counts per split, proportional to 5/9/4 out of 18."""
    if n_slides < 3:
        raise ValueError("need at least 3 slides to form gan_train/cls_train/test splits")
    gan = max(1, round(n_slides * PROTOCOL_SPLIT[0] / 18))
    test = max(1, round(n_slides * PROTOCOL_SPLIT[2] / 18))
    cls = n_slides - gan - test
    if cls < 1:
        gan, cls, test = 1, n_slides - 2, 1
    return gan, cls, test


def slide_splits(n_slides: int, split_sizes: Optional[tuple[int, int, int]] = None) -> list[Split]:
    sizes = tuple(split_sizes) if split_sizes else protocol_split_sizes(n_slides)
    if len(sizes) != 3 or sum(sizes) != n_slides or min(sizes) < 1:
        raise ValueError(f"split sizes {sizes} must be three positive counts summing to {n_slides}")
    return [Split.GAN_TRAIN] * sizes[0] + [Split.CLS_TRAIN] * sizes[1] + [Split.TEST] * sizes[2]


def generate_corpus(
    config: PhantomConfig,
    n_slides: int,
    patches_per_slide: int,
    out_dir: str | Path,
    split_sizes: Optional[tuple[int, int, int]] = None,
) -> DatasetManifest:
    """Write a paired phantom corpus and its manifest under ``out_dir``.

    Every index yields one H&E and one PHH3 record pointing at each other.
    The record label is that of the focal (central) nucleus.
    """
    if n_slides < 3:
        raise ValueError("need at least 3 slides to form gan_train/cls_train/test splits")
    out_dir = Path(out_dir)
    splits = slide_splits(n_slides, split_sizes)
    size = config.patch_size
    grid = math.ceil(math.sqrt(patches_per_slide))
    records = []
    for s in range(n_slides):
        source = f"slide{s:02d}"
        for k in range(patches_per_slide):
            index = s * patches_per_slide + k
            center = ((k // grid) * size + size // 2, (k % grid) * size + size // 2)
            pair = render_pair(config, index, source, center)
            he_ref = f"he/{source}_p{k:04d}.png"
            ph_ref = f"phh3/{source}_p{k:04d}.png"
            save_image(out_dir / he_ref, pair.he.pixels)
            save_image(out_dir / ph_ref, pair.phh3.pixels)
            label = pair.ground_truth[0][1]
            records.append(SampleRecord(he_ref, label, StainDomain.HE, splits[s], source, center, ph_ref))
            records.append(SampleRecord(ph_ref, label, StainDomain.PHH3, splits[s], source, center, he_ref))
    manifest = DatasetManifest(records, out_dir)
    manifest.write(out_dir / "manifest.jsonl")
    return manifest
