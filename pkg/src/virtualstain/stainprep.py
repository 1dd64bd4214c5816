"""Stain separation, candidate detection, class rebalancing and augmentation."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import ndimage

from .domain import ClassRatioConfig, Label, Patch, SampleRecord, StainDomain

log = logging.getLogger(__name__)

# Hematoxylin, eosin and DAB optical-density vectors (Ruifrok & Johnston),
# normalized to unit length.
_RAW_HED = np.array(
    [
        [0.65, 0.70, 0.29],
        [0.07, 0.99, 0.11],
        [0.27, 0.57, 0.78],
    ]
)
DEFAULT_STAIN_VECTORS = _RAW_HED / np.linalg.norm(_RAW_HED, axis=1, keepdims=True)

HEMATOXYLIN, EOSIN, DAB = 0, 1, 2

# Half an 8-bit quantization level below the darkest representable value.
LOG_EPSILON = 1.0 / 512.0

DEFAULT_DOH_SIGMAS = (2.0, 3.0, 4.0, 6.0, 8.0)


class ConfigurationError(ValueError):
    pass


class DegenerateClassError(ValueError):
    pass


@dataclass(frozen=True)
class StainMatrix:
    """Rows are unit optical-density vectors: hematoxylin, eosin, DAB."""

    od_vectors: np.ndarray = field(default_factory=lambda: DEFAULT_STAIN_VECTORS.copy())
    max_condition: float = 1e3

    def __post_init__(self):
        m = np.array(self.od_vectors, dtype=np.float64)
        if m.shape != (3, 3):
            raise ConfigurationError(f"stain matrix must be 3x3, got {m.shape}")
        norms = np.linalg.norm(m, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-6):
            raise ConfigurationError(f"stain vectors must have unit norm, got norms {norms}")
        cond = np.linalg.cond(m)
        if not np.isfinite(cond) or cond > self.max_condition:
            raise ConfigurationError(f"stain matrix is singular or ill-conditioned (cond={cond:.3g})")
        m.setflags(write=False)
        object.__setattr__(self, "od_vectors", m)

    @classmethod
    def from_vectors(cls, vectors, max_condition: float = 1e3) -> "StainMatrix":
        v = np.asarray(vectors, dtype=np.float64)
        return cls(v / np.linalg.norm(v, axis=1, keepdims=True), max_condition)

    @property
    def inverse(self) -> np.ndarray:
        return np.linalg.inv(self.od_vectors)


def to_optical_density(pixels: np.ndarray) -> np.ndarray:
    return -np.log(np.maximum(np.asarray(pixels, dtype=np.float64), LOG_EPSILON))


def from_concentrations(conc: np.ndarray, stains: StainMatrix | np.ndarray) -> np.ndarray:
    """Beer-Lambert forward model: RGB = exp(-concentrations @ stain_vectors)."""
    m = stains.od_vectors if isinstance(stains, StainMatrix) else np.asarray(stains)
    return np.exp(-np.asarray(conc, dtype=np.float64) @ m)


def color_deconvolve(patch: Patch | np.ndarray, stains: Optional[StainMatrix] = None) -> np.ndarray:
    """Per-pixel stain concentrations (H x W x 3, channels H/E/DAB).

    Concentrations are not clipped at zero: negative values flag a stain
    matrix that does not fit the image.
    """
    stains = stains if stains is not None else StainMatrix()
    pixels = patch.pixels if isinstance(patch, Patch) else np.asarray(patch)
    return to_optical_density(pixels) @ stains.inverse


@dataclass(frozen=True)
class Detection:
    center: tuple[int, int]
    score: float
    sigma: float = 0.0


@dataclass(frozen=True)
class CandidateSet:
    detections: tuple[Detection, ...]
    source_patch: str = ""
    kind: str = "positive_phh3"

    def __len__(self):
        return len(self.detections)

    @property
    def centers(self) -> list[tuple[int, int]]:
        return [d.center for d in self.detections]


def _suppress_close(dets: list[Detection], min_separation: float) -> list[Detection]:
    """Greedy non-maximum suppression by score."""
    kept: list[Detection] = []
    for d in sorted(dets, key=lambda d: (-d.score, d.center)):
        if all(np.hypot(d.center[0] - k.center[0], d.center[1] - k.center[1]) >= min_separation for k in kept):
            kept.append(d)
    return sorted(kept, key=lambda d: d.center)


def detect_positive_candidates(
    phh3_patch: Patch,
    stains: Optional[StainMatrix] = None,
    dab_threshold: float = 0.3,
    min_area: int = 10,
    min_separation: float = 10.0,
    selector: Optional[Callable[[Patch, Detection], bool]] = None,
) -> CandidateSet:
    """Connected regions of strong DAB signal, reported by centroid.

    ``selector`` lets a learned filter veto candidates; by default every
    region passing the threshold and area rule is kept.
    """
    if phh3_patch.stain != StainDomain.PHH3:
        raise ValueError("positive candidates are detected on PHH3 patches")
    dab = color_deconvolve(phh3_patch, stains)[..., DAB]
    mask = dab > dab_threshold
    labels, n = ndimage.label(mask)
    dets = []
    h, w = dab.shape
    for region in range(1, n + 1):
        sel = labels == region
        area = int(sel.sum())
        if area < min_area:
            continue
        rows, cols = np.nonzero(sel)
        weights = dab[rows, cols]
        r = float(np.average(rows, weights=weights))
        c = float(np.average(cols, weights=weights))
        center = (min(max(int(round(r)), 0), h - 1), min(max(int(round(c)), 0), w - 1))
        det = Detection(center, float(weights.mean()))
        if selector is None or selector(phh3_patch, det):
            dets.append(det)
    dets = _suppress_close(dets, min_separation)
    return CandidateSet(tuple(dets), phh3_patch.source_id, "positive_phh3")


def inverted_luminance(pixels: np.ndarray) -> np.ndarray:
    px = np.asarray(pixels, dtype=np.float64)
    return 1.0 - (0.2125 * px[..., 0] + 0.7154 * px[..., 1] + 0.0721 * px[..., 2])


def doh_stack(image: np.ndarray, sigmas: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """Scale-normalized determinant and trace of the Hessian for each sigma.

    Returns ``(det, trace)`` arrays of shape (len(sigmas), H, W).
    """
    dets, traces = [], []
    for s in sigmas:
        hrr = ndimage.gaussian_filter(image, s, order=(2, 0), mode="reflect")
        hcc = ndimage.gaussian_filter(image, s, order=(0, 2), mode="reflect")
        hrc = ndimage.gaussian_filter(image, s, order=(1, 1), mode="reflect")
        dets.append(s**4 * (hrr * hcc - hrc**2))
        traces.append(s**2 * (hrr + hcc))
    return np.stack(dets), np.stack(traces)


def detect_negative_candidates(
    he_patch: Patch,
    positives: Optional[CandidateSet] = None,
    doh_sigmas: Sequence[float] = DEFAULT_DOH_SIGMAS,
    doh_threshold: float = 0.002,
    exclusion_radius: float = 10.0,
    min_separation: float = 10.0,
) -> CandidateSet:
    """Dark cell bodies found as Determinant-of-Hessian maxima.

    Detections within ``exclusion_radius`` of a positive center are dropped.
    """
    if he_patch.stain != StainDomain.HE:
        raise ValueError("negative candidates are detected on H&E patches")
    sigmas = [float(s) for s in doh_sigmas]
    if not sigmas:
        raise ConfigurationError("doh_sigmas must not be empty")
    image = inverted_luminance(he_patch.pixels)
    det, trace = doh_stack(image, sigmas)
    # Bright blobs in the inverted image (dark in the original) have negative trace.
    response = np.where(trace < 0, det, 0.0)
    local_max = ndimage.maximum_filter(response, size=3, mode="nearest") == response
    peaks = np.argwhere(local_max & (response > doh_threshold))

    candidates = [
        Detection((int(r), int(c)), float(response[k, r, c]), sigmas[k]) for k, r, c in peaks
    ]
    # Spatial suppression: each maximum claims a disk of its own sigma.
    kept: list[Detection] = []
    for d in sorted(candidates, key=lambda d: (-d.score, d.center)):
        if all(
            np.hypot(d.center[0] - k.center[0], d.center[1] - k.center[1]) > max(k.sigma, d.sigma)
            for k in kept
        ):
            kept.append(d)
    kept = _suppress_close(kept, min_separation)

    if positives is not None and len(positives):
        pos = np.array(positives.centers, dtype=np.float64)
        kept = [
            d for d in kept
            if np.min(np.hypot(pos[:, 0] - d.center[0], pos[:, 1] - d.center[1])) > exclusion_radius
        ]
    return CandidateSet(tuple(kept), he_patch.source_id, "negative_he")


def rebalance(
    records: Sequence[SampleRecord],
    config: ClassRatioConfig = ClassRatioConfig(),
    seed: int = 0,
) -> tuple[list[SampleRecord], np.ndarray]:
    """Keep every positive, subsample negatives to ``train_ratio`` per positive.

    Positives get weight ``oversample_weight`` and negatives weight 1. The
    output keeps the input order.
    """
    pos_idx = [i for i, r in enumerate(records) if r.label.is_positive]
    neg_idx = [i for i, r in enumerate(records) if not r.label.is_positive]
    if not pos_idx:
        raise DegenerateClassError("no mitosis samples to rebalance against")
    wanted = config.train_ratio * len(pos_idx)
    if len(neg_idx) < wanted:
        warnings.warn(
            f"only {len(neg_idx)} negatives available for {len(pos_idx)} positives "
            f"(wanted {wanted}); keeping all negatives",
            stacklevel=2,
        )
        chosen = set(neg_idx)
    else:
        rng = np.random.default_rng(seed)
        chosen = set(rng.choice(np.array(neg_idx), size=wanted, replace=False).tolist())
    keep = sorted(set(pos_idx) | chosen)
    out = [records[i] for i in keep]
    weights = np.array(
        [config.oversample_weight if records[i].label.is_positive else 1.0 for i in keep]
    )
    return out, weights


N_DIHEDRAL = 8


def augment_array(arr: np.ndarray, op_id: int) -> np.ndarray:
    """Dihedral transform of the two leading axes.

    op_id 0-3 rotate by 0/90/180/270 degrees; 4-7 flip left-right first.
    """
    if not 0 <= int(op_id) < N_DIHEDRAL:
        raise ValueError(f"op_id must be in 0..7, got {op_id}")
    if arr.shape[0] != arr.shape[1]:
        raise ValueError("augmentation needs a square array")
    out = arr[:, ::-1] if op_id >= 4 else arr
    return np.ascontiguousarray(np.rot90(out, k=op_id % 4, axes=(0, 1)))


def augment(patch: Patch, op_id: int) -> Patch:
    return patch.with_pixels(augment_array(patch.pixels, op_id))


def compose_ops(first: int, second: int) -> int:
    """op_id equivalent to applying ``first`` then ``second``."""
    probe = np.arange(9).reshape(3, 3)
    target = augment_array(augment_array(probe, first), second)
    for k in range(N_DIHEDRAL):
        if np.array_equal(augment_array(probe, k), target):
            return k
    raise AssertionError("dihedral group not closed")  # unreachable
