"""Contrastive anomaly mask refinement.

The inpainting pipeline only ever changes pixels inside the coarse mask,
so a pixel-accurate anomaly mask falls out of comparing the input and the
generated image: score the discrepancy, threshold, clean up speckle, and
intersect with the coarse mask. The intersection is enforced structurally
rather than assumed, so codec artifacts can never leak the mask outside
the inpainted region.

The default change detector is channel-max absolute difference; trained
two-image change detectors plug in through the registry as external
adapters that must emit [0, 1]-normalized maps.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, ValidationError
from .images import require_same_shape

EIGHT_CONNECTED = np.ones((3, 3), bool)


@dataclass
class RefineConfig:
    threshold: float = 0.9
    min_component_area: int = 4
    closing_radius: int = 1

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValidationError(
                f"threshold must lie in (0, 1), got {self.threshold}")
        if self.min_component_area < 0 or self.closing_radius < 0:
            raise ValidationError("cleanup parameters must be >= 0")


def absdiff_score(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-pixel max-over-channels absolute difference, in [0, 1]."""
    require_same_shape(a, b, "absdiff inputs")
    diff = np.abs(a.astype(np.float64) - b.astype(np.float64))
    if diff.ndim == 3:
        diff = diff.max(axis=2)
    return np.clip(diff, 0.0, 1.0)


class AbsDiffDetector:
    """Default change detector: raw intensity discrepancy."""

    kind = "absdiff-default"

    def score(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return absdiff_score(a, b)


class ExternalDetectorAdapter:
    """Wraps an external two-image scorer; clamps its output to [0, 1].

    ``score_fn(a, b)`` must return a (H, W) map at the input resolution.
    Calibration of the raw score into [0, 1] is the adapter's job; this
    wrapper only clamps.
    """

    kind = "external-adapter"

    def __init__(self, score_fn):
        self._score_fn = score_fn

    def score(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        require_same_shape(a, b, "detector inputs")
        out = np.asarray(self._score_fn(a, b), dtype=np.float64)
        if out.shape != a.shape[:2]:
            raise ValidationError(
                f"detector returned {out.shape}, expected {a.shape[:2]}")
        return np.clip(out, 0.0, 1.0)


class KernelDetector(ExternalDetectorAdapter):
    """External detector stand-in: smoothed absolute difference.

    Loads a convolution kernel from an .npz (array ``kernel``) and applies
    it to the absdiff map. Exists so the registry's external detector slot
    has a concrete, testable implementation.
    """

    def __init__(self, weight_path: str | Path):
        data = np.load(weight_path)
        if "kernel" not in data:
            raise ConfigError(f"{weight_path}: expected array 'kernel'")
        kernel = np.asarray(data["kernel"], dtype=np.float64)
        kernel = kernel / max(kernel.sum(), 1e-12)

        def smoothed(a, b):
            return ndimage.convolve(absdiff_score(a, b), kernel,
                                    mode="nearest")

        super().__init__(smoothed)


def build_detector(entry: dict | None = None, base_dir: Path | None = None):
    if entry is None or entry.get("kind") == "toy":
        return AbsDiffDetector()
    if "weight_path" not in entry:
        raise ConfigError("external detector entry needs weight_path")
    p = Path(entry["weight_path"])
    if not p.is_absolute() and base_dir is not None:
        p = base_dir / p
    return KernelDetector(p)


def morphological_closing(mask: np.ndarray, radius: int) -> np.ndarray:
    """Closing with a square element; erosion treats the border as solid."""
    if radius == 0:
        return mask.copy()
    side = 2 * radius + 1
    structure = np.ones((side, side), bool)
    dilated = ndimage.binary_dilation(mask, structure=structure)
    return ~ndimage.binary_dilation(~dilated, structure=structure)


def remove_small_components(mask: np.ndarray, min_area: int) -> np.ndarray:
    if min_area <= 1:
        return mask.copy()
    labels, n = ndimage.label(mask, structure=EIGHT_CONNECTED)
    if n == 0:
        return mask.copy()
    areas = np.bincount(labels.ravel())
    keep = np.zeros(n + 1, dtype=bool)
    keep[1:] = areas[1:] >= min_area
    return keep[labels]


def refine(input_image: np.ndarray, generated: np.ndarray,
           coarse_mask: np.ndarray, detector=None,
           config: RefineConfig | None = None) -> np.ndarray:
    """Refined binary anomaly mask from the input/generated discrepancy.

    threshold -> closing -> drop components below min area -> intersect
    with the coarse mask. The result is always a subset of the coarse
    mask.
    """
    detector = detector or AbsDiffDetector()
    config = config or RefineConfig()
    require_same_shape(input_image, generated, "refine images")
    require_same_shape(input_image, coarse_mask, "refine mask")
    score = detector.score(input_image, generated)
    binary = score >= config.threshold
    cleaned = morphological_closing(binary, config.closing_radius)
    cleaned = remove_small_components(cleaned, config.min_component_area)
    return cleaned & coarse_mask.astype(bool)
