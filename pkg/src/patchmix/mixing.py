"""Pairwise sample interpolation.

Three ways to compose two labeled images into one training sample:

* grid-mask composition — each patch region comes wholly from one source,
  the soft label weight equals the fraction of kept cells, and every
  patch carries the class of the image that supplied it;
* whole-image blending — a convex pixel blend (no patch labels);
* rectangle transplant — a fixed-size crop of the second image pasted at
  a Gaussian-drawn center (no patch labels).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import one_hot
from .errors import ConfigError
from .masks import PatchMask, expand_to_pixel_mask, mixing_ratio


@dataclass
class MixedSample:
    """One composed training sample.

    ``patch_labels`` is None when the composition does not align with the
    patch grid (blending, rectangle transplant).
    """

    image: np.ndarray            # (H, W, C) float64
    image_label: np.ndarray      # (class_count,) float64, sums to 1
    patch_labels: np.ndarray | None  # (P*P,) int64, row-major grid order
    lam: float                   # weight of the first source image


def _check_pair(x_i: np.ndarray, x_j: np.ndarray) -> None:
    if x_i.shape != x_j.shape:
        raise ConfigError(f"source shapes differ: {x_i.shape} vs {x_j.shape}")
    if x_i.ndim != 3:
        raise ConfigError("images must have shape (height, width, channels)")


def patchmix(
    x_i: np.ndarray,
    y_i: int,
    x_j: np.ndarray,
    y_j: int,
    mask: PatchMask,
    class_count: int,
) -> MixedSample:
    """Compose two images under a grid mask.

    Bit 1 keeps ``x_i`` pixels, bit 0 takes ``x_j``.  The soft image
    label weights the two one-hot labels by the kept-cell fraction, and
    patch n (row-major) is labeled with the class of its source image.
    """
    _check_pair(x_i, x_j)
    height, width = x_i.shape[:2]
    pixel = expand_to_pixel_mask(mask, width, height)
    keep = pixel.bits.astype(bool)[:, :, None]
    image = np.where(keep, x_i, x_j).astype(np.float64)
    lam = mixing_ratio(mask)
    image_label = lam * one_hot(y_i, class_count) + (1.0 - lam) * one_hot(y_j, class_count)
    patch_labels = np.where(mask.bits.reshape(-1) == 1, int(y_i), int(y_j)).astype(np.int64)
    return MixedSample(image, image_label, patch_labels, lam)


def mixup(
    x_i: np.ndarray,
    y_i: int,
    x_j: np.ndarray,
    y_j: int,
    lam: float,
    class_count: int,
) -> MixedSample:
    """Convex pixel blend; the caller supplies the blend weight."""
    _check_pair(x_i, x_j)
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"blend weight must lie in [0, 1], got {lam}")
    lam = float(lam)
    image = lam * x_i.astype(np.float64) + (1.0 - lam) * x_j.astype(np.float64)
    image_label = lam * one_hot(y_i, class_count) + (1.0 - lam) * one_hot(y_j, class_count)
    return MixedSample(image, image_label, None, lam)


def cutmix(
    x_i: np.ndarray,
    y_i: int,
    x_j: np.ndarray,
    y_j: int,
    rng: np.random.Generator,
    region_w: int,
    region_h: int,
    class_count: int,
) -> MixedSample:
    """Paste a region_w x region_h crop of ``x_j`` into ``x_i``.

    The region center is drawn from a Gaussian at the image center with
    std one quarter of each dimension (horizontal first, then vertical),
    then clamped so the rectangle stays inside the image.  The label
    weight is one minus the pasted-area fraction.
    """
    _check_pair(x_i, x_j)
    height, width = x_i.shape[:2]
    if not 0 <= region_w <= width or not 0 <= region_h <= height:
        raise ConfigError(
            f"region {region_w}x{region_h} does not fit a {width}x{height} image"
        )
    image = x_i.astype(np.float64).copy()
    if region_w == 0 or region_h == 0:
        return MixedSample(image, one_hot(y_i, class_count), None, 1.0)
    cx = rng.normal(width / 2.0, width / 4.0)
    cy = rng.normal(height / 2.0, height / 4.0)
    x0 = int(np.clip(round(cx - region_w / 2.0), 0, width - region_w))
    y0 = int(np.clip(round(cy - region_h / 2.0), 0, height - region_h))
    image[y0 : y0 + region_h, x0 : x0 + region_w] = x_j[
        y0 : y0 + region_h, x0 : x0 + region_w
    ]
    lam = 1.0 - (region_w * region_h) / (width * height)
    image_label = lam * one_hot(y_i, class_count) + (1.0 - lam) * one_hot(y_j, class_count)
    return MixedSample(image, image_label, None, lam)
