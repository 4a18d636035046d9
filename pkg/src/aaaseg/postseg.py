"""Probability map -> final mask: Otsu threshold, then the largest 26-connected object."""
from dataclasses import dataclass

import numpy as np

from .kernels import label26
from .volcore import BinaryMask3D, histogram

__all__ = [
    "OTSU_BINS",
    "otsu_threshold",
    "otsu_bin",
    "binarize",
    "ComponentLabeling",
    "label_components",
    "largest_component",
    "segment",
]

OTSU_BINS = 256


def otsu_bin(counts):
    """Index k of the best cut (class 0 = bins 0..k) for integer bin counts.

    Inter-class variance is scale/shift invariant, so bin indices stand in
    for bin values. With n0 = sum of counts up to k, s0 = sum of i*count_i up
    to k and totals N, S, the variance is proportional to
    (N*s0 - n0*S)^2 / (n0 * (N - n0)). Candidates are compared as exact
    integer fractions, so ties resolve to the lowest k deterministically.
    """
    counts = [int(c) for c in counts]
    total = sum(counts)
    moment = sum(i * c for i, c in enumerate(counts))
    best_k, best_num, best_den = None, 0, 1
    n0 = s0 = 0
    for k in range(len(counts) - 1):
        n0 += counts[k]
        s0 += k * counts[k]
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            continue
        num = (total * s0 - n0 * moment) ** 2
        den = n0 * n1
        if best_k is None or num * best_den > best_num * den:
            best_k, best_num, best_den = k, num, den
    if best_k is None or best_num == 0:
        raise ValueError("Otsu threshold undefined: values occupy a single histogram bin")
    return best_k


def otsu_threshold(prob, bins=OTSU_BINS):
    """Threshold on [0, 1]: the upper edge of the bin that maximises inter-class variance."""
    data = prob.data if hasattr(prob, "data") else np.asarray(prob)
    data = np.asarray(data, dtype=np.float64).ravel()
    if data.size and (data.min() < 0 or data.max() > 1):
        raise ValueError("probability values must lie in [0, 1]")
    h = histogram(data, bins, 0.0, 1.0)
    k = otsu_bin(h.counts)
    return h.lower + (k + 1) * h.width


def binarize(prob, threshold):
    """Foreground where p > threshold."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    # compare in float64 so the threshold is not rounded to float32
    return BinaryMask3D(prob.data.astype(np.float64) > float(threshold), prob.spacing, prob.origin)


@dataclass(frozen=True, eq=False)
class ComponentLabeling:
    """Labels 1..count in order of first raster appearance; 0 is background."""

    labels: np.ndarray
    count: int
    sizes: np.ndarray  # sizes[i] is the voxel count of label i + 1


def label_components(mask):
    data = mask.data if hasattr(mask, "data") else np.asarray(mask, dtype=bool)
    labels, count = label26(data)
    sizes = np.bincount(labels.ravel(), minlength=count + 1)[1:]
    return ComponentLabeling(labels, int(count), sizes)


def largest_component(mask):
    """Keep only the biggest 26-connected object (ties: the one seen first in raster order)."""
    lab = label_components(mask)
    if lab.count == 0:
        return mask.with_data(np.zeros_like(mask.data))
    keep = int(np.argmax(lab.sizes)) + 1
    return mask.with_data(lab.labels == keep)


def segment(prob):
    """Full postprocessing; returns (mask, threshold)."""
    t = otsu_threshold(prob)
    return largest_component(binarize(prob, t)), t
