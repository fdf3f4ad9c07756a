"""Task losses, the temperature regularizer and evaluation metrics.

Loss functions return ``(value, grad)`` where ``grad`` is the derivative with
respect to the prediction, ready to feed into the network's backward pass.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

NUM_CLASSES = 10
ROW_LAYOUT = (3, 4, 3)


@dataclass(frozen=True)
class PatchLayout:
    """Detector regions, one ``(row, col, side)`` square per class."""

    detector_shape: tuple[int, int]
    patches: tuple[tuple[int, int, int], ...]

    def mask(self, class_index: int) -> np.ndarray:
        r, c, s = self.patches[class_index]
        grid = np.zeros(self.detector_shape)
        grid[r:r + s, c:c + s] = 1.0
        return grid

    def patch_means(self, intensity) -> np.ndarray:
        """Mean intensity per patch; leading batch axes are kept."""
        intensity = np.asarray(intensity)
        return np.stack([intensity[..., r:r + s, c:c + s].mean(axis=(-2, -1))
                         for r, c, s in self.patches], axis=-1)


@dataclass(frozen=True)
class LabelMap:
    grid: np.ndarray
    layout: PatchLayout
    class_index: int


@dataclass(frozen=True)
class LossBreakdown:
    task_loss: float
    regularizer: float = 0.0

    @property
    def total(self) -> float:
        return self.task_loss + self.regularizer


def patch_layout(detector_shape) -> PatchLayout:
    """Rows of 3, 4 and 3 equal squares, centered on the detector.

    Side is ``min_dim // 6``; rows are separated by one side and patches
    within a row by half a side.
    """
    h, w = (int(s) for s in detector_shape)
    side = min(h, w) // 6
    if side < 1:
        raise ValueError(f"detector {detector_shape} too small for the 10-patch layout")
    hgap = side // 2
    top = (h - (3 * side + 2 * side)) // 2
    patches = []
    for row, count in enumerate(ROW_LAYOUT):
        span = count * side + (count - 1) * hgap
        if span > w:
            raise ValueError(f"detector {detector_shape} too small for the 10-patch layout")
        left = (w - span) // 2
        r = top + row * 2 * side
        for i in range(count):
            patches.append((r, left + i * (side + hgap), side))
    return PatchLayout((h, w), tuple(patches))


def build_label_map(class_index: int, detector_shape) -> LabelMap:
    if not 0 <= class_index < NUM_CLASSES:
        raise ValueError(f"class index must be in 0..9, got {class_index}")
    layout = patch_layout(detector_shape)
    return LabelMap(layout.mask(class_index), layout, class_index)


def classification_loss(target, intensity):
    """Weighted MSE that down-weights target pixels to 10/11.

    ``target`` is a label grid (or batch of grids) matching ``intensity``.
    Batches are averaged over all pixels of all samples.
    """
    y = np.asarray(target.grid if isinstance(target, LabelMap) else target, dtype=float)
    i = np.asarray(intensity, dtype=float)
    if y.shape != i.shape:
        raise ValueError(f"label shape {y.shape} does not match intensity {i.shape}")
    weight = 1.0 - y / 11.0
    err = i - y
    n = err.size
    return float((err**2 * weight).sum() / n), 2.0 * err * weight / n


def classify(intensity, layout: PatchLayout):
    """Index of the brightest patch; ``argmax`` takes the lowest index on ties."""
    return np.argmax(layout.patch_means(intensity), axis=-1)


def reverse_huber(pred, target, c_frac: float = 0.2):
    """berHu loss: L1 up to ``c = c_frac * max|e|``, quadratic beyond.

    ``c`` is computed over the whole batch and treated as a constant.
    """
    if np.shape(pred) != np.shape(target):
        raise ValueError(f"shape mismatch {np.shape(pred)} vs {np.shape(target)}")
    e = np.asarray(pred, dtype=float) - np.asarray(target, dtype=float)
    if not 0 < c_frac < 1:
        raise ValueError(f"c_frac must lie in (0, 1), got {c_frac}")
    a = np.abs(e)
    c = c_frac * a.max() if a.size else 0.0
    if c == 0:
        return 0.0, np.zeros_like(e)
    n = e.size
    quad = a > c
    loss = np.where(quad, (e**2 + c**2) / (2 * c), a)
    grad = np.where(quad, e / c, np.sign(e)) / n
    return float(loss.sum() / n), grad


def qpi_target(input_phase):
    phase = np.asarray(input_phase, dtype=float)
    if phase.size and (phase.min() < 0 or phase.max() > np.pi):
        raise ValueError("input phase must lie in [0, pi]")
    return phase / np.pi


def regularizer_scale(epoch: int, beta: int) -> int:
    if beta < 1:
        raise ValueError(f"beta must be >= 1, got {beta}")
    return 2 ** (epoch // beta)


def lt_regularizer(k_vec, epoch: int, beta: int, lambda1: float, lambda2: float):
    """``lambda1 * s_t * (|k|^2 - lambda2^2)`` with ``s_t = 2**(epoch // beta)``."""
    k = np.asarray(k_vec, dtype=float)
    s = regularizer_scale(epoch, beta)
    value = lambda1 * s * (float(k @ k) - lambda2**2)
    return value, 2.0 * lambda1 * s * k


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b, dynamic_range: float = 1.0, window_size: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over all fully-contained Gaussian windows."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim != 2 or min(a.shape) < window_size:
        raise ValueError(f"images must be 2D and at least {window_size}x{window_size}")
    if not dynamic_range > 0:
        raise ValueError("dynamic_range must be positive")
    c1 = (0.01 * dynamic_range) ** 2
    c2 = (0.03 * dynamic_range) ** 2
    win = gaussian_window(window_size, sigma)

    def filt(x):
        return fftconvolve(x, win, mode="valid")

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def phase_error_curve(pred_intensity, gt_phase, bins: int = 16):
    """Mean ``|pi*I - phi|`` per uniform phase bin over [0, pi].

    Returns a list of ``(bin_center, mean_error)``; empty bins are omitted.
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    err = np.abs(np.pi * np.asarray(pred_intensity, dtype=float).ravel()
                 - np.asarray(gt_phase, dtype=float).ravel())
    phase = np.asarray(gt_phase, dtype=float).ravel()
    edges = np.linspace(0.0, np.pi, bins + 1)
    idx = np.clip(np.searchsorted(edges, phase, side="right") - 1, 0, bins - 1)
    sums = np.bincount(idx, weights=err, minlength=bins)
    counts = np.bincount(idx, minlength=bins)
    centers = 0.5 * (edges[:-1] + edges[1:])
    return [(float(centers[i]), float(sums[i] / counts[i])) for i in range(bins) if counts[i]]
