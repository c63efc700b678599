"""Background estimation and foreground masking.

A clean background plate is the per-pixel temporal median of the first n
frames; each frame is then subtracted from it and the absolute difference
is binarized with adaptive Gaussian thresholding (per-pixel threshold =
Gaussian-weighted local mean minus an offset), followed by a 3x3
morphological open to knock out salt noise.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class BackgroundModel:
    median_image: np.ndarray  # HxW uint8
    n_frames_used: int

    @property
    def shape(self):
        return self.median_image.shape


@dataclass(frozen=True)
class ThresholdParams:
    window: int = 11
    c_offset: float = 2.0
    gaussian_sigma: float | None = None  # None -> window / 6

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError(f"window must be odd and >= 3, got {self.window}")
        if self.gaussian_sigma is not None and self.gaussian_sigma <= 0:
            raise ValueError("gaussian_sigma must be positive")

    @property
    def sigma(self):
        return self.gaussian_sigma if self.gaussian_sigma is not None else self.window / 6.0


def estimate_background(frames, n=10):
    """Per-pixel temporal median over the first min(n, len(frames)) frames.

    Even counts take the lower of the two middle values, which keeps the
    result in the 8-bit domain.
    """
    if not frames:
        raise ValueError("no frames to estimate background from")
    use = frames[: min(n, len(frames))]
    shape0 = use[0].shape
    for i, f in enumerate(use):
        if f.shape != shape0:
            raise ValueError(f"frame {i} has shape {f.shape}, expected {shape0}")
    stack = np.stack(use, axis=0)
    stack.sort(axis=0, kind="stable")
    median = stack[(len(use) - 1) // 2]
    return BackgroundModel(median_image=np.ascontiguousarray(median), n_frames_used=len(use))


def subtract(frame, bg):
    """Per-pixel absolute difference |frame - background|, uint8."""
    if frame.shape != bg.median_image.shape:
        raise ValueError(f"frame shape {frame.shape} != background shape {bg.median_image.shape}")
    diff = np.abs(frame.astype(np.int16) - bg.median_image.astype(np.int16))
    return diff.astype(np.uint8)


def gaussian_kernel_1d(window, sigma):
    x = np.arange(window, dtype=np.float64) - window // 2
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def sep_correlate(img, kx, ky):
    """Separable 2-D correlation (kx along columns, ky along rows), edge-replicated."""
    out = ndimage.correlate1d(img, np.asarray(kx, dtype=img.dtype), axis=1, mode="nearest")
    return ndimage.correlate1d(out, np.asarray(ky, dtype=img.dtype), axis=0, mode="nearest")


def local_gaussian_mean(img, window, sigma):
    """Gaussian-weighted local mean with edge replication, float64 output."""
    if window > img.shape[0] or window > img.shape[1]:
        raise ValueError(f"window {window} larger than image {img.shape[1]}x{img.shape[0]}")
    k = gaussian_kernel_1d(window, sigma)
    return sep_correlate(img.astype(np.float64), k, k)


def adaptive_gaussian_threshold(img, p):
    """Binarize: pixel -> 1 iff img > local Gaussian mean + c_offset.

    Foreground is the side that stands out above its neighborhood, so a
    larger c_offset shrinks the foreground set and a uniform (e.g. static
    difference) image binarizes to all zeros.
    """
    mean = local_gaussian_mean(img, p.window, p.sigma)
    return (img.astype(np.float64) > mean + p.c_offset).astype(np.uint8)


def _erode3(mask):
    p = np.pad(mask, 1, mode="constant", constant_values=1)
    out = mask.copy()
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            out = np.minimum(out, p[1 + dy:p.shape[0] - 1 + dy, 1 + dx:p.shape[1] - 1 + dx])
    return out


def _dilate3(mask):
    p = np.pad(mask, 1, mode="constant", constant_values=0)
    out = mask.copy()
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            out = np.maximum(out, p[1 + dy:p.shape[0] - 1 + dy, 1 + dx:p.shape[1] - 1 + dx])
    return out


def morphological_open(mask):
    """3x3 open (erode then dilate); outside treated as foreground on erode."""
    return _dilate3(_erode3(mask))


def foreground_mask(frame, bg, p):
    """Foreground mask of one frame: threshold the 3x3-opened |frame - bg|."""
    diff = subtract(frame, bg)
    return morphological_open(adaptive_gaussian_threshold(diff, p))
