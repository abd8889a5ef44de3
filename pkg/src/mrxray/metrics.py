"""Image comparison metrics for evaluating translated projections.

All functions take 2-D float arrays (label first where two images are
compared) and are pure numpy; nothing here touches the autodiff tape.
"""

from __future__ import annotations

import math

import numpy as np

from . import formats
from .errors import DimensionError
from .losses import _sobel_magnitude

SSIM_WINDOW = 8
EDGE_MASK_THRESHOLD = 0.2
HIGH_BAND_CUTOFF = 0.375  # fraction of the full (unnormalized) frequency axis


def _check_pair(label: np.ndarray, generated: np.ndarray) -> None:
    if label.ndim != 2 or generated.ndim != 2:
        raise DimensionError(
            f"metrics expect 2-D images, got {label.shape} and {generated.shape}"
        )
    if label.shape != generated.shape:
        raise DimensionError(
            f"image shapes differ: {label.shape} vs {generated.shape}"
        )


def psnr(label: np.ndarray, generated: np.ndarray, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; +inf for identical images."""
    _check_pair(label, generated)
    mse = float(np.mean((label.astype(np.float64) - generated.astype(np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range * data_range / mse)


def ssim(label: np.ndarray, generated: np.ndarray, data_range: float = 1.0) -> float:
    """Mean structural similarity over all full 8x8 windows (uniform weighting).

    Windows slide with stride 1; images smaller than the window are
    rejected. Constants follow the conventional (0.01 r)^2, (0.03 r)^2.
    """
    _check_pair(label, generated)
    h, w = label.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise DimensionError(
            f"ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {h}x{w}"
        )
    x = label.astype(np.float64)
    y = generated.astype(np.float64)
    win = (SSIM_WINDOW, SSIM_WINDOW)
    xw = np.lib.stride_tricks.sliding_window_view(x, win)
    yw = np.lib.stride_tricks.sliding_window_view(y, win)
    mx = xw.mean(axis=(-2, -1))
    my = yw.mean(axis=(-2, -1))
    # population moments over each window
    vx = (xw * xw).mean(axis=(-2, -1)) - mx * mx
    vy = (yw * yw).mean(axis=(-2, -1)) - my * my
    cov = (xw * yw).mean(axis=(-2, -1)) - mx * my
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    num = (2 * mx * my + c1) * (2 * cov + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(np.mean(num / den))


def label_edge_map(label: np.ndarray) -> np.ndarray:
    """Normalized gradient-magnitude map of a 2-D label image."""
    if label.ndim != 2:
        raise DimensionError(f"expected a 2-D image, got shape {label.shape}")
    edges = _sobel_magnitude(label.astype(np.float64)[None, None])[0, 0]
    peak = edges.max()
    if peak > 0.0:
        edges = edges / peak
    return edges


def edge_region_mae(label: np.ndarray, generated: np.ndarray,
                    edge_map: np.ndarray | None = None,
                    threshold: float = EDGE_MASK_THRESHOLD) -> float | None:
    """Mean absolute error restricted to the label's edge region.

    The region is where the label's normalized gradient magnitude
    exceeds `threshold`; pass a precomputed `edge_map` to reuse it
    across arms. Returns None when the region is empty (for example a
    constant label), so callers can report a missing value instead of
    a misleading zero.
    """
    _check_pair(label, generated)
    if edge_map is None:
        edge_map = label_edge_map(label)
    elif edge_map.shape != label.shape:
        raise DimensionError(
            f"edge map shape {edge_map.shape} does not match image {label.shape}"
        )
    mask = edge_map > threshold
    if not mask.any():
        return None
    diff = np.abs(label.astype(np.float64) - generated.astype(np.float64))
    return float(diff[mask].mean())


def abs_diff_image(label: np.ndarray, generated: np.ndarray,
                   path: str | None = None) -> tuple[np.ndarray, float]:
    """Absolute difference map, optionally written for inspection.

    When `path` is given the map is stored as a 16-bit PGM (peak value
    mapped to 65535) and the scale needed to recover float values goes
    to a one-line `<path>.scale` sidecar.
    """
    _check_pair(label, generated)
    diff = np.abs(label.astype(np.float64) - generated.astype(np.float64))
    scale = float(diff.max()) if diff.max() > 0.0 else 1.0
    if path is not None:
        scale = formats.write_pgm16(path, diff)
        with open(f"{path}.scale", "w", encoding="ascii") as f:
            f.write(formats.fmt_float(scale) + "\n")
    return diff, scale


def high_band_fraction(image: np.ndarray, cutoff: float = HIGH_BAND_CUTOFF) -> float:
    """Fraction of non-DC spectral energy in the high-frequency band.

    The band is where max(|fu|, |fv|) >= cutoff, with frequencies from
    fftfreq in cycles per sample (so 0.5 is Nyquist and the default
    0.375 keeps the top quartile of each axis). Checkerboard artifacts
    from transposed convolutions concentrate energy here. Returns 0.0
    for constant images, which have no non-DC energy at all.
    """
    if image.ndim != 2:
        raise DimensionError(f"expected a 2-D image, got shape {image.shape}")
    spec = np.fft.fft2(image.astype(np.float64))
    power = np.abs(spec) ** 2
    power[0, 0] = 0.0
    total = power.sum()
    if total == 0.0:
        return 0.0
    fv = np.fft.fftfreq(image.shape[0])[:, None]
    fu = np.fft.fftfreq(image.shape[1])[None, :]
    band = np.maximum(np.abs(fv), np.abs(fu)) >= cutoff
    return float(power[band].sum() / total)
