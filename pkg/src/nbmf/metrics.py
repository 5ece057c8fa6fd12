"""Image extraction from trained fields and image-quality metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

from .field import NeuralField, field_eval
from .geometry import ScanGeometry, fov_radius
from .phantom import DensityImage, pixel_centers

SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def extract_image(fld: NeuralField, geom: ScanGeometry | None, n: int) -> DensityImage:
    """Evaluate the field at pixel centres of an ``n x n`` FOV grid; negatives clamped to 0.

    Without a geometry the field's own ``fov_radius`` sets the grid.
    """
    if n < 1:
        raise ValueError("resolution must be >= 1")
    r = fov_radius(geom) if geom is not None else fld.fov_radius
    vals = np.asarray(field_eval(fld, pixel_centers(r, n)), dtype=np.float64)
    np.maximum(vals, 0.0, out=vals)
    return DensityImage(np.moveaxis(vals, -1, 0).copy(), 2.0 * r / n)


def _check_pair(img, ref):
    img, ref = np.asarray(img, dtype=np.float64), np.asarray(ref, dtype=np.float64)
    if img.shape != ref.shape:
        raise ValueError(f"shape mismatch {img.shape} vs {ref.shape}")
    return img, ref


def _default_range(ref: np.ndarray, data_range):
    if data_range is None:
        data_range = float(ref.max())
    if not data_range > 0:
        raise ValueError("data_range must be positive (reference image is all zero?)")
    return data_range


def psnr(img, ref, data_range: float | None = None) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` when the images are identical."""
    img, ref = _check_pair(img, ref)
    data_range = _default_range(ref, data_range)
    mse = float(np.mean((img - ref) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range ** 2 / mse)


def _gaussian_window() -> np.ndarray:
    x = np.arange(SSIM_WIN) - SSIM_WIN // 2
    w = np.exp(-0.5 * (x / SSIM_SIGMA) ** 2)
    return w / w.sum()


def _filter(a: np.ndarray, w: np.ndarray) -> np.ndarray:
    # valid region only: borders are cropped after filtering
    return correlate1d(correlate1d(a, w, axis=0, mode="reflect"), w, axis=1, mode="reflect")


def ssim_map(img, ref, data_range: float | None = None) -> np.ndarray:
    img, ref = _check_pair(img, ref)
    if min(img.shape) < SSIM_WIN:
        raise ValueError(f"images must be at least {SSIM_WIN}x{SSIM_WIN}")
    data_range = _default_range(ref, data_range)
    c1, c2 = (SSIM_K1 * data_range) ** 2, (SSIM_K2 * data_range) ** 2
    w = _gaussian_window()
    mx, my = _filter(img, w), _filter(ref, w)
    vx = _filter(img * img, w) - mx * mx
    vy = _filter(ref * ref, w) - my * my
    cxy = _filter(img * ref, w) - mx * my
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    pad = SSIM_WIN // 2
    return s[pad:-pad, pad:-pad]


def ssim(img, ref, data_range: float | None = None) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03.

    ``data_range`` defaults to the maximum of ``ref``; pass it explicitly when
    comparing two reconstructions so the result is symmetric.
    """
    return float(ssim_map(img, ref, data_range).mean())


def row_profile(img, row: int) -> np.ndarray:
    img = np.asarray(img)
    if not (0 <= row < img.shape[0]):
        raise IndexError(f"row {row} outside image of {img.shape[0]} rows")
    return img[row].copy()


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Linear interpolation weights with pixel-centre alignment and clamped edges."""
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.minimum(np.floor(pos).astype(int), max(n_in - 2, 0))
    frac = pos - lo
    A = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    if n_in == 1:
        A[:, 0] = 1.0
        return A
    A[rows, lo] = 1.0 - frac
    A[rows, lo + 1] += frac
    return A


def bilinear_resample(img, n_out: int):
    """Bilinear resampling of a square image (or every channel of a DensityImage)."""
    if n_out < 1:
        raise ValueError("n_out must be >= 1")
    if isinstance(img, DensityImage):
        n_in = img.resolution
        data = np.stack([bilinear_resample(ch, n_out) for ch in img.data])
        return DensityImage(data, img.pixel_size * n_in / n_out)
    a = np.asarray(img, dtype=np.float64)
    if a.shape[0] == n_out and a.shape[1] == n_out:
        return a.copy()
    Ay, Ax = _interp_matrix(a.shape[0], n_out), _interp_matrix(a.shape[1], n_out)
    return Ay @ a @ Ax.T


@dataclass
class MetricReport:
    materials: list
    psnr: list
    ssim: list
    data_range: list
    resolution: int

    def psnr_flags(self) -> list:
        return [math.isinf(v) for v in self.psnr]

    def to_csv(self, path) -> None:
        lines = ["material,psnr_db,psnr_infinite,ssim,data_range,resolution"]
        for name, p, s, dr in zip(self.materials, self.psnr, self.ssim, self.data_range):
            pv = "inf" if math.isinf(p) else f"{p:.6f}"
            lines.append(f"{name},{pv},{int(math.isinf(p))},{s:.6f},{dr:.6g},{self.resolution}")
        Path(path).write_text("\n".join(lines) + "\n")

    def __str__(self) -> str:
        out = [f"{'material':<10}{'PSNR (dB)':>12}{'SSIM':>10}   (n={self.resolution})"]
        for name, p, s in zip(self.materials, self.psnr, self.ssim):
            pv = "inf" if math.isinf(p) else f"{p:.3f}"
            out.append(f"{name:<10}{pv:>12}{s:>10.4f}")
        return "\n".join(out)


def evaluate(recon: DensityImage, truth: DensityImage, names=None) -> MetricReport:
    """Per-material PSNR/SSIM with ``data_range = max(truth channel)``."""
    if recon.data.shape != truth.data.shape:
        raise ValueError(f"shape mismatch {recon.data.shape} vs {truth.data.shape}")
    names = list(names) if names is not None else [f"m{i}" for i in range(truth.n_materials)]
    ranges = [float(t.max()) for t in truth.data]
    return MetricReport(names,
                        [psnr(r, t, d) for r, t, d in zip(recon.data, truth.data, ranges)],
                        [ssim(r, t, d) for r, t, d in zip(recon.data, truth.data, ranges)],
                        ranges, truth.resolution)
