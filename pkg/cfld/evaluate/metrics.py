"""
Pixel-level reconstruction metrics: PSNR and SSIM.

Images are float arrays [3, H, W] (or [H, W]) in [-1, 1], so the dynamic range is 2. SSIM works on
the channel mean with an 11x11 Gaussian window (sigma 1.5) and averages the map over the
windows that lie fully inside the image.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import convolve2d

from cfld.common.errors import ShapeError

PSNR_CAP = 99.0
DATA_RANGE = 2.0


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"Images differ in shape: {a.shape} vs {b.shape}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray, max_val: float = DATA_RANGE) -> float:
    """10 log10(max_val^2 / MSE) in dB, capped at 99 dB for identical images."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(max_val**2 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    """Normalised 2-D Gaussian window [size, size]."""
    offsets = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(offsets**2) / (2.0 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def to_gray(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        return image.mean(axis=0)
    if image.ndim == 2:
        return image
    raise ShapeError(f"Expected an image [C, H, W] or [H, W], got {image.shape}")


def _constants(k1: float, k2: float, data_range: float) -> tuple[float, float]:
    return (k1 * data_range) ** 2, (k2 * data_range) ** 2


def ssim(
    a: np.ndarray,
    b: np.ndarray,
    window: int = 11,
    k1: float = 0.01,
    k2: float = 0.03,
    sigma: float = 1.5,
    data_range: float = DATA_RANGE,
) -> float:
    a, b = _check_pair(a, b)
    x, y = to_gray(a), to_gray(b)
    if x.shape[0] < window or x.shape[1] < window:
        raise ShapeError(f"Image {x.shape} is smaller than the {window}x{window} SSIM window")
    w = gaussian_window(window, sigma)
    c1, c2 = _constants(k1, k2, data_range)

    def filt(v: np.ndarray) -> np.ndarray:
        return convolve2d(v, w, mode="valid")

    mu_x, mu_y = filt(x), filt(y)
    var_x = filt(x * x) - mu_x**2
    var_y = filt(y * y) - mu_y**2
    cov = filt(x * y) - mu_x * mu_y
    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / ((mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2))
    return float(ssim_map.mean())


def ssim_reference(
    a: np.ndarray,
    b: np.ndarray,
    window: int = 11,
    k1: float = 0.01,
    k2: float = 0.03,
    sigma: float = 1.5,
    data_range: float = DATA_RANGE,
) -> float:
    """Literal sliding-window SSIM; slow, used to check `ssim`."""
    a, b = _check_pair(a, b)
    x, y = to_gray(a), to_gray(b)
    if x.shape[0] < window or x.shape[1] < window:
        raise ShapeError(f"Image {x.shape} is smaller than the {window}x{window} SSIM window")
    w = gaussian_window(window, sigma)
    c1, c2 = _constants(k1, k2, data_range)
    values = []
    for top in range(x.shape[0] - window + 1):
        for left in range(x.shape[1] - window + 1):
            px = x[top : top + window, left : left + window]
            py = y[top : top + window, left : left + window]
            mu_x = float((w * px).sum())
            mu_y = float((w * py).sum())
            var_x = float((w * (px - mu_x) ** 2).sum())
            var_y = float((w * (py - mu_y) ** 2).sum())
            cov = float((w * (px - mu_x) * (py - mu_y)).sum())
            values.append(
                ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / ((mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2))
            )
    return float(np.mean(values))


@dataclass
class MetricReport:
    indices: list[int] = field(default_factory=list)
    psnr: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)

    def add(self, index: int, generated: np.ndarray, target: np.ndarray) -> None:
        self.indices.append(index)
        self.psnr.append(psnr(generated, target))
        self.ssim.append(ssim(generated, target))

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr)) if self.psnr else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else float("nan")

    def __len__(self) -> int:
        return len(self.indices)
