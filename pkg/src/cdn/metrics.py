"""Evaluation metrics: PSNR on the 8-bit grid and windowed SSIM."""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def quantize(x: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and round to 8-bit levels, returned on the 0-255 scale."""
    return np.rint(np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0) * 255.0)


def psnr(a, b) -> float:
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((quantize(a) - quantize(b)) ** 2)
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, float(10.0 * np.log10(255.0 ** 2 / mse)))


def _box_mean(x: np.ndarray, win: int) -> np.ndarray:
    """Means over all valid win x win windows of the last two axes (summed-area table)."""
    s = np.zeros(x.shape[:-2] + (x.shape[-2] + 1, x.shape[-1] + 1))
    s[..., 1:, 1:] = x.cumsum(-2).cumsum(-1)
    tot = s[..., win:, win:] - s[..., :-win, win:] - s[..., win:, :-win] + s[..., :-win, :-win]
    return tot / (win * win)


def ssim_map(a, b, win: int = SSIM_WINDOW, global_window: bool = False) -> np.ndarray:
    """SSIM of every ``win`` x ``win`` window (stride 1) over the last two axes, [0, 1] scale.

    With ``global_window``, or when the image is smaller than the window, one
    image-wide window is used instead.
    """
    a = np.asarray(_arr(a), dtype=np.float64)
    b = np.asarray(_arr(b), dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if global_window or min(a.shape[-2:]) < win:
        def mean(x):
            return x.mean(axis=(-2, -1), keepdims=True)
    else:
        def mean(x):
            return _box_mean(x, win)
    mu_a, mu_b = mean(a), mean(b)
    var_a = mean(a * a) - mu_a ** 2
    var_b = mean(b * b) - mu_b ** 2
    cov = mean(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def ssim_metric(a, b) -> float:
    """Mean windowed SSIM after the same clamp/quantize step as :func:`psnr`."""
    return float(ssim_map(quantize(_arr(a)) / 255.0, quantize(_arr(b)) / 255.0).mean())


def ssim_global_metric(a, b) -> float:
    """Image-wide SSIM (one window per image), the formula the training loss uses."""
    qa, qb = quantize(_arr(a)) / 255.0, quantize(_arr(b)) / 255.0
    return float(ssim_map(qa, qb, global_window=True).mean())
