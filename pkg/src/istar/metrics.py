"""PSNR and SSIM under the usual SR benchmark convention.

Inputs are (3, H, W) images in [0, 1].  In ``"Y"`` mode they are mapped
to BT.601 luma on the 8-bit scale (16..235); in ``"RGB"`` mode each
channel is simply scaled by 255.  ``shave`` pixels are dropped from every
border before comparing.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Y_WEIGHTS = np.array([65.481, 128.553, 24.966])


def rgb_to_y(img: np.ndarray) -> np.ndarray:
    """BT.601 luma of a [0, 1] RGB image, in the 8-bit domain."""
    return np.tensordot(Y_WEIGHTS, np.asarray(img, dtype=np.float64), axes=(0, 0)) + 16.0


def _prepare(a, b, shave: int, mode: str) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if mode == "Y":
        if a.ndim != 3 or a.shape[0] != 3:
            raise ValueError("Y mode needs (3, H, W) RGB images")
        a, b = rgb_to_y(a)[None], rgb_to_y(b)[None]
    elif mode == "RGB":
        a, b = a * 255.0, b * 255.0
        if a.ndim == 2:
            a, b = a[None], b[None]
    else:
        raise ValueError(f"unknown mode {mode!r}")
    h, w = a.shape[-2:]
    if shave < 0 or 2 * shave >= min(h, w):
        raise ValueError(f"shave {shave} too large for {h}x{w} image")
    if shave:
        a, b = a[:, shave:-shave, shave:-shave], b[:, shave:-shave, shave:-shave]
    return a, b


def psnr(a, b, shave: int = 0, mode: str = "Y") -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs."""
    a, b = _prepare(a, b, shave, mode)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(255.0 ** 2 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    g = np.exp(-((np.arange(size) - size // 2) ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    return np.einsum("ijkl,kl->ij", sliding_window_view(img, win.shape), win)


def _ssim_plane(a: np.ndarray, b: np.ndarray, win: np.ndarray) -> float:
    c1 = (0.01 * 255) ** 2
    c2 = (0.03 * 255) ** 2
    mu_a, mu_b = _filter_valid(a, win), _filter_valid(b, win)
    var_a = _filter_valid(a * a, win) - mu_a ** 2
    var_b = _filter_valid(b * b, win) - mu_b ** 2
    cov = _filter_valid(a * b, win) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(a, b, shave: int = 0, mode: str = "Y") -> float:
    """Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), valid positions only.

    RGB mode averages the per-channel values.
    """
    a, b = _prepare(a, b, shave, mode)
    win = gaussian_window()
    if min(a.shape[-2:]) < win.shape[0]:
        raise ValueError("image smaller than the 11x11 SSIM window")
    return float(np.mean([_ssim_plane(x, y, win) for x, y in zip(a, b)]))
