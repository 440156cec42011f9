"""Image quality metrics (masked PSNR and SSIM) and the SSIM map used by the training loss."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

from .validation import check_same_shape

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
PSNR_IDENTICAL = 99.0


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def blur(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    """Separable 'same' filtering over the two spatial axes with zero padding."""
    out = correlate1d(img, window, axis=0, mode="constant")
    return correlate1d(out, window, axis=1, mode="constant")


class SsimMap:
    """Local SSIM statistics of an (H, W, C) pair, kept for the backward pass."""

    def __init__(self, x: np.ndarray, y: np.ndarray, size: int = 11, sigma: float = 1.5):
        check_same_shape(x, y)
        self.x, self.y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
        self.window = gaussian_window(size, sigma)
        mx, my = blur(self.x, self.window), blur(self.y, self.window)
        sxx = blur(self.x * self.x, self.window) - mx * mx
        syy = blur(self.y * self.y, self.window) - my * my
        sxy = blur(self.x * self.y, self.window) - mx * my
        self.a1 = 2 * mx * my + SSIM_C1
        self.a2 = 2 * sxy + SSIM_C2
        self.b1 = mx * mx + my * my + SSIM_C1
        self.b2 = sxx + syy + SSIM_C2
        self.mx, self.my = mx, my
        self.map = self.a1 * self.a2 / (self.b1 * self.b2)

    def backward(self, grad_map: np.ndarray) -> np.ndarray:
        """Gradient w.r.t. ``x`` of sum(grad_map * map)."""
        S, b1b2 = self.map, self.b1 * self.b2
        d_mx = 2 * self.my * (self.a2 - self.a1) / b1b2 - 2 * self.mx * S * (1 / self.b1 - 1 / self.b2)
        d_exx = -S / self.b2
        d_exy = 2 * self.a1 / b1b2
        # the window is symmetric, so zero-padded correlation is its own adjoint
        g = grad_map
        return (blur(g * d_mx, self.window) + 2 * self.x * blur(g * d_exx, self.window)
                + self.y * blur(g * d_exy, self.window))


def _mask_weights(shape, mask) -> np.ndarray:
    if mask is None:
        return np.ones(shape[:2])
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != tuple(shape[:2]):
        raise ValueError(f"dimension mismatch: mask {mask.shape} vs image {shape[:2]}")
    return mask.astype(np.float64)


def psnr(img: np.ndarray, ref: np.ndarray, mask=None, data_range: float = 1.0) -> float:
    """PSNR over the masked pixels; identical inputs return the 99 dB sentinel."""
    img, ref = np.asarray(img, dtype=np.float64), np.asarray(ref, dtype=np.float64)
    check_same_shape(img, ref)
    w = _mask_weights(img.shape, mask)
    if w.sum() == 0:
        raise ValueError("empty mask")
    err = ((img - ref) ** 2).reshape(w.shape + (-1,))
    mse = float((err * w[..., None]).sum() / (w.sum() * err.shape[-1]))
    if mse == 0:
        return PSNR_IDENTICAL
    return float(min(PSNR_IDENTICAL, 10.0 * np.log10(data_range ** 2 / mse)))


def ssim(img: np.ndarray, ref: np.ndarray, mask=None) -> float:
    """Mean of the SSIM map over the masked pixels (11x11 Gaussian window, sigma 1.5)."""
    img, ref = np.asarray(img, dtype=np.float64), np.asarray(ref, dtype=np.float64)
    check_same_shape(img, ref)
    w = _mask_weights(img.shape, mask)
    if w.sum() == 0:
        raise ValueError("empty mask")
    m = SsimMap(img, ref).map.reshape(w.shape + (-1,))
    return float((m * w[..., None]).sum() / (w.sum() * m.shape[-1]))
