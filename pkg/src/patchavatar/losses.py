"""Training objectives. Every loss returns its value together with the gradient of its inputs."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .metrics import SsimMap
from .validation import check_same_shape

REF_WIDTH = 3072
REF_WINDOW = 256


@dataclass(frozen=True)
class LossWeights:
    ssim: float = 0.2
    patch: float = 0.01
    xyz: float = 0.001
    scale: float = 0.01

    def __post_init__(self):
        if not 0.0 <= self.ssim <= 1.0:
            raise ValueError(f"SSIM mix must lie in [0, 1], got {self.ssim}")
        for name in ("patch", "xyz", "scale"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")

    def to_json(self):
        return asdict(self)


def loss_rgb(rendered, target, lam: float = 0.2):
    """(1 - lam) * mean |r - t| + lam * (1 - mean SSIM)."""
    r, t = np.asarray(rendered, dtype=np.float64), np.asarray(target, dtype=np.float64)
    check_same_shape(r, t)
    n = r.size
    diff = r - t
    l1 = np.abs(diff).mean()
    grad = (1.0 - lam) * np.sign(diff) / n
    value = (1.0 - lam) * l1
    if lam > 0:
        smap = SsimMap(r, t)
        value += lam * (1.0 - smap.map.mean())
        grad = grad - lam * smap.backward(np.full(r.shape, 1.0 / n))
    return float(value), grad


def _pool2(x):
    h, w = x.shape[0] // 2 * 2, x.shape[1] // 2 * 2
    x = x[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def _unpool2(g, shape):
    out = np.zeros(shape)
    h, w = g.shape[0] * 2, g.shape[1] * 2
    q = 0.25 * g
    out[0:h:2, 0:w:2] = q
    out[1:h:2, 0:w:2] = q
    out[0:h:2, 1:w:2] = q
    out[1:h:2, 1:w:2] = q
    return out


def _grad_mag(x, eps):
    gx = x[:-1, 1:] - x[:-1, :-1]
    gy = x[1:, :-1] - x[:-1, :-1]
    return np.sqrt(gx * gx + gy * gy + eps), gx, gy


def _grad_mag_backward(g, mag, gx, gy, shape):
    out = np.zeros(shape)
    ux, uy = g * gx / mag, g * gy / mag
    out[:-1, 1:] += ux
    out[:-1, :-1] -= ux + uy
    out[1:, :-1] += uy
    return out


class GradientMagnitudeDistance:
    """Sum over dyadic scales of the mean absolute difference of image-gradient magnitudes.

    A dependency-free stand-in for a learned perceptual metric: it compares
    edges and fine texture rather than raw intensities. Any callable with the
    same ``(a, b) -> (value, grad_a)`` signature can replace it.
    """

    def __init__(self, scales: int = 3, eps: float = 1e-6):
        self.scales = scales
        self.eps = eps

    def __call__(self, a, b):
        a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
        check_same_shape(a, b)
        shapes, pa, pb = [], a, b
        value = 0.0
        grads = []
        for k in range(self.scales):
            if min(pa.shape[:2]) < 2:
                break
            shapes.append(pa.shape)
            ma, gxa, gya = _grad_mag(pa, self.eps)
            mb, _, _ = _grad_mag(pb, self.eps)
            d = ma - mb
            value += np.abs(d).mean()
            grads.append(_grad_mag_backward(np.sign(d) / d.size, ma, gxa, gya, pa.shape))
            pa, pb = _pool2(pa), _pool2(pb)
        grad = grads[-1] if grads else np.zeros(a.shape)
        for k in range(len(grads) - 2, -1, -1):
            grad = grads[k] + _unpool2(grad, shapes[k])
        return float(value), grad


def patch_window_size(width: int, ref_width: int = REF_WIDTH, ref_window: int = REF_WINDOW) -> int:
    """Window side scaled with the image width (256 px at the reference width), at least 16 px."""
    return max(16, int(round(ref_window * width / ref_width)))


def loss_patch(rendered, target, mask, n_windows: int = 16, window: int | None = None, rng=None,
               distance=None):
    """Mean perceptual distance over windows centred on uniformly sampled mask pixels.

    Falls back to the whole image when the mask covers fewer pixels than one
    window (or the window does not fit).
    """
    r, t = np.asarray(rendered, dtype=np.float64), np.asarray(target, dtype=np.float64)
    check_same_shape(r, t)
    distance = distance or GradientMagnitudeDistance()
    H, W = r.shape[:2]
    window = window or patch_window_size(W)
    mask = np.ones((H, W), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != (H, W):
        raise ValueError(f"dimension mismatch: mask {mask.shape} vs image {(H, W)}")
    pixels = np.flatnonzero(mask)
    if len(pixels) == 0:
        raise ValueError("empty face mask")
    if len(pixels) < window * window or window > min(H, W):
        return distance(r, t)
    rng = rng if rng is not None else np.random.default_rng(0)
    picks = rng.choice(pixels, size=n_windows, replace=True)
    grad = np.zeros(r.shape)
    value = 0.0
    for pix in picks:
        cy, cx = divmod(int(pix), W)
        y0 = min(max(cy - window // 2, 0), H - window)
        x0 = min(max(cx - window // 2, 0), W - window)
        sl = (slice(y0, y0 + window), slice(x0, x0 + window))
        v, g = distance(r[sl], t[sl])
        value += v / n_windows
        grad[sl] += g / n_windows
    return float(value), grad


def loss_xyz(anchor_mu, gaussian_offsets):
    """Sum of Euclidean norms of anchor local positions and of predicted Gaussian offsets."""
    out = []
    value = 0.0
    for x in (anchor_mu, gaussian_offsets):
        x = np.asarray(x, dtype=np.float64)
        n = np.linalg.norm(x, axis=-1, keepdims=True)
        value += float(n.sum())
        out.append(np.divide(x, n, out=np.zeros_like(x), where=n > 0))
    return value, out[0], out[1]


def loss_scale(scales, low: float = 0.1, high: float = 10.0, floor: float = 1e-7):
    """Per scalar: 1/max(s, floor) below ``low``, (s - high)^2 above ``high``, zero in between."""
    s = np.asarray(scales, dtype=np.float64)
    small, large = s < low, s > high
    clamped = np.maximum(s, floor)
    value = float(np.sum(np.where(small, 1.0 / clamped, 0.0)) + np.sum(np.where(large, (s - high) ** 2, 0.0)))
    grad = np.zeros_like(s)
    grad[small & (s > floor)] = -1.0 / s[small & (s > floor)] ** 2
    grad[large] = 2.0 * (s[large] - high)
    return value, grad


def total_loss(terms: dict, weights: LossWeights = LossWeights()):
    """Weighted sum of the per-term values; returns (total, per-term coefficients for routing gradients)."""
    coef = {"rgb": 1.0, "patch": weights.patch, "xyz": weights.xyz, "scale": weights.scale}
    unknown = set(terms) - set(coef)
    if unknown:
        raise ValueError(f"unknown loss terms {sorted(unknown)}")
    total = float(sum(coef[k] * float(v) for k, v in terms.items()))
    return total, coef
