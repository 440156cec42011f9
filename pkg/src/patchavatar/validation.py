"""Input validation helpers shared by the estimators and the CLI."""

from __future__ import annotations

import numpy as np


def check_vertices(X, n_vertices: int | None = None, name: str = "X") -> np.ndarray:
    """Coerce to a float64 (T, V, 3) stack; accepts (V, 3) or flattened (T, 3V)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2 and X.shape[1] == 3 and (n_vertices is None or X.shape[0] == n_vertices):
        X = X[None]
    elif X.ndim == 2 and X.shape[1] % 3 == 0:
        X = X.reshape(X.shape[0], -1, 3)
    if X.ndim != 3 or X.shape[2] != 3:
        raise ValueError(f"{name} must be (T, V, 3) vertices, got shape {X.shape}")
    if n_vertices is not None and X.shape[1] != n_vertices:
        raise ValueError(f"{name} has {X.shape[1]} vertices, expected {n_vertices} (topology mismatch)")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite values")
    return X


def check_blendweights(beta, patch_count: int | None = None, k_minus_1: int | None = None) -> np.ndarray:
    """Coerce to a float64 (T, P, K-1) stack; accepts (P, K-1) or flattened (T, P*(K-1))."""
    beta = np.asarray(beta, dtype=np.float64)
    if beta.ndim == 2 and patch_count is not None and k_minus_1 is not None:
        if beta.shape == (patch_count, k_minus_1):
            beta = beta[None]
        elif beta.shape[1] == patch_count * k_minus_1:
            beta = beta.reshape(len(beta), patch_count, k_minus_1)
    if beta.ndim != 3:
        raise ValueError(f"blendweights must be (T, P, K-1), got shape {beta.shape}")
    if patch_count is not None and beta.shape[1] != patch_count:
        raise ValueError(f"blendweights have {beta.shape[1]} patches, expected {patch_count}")
    if k_minus_1 is not None and beta.shape[2] != k_minus_1:
        raise ValueError(f"blendweights have {beta.shape[2]} coefficients per patch, expected {k_minus_1}")
    if not np.all(np.isfinite(beta)):
        raise ValueError("blendweights contain non-finite values")
    return beta


def check_image(img, name: str = "image") -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"{name} must be (H, W, 3), got {img.shape}")
    return img


def check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")


def check_positive(value, name: str) -> None:
    if not value > 0:
        raise ValueError(f"{name} must be > 0, got {value}")


def check_nonnegative(value, name: str) -> None:
    if not value >= 0:
        raise ValueError(f"{name} must be >= 0, got {value}")
