"""3D Gaussian primitives and a differentiable CPU tile rasterizer.

Cameras follow the OpenCV convention (x right, y down, z forward) and pixel
(x, y) is sampled at integer coordinates. Each primitive is projected with the
first-order (EWA) approximation, binned into 16x16 tiles by its 3-sigma
footprint, depth sorted, and alpha composited front to back.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import config as _numba_config
from numba import njit, prange

from .rotations import quat_to_rotmat, quat_to_rotmat_backward

if _numba_config.THREADING_LAYER == "default":
    _numba_config.THREADING_LAYER = "workqueue"

TILE = 16
BLUR = 0.3
T_MIN = 1e-4
# exp(-15) ~ 3e-7: contributions below this are treated as exactly zero
POWER_SKIP = -15.0


class RasterError(ValueError):
    pass


@dataclass
class Camera:
    w2c: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.01

    def __post_init__(self):
        self.w2c = np.asarray(self.w2c, dtype=np.float64).reshape(4, 4)
        self.width, self.height = int(self.width), int(self.height)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 16 or self.height < 16:
            raise ValueError(f"image must be at least 16x16, got {self.width}x{self.height}")

    @property
    def rotation(self) -> np.ndarray:
        return self.w2c[:3, :3]

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.w2c[:3, 3]

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, width, height, cx=None, cy=None, near=0.01) -> "Camera":
        eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
        fwd = target - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        w2c = np.eye(4)
        w2c[:3, :3] = R
        w2c[:3, 3] = -R @ eye
        cx = (width - 1) / 2 if cx is None else cx
        cy = (height - 1) / 2 if cy is None else cy
        return cls(w2c, fx, fy, cx, cy, width, height, near)

    def resized(self, width: int, height: int) -> "Camera":
        """Same camera rendering at another resolution (pixel-area consistent)."""
        sx, sy = width / self.width, height / self.height
        return Camera(self.w2c, self.fx * sx, self.fy * sy, (self.cx + 0.5) * sx - 0.5,
                      (self.cy + 0.5) * sy - 0.5, width, height, self.near)

    def project_points(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        t = np.asarray(points, dtype=np.float64) @ self.rotation.T + self.w2c[:3, 3]
        z = t[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = np.stack([self.fx * t[..., 0] / z + self.cx, self.fy * t[..., 1] / z + self.cy], axis=-1)
        return uv, z

    def to_json(self) -> dict:
        return {"w2c": self.w2c.ravel().tolist(), "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height, "near": self.near}

    @classmethod
    def from_json(cls, d: dict) -> "Camera":
        return cls(np.array(d["w2c"], dtype=np.float64).reshape(4, 4), d["fx"], d["fy"], d["cx"], d["cy"],
                   d["width"], d["height"], d.get("near", 0.01))


@dataclass
class GaussianPrimitives:
    """Structure-of-arrays batch of renderable Gaussians."""

    means: np.ndarray
    scales: np.ndarray
    quats: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64).reshape(-1, 3)
        n = len(self.means)
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(n, 3)
        self.quats = np.asarray(self.quats, dtype=np.float64).reshape(n, 4)
        self.opacities = np.asarray(self.opacities, dtype=np.float64).reshape(n)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(n, 3)

    def __len__(self):
        return len(self.means)

    def validate(self):
        if len(self) == 0:
            return
        for name in ("means", "scales", "quats", "opacities", "colors"):
            arr = getattr(self, name)
            bad = ~np.isfinite(arr.reshape(len(self), -1)).all(axis=1)
            if bad.any():
                raise RasterError(f"non-finite {name} for primitive {int(np.flatnonzero(bad)[0])}")
        if len(self) and np.min(np.linalg.norm(self.quats, axis=1)) == 0:
            raise RasterError(f"zero quaternion for primitive {int(np.argmin(np.linalg.norm(self.quats, axis=1)))}")

    def subset(self, idx) -> "GaussianPrimitives":
        return GaussianPrimitives(self.means[idx], self.scales[idx], self.quats[idx], self.opacities[idx],
                                  self.colors[idx])

    @classmethod
    def concatenate(cls, parts) -> "GaussianPrimitives":
        return cls(*(np.concatenate([getattr(p, k) for p in parts])
                     for k in ("means", "scales", "quats", "opacities", "colors")))


def covariance(scale, quat) -> np.ndarray:
    """Sigma = R S S^T R^T for (..., 3) scales and (..., 4) quaternions."""
    q = np.asarray(quat, dtype=np.float64)
    R = quat_to_rotmat(q / np.linalg.norm(q, axis=-1, keepdims=True))
    M = R * np.asarray(scale, dtype=np.float64)[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


@dataclass
class _Projection:
    valid: np.ndarray
    t: np.ndarray
    qn: np.ndarray
    qnorm: np.ndarray
    Rq: np.ndarray
    M: np.ndarray
    sigma: np.ndarray
    J: np.ndarray
    T: np.ndarray
    cov2: np.ndarray
    conic: np.ndarray
    mean2d: np.ndarray
    radius: np.ndarray


def _project_batch(prims: GaussianPrimitives, cam: Camera) -> _Projection:
    Rw = cam.rotation
    t = prims.means @ Rw.T + cam.w2c[:3, 3]
    valid = t[:, 2] > cam.near
    tz = np.where(valid, t[:, 2], 1.0)
    qnorm = np.linalg.norm(prims.quats, axis=1, keepdims=True)
    qn = prims.quats / qnorm
    Rq = quat_to_rotmat(qn)
    M = Rq * prims.scales[:, None, :]
    sigma = M @ np.swapaxes(M, 1, 2)
    n = len(prims)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = cam.fx / tz
    J[:, 0, 2] = -cam.fx * t[:, 0] / tz ** 2
    J[:, 1, 1] = cam.fy / tz
    J[:, 1, 2] = -cam.fy * t[:, 1] / tz ** 2
    T = J @ Rw
    cov2 = T @ sigma @ np.swapaxes(T, 1, 2)
    cov2[:, 0, 0] += BLUR
    cov2[:, 1, 1] += BLUR
    a, b, c = cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    mean2d = np.stack([cam.fx * t[:, 0] / tz + cam.cx, cam.fy * t[:, 1] / tz + cam.cy], axis=1)
    mid = 0.5 * (a + c)
    lam = mid + np.sqrt(np.maximum(0.1, mid * mid - det))
    radius = np.ceil(3.0 * np.sqrt(lam))
    return _Projection(valid, t, qn, qnorm, Rq, M, sigma, J, T, cov2, conic, mean2d, radius)


def project(prim: GaussianPrimitives, camera: Camera):
    """Screen-space mean, 2x2 covariance (with the low-pass blur) and view depth of one primitive."""
    if len(prim) != 1:
        raise ValueError("project takes a single primitive")
    proj = _project_batch(prim, camera)
    if not proj.valid[0]:
        raise RasterError("primitive is behind the near plane; cull it before projecting")
    return proj.mean2d[0], proj.cov2[0], float(proj.t[0, 2])


@njit(parallel=True, cache=True)
def _render_tiles(offsets, ids, mean2d, conic, opac, color, bg, width, height, tiles_x, img, trans, n_used):
    n_tiles = offsets.shape[0] - 1
    for tile in prange(n_tiles):
        start = offsets[tile]
        end = offsets[tile + 1]
        ty = tile // tiles_x
        tx = tile - ty * tiles_x
        for py in range(ty * 16, min(ty * 16 + 16, height)):
            for px in range(tx * 16, min(tx * 16 + 16, width)):
                T = 1.0
                r = 0.0
                g = 0.0
                b = 0.0
                used = start
                for k in range(start, end):
                    gi = ids[k]
                    dx = px - mean2d[gi, 0]
                    dy = py - mean2d[gi, 1]
                    power = -0.5 * (conic[gi, 0] * dx * dx + conic[gi, 2] * dy * dy) - conic[gi, 1] * dx * dy
                    if power < POWER_SKIP:
                        continue
                    a = opac[gi] * np.exp(power)
                    w = a * T
                    r += color[gi, 0] * w
                    g += color[gi, 1] * w
                    b += color[gi, 2] * w
                    T *= 1.0 - a
                    used = k + 1
                    if T < 1e-4:
                        break
                img[py, px, 0] = r + T * bg[0]
                img[py, px, 1] = g + T * bg[1]
                img[py, px, 2] = b + T * bg[2]
                trans[py, px] = T
                n_used[py, px] = used


@njit(parallel=True, cache=True)
def _backward_tiles(offsets, ids, mean2d, conic, opac, color, bg, width, height, tiles_x, n_used, grad_img, out):
    n_tiles = offsets.shape[0] - 1
    for tile in prange(n_tiles):
        start = offsets[tile]
        end = offsets[tile + 1]
        if end == start:
            continue
        alphas = np.empty(end - start)
        Ts = np.empty(end - start)
        ty = tile // tiles_x
        tx = tile - ty * tiles_x
        for py in range(ty * 16, min(ty * 16 + 16, height)):
            for px in range(tx * 16, min(tx * 16 + 16, width)):
                last = n_used[py, px]
                gr = grad_img[py, px, 0]
                gg = grad_img[py, px, 1]
                gb = grad_img[py, px, 2]
                if gr == 0.0 and gg == 0.0 and gb == 0.0:
                    continue
                T = 1.0
                for k in range(start, last):
                    gi = ids[k]
                    dx = px - mean2d[gi, 0]
                    dy = py - mean2d[gi, 1]
                    power = -0.5 * (conic[gi, 0] * dx * dx + conic[gi, 2] * dy * dy) - conic[gi, 1] * dx * dy
                    if power < POWER_SKIP:
                        alphas[k - start] = -1.0
                        continue
                    a = opac[gi] * np.exp(power)
                    alphas[k - start] = a
                    Ts[k - start] = T
                    T *= 1.0 - a
                # colour seen behind the current primitive, starting from the background
                Ar = bg[0]
                Ag = bg[1]
                Ab = bg[2]
                for k in range(last - 1, start - 1, -1):
                    a = alphas[k - start]
                    if a < 0.0:
                        continue
                    gi = ids[k]
                    Ti = Ts[k - start]
                    w = a * Ti
                    out[k, 6] += w * gr
                    out[k, 7] += w * gg
                    out[k, 8] += w * gb
                    cr = color[gi, 0]
                    cg = color[gi, 1]
                    cb = color[gi, 2]
                    dl_da = Ti * ((cr - Ar) * gr + (cg - Ag) * gg + (cb - Ab) * gb)
                    Ar = cr * a + (1.0 - a) * Ar
                    Ag = cg * a + (1.0 - a) * Ag
                    Ab = cb * a + (1.0 - a) * Ab
                    dx = px - mean2d[gi, 0]
                    dy = py - mean2d[gi, 1]
                    if opac[gi] > 0.0:
                        out[k, 5] += (a / opac[gi]) * dl_da
                    else:
                        power = -0.5 * (conic[gi, 0] * dx * dx + conic[gi, 2] * dy * dy) - conic[gi, 1] * dx * dy
                        out[k, 5] += np.exp(power) * dl_da
                    dl_dp = a * dl_da
                    out[k, 0] += dl_dp * (conic[gi, 0] * dx + conic[gi, 1] * dy)
                    out[k, 1] += dl_dp * (conic[gi, 1] * dx + conic[gi, 2] * dy)
                    out[k, 2] += -0.5 * dx * dx * dl_dp
                    out[k, 3] += -dx * dy * dl_dp
                    out[k, 4] += -0.5 * dy * dy * dl_dp


@dataclass
class RenderOutput:
    image: np.ndarray
    alpha: np.ndarray
    transmittance: np.ndarray
    ctx: dict = field(repr=False, default_factory=dict)


@dataclass
class PrimitiveGrads:
    means: np.ndarray
    scales: np.ndarray
    quats: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    means2d: np.ndarray

    @property
    def color_norm(self) -> np.ndarray:
        return np.linalg.norm(self.colors, axis=1)

    @property
    def mean2d_norm(self) -> np.ndarray:
        return np.linalg.norm(self.means2d, axis=1)


def _bin_tiles(proj: _Projection, width, height):
    tiles_x = (width + TILE - 1) // TILE
    tiles_y = (height + TILE - 1) // TILE
    n_tiles = tiles_x * tiles_y
    mx, my, r = proj.mean2d[:, 0], proj.mean2d[:, 1], proj.radius
    with np.errstate(invalid="ignore"):
        x0 = np.clip(np.floor((mx - r) / TILE), 0, tiles_x).astype(np.int64)
        x1 = np.clip(np.floor((mx + r) / TILE) + 1, 0, tiles_x).astype(np.int64)
        y0 = np.clip(np.floor((my - r) / TILE), 0, tiles_y).astype(np.int64)
        y1 = np.clip(np.floor((my + r) / TILE) + 1, 0, tiles_y).astype(np.int64)
    keep = proj.valid & (x1 > x0) & (y1 > y0)
    idx = np.flatnonzero(keep)
    depth = proj.t[idx, 2]
    order = idx[np.lexsort((idx, depth))]
    w = (x1 - x0)[order]
    counts = w * (y1 - y0)[order]
    total = int(counts.sum())
    starts = np.cumsum(counts) - counts
    gid = np.repeat(order, counts)
    local = np.arange(total) - np.repeat(starts, counts)
    wr = np.repeat(w, counts)
    tile = (np.repeat(y0[order], counts) + local // wr) * tiles_x + np.repeat(x0[order], counts) + local % wr
    perm = np.argsort(tile, kind="stable")
    ids = gid[perm]
    offsets = np.searchsorted(tile[perm], np.arange(n_tiles + 1)).astype(np.int64)
    return offsets, ids, tiles_x


def rasterize(prims: GaussianPrimitives, camera: Camera, background=(0.0, 0.0, 0.0)) -> RenderOutput:
    """Render primitives; the returned context feeds ``rasterize_backward``."""
    prims.validate()
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    W, H = camera.width, camera.height
    proj = _project_batch(prims, camera)
    offsets, ids, tiles_x = _bin_tiles(proj, W, H)
    img = np.zeros((H, W, 3))
    trans = np.ones((H, W))
    n_used = np.zeros((H, W), dtype=np.int64)
    _render_tiles(offsets, ids, np.ascontiguousarray(proj.mean2d), np.ascontiguousarray(proj.conic),
                  prims.opacities, prims.colors, bg, W, H, tiles_x, img, trans, n_used)
    ctx = {"prims": prims, "camera": camera, "proj": proj, "offsets": offsets, "ids": ids,
           "tiles_x": tiles_x, "n_used": n_used, "bg": bg}
    return RenderOutput(img, 1.0 - trans, trans, ctx)


def rasterize_backward(out: RenderOutput, grad_image: np.ndarray) -> PrimitiveGrads:
    """Analytic gradients of sum(grad_image * image) w.r.t. every primitive attribute."""
    if not out.ctx:
        raise RasterError("render output carries no forward buffers")
    ctx = out.ctx
    prims, cam, proj = ctx["prims"], ctx["camera"], ctx["proj"]
    grad_image = np.ascontiguousarray(grad_image, dtype=np.float64)
    if grad_image.shape != out.image.shape:
        raise ValueError(f"gradient shape {grad_image.shape} does not match image {out.image.shape}")
    n = len(prims)
    ids = ctx["ids"]
    entry = np.zeros((len(ids), 9))
    _backward_tiles(ctx["offsets"], ids, np.ascontiguousarray(proj.mean2d), np.ascontiguousarray(proj.conic),
                    prims.opacities, prims.colors, ctx["bg"], cam.width, cam.height, ctx["tiles_x"],
                    ctx["n_used"], grad_image, entry)
    # fixed-order reduction keeps the result reproducible
    g = np.stack([np.bincount(ids, weights=entry[:, c], minlength=n) for c in range(9)], axis=1)
    g_mean2d, g_conic, g_opac, g_color = g[:, 0:2], g[:, 2:5], g[:, 5], g[:, 6:9]

    # conic -> 2D covariance (full-matrix convention, b appears twice in the quadratic form)
    Q = np.empty((n, 2, 2))
    Q[:, 0, 0], Q[:, 0, 1], Q[:, 1, 0], Q[:, 1, 1] = proj.conic[:, 0], proj.conic[:, 1], proj.conic[:, 1], proj.conic[:, 2]
    GQ = np.empty((n, 2, 2))
    GQ[:, 0, 0], GQ[:, 1, 1] = g_conic[:, 0], g_conic[:, 2]
    GQ[:, 0, 1] = GQ[:, 1, 0] = 0.5 * g_conic[:, 1]
    Gc = -Q @ GQ @ Q
    # cov2 = T Sigma T^T
    T, sigma = proj.T, proj.sigma
    G_sigma = np.swapaxes(T, 1, 2) @ Gc @ T
    G_T = 2.0 * Gc @ T @ sigma
    G_J = G_T @ cam.rotation.T
    t = proj.t
    tz = np.where(proj.valid, t[:, 2], 1.0)
    fx, fy = cam.fx, cam.fy
    g_t = np.zeros((n, 3))
    g_t[:, 0] = g_mean2d[:, 0] * fx / tz - G_J[:, 0, 2] * fx / tz ** 2
    g_t[:, 1] = g_mean2d[:, 1] * fy / tz - G_J[:, 1, 2] * fy / tz ** 2
    g_t[:, 2] = (-g_mean2d[:, 0] * fx * t[:, 0] / tz ** 2 - g_mean2d[:, 1] * fy * t[:, 1] / tz ** 2
                 - G_J[:, 0, 0] * fx / tz ** 2 + G_J[:, 0, 2] * 2 * fx * t[:, 0] / tz ** 3
                 - G_J[:, 1, 1] * fy / tz ** 2 + G_J[:, 1, 2] * 2 * fy * t[:, 1] / tz ** 3)
    g_means = g_t @ cam.rotation
    # Sigma = M M^T, M = R(q) diag(s)
    G_M = 2.0 * G_sigma @ proj.M
    g_scales = np.einsum("nik,nik->nk", G_M, proj.Rq)
    G_R = G_M * prims.scales[:, None, :]
    g_qn = quat_to_rotmat_backward(proj.qn, G_R)
    g_quats = (g_qn - proj.qn * np.sum(proj.qn * g_qn, axis=1, keepdims=True)) / proj.qnorm
    invalid = ~proj.valid
    for arr in (g_means, g_scales, g_quats, g_mean2d, g_color):
        arr[invalid] = 0.0
    g_opac[invalid] = 0.0
    return PrimitiveGrads(g_means, g_scales, g_quats, g_opac, g_color, g_mean2d)
