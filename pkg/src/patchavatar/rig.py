"""Anchors bound to mesh patches: placement, visibility, densification and pruning.

Anchor positions live in the local TBNP space of their parent patch, so they
follow the tracked mesh without any learned deformation. Growth is driven by
the screen-space colour gradient of the Gaussians an anchor spawns.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .formats import read_container, write_container
from .mesh import Mesh, PatchLayout
from .splat import Camera
from .tinynn import sigmoid, softplus, softplus_inverse

FEATURE_DIM = 32
OPACITY_GATE = 0.005
SCREEN_MARGIN = 0.1


@dataclass
class AnchorSet:
    """Flat anchor arrays plus the statistics gathered between densification rounds.

    ``scale_raw`` is the softplus pre-activation of the anchor scale and
    ``alpha`` the opacity logit.
    """

    parent: np.ndarray
    mu: np.ndarray
    scale_raw: np.ndarray
    alpha: np.ndarray
    feat: np.ndarray
    patch_count: int
    grad_acc: np.ndarray = field(default=None, repr=False)
    obs_count: np.ndarray = field(default=None, repr=False)
    opacity_sum: np.ndarray = field(default=None, repr=False)
    opacity_steps: int = 0
    best_grad: np.ndarray = field(default=None, repr=False)
    best_offset: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.parent = np.asarray(self.parent, dtype=np.int64).reshape(-1)
        n = len(self.parent)
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(n, 3)
        self.scale_raw = np.asarray(self.scale_raw, dtype=np.float64).reshape(n, 3)
        self.alpha = np.asarray(self.alpha, dtype=np.float64).reshape(n)
        feat = np.asarray(self.feat, dtype=np.float64)
        self.feat = feat.reshape(n, feat.shape[-1] if feat.ndim == 2 else -1)
        if n and (self.parent.min() < 0 or self.parent.max() >= self.patch_count):
            raise ValueError("anchor parent patch out of range")
        if self.grad_acc is None:
            self.reset_stats()

    def __len__(self):
        return len(self.parent)

    @property
    def feature_dim(self) -> int:
        return self.feat.shape[1]

    @property
    def scale(self) -> np.ndarray:
        return softplus(self.scale_raw)

    @property
    def opacity(self) -> np.ndarray:
        return sigmoid(self.alpha)

    def patch_index(self) -> list[np.ndarray]:
        """Anchor indices owned by each patch."""
        order = np.argsort(self.parent, kind="stable")
        bounds = np.searchsorted(self.parent[order], np.arange(self.patch_count + 1))
        return [order[bounds[p]:bounds[p + 1]] for p in range(self.patch_count)]

    def counts_per_patch(self) -> np.ndarray:
        return np.bincount(self.parent, minlength=self.patch_count)

    def check_coverage(self) -> None:
        empty = np.flatnonzero(self.counts_per_patch() == 0)
        if len(empty):
            raise AssertionError(f"patch {int(empty[0])} has no anchor")

    def reset_stats(self) -> None:
        n = len(self)
        self.grad_acc = np.zeros(n)
        self.obs_count = np.zeros(n)
        self.opacity_sum = np.zeros(n)
        self.opacity_steps = 0
        self.best_grad = np.full(n, -1.0)
        self.best_offset = np.zeros((n, 3))

    def copy(self) -> "AnchorSet":
        out = AnchorSet(self.parent.copy(), self.mu.copy(), self.scale_raw.copy(), self.alpha.copy(),
                        self.feat.copy(), self.patch_count)
        for name in ("grad_acc", "obs_count", "opacity_sum", "best_grad", "best_offset"):
            setattr(out, name, getattr(self, name).copy())
        out.opacity_steps = self.opacity_steps
        return out

    def save(self, path) -> None:
        arrays = {"mu": self.mu.astype("<f4"), "scale_raw": self.scale_raw.astype("<f4"),
                  "alpha": self.alpha.astype("<f4"), "feat": self.feat.astype("<f4"),
                  "parent_patch": self.parent.astype("<u4")}
        write_container(path, arrays, {"anchor_count": len(self), "feature_dim": self.feature_dim,
                                       "patch_count": self.patch_count})

    @classmethod
    def load(cls, path) -> "AnchorSet":
        arrays, meta = read_container(path)
        out = cls(arrays["parent_patch"].astype(np.int64), arrays["mu"], arrays["scale_raw"], arrays["alpha"],
                  arrays["feat"], meta["patch_count"])
        if len(out) != meta["anchor_count"] or out.feature_dim != meta["feature_dim"]:
            raise ValueError(f"{path}: anchor arrays disagree with manifest")
        return out


def mean_center_spacing(mesh: Mesh, layout: PatchLayout) -> float:
    """Mean distance between the centers of adjacent patches (falls back to all pairs)."""
    if layout.centers is None:
        raise ValueError("layout has no patch centers")
    pos = mesh.vertices[layout.centers]
    d = [np.linalg.norm(pos[p] - pos[q]) for p, nbrs in enumerate(layout.neighbors) for q in nbrs]
    if not d:
        if len(pos) < 2:
            return 1.0
        diff = pos[:, None] - pos[None]
        d = np.linalg.norm(diff, axis=-1)[np.triu_indices(len(pos), 1)]
    return float(np.mean(d))


def init_anchors(layout: PatchLayout, per_patch: int, spacing: float = 1.0, jitter: float = 0.01,
                 seed: int = 0, feature_dim: int = FEATURE_DIM) -> AnchorSet:
    """``per_patch`` anchors per patch: the first at the patch origin, the rest jittered.

    ``jitter`` bounds the extra anchors' offsets, either for all coordinates
    or per axis; scales start at ``spacing`` and opacity logits at 1.
    """
    if per_patch < 1:
        raise ValueError("per_patch must be >= 1")
    if not spacing > 0:
        raise ValueError("spacing must be > 0")
    rng = np.random.default_rng(seed)
    P = layout.patch_count
    n = P * per_patch
    parent = np.repeat(np.arange(P), per_patch)
    jitter = np.broadcast_to(np.asarray(jitter, dtype=np.float64), (3,))
    mu = rng.uniform(-jitter, jitter, size=(n, 3))
    mu[::per_patch] = 0.0
    scale_raw = np.full((n, 3), float(softplus_inverse(spacing)))
    alpha = np.ones(n)
    feat = rng.uniform(-0.01, 0.01, size=(n, feature_dim))
    return AnchorSet(parent, mu, scale_raw, alpha, feat, P)


def anchors_to_global(anchors: AnchorSet, frames: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Global anchor positions T_p (mu, 1) and the parent rotation block of each anchor."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape != (anchors.patch_count, 4, 4):
        raise ValueError(f"expected ({anchors.patch_count}, 4, 4) frames, got {frames.shape}")
    R = frames[anchors.parent, :3, :3]
    pos = np.einsum("nij,nj->ni", R, anchors.mu) + frames[anchors.parent, :3, 3]
    return pos, R


def visible_anchors(anchors: AnchorSet, frames: np.ndarray, camera: Camera, tau: float = OPACITY_GATE,
                    margin: float = SCREEN_MARGIN) -> np.ndarray:
    """In front of the near plane, inside the image grown by ``margin`` on every side, and opaque enough."""
    pos, _ = anchors_to_global(anchors, frames)
    uv, z = camera.project_points(pos)
    W, H = camera.width, camera.height
    front = z > camera.near
    with np.errstate(invalid="ignore"):
        inside = ((uv[:, 0] >= -margin * W) & (uv[:, 0] <= (1 + margin) * W)
                  & (uv[:, 1] >= -margin * H) & (uv[:, 1] <= (1 + margin) * H))
    return front & inside & (anchors.opacity > tau)


def accumulate_color_gradient(anchors: AnchorSet, visible: np.ndarray, grad_norms: np.ndarray,
                              offsets: np.ndarray | None = None) -> None:
    """Add the mean per-Gaussian gradient norm to each visible anchor's statistic.

    ``grad_norms`` is (n_visible, L). ``offsets`` (n_visible, L, 3) are the
    spawned Gaussians' positions in parent-patch space; the one with the
    largest gradient seen so far seeds a child anchor at the next growth step.
    """
    idx = np.flatnonzero(visible) if np.asarray(visible).dtype == bool else np.asarray(visible, dtype=np.int64)
    g = np.asarray(grad_norms, dtype=np.float64).reshape(len(idx), -1)
    anchors.grad_acc[idx] += g.mean(axis=1)
    anchors.obs_count[idx] += 1
    if offsets is not None and len(idx):
        offsets = np.asarray(offsets, dtype=np.float64).reshape(len(idx), g.shape[1], 3)
        top = np.argmax(g, axis=1)
        top_val = g[np.arange(len(idx)), top]
        better = top_val > anchors.best_grad[idx]
        anchors.best_grad[idx[better]] = top_val[better]
        anchors.best_offset[idx[better]] = offsets[better, top[better]]


def track_opacity(anchors: AnchorSet) -> None:
    anchors.opacity_sum += anchors.opacity
    anchors.opacity_steps += 1


@dataclass
class DensifyResult:
    anchors: AnchorSet
    keep: np.ndarray
    grown_from: np.ndarray
    n_before: int

    @property
    def n_new(self) -> int:
        return len(self.grown_from)

    @property
    def n_pruned(self) -> int:
        return self.n_before - len(self.keep)


def densify_and_prune(anchors: AnchorSet, grow_threshold: float = 2e-6, prune_opacity: float = OPACITY_GATE,
                      seed: int = 0, max_anchors: int | None = None,
                      feature_jitter: float = 0.01) -> DensifyResult:
    """Grow children under high-gradient anchors and drop faded ones, never emptying a patch.

    The growth statistic is the accumulated gradient divided by the number of
    steps the anchor was visible. A child sits at the parent's position plus
    the offset of its highest-gradient Gaussian, with half the parent scale.
    Statistics are reset on the returned set.
    """
    n = len(anchors)
    with np.errstate(invalid="ignore", divide="ignore"):
        stat = np.where(anchors.obs_count > 0, anchors.grad_acc / anchors.obs_count, 0.0)
    grow = np.flatnonzero(stat > grow_threshold)
    if max_anchors is not None:
        room = max(0, max_anchors - n)
        if len(grow) > room:
            # strongest first, index order for ties
            order = np.lexsort((grow, -stat[grow]))
            grow = np.sort(grow[order[:room]])

    if anchors.opacity_steps > 0:
        mean_opacity = anchors.opacity_sum / anchors.opacity_steps
    else:
        mean_opacity = anchors.opacity
    drop = mean_opacity < prune_opacity
    counts_new = np.bincount(anchors.parent[grow], minlength=anchors.patch_count)
    for p, members in enumerate(anchors.patch_index()):
        if len(members) and drop[members].all() and counts_new[p] == 0:
            # keep the most opaque anchor so the patch stays covered
            drop[members[np.argmax(mean_opacity[members])]] = False
    keep = np.flatnonzero(~drop)

    rng = np.random.default_rng(seed)
    parent_scale = anchors.scale[grow]
    child = AnchorSet(
        anchors.parent[grow],
        anchors.mu[grow] + anchors.best_offset[grow],
        softplus_inverse(0.5 * parent_scale),
        anchors.alpha[grow],
        anchors.feat[grow] + rng.uniform(-feature_jitter, feature_jitter, size=(len(grow), anchors.feature_dim)),
        anchors.patch_count,
    )
    out = AnchorSet(
        np.concatenate([anchors.parent[keep], child.parent]),
        np.concatenate([anchors.mu[keep], child.mu]),
        np.concatenate([anchors.scale_raw[keep], child.scale_raw]),
        np.concatenate([anchors.alpha[keep], child.alpha]),
        np.concatenate([anchors.feat[keep], child.feat]),
        anchors.patch_count,
    )
    out.check_coverage()
    return DensifyResult(out, keep, grow, n)
