"""The avatar model: blendweights -> expression codes -> per-anchor MLPs -> Gaussians -> image.

Each anchor spawns L Gaussians. Their offsets, scales, rotations, opacities
and colours are predicted from the anchor feature, the patch expression code,
the global expression code and either the anchor position (offsets) or the
viewing direction (everything else). Colours come from a per-patch MLP.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from .dataset import AvatarDataset
from .formats import read_json, write_json
from .losses import LossWeights, loss_patch, loss_rgb, loss_scale, loss_xyz, patch_window_size, total_loss
from .metrics import psnr, ssim
from .mesh import PatchLayout
from .rig import (AnchorSet, accumulate_color_gradient, anchors_to_global, densify_and_prune, init_anchors,
                  track_opacity, visible_anchors)
from .splat import Camera, GaussianPrimitives, PrimitiveGrads, rasterize, rasterize_backward
from .tinynn import Adam, Mlp, MlpSpec, backward, forward, load_mlp, save_mlp, sigmoid, softplus_inverse

logger = logging.getLogger(__name__)

DEFAULT_LR = {
    "offset": 0.01, "opacity": 0.002, "rotation": 0.004, "scale": 0.004, "color": 0.006,
    "anchor_mu": 0.00016, "anchor_scale": 0.005, "anchor_alpha": 0.05, "anchor_feat": 0.0025,
    "expr_patch": 0.0001, "expr_global": 0.0001,
}
MLP_NAMES = ("expr_patch", "expr_global", "offset", "scale", "rotation", "opacity", "color")
ANCHOR_GROUPS = {"anchor_mu": "mu", "anchor_scale": "scale_raw", "anchor_alpha": "alpha", "anchor_feat": "feat"}
LOG_COLUMNS = ("step", "l_rgb", "l_patch", "l_xyz", "l_scale", "anchors", "psnr_val")


class TrainingError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    gaussians_per_anchor: int = 5
    feature_dim: int = 32
    latent_dim: int = 32
    hidden: int = 32
    anchors_per_patch: int = 12
    anchor_scale: float = 0.3
    anchor_jitter: float = 0.5
    anchor_normal_jitter: float = 0.05
    opacity_gate: float = 0.005
    init_scale_ratio: float = 0.27
    offset_spread: float = 1.0
    patch_expressions: bool = True
    patch_color_mlp: bool = True
    seed: int = 0

    @property
    def attribute_input(self) -> int:
        """|f| + |e_p| + |e_g| + 3, with e_p dropped when patch expressions are off."""
        ep = self.latent_dim if self.patch_expressions else 0
        return self.feature_dim + ep + self.latent_dim + 3

    @property
    def per_patch_color(self) -> bool:
        return self.patch_color_mlp and self.patch_expressions


@dataclass
class TrainConfig:
    iterations: int = 10000
    stages: list = field(default_factory=lambda: [[4, 0.0], [2, 0.2], [1, 0.55]])
    densify_start: int = 2000
    densify_interval: int = 500
    densify_until: int | None = None
    grow_threshold: float = 2e-6
    prune_opacity: float = 0.005
    max_anchors: int | None = 900
    densify_source: str = "color"
    loss: LossWeights = field(default_factory=LossWeights)
    xyz_reduction: str = "mean"
    patch_windows: int = 16
    lr: dict = field(default_factory=lambda: dict(DEFAULT_LR))
    lr_half_life: float = 25000.0
    background: tuple = (0.0, 0.0, 0.0)
    batch_size: int = 1
    seed: int = 0
    eval_every: int = 500
    eval_views: int = 4
    checkpoint_every: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossWeights(**self.loss)
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        self.background = tuple(float(b) for b in self.background)
        self.lr = {**DEFAULT_LR, **self.lr}
        self.validate()

    def validate(self):
        if self.batch_size != 1:
            raise ValueError("batch size must be 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not self.stages:
            raise ValueError("stage schedule is empty")
        starts = [self.stage_start(k) for k in range(len(self.stages))]
        if starts[0] != 0:
            raise ValueError("the first stage must start at iteration 0")
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ValueError(f"stage schedule must be strictly increasing, got starts {starts}")
        for factor, _ in self.stages:
            if int(factor) != factor or factor < 1:
                raise ValueError(f"stage downsampling factor must be a positive integer, got {factor}")
        if self.xyz_reduction not in ("sum", "mean"):
            raise ValueError("xyz_reduction must be 'sum' or 'mean'")
        if self.densify_source not in ("color", "position"):
            raise ValueError("densify_source must be 'color' or 'position'")
        unknown = set(self.lr) - set(DEFAULT_LR)
        if unknown:
            raise ValueError(f"unknown learning-rate groups {sorted(unknown)}")

    def stage_start(self, k: int) -> int:
        """Stage starts may be given as fractions of ``iterations`` (< 1) or absolute steps."""
        s = self.stages[k][1]
        return int(round(s * self.iterations)) if 0 < s < 1 else int(s)

    def stage_at(self, step: int) -> int:
        k = 0
        for j in range(len(self.stages)):
            if step >= self.stage_start(j):
                k = j
        return k

    @property
    def lr_decay(self) -> float:
        return 0.5 ** (1.0 / self.lr_half_life) if self.lr_half_life > 0 else 1.0

    def to_json(self) -> dict:
        d = asdict(self)
        d["background"] = list(self.background)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config fields {sorted(unknown)}")
        return cls(**d)


ABLATIONS = {
    "full": {},
    "no_patch_expressions": {"patch_expressions": False},
    "no_patch_color_mlp": {"patch_color_mlp": False},
    "position_densify": {"densify_source": "position"},
}


def ablation_toggle(config: TrainConfig, patch_expressions: bool | None = None, patch_color_mlp: bool | None = None,
                    densify_source: str | None = None) -> TrainConfig:
    """Copy of ``config`` with the ablation switches applied (``None`` keeps the current value)."""
    model = config.model
    if patch_expressions is not None:
        model = replace(model, patch_expressions=bool(patch_expressions))
    if patch_color_mlp is not None:
        model = replace(model, patch_color_mlp=bool(patch_color_mlp))
    out = replace(config, model=model, lr=dict(config.lr))
    if densify_source is not None:
        out.densify_source = densify_source
        out.validate()
    return out


def ablation_config(config: TrainConfig, name: str) -> TrainConfig:
    if name not in ABLATIONS:
        raise ValueError(f"unknown ablation {name!r}; expected one of {sorted(ABLATIONS)}")
    return ablation_toggle(config, **ABLATIONS[name])


@dataclass
class Expressions:
    e_patch: np.ndarray | None
    e_global: np.ndarray
    cache_patch: object = None
    cache_global: object = None


@dataclass
class Spawned:
    """Everything the forward pass produced for the visible anchors, kept for backward."""

    idx: np.ndarray
    prims: GaussianPrimitives
    R: np.ndarray
    s: np.ndarray
    mu_hat: np.ndarray
    s_hat: np.ndarray
    a_hat: np.ndarray
    dv: np.ndarray
    dist: np.ndarray
    x_split: list
    caches: dict
    expr: Expressions

    @property
    def local_offsets(self) -> np.ndarray:
        """Gaussian positions relative to the anchor, in parent-patch coordinates."""
        return self.s[:, None, :] * self.mu_hat


class AvatarModel:
    """Anchor set plus the seven networks; stateless apart from its parameters."""

    def __init__(self, config: ModelConfig, layout: PatchLayout, shape_count: int, length_scale: float,
                 anchors: AnchorSet | None = None, mlps: dict | None = None):
        self.config = config
        self.layout = layout
        self.patch_count = layout.patch_count
        self.shape_count = int(shape_count)
        self.length_scale = float(length_scale)
        rng = np.random.default_rng(config.seed)
        # anchor scale and placement are relative to the patch spacing; x, y are tangent, z is the normal
        jitter = length_scale * np.array([config.anchor_jitter, config.anchor_jitter, config.anchor_normal_jitter])
        self.anchors = anchors or init_anchors(layout, config.anchors_per_patch,
                                               spacing=config.anchor_scale * length_scale, jitter=jitter,
                                               seed=config.seed, feature_dim=config.feature_dim)
        self.mlps = mlps or self._build_mlps(rng)
        self.check_dimensions()

    @property
    def L(self) -> int:
        return self.config.gaussians_per_anchor

    def specs(self) -> dict[str, MlpSpec]:
        c, P, k1, L = self.config, self.patch_count, self.shape_count - 1, self.config.gaussians_per_anchor
        n_in, h = c.attribute_input, c.hidden
        return {
            "expr_patch": MlpSpec.simple(k1, h, c.latent_dim, instance_count=P),
            "expr_global": MlpSpec.simple(P * k1, h, c.latent_dim),
            "offset": MlpSpec.simple(n_in, h, 3 * L),
            "scale": MlpSpec.simple(n_in, h, 3 * L, "softplus"),
            "rotation": MlpSpec.simple(n_in, h, 4 * L),
            "opacity": MlpSpec.simple(n_in, h, L, "sigmoid"),
            "color": MlpSpec.simple(n_in, h, 3 * L, "sigmoid", instance_count=P if c.per_patch_color else 1),
        }

    def _build_mlps(self, rng) -> dict[str, Mlp]:
        mlps = {name: Mlp(spec, rng=rng) for name, spec in self.specs().items()}
        L, c = self.L, self.config
        # output biases: a small spread of offsets, identity rotations, small scales
        spread = np.zeros((L, 3))
        ring = np.linspace(0, 2 * np.pi, max(L - 1, 1), endpoint=False)
        spread[1:, 0] = c.offset_spread * np.cos(ring[:L - 1])
        spread[1:, 1] = c.offset_spread * np.sin(ring[:L - 1])
        mlps["offset"].params[-1][:] = spread.ravel()
        mlps["rotation"].params[-1][:] = np.tile([1.0, 0.0, 0.0, 0.0], L)
        mlps["scale"].params[-1][:] = float(softplus_inverse(c.init_scale_ratio))
        return mlps

    def check_dimensions(self) -> None:
        for name, spec in self.specs().items():
            got = self.mlps[name].spec
            if got != spec:
                raise ValueError(f"network {name} has widths {got.widths}, expected {spec.widths}")
        if self.anchors.feature_dim != self.config.feature_dim:
            raise ValueError("anchor feature width does not match the model")
        if self.anchors.patch_count != self.patch_count:
            raise ValueError("anchor set and layout disagree on the patch count")

    # forward -------------------------------------------------------------------------------------

    def encode_expressions(self, beta) -> Expressions:
        beta = np.asarray(beta, dtype=np.float64)
        if beta.shape != (self.patch_count, self.shape_count - 1):
            raise ValueError(f"blendweights have shape {beta.shape}, expected "
                             f"({self.patch_count}, {self.shape_count - 1})")
        e_p, c_p = (None, None)
        if self.config.patch_expressions:
            e_p, c_p = self.mlps["expr_patch"](beta)
        e_g, c_g = self.mlps["expr_global"](beta.reshape(1, -1))
        return Expressions(e_p, e_g[0], c_p, c_g)

    def spawn(self, beta, frames, camera: Camera, expr: Expressions | None = None) -> Spawned:
        expr = expr or self.encode_expressions(beta)
        A, L = self.anchors, self.L
        idx = np.flatnonzero(visible_anchors(A, frames, camera, tau=self.config.opacity_gate))
        n = len(idx)
        pos, R = anchors_to_global(A, frames)
        pos, R = pos[idx], R[idx]
        d = pos - camera.center
        dist = np.linalg.norm(d, axis=1, keepdims=True)
        dv = d / np.maximum(dist, 1e-12)
        shared = [A.feat[idx]]
        if expr.e_patch is not None:
            shared.append(expr.e_patch[A.parent[idx]])
        shared.append(np.broadcast_to(expr.e_global, (n, len(expr.e_global))))
        x_pos = np.hstack(shared + [A.mu[idx] / self.length_scale])
        x_view = np.hstack(shared + [dv])
        x_split = [s.shape[1] for s in shared]
        caches = {}
        out = {}
        for name, x in (("offset", x_pos), ("scale", x_view), ("rotation", x_view), ("opacity", x_view)):
            out[name], caches[name] = self.mlps[name](x)
        color_instance = A.parent[idx] if self.config.per_patch_color else None
        out["color"], caches["color"] = self.mlps["color"](x_view, color_instance)
        for name, y in out.items():
            bad = ~np.isfinite(y).all(axis=1)
            if bad.any():
                raise TrainingError(f"non-finite {name} output for anchor {int(idx[np.flatnonzero(bad)[0]])}")
        mu_hat = out["offset"].reshape(n, L, 3)
        s_hat = out["scale"].reshape(n, L, 3)
        a_hat = out["opacity"].reshape(n, L)
        s = A.scale[idx]
        means = pos[:, None, :] + np.einsum("nij,nlj->nli", R, s[:, None, :] * mu_hat)
        scales = s_hat * s[:, None, :]
        opac = A.opacity[idx][:, None] * a_hat
        prims = GaussianPrimitives(means.reshape(-1, 3), scales.reshape(-1, 3), out["rotation"].reshape(-1, 4),
                                   opac.reshape(-1), out["color"].reshape(-1, 3))
        return Spawned(idx, prims, R, s, mu_hat, s_hat, a_hat, dv, dist, x_split, caches, expr)

    def render(self, beta, frames, camera: Camera, background=(0.0, 0.0, 0.0)):
        sp = self.spawn(beta, frames, camera)
        return rasterize(sp.prims, camera, background), sp

    # backward ------------------------------------------------------------------------------------

    def backward(self, sp: Spawned, grads: PrimitiveGrads, g_mu_hat_extra=None, g_scales_extra=None,
                 g_anchor_mu_extra=None) -> dict[str, list[np.ndarray]]:
        """Parameter gradients for every optimiser group, given gradients w.r.t. the spawned primitives."""
        A, L, n = self.anchors, self.L, len(sp.idx)
        idx = sp.idx
        gm = grads.means.reshape(n, L, 3)
        g_pos = gm.sum(axis=1)
        g_off = np.einsum("nji,nlj->nli", sp.R, gm)
        g_mu_hat = g_off * sp.s[:, None, :]
        if g_mu_hat_extra is not None:
            g_mu_hat = g_mu_hat + g_mu_hat_extra
        g_s = (g_off * sp.mu_hat).sum(axis=1)
        gs = grads.scales.reshape(n, L, 3)
        if g_scales_extra is not None:
            gs = gs + g_scales_extra
        g_s_hat = gs * sp.s[:, None, :]
        g_s += (gs * sp.s_hat).sum(axis=1)
        go = grads.opacities.reshape(n, L)
        sa = sigmoid(A.alpha[idx])
        g_a_hat = go * sa[:, None]
        g_alpha_vis = (go * sp.a_hat).sum(axis=1) * sa * (1 - sa)

        out_grads = {
            "offset": g_mu_hat.reshape(n, -1), "scale": g_s_hat.reshape(n, -1),
            "rotation": grads.quats.reshape(n, -1), "opacity": g_a_hat, "color": grads.colors.reshape(n, -1),
        }
        result = {}
        g_pos_in = np.zeros((n, sum(sp.x_split) + 3))
        g_view_in = np.zeros_like(g_pos_in)
        for name, g in out_grads.items():
            gin, pg = backward(self.mlps[name].params, self.mlps[name].spec, sp.caches[name], g)
            result[name] = pg
            if name == "offset":
                g_pos_in += gin
            else:
                g_view_in += gin
        g_shared = g_pos_in[:, :-3] + g_view_in[:, :-3]
        bounds = np.cumsum([0] + sp.x_split)
        g_feat = g_shared[:, bounds[0]:bounds[1]]
        k = 1
        g_ep = None
        if sp.expr.e_patch is not None:
            g_ep_rows = g_shared[:, bounds[k]:bounds[k + 1]]
            g_ep = np.zeros_like(sp.expr.e_patch)
            np.add.at(g_ep, A.parent[idx], g_ep_rows)
            k += 1
        g_eg = g_shared[:, bounds[k]:bounds[k + 1]].sum(axis=0, keepdims=True)
        g_mu_local = g_pos_in[:, -3:] / self.length_scale
        g_dv = g_view_in[:, -3:]
        g_pos = g_pos + (g_dv - sp.dv * (sp.dv * g_dv).sum(axis=1, keepdims=True)) / sp.dist
        g_mu_local = g_mu_local + np.einsum("nji,nj->ni", sp.R, g_pos)

        N = len(A)
        g_mu = np.zeros((N, 3))
        g_mu[idx] = g_mu_local
        if g_anchor_mu_extra is not None:
            g_mu += g_anchor_mu_extra
        g_scale_raw = np.zeros((N, 3))
        g_scale_raw[idx] = g_s * sigmoid(A.scale_raw[idx])
        g_alpha = np.zeros(N)
        g_alpha[idx] = g_alpha_vis
        g_f = np.zeros_like(A.feat)
        g_f[idx] = g_feat
        result.update({"anchor_mu": [g_mu], "anchor_scale": [g_scale_raw], "anchor_alpha": [g_alpha],
                       "anchor_feat": [g_f]})
        if g_ep is not None:
            _, result["expr_patch"] = backward(self.mlps["expr_patch"].params, self.mlps["expr_patch"].spec,
                                               sp.expr.cache_patch, g_ep)
        _, result["expr_global"] = backward(self.mlps["expr_global"].params, self.mlps["expr_global"].spec,
                                            sp.expr.cache_global, g_eg)
        return result

    # losses --------------------------------------------------------------------------------------

    def loss_and_grads(self, beta, frames, camera, target, mask, weights: LossWeights, background=(0.0, 0.0, 0.0),
                       n_windows: int = 16, patch_seed=0, xyz_reduction: str = "sum"):
        """Forward, total loss and parameter gradients for one (frame, camera) sample.

        ``xyz_reduction="mean"`` divides the position regulariser by the number
        of penalised vectors instead of summing it.
        """
        sp = self.spawn(beta, frames, camera)
        out = rasterize(sp.prims, camera, background)
        l_rgb, g_img = loss_rgb(out.image, target, weights.ssim)
        terms = {"rgb": l_rgb}
        if weights.patch > 0:
            l_patch, g_patch = loss_patch(out.image, target, mask, n_windows, patch_window_size(camera.width),
                                          rng=np.random.default_rng(patch_seed))
            g_img = g_img + weights.patch * g_patch
            terms["patch"] = l_patch
        l_xyz, g_anchor_mu, g_mu_hat = loss_xyz(self.anchors.mu, sp.mu_hat)
        if xyz_reduction == "mean":
            count = len(self.anchors) + sp.mu_hat.shape[0] * sp.mu_hat.shape[1]
            l_xyz, g_anchor_mu, g_mu_hat = l_xyz / count, g_anchor_mu / count, g_mu_hat / count
        l_scale, g_scales = loss_scale(sp.prims.scales.reshape(len(sp.idx), self.L, 3))
        terms["xyz"], terms["scale"] = l_xyz, l_scale
        total, coef = total_loss(terms, weights)
        grads = rasterize_backward(out, g_img)
        pgrads = self.backward(sp, grads, coef["xyz"] * g_mu_hat, coef["scale"] * g_scales,
                               coef["xyz"] * g_anchor_mu)
        return total, terms, pgrads, out, sp, grads

    # persistence ---------------------------------------------------------------------------------

    def save(self, directory, extra: dict | None = None) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.anchors.save(d / "anchors.bin")
        state = (extra or {}).get("lr_state", {})
        for name, mlp in self.mlps.items():
            lr = {k: state[k][name] for k in ("lr", "decay") if name in state.get(k, {})}
            save_mlp(d / f"mlp_{name}.bin", mlp, lr)
        meta = {"model": asdict(self.config), "patch_count": self.patch_count, "shape_count": self.shape_count,
                "length_scale": self.length_scale, "layout": self.layout.to_json()}
        meta.update(extra or {})
        write_json(d / "model.json", meta)

    @classmethod
    def load(cls, directory) -> tuple["AvatarModel", dict]:
        d = Path(directory)
        if not (d / "model.json").exists():
            raise FileNotFoundError(f"{d} is not a checkpoint directory (model.json missing)")
        meta = read_json(d / "model.json")
        config = ModelConfig(**meta["model"])
        layout = PatchLayout.from_json(meta["layout"])
        anchors = AnchorSet.load(d / "anchors.bin")
        mlps = {name: load_mlp(d / f"mlp_{name}.bin")[0] for name in MLP_NAMES}
        return cls(config, layout, meta["shape_count"], meta["length_scale"], anchors, mlps), meta


def build_model(dataset: AvatarDataset, config: ModelConfig) -> AvatarModel:
    return AvatarModel(config, dataset.layout, dataset.shape_count, dataset.spacing)


def make_optimizer(model: AvatarModel, config: TrainConfig) -> Adam:
    adam = Adam()
    for name in MLP_NAMES:
        adam.add_group(name, model.mlps[name].params, config.lr[name], config.lr_decay)
    for group, attr in ANCHOR_GROUPS.items():
        adam.add_group(group, [getattr(model.anchors, attr)], config.lr[group], config.lr_decay)
    return adam


def _rebind_anchor_groups(adam: Adam, model: AvatarModel, keep, n_new) -> None:
    for group, attr in ANCHOR_GROUPS.items():
        adam.resize_rows(group, keep, n_new)
        adam.groups[group].params = [getattr(model.anchors, attr)]


@dataclass
class TrainResult:
    log: list[dict]
    checkpoints: list[Path]
    seconds: float


def _psnr_on(model, dataset, samples, factor=1, background=(0.0, 0.0, 0.0)):
    imgs, masks, cams = dataset.at_scale(factor)
    vals = []
    for t, c in samples:
        out, _ = model.render(dataset.beta[t], dataset.frames[t], cams[c], background)
        vals.append(psnr(out.image, imgs[t, c], masks[t, c]))
    return float(np.mean(vals)) if vals else float("nan")


def train(model: AvatarModel, dataset: AvatarDataset, config: TrainConfig, out_dir=None,
          callback=None) -> TrainResult:
    """Optimise ``model`` on the training split; writes log.csv and checkpoints when ``out_dir`` is set."""
    samples = dataset.samples("train")
    if not samples:
        raise ValueError("dataset has no training samples")
    if dataset.patch_count != model.patch_count or dataset.shape_count != model.shape_count:
        raise ValueError("dataset and model disagree on patch or shape count")
    for factor, _ in config.stages:
        dataset.at_scale(int(factor))
    heldout = dataset.samples("heldout")[: config.eval_views]
    if heldout and config.eval_views > 1:
        # spread the evaluation views over the sequence
        all_heldout = dataset.samples("heldout")
        pick = np.linspace(0, len(all_heldout) - 1, min(config.eval_views, len(all_heldout))).round().astype(int)
        heldout = [all_heldout[i] for i in pick]
    adam = make_optimizer(model, config)
    rng = np.random.default_rng(config.seed)
    order = []
    out_path = Path(out_dir) if out_dir else None
    if out_path:
        out_path.mkdir(parents=True, exist_ok=True)
    log, checkpoints = [], []
    densify_until = config.densify_until if config.densify_until is not None else config.iterations
    stage = -1
    t0 = time.time()
    for step in range(1, config.iterations + 1):
        k = config.stage_at(step - 1)
        if k != stage:
            stage = k
            if k == len(config.stages) - 1 and len(config.stages) > 1:
                adam.decay_enabled = False
            factor = int(config.stages[k][0])
            imgs, masks, cams = dataset.at_scale(factor)
        if not order:
            order = [samples[i] for i in rng.permutation(len(samples))]
        t, c = order.pop()
        total, terms, pgrads, out, sp, grads = model.loss_and_grads(
            dataset.beta[t], dataset.frames[t], cams[c], imgs[t, c], masks[t, c], config.loss, config.background,
            config.patch_windows, patch_seed=(config.seed, step), xyz_reduction=config.xyz_reduction)
        if not np.isfinite(total):
            raise TrainingError(f"non-finite loss at step {step} (frame {t}, camera {c}): {terms}")
        adam.step(pgrads)
        n_vis = len(sp.idx)
        stat = grads.color_norm if config.densify_source == "color" else grads.mean2d_norm
        accumulate_color_gradient(model.anchors, sp.idx, stat.reshape(n_vis, model.L), sp.local_offsets)
        track_opacity(model.anchors)
        if (step >= config.densify_start and step <= densify_until and config.densify_interval > 0
                and (step - config.densify_start) % config.densify_interval == 0):
            res = densify_and_prune(model.anchors, config.grow_threshold, config.prune_opacity,
                                    seed=(config.seed, step), max_anchors=config.max_anchors)
            model.anchors = res.anchors
            _rebind_anchor_groups(adam, model, res.keep, res.n_new)
            logger.info("step %d: +%d anchors, -%d pruned, total %d", step, res.n_new, res.n_pruned,
                        len(model.anchors))
        row = {"step": step, "l_rgb": terms["rgb"], "l_patch": terms.get("patch", 0.0), "l_xyz": terms["xyz"],
               "l_scale": terms["scale"], "anchors": len(model.anchors), "psnr_val": ""}
        if heldout and config.eval_every > 0 and (step % config.eval_every == 0 or step == config.iterations):
            row["psnr_val"] = _psnr_on(model, dataset, heldout, 1, config.background)
        log.append(row)
        if callback:
            callback(step, row)
        if out_path and config.checkpoint_every > 0 and step % config.checkpoint_every == 0:
            ck = out_path / f"ckpt_{step:06d}"
            model.save(ck, {"step": step, "lr_state": adam.state_dict()})
            checkpoints.append(ck)
    if out_path:
        ck = out_path / "final"
        model.save(ck, {"step": config.iterations, "lr_state": adam.state_dict(), "train_config": config.to_json()})
        checkpoints.append(ck)
        write_log(out_path / "log.csv", log)
    return TrainResult(log, checkpoints, time.time() - t0)


def write_log(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def evaluate(model: AvatarModel, dataset: AvatarDataset, split: str = "heldout", out_path=None,
             background=(0.0, 0.0, 0.0), dump_dir=None) -> dict:
    """Masked PSNR and SSIM per (frame, camera) of ``split`` plus their means."""
    samples = dataset.samples(split)
    if not samples:
        raise ValueError(f"split {split!r} has no samples (missing camera or frames)")
    views = []
    for t, c in samples:
        out, _ = model.render(dataset.beta[t], dataset.frames[t], dataset.cameras[c], background)
        img, ref, mask = out.image, dataset.images[t, c], dataset.masks[t, c]
        views.append({"frame": t, "camera": c, "psnr": psnr(img, ref, mask), "ssim": ssim(img, ref, mask)})
        if dump_dir:
            from .formats import write_raw_image
            Path(dump_dir).mkdir(parents=True, exist_ok=True)
            write_raw_image(Path(dump_dir) / f"f{t:04d}_c{c:02d}.raw", img)
    report = {"split": split, "views": views, "psnr": float(np.mean([v["psnr"] for v in views])),
              "ssim": float(np.mean([v["ssim"] for v in views]))}
    if out_path:
        write_json(out_path, report)
    return report


class AvatarEstimator(BaseEstimator):
    """Estimator wrapper around ``train``/``evaluate``.

    ``fit`` takes an ``AvatarDataset``; ``predict`` renders a list of
    (frame, camera) pairs; ``score`` is the mean held-out PSNR.
    """

    def __init__(self, iterations: int = 10000, seed: int = 0, patch_expressions: bool = True,
                 patch_color_mlp: bool = True, densify_source: str = "color", config: TrainConfig | None = None):
        self.iterations = iterations
        self.seed = seed
        self.patch_expressions = patch_expressions
        self.patch_color_mlp = patch_color_mlp
        self.densify_source = densify_source
        self.config = config

    def _config(self) -> TrainConfig:
        base = self.config or TrainConfig()
        cfg = replace(base, iterations=self.iterations, seed=self.seed,
                      model=replace(base.model, seed=self.seed), lr=dict(base.lr))
        return ablation_toggle(cfg, self.patch_expressions, self.patch_color_mlp, self.densify_source)

    def fit(self, X: AvatarDataset, y=None, out_dir=None):
        if not isinstance(X, AvatarDataset):
            raise TypeError("fit expects an AvatarDataset")
        cfg = self._config()
        self.model_ = build_model(X, cfg.model)
        self.result_ = train(self.model_, X, cfg, out_dir)
        self.dataset_ = X
        return self

    def predict(self, X):
        """Rendered images for (frame, camera) pairs of the fitted dataset."""
        from sklearn.utils.validation import check_is_fitted
        check_is_fitted(self, "model_")
        pairs = np.asarray(X, dtype=np.int64).reshape(-1, 2)
        ds = self.dataset_
        return np.stack([self.model_.render(ds.beta[t], ds.frames[t], ds.cameras[c])[0].image for t, c in pairs])

    def score(self, X: AvatarDataset | None = None, y=None, split: str = "heldout") -> float:
        from sklearn.utils.validation import check_is_fitted
        check_is_fitted(self, "model_")
        return evaluate(self.model_, X or self.dataset_, split)["psnr"]
