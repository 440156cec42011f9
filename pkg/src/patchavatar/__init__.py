"""Patch-conditioned anchor Gaussian head avatars on the CPU.

Patch blendweight fitting, tangent-frame rigging of anchors, a tile-based
Gaussian rasterizer with analytic gradients, small batched MLPs and a
trainer with densification and pruning.
"""

from .dataset import AvatarDataset
from .losses import LossWeights, loss_patch, loss_rgb, loss_scale, loss_xyz
from .mesh import Mesh, PatchLayout, compute_tbnp
from .metrics import psnr, ssim
from .model import AvatarEstimator, AvatarModel, ModelConfig, TrainConfig, build_model, evaluate, train
from .pbs import PatchBlendshapeBasis, PatchBlendweightSolver, PbsWeights, solve_frame, solve_sequence
from .rig import AnchorSet, densify_and_prune, init_anchors
from .splat import Camera, GaussianPrimitives, rasterize, rasterize_backward
from .synthetic import SyntheticSceneSpec, gen_synthetic
from .tinynn import Adam, Mlp, MlpSpec

__version__ = "0.1.0"

__all__ = [
    "Adam", "AnchorSet", "AvatarDataset", "AvatarEstimator", "AvatarModel", "Camera", "GaussianPrimitives",
    "LossWeights", "Mesh", "Mlp", "MlpSpec", "ModelConfig", "PatchBlendshapeBasis", "PatchBlendweightSolver",
    "PatchLayout", "PbsWeights", "SyntheticSceneSpec", "TrainConfig", "build_model", "compute_tbnp",
    "densify_and_prune", "evaluate", "gen_synthetic", "init_anchors", "loss_patch", "loss_rgb", "loss_scale",
    "loss_xyz", "psnr", "rasterize", "rasterize_backward", "solve_frame", "solve_sequence", "ssim", "train",
]
