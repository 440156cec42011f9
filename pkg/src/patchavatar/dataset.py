"""Loading a dataset directory (as written by ``gen-synthetic``) into memory."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .formats import read_blendweights, read_container, read_json, read_obj
from .mesh import Mesh, PatchLayout, TbnpBuilder
from .rig import mean_center_spacing
from .splat import Camera

SPLITS = ("train", "heldout", "reenact", "all")


def downsample(img: np.ndarray, factor: int) -> np.ndarray:
    """Box-filter downsampling by an integer factor over the two leading spatial axes."""
    if factor == 1:
        return img
    H, W = img.shape[:2]
    if H % factor or W % factor:
        raise ValueError(f"image {H}x{W} is not divisible by {factor}")
    return img.reshape(H // factor, factor, W // factor, factor, *img.shape[2:]).mean(axis=(1, 3))


@dataclass
class AvatarDataset:
    neutral: Mesh
    layout: PatchLayout
    sequence: np.ndarray
    beta: np.ndarray
    cameras: list
    images: np.ndarray = field(repr=False)
    masks: np.ndarray = field(repr=False)
    split: dict = field(default_factory=dict)
    root: Path | None = None

    def __post_init__(self):
        T = len(self.sequence)
        if self.beta.shape[0] != T or self.images.shape[0] != T:
            raise ValueError("sequence, blendweights and images disagree on the frame count")
        if self.images.shape[1] != len(self.cameras):
            raise ValueError("image array and camera list disagree on the camera count")
        if self.beta.shape[1] != self.layout.patch_count:
            raise ValueError("blendweights disagree with the patch layout")
        self._tbnp = TbnpBuilder.from_layout(self.neutral, self.layout)
        self.frames = self._tbnp.frames(self.sequence)
        self.spacing = mean_center_spacing(self.neutral, self.layout)
        self._scaled: dict[int, tuple] = {}
        self.split = self.split or {"train_cameras": list(range(len(self.cameras))), "heldout_cameras": [],
                                    "train_frames": list(range(T)), "heldout_frames": []}

    @property
    def patch_count(self) -> int:
        return self.layout.patch_count

    @property
    def shape_count(self) -> int:
        return self.beta.shape[2] + 1

    @property
    def width(self) -> int:
        return self.cameras[0].width

    @property
    def height(self) -> int:
        return self.cameras[0].height

    @classmethod
    def load(cls, path, blendweights=None) -> "AvatarDataset":
        """``path`` is the dataset directory or its manifest; ``blendweights`` overrides the stored ones."""
        path = Path(path)
        manifest_file = path / "manifest.json" if path.is_dir() else path
        root = manifest_file.parent
        m = read_json(manifest_file)
        layout = PatchLayout.load(root / m["layout"])
        basis_files = sorted((root / m["basis"]).glob("*.obj"))
        if not basis_files:
            raise FileNotFoundError(f"no basis meshes under {root / m['basis']}")
        neutral = read_obj(basis_files[0])
        seq_files = sorted((root / m["sequence"]).glob("*.obj"))
        sequence = np.stack([read_obj(f).vertices for f in seq_files])
        beta = read_blendweights(blendweights or (root / m["blendweights"])).astype(np.float64)
        cameras = [Camera.from_json(c) for c in read_json(root / m["cameras"])]
        arrays, _ = read_container(root / m["images"])
        if layout.centers is None:
            raise ValueError("layout file has no patch centers")
        return cls(neutral, layout, sequence, beta, cameras, arrays["images"].astype(np.float64),
                   arrays["masks"].astype(bool), m.get("split", {}), root)

    def samples(self, split: str = "train") -> list[tuple[int, int]]:
        s = self.split
        if split == "train":
            frames, cams = s["train_frames"], s["train_cameras"]
        elif split == "heldout":
            frames, cams = s["train_frames"], s["heldout_cameras"]
        elif split == "reenact":
            frames, cams = s["heldout_frames"], s["train_cameras"] + s["heldout_cameras"]
        elif split == "all":
            frames, cams = range(len(self.sequence)), range(len(self.cameras))
        else:
            raise ValueError(f"unknown split {split!r}; expected one of {SPLITS}")
        return [(int(t), int(c)) for t in frames for c in cams]

    def at_scale(self, factor: int):
        """(images, masks, cameras) downsampled by an integer factor (cached)."""
        if factor not in self._scaled:
            H, W = self.height // factor, self.width // factor
            if H * factor != self.height or W * factor != self.width:
                raise ValueError(f"resolution {self.width}x{self.height} is not divisible by {factor}")
            if factor == 1:
                imgs, masks = self.images, self.masks
            else:
                T, C = self.images.shape[:2]
                imgs = np.stack([[downsample(self.images[t, c], factor) for c in range(C)] for t in range(T)])
                masks = np.stack([[downsample(self.masks[t, c].astype(np.float64), factor) > 0.5
                                   for c in range(C)] for t in range(T)])
            cams = [c.resized(W, H) for c in self.cameras]
            self._scaled[factor] = (imgs, masks, cams)
        return self._scaled[factor]
