"""Synthetic head-like scenes with known blendweights and teacher-rendered images.

The base shape is the camera-facing part of a subdivided ellipsoid, in
millimetre-like units. K smooth expression scans are made by pushing vertices
along their normals with random Gaussian bumps; a tracked sequence is driven
by a known per-patch blendweight trajectory. Ground-truth images come from a
fixed "teacher" set of Gaussians (one per vertex) that rides on the mesh, with
freckles plus wrinkle stripes that darken where the surface deforms.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .formats import read_container, read_json, write_blendweights, write_container, write_json, write_obj
from .mesh import Mesh, PatchLayout, compute_patch_centers, vertex_normals
from .pbs import PatchBlendshapeBasis
from .splat import Camera, GaussianPrimitives, rasterize

SKIN = np.array([0.86, 0.63, 0.52])
FRECKLE = np.array([0.45, 0.27, 0.18])
WRINKLE = np.array([0.42, 0.22, 0.2])


@dataclass
class SyntheticSceneSpec:
    subdivision: int = 4
    radii: tuple = (85.0, 105.0, 90.0)
    shell_cut: float = 0.3
    patch_count: int = 24
    shape_count: int = 4
    patch_overlap: int = 0
    deform_amplitude: float = 9.0
    bumps_per_shape: int = 5
    freckles: int = 80
    wrinkle_period: float = 9.0
    frames: int = 20
    cameras: int = 6
    camera_radius: float = 420.0
    camera_arc: float = 100.0
    width: int = 128
    height: int = 128
    focal: float = 240.0
    heldout_camera: int = 2
    heldout_frames: int = 4
    seed: int = 0

    def __post_init__(self):
        self.radii = tuple(float(r) for r in self.radii)
        if self.frames < 1:
            raise ValueError("frames must be >= 1")
        if self.shape_count < 2:
            raise ValueError("shape_count must be >= 2")
        if self.patch_count < 1:
            raise ValueError("patch_count must be >= 1")
        if self.cameras < 1 or not 0 <= self.heldout_camera < max(self.cameras, 1):
            raise ValueError("heldout_camera must index one of the cameras")
        if self.subdivision < 0 or self.subdivision > 6:
            raise ValueError("subdivision must be in [0, 6]")
        if min(self.radii) <= 0:
            raise ValueError("radii must be positive")
        if self.heldout_frames < 0 or (self.frames > 1 and self.heldout_frames >= self.frames):
            raise ValueError("heldout_frames must leave at least one training frame")

    @property
    def focal_px(self) -> float:
        """Focal length in pixels, given for a 128 px wide image and scaled with the width."""
        return self.focal * self.width / 128.0

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "SyntheticSceneSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scene fields {sorted(unknown)}")
        return cls(**d)


def icosphere(level: int) -> tuple[np.ndarray, np.ndarray]:
    t = (1.0 + 5 ** 0.5) / 2
    v = np.array([[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
                  [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]], dtype=np.float64)
    f = np.array([[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4], [11, 10, 2],
                  [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9], [4, 9, 5],
                  [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]], dtype=np.int64)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    for _ in range(level):
        edges = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
        uniq, inv = np.unique(edges, axis=0, return_inverse=True)
        mid = v[uniq[:, 0]] + v[uniq[:, 1]]
        mid /= np.linalg.norm(mid, axis=1, keepdims=True)
        m = inv.reshape(3, -1).T + len(v)
        a, b, c = f[:, 0], f[:, 1], f[:, 2]
        ab, bc, ca = m[:, 0], m[:, 1], m[:, 2]
        f = np.concatenate([np.stack([a, ab, ca], 1), np.stack([b, bc, ab], 1), np.stack([c, ca, bc], 1),
                            np.stack([ab, bc, ca], 1)])
        v = np.concatenate([v, mid])
    return v, f


def base_mesh(spec: SyntheticSceneSpec) -> Mesh:
    """Front part of the ellipsoid (z below ``shell_cut`` of the depth radius), facing -z cameras."""
    v, f = icosphere(spec.subdivision)
    v = v * np.asarray(spec.radii)
    keep_face = np.all(v[f, 2] < spec.shell_cut * spec.radii[2], axis=1)
    f = f[keep_face]
    used = np.unique(f)
    remap = np.full(len(v), -1)
    remap[used] = np.arange(len(used))
    return Mesh(v[used], remap[f])


def _edge_pairs(faces):
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    return np.unique(np.sort(e, axis=1), axis=0)


def make_patch_layout(mesh: Mesh, patch_count: int, overlap: int = 0, seed: int = 0) -> PatchLayout:
    """Farthest-point seeds, nearest-seed assignment, optional growth by ``overlap`` vertex rings."""
    V = mesh.n_vertices
    if patch_count > len(mesh.faces) or patch_count > V:
        raise ValueError(f"patch_count {patch_count} exceeds the patchable face count")
    rng = np.random.default_rng(seed)
    pts = mesh.vertices
    seeds = [int(rng.integers(V))]
    d = np.linalg.norm(pts - pts[seeds[0]], axis=1)
    for _ in range(1, patch_count):
        seeds.append(int(np.argmax(d)))
        d = np.minimum(d, np.linalg.norm(pts - pts[seeds[-1]], axis=1))
    dist = np.linalg.norm(pts[:, None] - pts[seeds][None], axis=2)
    owner = np.argmin(dist, axis=1)
    member = np.zeros((patch_count, V), dtype=bool)
    member[owner, np.arange(V)] = True
    edges = _edge_pairs(mesh.faces)
    for _ in range(overlap):
        grown = member.copy()
        grown[:, edges[:, 0]] |= member[:, edges[:, 1]]
        grown[:, edges[:, 1]] |= member[:, edges[:, 0]]
        member = grown
    pe = owner[edges]
    cross = pe[pe[:, 0] != pe[:, 1]]
    nbrs = [set() for _ in range(patch_count)]
    for p, q in cross:
        nbrs[p].add(int(q))
        nbrs[q].add(int(p))
    patches = [np.flatnonzero(member[p]) for p in range(patch_count)]
    for p, m in enumerate(patches):
        if len(m) == 0:
            raise ValueError(f"patch {p} received no vertices")
    layout = PatchLayout(patches, [sorted(n) for n in nbrs])
    layout = compute_patch_centers(mesh, layout)
    layout.validate(V)
    return layout


RIPPLE = 0.35


def make_basis_shapes(mesh: Mesh, spec: SyntheticSceneSpec, rng) -> np.ndarray:
    """(K, V, 3): the neutral plus K-1 smooth normal-direction deformations."""
    n = vertex_normals(mesh.vertices, mesh.faces)
    shapes = [mesh.vertices]
    extent = np.asarray(spec.radii)
    for _ in range(spec.shape_count - 1):
        field_ = np.zeros(mesh.n_vertices)
        for _ in range(spec.bumps_per_shape):
            c = mesh.vertices[rng.integers(mesh.n_vertices)]
            width = rng.uniform(0.2, 0.45) * extent.mean()
            amp = rng.uniform(-1.0, 1.0) * spec.deform_amplitude
            field_ += amp * np.exp(-0.5 * (np.linalg.norm(mesh.vertices - c, axis=1) / width) ** 2)
        # a long-wavelength ripple so every patch moves under every shape (bumps alone leave some patches still)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        wavenumber = 2 * np.pi / (rng.uniform(0.8, 1.4) * extent.mean())
        ripple = np.sin(wavenumber * mesh.vertices @ direction + rng.uniform(0, 2 * np.pi))
        field_ += RIPPLE * spec.deform_amplitude * ripple
        shapes.append(mesh.vertices + field_[:, None] * n)
    return np.stack(shapes)


def make_trajectory(spec: SyntheticSceneSpec, rng) -> np.ndarray:
    """(T, P, K-1) smooth blendweights in roughly [-0.2, 1]."""
    T, P, k1 = spec.frames, spec.patch_count, spec.shape_count - 1
    t = np.arange(T)[:, None, None]
    freq = rng.uniform(0.1, 0.45, size=(1, P, k1))
    phase = rng.uniform(0, 2 * np.pi, size=(1, P, k1))
    amp = rng.uniform(0.3, 0.6, size=(1, P, k1))
    return 0.4 + amp * np.sin(freq * t + phase)


def make_cameras(spec: SyntheticSceneSpec) -> list[Camera]:
    if spec.cameras == 1:
        angles = np.zeros(1)
    else:
        angles = np.radians(np.linspace(-spec.camera_arc / 2, spec.camera_arc / 2, spec.cameras))
    cams = []
    for a in angles:
        eye = spec.camera_radius * np.array([np.sin(a), 0.08, -np.cos(a)])
        cams.append(Camera.look_at(eye, [0, 0, 0], [0, 1, 0], spec.focal_px, spec.focal_px, spec.width, spec.height,
                                   near=1.0))
    return cams


@dataclass
class TeacherScene:
    """Per-vertex Gaussians that follow the mesh; colours react to local deformation."""

    faces: np.ndarray
    neutral: np.ndarray
    base_color: np.ndarray
    stripe: np.ndarray
    size: float
    thickness: float = 0.3
    opacity: float = 0.97
    deform_scale: float = 1.0

    def gaussians(self, vertices: np.ndarray) -> GaussianPrimitives:
        n = vertex_normals(vertices, self.faces)
        # a flat disc only needs its axis, so rotate +z onto the normal flipped into z >= 0
        m = n * np.where(n[:, 2:3] < 0, -1.0, 1.0)
        quats = np.stack([1.0 + m[:, 2], -m[:, 1], m[:, 0], np.zeros(len(m))], axis=1)
        quats /= np.linalg.norm(quats, axis=1, keepdims=True)
        scales = np.tile([self.size, self.size, self.size * self.thickness], (len(vertices), 1))
        w = np.clip(np.linalg.norm(vertices - self.neutral, axis=1) / self.deform_scale, 0.0, 1.0)
        a = (0.6 * w * self.stripe)[:, None]
        color = self.base_color * (1.0 - a) + WRINKLE * a
        return GaussianPrimitives(vertices, scales, quats, np.full(len(vertices), self.opacity),
                                  np.clip(color, 0.0, 1.0))

    def to_arrays(self) -> dict:
        return {"faces": self.faces.astype("<i8"), "neutral": self.neutral, "base_color": self.base_color,
                "stripe": self.stripe}

    def meta(self) -> dict:
        return {"size": self.size, "thickness": self.thickness, "opacity": self.opacity,
                "deform_scale": self.deform_scale}

    def save(self, path) -> None:
        write_container(path, self.to_arrays(), self.meta())

    @classmethod
    def load(cls, path) -> "TeacherScene":
        arrays, meta = read_container(path)
        return cls(arrays["faces"], arrays["neutral"], arrays["base_color"], arrays["stripe"], **meta)


def make_teacher(mesh: Mesh, spec: SyntheticSceneSpec, rng) -> TeacherScene:
    v = mesh.vertices
    edges = _edge_pairs(mesh.faces)
    edge_len = float(np.linalg.norm(v[edges[:, 0]] - v[edges[:, 1]], axis=1).mean())
    # slow colour variation plus dark freckles
    k = rng.normal(size=(3, 3)) / 60.0
    phase = rng.uniform(0, 2 * np.pi, 3)
    low = 0.06 * np.sin(v @ k.T + phase)
    color = SKIN + low
    for _ in range(spec.freckles):
        c = v[rng.integers(len(v))]
        r = rng.uniform(0.6, 1.6) * edge_len
        w = 0.8 * np.exp(-0.5 * (np.linalg.norm(v - c, axis=1) / r) ** 2)
        color = color * (1 - w[:, None]) + FRECKLE * w[:, None]
    stripe = (0.5 + 0.5 * np.sin(2 * np.pi * v[:, 1] / spec.wrinkle_period + 0.3 * v[:, 0] / spec.wrinkle_period)) ** 2
    return TeacherScene(mesh.faces, v.copy(), np.clip(color, 0, 1), stripe, size=0.8 * edge_len,
                        deform_scale=spec.deform_amplitude)


@dataclass
class SyntheticScene:
    spec: SyntheticSceneSpec
    mesh: Mesh
    layout: PatchLayout
    shapes: np.ndarray
    beta: np.ndarray
    sequence: np.ndarray
    cameras: list
    teacher: TeacherScene
    images: np.ndarray = field(repr=False)
    masks: np.ndarray = field(repr=False)


def render_teacher(teacher: TeacherScene, vertices: np.ndarray, camera: Camera):
    out = rasterize(teacher.gaussians(vertices), camera)
    return out.image, out.alpha > 0.5


def generate(spec: SyntheticSceneSpec) -> SyntheticScene:
    rng = np.random.default_rng(spec.seed)
    mesh = base_mesh(spec)
    layout = make_patch_layout(mesh, spec.patch_count, spec.patch_overlap, seed=spec.seed)
    shapes = make_basis_shapes(mesh, spec, rng)
    beta = make_trajectory(spec, rng)
    basis = PatchBlendshapeBasis(shapes, layout)
    sequence = np.stack([basis.reconstruct(b) for b in beta])
    cameras = make_cameras(spec)
    teacher = make_teacher(mesh, spec, rng)
    images = np.zeros((spec.frames, len(cameras), spec.height, spec.width, 3), dtype=np.float32)
    masks = np.zeros((spec.frames, len(cameras), spec.height, spec.width), dtype=bool)
    for t in range(spec.frames):
        for c, cam in enumerate(cameras):
            img, m = render_teacher(teacher, sequence[t], cam)
            images[t, c] = img
            masks[t, c] = m
    return SyntheticScene(spec, mesh, layout, shapes, beta, sequence, cameras, teacher, images, masks)


def split_frames(spec: SyntheticSceneSpec) -> tuple[list[int], list[int]]:
    n_hold = spec.heldout_frames if spec.frames > 1 else 0
    train = list(range(spec.frames - n_hold))
    return train, list(range(spec.frames - n_hold, spec.frames))


def write_scene(scene: SyntheticScene, out_dir) -> Path:
    """Write the dataset directory; returns the manifest path."""
    out = Path(out_dir)
    (out / "basis").mkdir(parents=True, exist_ok=True)
    (out / "sequence").mkdir(exist_ok=True)
    spec = scene.spec
    for k, s in enumerate(scene.shapes):
        write_obj(out / "basis" / f"shape_{k:02d}.obj", scene.mesh.with_vertices(s))
    for t, v in enumerate(scene.sequence):
        write_obj(out / "sequence" / f"frame_{t:04d}.obj", scene.mesh.with_vertices(v))
    scene.layout.save(out / "layout.json")
    write_blendweights(out / "blendweights_true.bin", scene.beta)
    write_json(out / "cameras.json", [c.to_json() for c in scene.cameras])
    write_container(out / "images.bin", {"images": scene.images.astype("<f4"),
                                         "masks": scene.masks.astype(np.uint8)})
    scene.teacher.save(out / "teacher.bin")
    train_frames, heldout_frames = split_frames(spec)
    cams = list(range(len(scene.cameras)))
    manifest = {
        "spec": spec.to_json(),
        "patch_count": spec.patch_count,
        "shape_count": spec.shape_count,
        "frames": spec.frames,
        "width": spec.width,
        "height": spec.height,
        "layout": "layout.json",
        "basis": "basis",
        "sequence": "sequence",
        "blendweights": "blendweights_true.bin",
        "cameras": "cameras.json",
        "images": "images.bin",
        "teacher": "teacher.bin",
        "split": {
            "train_cameras": [c for c in cams if c != spec.heldout_camera] or cams,
            "heldout_cameras": [spec.heldout_camera],
            "train_frames": train_frames,
            "heldout_frames": heldout_frames,
        },
    }
    write_json(out / "manifest.json", manifest)
    return out / "manifest.json"


def gen_synthetic(spec: SyntheticSceneSpec, out_dir) -> Path:
    return write_scene(generate(spec), out_dir)


def load_spec(path) -> SyntheticSceneSpec:
    d = read_json(path)
    return SyntheticSceneSpec.from_json(d.get("scene", d))


__all__ = ["SyntheticSceneSpec", "SyntheticScene", "TeacherScene", "generate", "gen_synthetic", "write_scene",
           "make_patch_layout", "base_mesh", "icosphere", "render_teacher", "split_frames"]
