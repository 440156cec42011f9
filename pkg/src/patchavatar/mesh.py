"""Mesh and patch geometry: patch layouts, patch centers and per-patch TBNP frames."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np


class MeshError(ValueError):
    pass


@dataclass
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise MeshError(f"vertices must be (V, 3), got {self.vertices.shape}")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise MeshError(f"faces must be (F, 3), got {self.faces.shape}")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise MeshError("face index out of range")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(_face_cross(self.vertices, self.faces), axis=1)

    def check_nondegenerate(self, tol: float = 1e-12) -> None:
        bad = np.flatnonzero(self.face_areas() <= tol)
        if len(bad):
            raise MeshError(f"degenerate face {int(bad[0])} (zero area)")

    def vertex_normals(self) -> np.ndarray:
        """Area-weighted vertex normals; isolated vertices get a zero vector."""
        return vertex_normals(self.vertices, self.faces)

    def with_vertices(self, vertices: np.ndarray) -> "Mesh":
        return Mesh(vertices, self.faces)


def _face_cross(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    v0 = vertices[faces[:, 0]]
    v1 = vertices[faces[:, 1]]
    v2 = vertices[faces[:, 2]]
    return np.cross(v1 - v0, v2 - v0)


def vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    # the unnormalised cross product is twice the face area, so summing it is area weighting
    cross = _face_cross(vertices, faces)
    normals = np.zeros_like(vertices)
    for k in range(3):
        for axis in range(3):
            normals[:, axis] += np.bincount(faces[:, k], weights=cross[:, axis], minlength=len(vertices))
    norm = np.linalg.norm(normals, axis=-1, keepdims=True)
    return np.divide(normals, norm, out=np.zeros_like(normals), where=norm > 0)


def one_ring(faces: np.ndarray, n_vertices: int) -> list[np.ndarray]:
    """Sorted 1-ring neighbour indices for every vertex."""
    edges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    edges = np.concatenate([edges, edges[:, ::-1]])
    edges = np.unique(edges, axis=0)
    splits = np.searchsorted(edges[:, 0], np.arange(n_vertices + 1))
    return [edges[splits[i]:splits[i + 1], 1] for i in range(n_vertices)]


@dataclass
class PatchLayout:
    """Overlapping vertex patches with a symmetric adjacency graph."""

    patches: list[np.ndarray]
    neighbors: list[np.ndarray]
    centers: np.ndarray | None = None

    def __post_init__(self):
        self.patches = [np.asarray(p, dtype=np.int64) for p in self.patches]
        self.neighbors = [np.asarray(sorted(set(int(q) for q in n)), dtype=np.int64) for n in self.neighbors]
        if len(self.neighbors) != len(self.patches):
            raise MeshError("neighbors must have one entry per patch")
        if self.centers is not None:
            self.centers = np.asarray(self.centers, dtype=np.int64)

    @property
    def patch_count(self) -> int:
        return len(self.patches)

    def validate(self, n_vertices: int | None = None) -> None:
        P = self.patch_count
        for p, members in enumerate(self.patches):
            if len(members) == 0:
                raise MeshError(f"patch {p} is empty")
            if n_vertices is not None and (members.min() < 0 or members.max() >= n_vertices):
                raise MeshError(f"patch {p} references a vertex outside the mesh")
        for p, nbrs in enumerate(self.neighbors):
            for q in nbrs:
                if q < 0 or q >= P or q == p:
                    raise MeshError(f"patch {p} has invalid neighbour {q}")
                if p not in self.neighbors[q]:
                    raise MeshError(f"adjacency not symmetric between patches {p} and {q}")
        if self.centers is not None:
            if len(self.centers) != P:
                raise MeshError("one center per patch required")
            for p, c in enumerate(self.centers):
                if c not in self.patches[p]:
                    raise MeshError(f"center of patch {p} is not a member vertex")

    def to_json(self) -> dict:
        entries = []
        for p in range(self.patch_count):
            entry = {"vertices": self.patches[p].tolist(), "neighbors": self.neighbors[p].tolist()}
            if self.centers is not None:
                entry["center"] = int(self.centers[p])
            entries.append(entry)
        return {"patch_count": self.patch_count, "patches": entries}

    @classmethod
    def from_json(cls, data: dict) -> "PatchLayout":
        entries = data["patches"]
        if len(entries) != data["patch_count"]:
            raise MeshError("patch_count does not match number of patches")
        centers = None
        if entries and all("center" in e for e in entries):
            centers = [e["center"] for e in entries]
        return cls([e["vertices"] for e in entries], [e.get("neighbors", []) for e in entries], centers)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "PatchLayout":
        return cls.from_json(json.loads(Path(path).read_text()))


def compute_patch_centers(mesh: Mesh, layout: PatchLayout) -> PatchLayout:
    """Pick, per patch, the member vertex closest to the member mean.

    Ties go to the lowest vertex index. Overlapping vertices count towards
    every patch they belong to.
    """
    centers = np.empty(layout.patch_count, dtype=np.int64)
    for p, members in enumerate(layout.patches):
        if len(members) == 0:
            raise MeshError(f"patch {p} is empty")
        order = np.sort(members)
        pts = mesh.vertices[order]
        d2 = ((pts - pts.mean(axis=0)) ** 2).sum(axis=1)
        centers[p] = order[int(np.argmin(d2))]
    return replace(layout, centers=centers)


@dataclass
class TbnpBuilder:
    """Precomputed topology needed to evaluate TBNP frames on many frames of one mesh."""

    faces: np.ndarray
    centers: np.ndarray
    ring: list[np.ndarray] = field(repr=False)

    @classmethod
    def from_layout(cls, mesh: Mesh, layout: PatchLayout) -> "TbnpBuilder":
        if layout.centers is None:
            raise MeshError("layout has no patch centers; run compute_patch_centers first")
        rings = one_ring(mesh.faces, mesh.n_vertices)
        ring = []
        for p, c in enumerate(layout.centers):
            if len(rings[c]) == 0:
                raise MeshError(f"patch {p} center vertex {c} is isolated")
            ring.append(rings[c])
        return cls(mesh.faces, layout.centers, ring)

    def frames(self, vertices: np.ndarray) -> np.ndarray:
        """(P, 4, 4) frames for a (V, 3) vertex array, or (T, P, 4, 4) for (T, V, 3)."""
        vertices = np.asarray(vertices, dtype=np.float64)
        if vertices.ndim == 3:
            return np.stack([self.frames(v) for v in vertices])
        normals = vertex_normals(vertices, self.faces)[self.centers]
        lengths = np.linalg.norm(normals, axis=1)
        if np.any(lengths == 0):
            p = int(np.flatnonzero(lengths == 0)[0])
            raise MeshError(f"zero-length normal at center of patch {p}")
        pos = vertices[self.centers]
        out = np.zeros((len(self.centers), 4, 4))
        for p, (n, v) in enumerate(zip(normals, pos)):
            t = None
            for q in self.ring[p]:
                e = vertices[q] - v
                e = e - n * (e @ n)
                ln = np.linalg.norm(e)
                if ln > 1e-12 * max(1.0, np.linalg.norm(vertices[q] - v)):
                    t = e / ln
                    break
            if t is None:
                raise MeshError(f"cannot build a tangent for patch {p}")
            out[p, :3, 0] = t
            out[p, :3, 1] = np.cross(n, t)
            out[p, :3, 2] = n
        out[:, :3, 3] = pos
        out[:, 3, 3] = 1.0
        return out


def compute_tbnp(mesh: Mesh, layout: PatchLayout) -> np.ndarray:
    """Per-patch 4x4 TBNP frames (tangent, bitangent, normal, position columns).

    The tangent is the edge from the center toward its lowest-index 1-ring
    neighbour with the normal component removed; bitangent = normal x tangent,
    so every rotation block is right-handed.
    """
    return TbnpBuilder.from_layout(mesh, layout).frames(mesh.vertices)


def to_global(frame: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Apply a 4x4 frame (or a stack of frames) to local 3D points."""
    frame = np.asarray(frame, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    return np.einsum("...ij,...j->...i", frame[..., :3, :3], points) + frame[..., :3, 3]


def to_local(frame: np.ndarray, points: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    d = np.asarray(points, dtype=np.float64) - frame[..., :3, 3]
    return np.einsum("...ji,...j->...i", frame[..., :3, :3], d)
