"""On-disk formats: OBJ meshes, little-endian binary tensor containers with JSON manifests, images."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .mesh import Mesh, MeshError


class FormatError(ValueError):
    pass


def read_obj(path) -> Mesh:
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            if line.startswith("v "):
                verts.append([float(x) for x in line.split()[1:4]])
            elif line.startswith("f "):
                idx = [int(tok.split("/")[0]) for tok in line.split()[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                # fan-triangulate polygons
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
    if not verts:
        raise MeshError(f"{path}: no vertices")
    return Mesh(np.array(verts), np.array(faces, dtype=np.int64).reshape(-1, 3))


def write_obj(path, mesh: Mesh) -> None:
    # shortest round-trip repr, so reading back gives the same doubles
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in np.asarray(mesh.vertices, dtype=np.float64).tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def manifest_path(path) -> Path:
    return Path(path).with_suffix(".json")


def write_container(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Concatenate arrays into one little-endian blob; describe them in a sibling .json."""
    path = Path(path)
    entries, offset, chunks = [], 0, []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        data = np.ascontiguousarray(le).tobytes()
        entries.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape), "offset": offset})
        chunks.append(data)
        offset += len(data)
    path.write_bytes(b"".join(chunks))
    manifest = dict(meta or {})
    manifest["arrays"] = entries
    manifest_path(path).write_text(json.dumps(manifest, indent=1))


def read_container(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    mpath = manifest_path(path)
    if not path.exists() or not mpath.exists():
        raise FormatError(f"missing container {path} or manifest {mpath}")
    manifest = json.loads(mpath.read_text())
    blob = path.read_bytes()
    arrays = {}
    for e in manifest["arrays"]:
        dt = np.dtype(e["dtype"])
        n = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype=dt, count=n, offset=e["offset"]).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(dt.newbyteorder("="))
    meta = {k: v for k, v in manifest.items() if k != "arrays"}
    return arrays, meta


def write_blendweights(path, beta: np.ndarray) -> None:
    beta = np.asarray(beta)
    if beta.ndim != 3:
        raise FormatError(f"blendweights must be (T, P, K-1), got {beta.shape}")
    T, P, k1 = beta.shape
    write_container(path, {"blendweights": beta.astype("<f4")}, {"T": T, "P": P, "K": k1 + 1})


def read_blendweights(path) -> np.ndarray:
    arrays, meta = read_container(path)
    beta = arrays["blendweights"]
    if beta.shape != (meta["T"], meta["P"], meta["K"] - 1):
        raise FormatError(f"{path}: manifest {meta} disagrees with tensor shape {beta.shape}")
    return beta


def write_raw_image(path, image: np.ndarray) -> None:
    np.ascontiguousarray(image, dtype="<f4").tofile(path)


def read_raw_image(path, shape) -> np.ndarray:
    return np.fromfile(path, dtype="<f4").reshape(shape)


def write_png(path, image: np.ndarray) -> None:
    from PIL import Image

    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray((img * 255.0 + 0.5).astype(np.uint8)).save(path)


def read_json(path) -> dict:
    return json.loads(Path(path).read_text())


def write_json(path, data) -> None:
    Path(path).write_text(json.dumps(data, indent=1))
