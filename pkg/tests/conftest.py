import numpy as np
import pytest

from patchavatar.mesh import Mesh, PatchLayout, compute_patch_centers
from patchavatar.dataset import AvatarDataset
from patchavatar.synthetic import SyntheticSceneSpec, base_mesh, generate, make_patch_layout, write_scene


def grid_mesh(n=4, size=1.0):
    """Flat (n+1)x(n+1) vertex grid in the z=0 plane, normals +z."""
    xs = np.linspace(0, size, n + 1)
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    verts = np.stack([X.ravel(), Y.ravel(), np.zeros(X.size)], axis=1)
    faces = []
    for i in range(n):
        for j in range(n):
            a, b, c, d = i * (n + 1) + j, (i + 1) * (n + 1) + j, (i + 1) * (n + 1) + j + 1, i * (n + 1) + j + 1
            faces += [[a, b, c], [a, c, d]]
    return Mesh(verts, np.array(faces))


@pytest.fixture(scope="session")
def head():
    """A small head-like shell with a 6-patch layout."""
    spec = SyntheticSceneSpec(subdivision=2, patch_count=6)
    mesh = base_mesh(spec)
    layout = make_patch_layout(mesh, 6, 0, seed=0)
    return mesh, layout


@pytest.fixture(scope="session")
def tiny_scene():
    spec = SyntheticSceneSpec(subdivision=2, patch_count=4, shape_count=3, frames=3, cameras=3, width=32, height=32,
                              heldout_camera=1, heldout_frames=1, freckles=20)
    return generate(spec)


@pytest.fixture(scope="session")
def tiny_dir(tiny_scene, tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    write_scene(tiny_scene, out)
    return out


@pytest.fixture
def tiny_dataset(tiny_dir):
    return AvatarDataset.load(tiny_dir)


def random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([[1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                     [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                     [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)]])


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-8))


_ACCEPTANCE: dict[int, list[tuple[bool, str]]] = {}


@pytest.fixture(scope="session")
def criterion():
    """``criterion(n, passed, detail)`` records one acceptance check; the summary prints one line per criterion."""
    def record(n, passed, detail):
        _ACCEPTANCE.setdefault(n, []).append((bool(passed), detail))
        return bool(passed)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        checks = _ACCEPTANCE[n]
        ok = all(p for p, _ in checks)
        details = "; ".join(d for _, d in checks)
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {details}")
