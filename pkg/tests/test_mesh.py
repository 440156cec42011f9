import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import grid_mesh, random_rotation
from patchavatar.formats import read_obj, write_obj
from patchavatar.mesh import (Mesh, MeshError, PatchLayout, TbnpBuilder, compute_patch_centers, compute_tbnp,
                              to_global, to_local, vertex_normals)


def test_center_of_unit_square_with_middle_vertex():
    verts = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0.5, 0.5, 0]], dtype=float)
    faces = np.array([[0, 1, 4], [1, 2, 4], [2, 3, 4], [3, 0, 4]])
    layout = compute_patch_centers(Mesh(verts, faces), PatchLayout([[0, 1, 2, 3, 4]], [[]]))
    assert layout.centers.tolist() == [4]


def test_full_size_layout_gives_one_center_per_patch():
    rng = np.random.default_rng(0)
    verts = rng.normal(size=(2000, 3))
    mesh = Mesh(verts, np.array([[0, 1, 2]]))
    patches = np.array_split(rng.permutation(2000), 432)
    layout = compute_patch_centers(mesh, PatchLayout(patches, [[] for _ in patches]))
    assert len(layout.centers) == 432
    layout.validate(2000)


@pytest.mark.parametrize("seed", range(5))
def test_center_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    verts = rng.normal(size=(60, 3))
    members = rng.choice(60, size=20, replace=False)
    layout = compute_patch_centers(Mesh(verts, np.array([[0, 1, 2]])), PatchLayout([members], [[]]))
    mean = verts[members].mean(axis=0)
    best = min(members, key=lambda i: (np.sum((verts[i] - mean) ** 2), i))
    assert layout.centers[0] == best


def test_center_ties_go_to_lowest_index():
    verts = np.array([[1, 0, 0], [-1, 0, 0], [0, 0, 3], [0, 0, -3]], dtype=float)
    layout = compute_patch_centers(Mesh(verts, np.array([[0, 1, 2]])), PatchLayout([[3, 2, 1, 0]], [[]]))
    assert layout.centers[0] == 0


def test_empty_patch_is_named():
    mesh = grid_mesh(2)
    with pytest.raises(MeshError, match="patch 1"):
        compute_patch_centers(mesh, PatchLayout([[0, 1], []], [[], []]))


def test_centers_are_bit_identical_across_calls(head):
    mesh, layout = head
    a = compute_patch_centers(mesh, layout).centers
    b = compute_patch_centers(mesh, layout).centers
    assert np.array_equal(a, b)


def test_flat_patch_frame():
    mesh = grid_mesh(4)
    layout = compute_patch_centers(mesh, PatchLayout([np.arange(25)], [[]]))
    T = compute_tbnp(mesh, layout)[0]
    assert np.allclose(T[:3, 2], [0, 0, 1])
    assert np.isclose(np.linalg.det(T[:3, :3]), 1.0)
    assert np.allclose(T[3], [0, 0, 0, 1])
    assert np.allclose(T @ [0, 0, 0, 1], np.r_[mesh.vertices[layout.centers[0]], 1])


def test_rotated_mesh_rotates_frames(head):
    mesh, layout = head
    Q = random_rotation(np.random.default_rng(3))
    T0 = compute_tbnp(mesh, layout)
    T1 = compute_tbnp(mesh.with_vertices(mesh.vertices @ Q.T), layout)
    assert np.allclose(T1[:, :3, :3], Q @ T0[:, :3, :3], atol=1e-10)
    assert np.allclose(T1[:, :3, 3], T0[:, :3, 3] @ Q.T, atol=1e-10)


def test_frames_are_orthonormal_right_handed(head):
    mesh, layout = head
    T = compute_tbnp(mesh, layout)
    R = T[:, :3, :3]
    assert np.abs(np.einsum("pji,pjk->pik", R, R) - np.eye(3)).max() < 1e-6
    assert np.allclose(np.linalg.det(R), 1.0)
    assert np.allclose(T[:, 3], [0, 0, 0, 1])


def test_isolated_center_raises():
    verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 5, 5]], dtype=float)
    mesh = Mesh(verts, np.array([[0, 1, 2]]))
    layout = PatchLayout([[3]], [[]], centers=[3])
    with pytest.raises(MeshError, match="isolated"):
        compute_tbnp(mesh, layout)


def test_to_global_basics():
    rng = np.random.default_rng(0)
    T = np.eye(4)
    T[:3, :3] = random_rotation(rng)
    T[:3, 3] = rng.normal(size=3)
    assert np.allclose(to_global(T, np.zeros(3)), T[:3, 3])
    p = rng.normal(size=3)
    assert np.allclose(to_global(np.eye(4), p), p)
    assert np.allclose(to_global(T, p), (T @ np.r_[p, 1])[:3])
    assert np.allclose(to_local(T, to_global(T, p)), p)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_rigid_motion_equivariance(head, seed):
    mesh, layout = head
    rng = np.random.default_rng(seed)
    Q, t = random_rotation(rng), rng.normal(size=3) * 50
    x = rng.normal(size=(layout.patch_count, 3)) * 5
    builder = TbnpBuilder.from_layout(mesh, layout)
    before = to_global(builder.frames(mesh.vertices), x)
    after = to_global(builder.frames(mesh.vertices @ Q.T + t), x)
    expected = before @ Q.T + t
    assert np.abs(after - expected).max() <= 1e-5 * max(1.0, np.abs(expected).max())


def test_layout_json_roundtrip_and_symmetry(tmp_path, head):
    _, layout = head
    layout.save(tmp_path / "layout.json")
    back = PatchLayout.load(tmp_path / "layout.json")
    assert all(np.array_equal(a, b) for a, b in zip(layout.patches, back.patches))
    assert np.array_equal(layout.centers, back.centers)
    bad = PatchLayout([[0], [1]], [[1], []])
    with pytest.raises(MeshError, match="symmetric"):
        bad.validate()


def test_obj_roundtrip(tmp_path, head):
    mesh, _ = head
    write_obj(tmp_path / "m.obj", mesh)
    back = read_obj(tmp_path / "m.obj")
    assert np.array_equal(back.faces, mesh.faces)
    assert np.allclose(back.vertices, mesh.vertices, rtol=1e-8)


def test_mesh_rejects_bad_faces():
    with pytest.raises(MeshError):
        Mesh(np.zeros((3, 3)), np.array([[0, 1, 3]]))
    with pytest.raises(MeshError, match="degenerate"):
        Mesh(np.zeros((3, 3)), np.array([[0, 1, 2]])).check_nondegenerate()


def test_vertex_normals_area_weighted():
    mesh = grid_mesh(2)
    n = vertex_normals(mesh.vertices, mesh.faces)
    assert np.allclose(n, [0, 0, 1])
