import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_rotation
from patchavatar.rotations import quat_to_rotmat
from patchavatar.splat import (BLUR, Camera, GaussianPrimitives, RasterError, covariance, project, rasterize,
                               rasterize_backward)

ATTRS = ("means", "scales", "quats", "opacities", "colors")


def unit_camera(size=16, f=16.0):
    """Looks down +z from the origin; the optical axis hits the image center."""
    return Camera(np.eye(4), f, f, (size - 1) / 2, (size - 1) / 2, size, size, near=0.1)


def one(mean, scale, color, opacity=1.0, quat=(1, 0, 0, 0)):
    return GaussianPrimitives(np.array([mean], float), np.array([scale], float), np.array([quat], float),
                              np.array([opacity], float), np.array([color], float))


def random_scene(rng, n=3, size=16):
    cam = unit_camera(size)
    means = np.column_stack([rng.uniform(-0.3, 0.3, n), rng.uniform(-0.3, 0.3, n), rng.uniform(2.5, 4.0, n)])
    scales = rng.uniform(0.12, 0.35, size=(n, 3))
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    return GaussianPrimitives(means, scales, quats, rng.uniform(0.3, 0.9, n), rng.uniform(0.1, 0.9, (n, 3))), cam


def test_covariance_identity_and_double_cover():
    assert np.allclose(covariance([1, 1, 1], [1, 0, 0, 0]), np.eye(3))
    rng = np.random.default_rng(0)
    q = rng.normal(size=4)
    s = rng.uniform(0.1, 2, 3)
    assert np.allclose(covariance(s, q), covariance(s, -q))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_covariance_eigenvalues_are_squared_scales(seed):
    rng = np.random.default_rng(seed)
    s = rng.uniform(0.05, 3.0, 3)
    sigma = covariance(s, rng.normal(size=4))
    assert np.allclose(sigma, sigma.T)
    assert np.allclose(np.linalg.eigvalsh(sigma), np.sort(s ** 2), atol=1e-6)


def test_project_on_axis():
    cam = unit_camera(32, f=50.0)
    m, cov, depth = project(one([0, 0, 4.0], [0.2] * 3, [1, 1, 1]), cam)
    assert np.allclose(m, [cam.cx, cam.cy])
    assert depth == 4.0
    expected = (50.0 * 0.2 / 4.0) ** 2
    assert np.allclose(cov, np.diag([expected + BLUR, expected + BLUR]))
    _, cov2, _ = project(one([0, 0, 8.0], [0.2] * 3, [1, 1, 1]), cam)
    assert np.isclose(np.sqrt(cov2[0, 0] - BLUR), 0.5 * np.sqrt(cov[0, 0] - BLUR))


def test_project_behind_camera_raises():
    with pytest.raises(RasterError, match="near plane"):
        project(one([0, 0, -1.0], [0.2] * 3, [1, 1, 1]), unit_camera())


def test_empty_scene_is_background():
    empty = GaussianPrimitives(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 3)))
    out = rasterize(empty, unit_camera(), background=(0.2, 0.4, 0.6))
    assert np.allclose(out.image, [0.2, 0.4, 0.6])
    assert np.all(out.alpha == 0)


def test_opaque_huge_gaussian_gives_its_colour():
    cam = unit_camera()
    # centred exactly on pixel (7, 7)
    out = rasterize(one([-0.09375, -0.09375, 3.0], [50.0] * 3, [0.1, 0.5, 0.9]), cam, background=(1, 1, 1))
    assert np.abs(out.image[7, 7] - [0.1, 0.5, 0.9]).max() < 1e-6


def _alpha_at(prims, cam, px, py, k):
    m, cov, _ = project(prims.subset([k]), cam)
    d = np.array([px, py]) - m
    return prims.opacities[k] * np.exp(-0.5 * d @ np.linalg.solve(cov, d))


def composite(prims, cam, px, py, bg):
    """Closed-form front-to-back blending at one pixel."""
    order = np.argsort([project(prims.subset([k]), cam)[2] for k in range(len(prims))], kind="stable")
    C, T = np.zeros(3), 1.0
    for k in order:
        a = _alpha_at(prims, cam, px, py, k)
        C += prims.colors[k] * a * T
        T *= 1 - a
    return C + T * np.asarray(bg), T


def test_two_layer_example():
    """Front alpha' 0.6, back alpha' 0.5 on black: 0.6 c1 + 0.2 c2."""
    cam = unit_camera()
    c1, c2 = np.array([1.0, 0.2, 0.0]), np.array([0.0, 0.5, 1.0])
    prims = GaussianPrimitives([[0, 0, 2.0], [0, 0, 3.0]], [[100.0] * 3] * 2, [[1, 0, 0, 0]] * 2, [0.6, 0.5],
                               [c1, c2])
    out = rasterize(prims, cam)
    assert np.abs(out.image[7, 7] - (0.6 * c1 + 0.2 * c2)).max() < 1e-6


@pytest.mark.parametrize("n", [1, 2, 3])
@pytest.mark.parametrize("seed", range(4))
def test_blending_matches_closed_form(n, seed):
    rng = np.random.default_rng(100 * n + seed)
    prims, cam = random_scene(rng, n)
    bg = rng.uniform(0, 1, 3)
    out = rasterize(prims, cam, bg)
    for py in range(0, 16, 3):
        for px in range(0, 16, 3):
            C, T = composite(prims, cam, px, py, bg)
            assert np.abs(out.image[py, px] - C).max() < 1e-6
            assert abs(out.transmittance[py, px] - T) < 1e-6


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 12))
def test_alpha_plus_transmittance_is_one(seed, n):
    prims, cam = random_scene(np.random.default_rng(seed), n)
    out = rasterize(prims, cam)
    assert np.abs(out.alpha + out.transmittance - 1).max() < 1e-6
    assert out.alpha.min() >= 0 and out.alpha.max() <= 1


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(2, 12))
def test_permutation_invariance(seed, n):
    rng = np.random.default_rng(seed)
    prims, cam = random_scene(rng, n)
    perm = rng.permutation(n)
    a = rasterize(prims, cam).image
    b = rasterize(prims.subset(perm), cam).image
    assert np.abs(a - b).max() < 1e-6


def test_equal_depth_ties_follow_index_order():
    cam = unit_camera()
    prims = GaussianPrimitives([[0, 0, 3.0], [0, 0, 3.0]], [[100.0] * 3] * 2, [[1, 0, 0, 0]] * 2, [0.5, 0.5],
                               [[1, 0, 0], [0, 0, 1]])
    out = rasterize(prims, cam)
    assert np.allclose(out.image[7, 7], [0.5, 0, 0.25])


def test_occlusion_blocks_colour_gradient():
    cam = unit_camera()
    prims = GaussianPrimitives([[0, 0, 2.0], [0, 0, 4.0]], [[100.0] * 3, [0.3] * 3], [[1, 0, 0, 0]] * 2,
                               [1.0, 0.8], [[1, 0, 0], [0, 1, 0]])
    out = rasterize(prims, cam)
    g = rasterize_backward(out, np.ones_like(out.image))
    assert np.all(g.colors[1] == 0)


def test_zero_image_gradient_gives_zero():
    prims, cam = random_scene(np.random.default_rng(1), 3)
    out = rasterize(prims, cam)
    g = rasterize_backward(out, np.zeros_like(out.image))
    assert all(np.all(getattr(g, a) == 0) for a in ATTRS)


def test_single_gaussian_colour_gradient_is_alpha():
    cam = unit_camera()
    prims = one([0.05, -0.02, 3.0], [0.3, 0.2, 0.25], [0.3, 0.3, 0.3], opacity=0.7)
    out = rasterize(prims, cam)
    grad = np.zeros_like(out.image)
    grad[5, 9, 1] = 1.0
    g = rasterize_backward(out, grad)
    assert np.isclose(g.colors[0, 1], _alpha_at(prims, cam, 9, 5, 0), rtol=1e-9)


def test_non_finite_attribute_is_named():
    prims, cam = random_scene(np.random.default_rng(2), 3)
    prims.colors[2, 0] = np.nan
    with pytest.raises(RasterError, match="colors for primitive 2"):
        rasterize(prims, cam)


def test_backward_requires_buffers():
    prims, cam = random_scene(np.random.default_rng(2), 2)
    out = rasterize(prims, cam)
    out.ctx = {}
    with pytest.raises(RasterError):
        rasterize_backward(out, np.zeros_like(out.image))


def rasterizer_fd_errors(seed, h=1e-4):
    rng = np.random.default_rng(seed)
    prims, cam = random_scene(rng, 3)
    bg = rng.uniform(0, 1, 3)
    weights = rng.normal(size=(16, 16, 3))
    out = rasterize(prims, cam, bg)
    g = rasterize_backward(out, weights)
    errors = {}
    for attr in ATTRS:
        base = getattr(prims, attr)
        fd = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            vals = []
            for sign in (1, -1):
                arr = base.copy()
                arr[idx] += sign * h
                p2 = GaussianPrimitives(**{a: (arr if a == attr else getattr(prims, a)) for a in ATTRS})
                vals.append(np.sum(weights * rasterize(p2, cam, bg).image))
            fd[idx] = (vals[0] - vals[1]) / (2 * h)
        ana = getattr(g, attr)
        errors[attr] = float(np.linalg.norm(ana - fd) / max(np.linalg.norm(fd), 1e-10))
    return errors


@pytest.mark.parametrize("seed", range(20))
def test_rasterizer_gradients_match_finite_differences(seed):
    errors = rasterizer_fd_errors(seed)
    assert max(errors.values()) < 1e-3, errors


def test_camera_json_roundtrip():
    cam = Camera.look_at([1, 2, -5], [0, 0, 0], [0, 1, 0], 40, 42, 32, 24, near=0.5)
    back = Camera.from_json(cam.to_json())
    assert np.array_equal(back.w2c, cam.w2c) and back.near == 0.5 and back.width == 32
    with pytest.raises(ValueError, match="16x16"):
        Camera(np.eye(4), 1, 1, 0, 0, 8, 8)


def test_look_at_centers_target():
    cam = Camera.look_at([3, 1, -7], [0.5, 0, 0], [0, 1, 0], 40, 40, 32, 32)
    uv, z = cam.project_points(np.array([[0.5, 0, 0]]))
    assert np.allclose(uv[0], [cam.cx, cam.cy]) and z[0] > 0
    assert np.isclose(np.linalg.det(cam.rotation), 1.0)
