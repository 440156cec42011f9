import cvxpy as cp
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import grid_mesh, random_rotation
from patchavatar.mesh import PatchLayout, compute_patch_centers
from patchavatar.pbs import (PatchBlendshapeBasis, PatchBlendweightSolver, PbsError, PbsWeights, RigidTransform,
                             energy, solve_blendweights, solve_frame, solve_sequence)
from patchavatar.rotations import axis_angle_to_rotmat
from patchavatar.synthetic import SyntheticSceneSpec, base_mesh, make_basis_shapes, make_patch_layout

EXACT = PbsWeights(1.0, 0.0, 0.0)


def make_basis(P=6, K=4, seed=0, subdivision=2):
    spec = SyntheticSceneSpec(subdivision=subdivision, patch_count=P, shape_count=K, seed=seed)
    mesh = base_mesh(spec)
    layout = make_patch_layout(mesh, P, 0, seed=seed)
    shapes = make_basis_shapes(mesh, spec, np.random.default_rng(seed))
    return PatchBlendshapeBasis(shapes, layout), mesh


@pytest.fixture(scope="module")
def basis():
    return make_basis()[0]


def test_eval_patch_neutral_and_one_hot(basis):
    k1 = basis.K - 1
    for p in range(basis.patch_count):
        assert np.array_equal(basis.eval_patch(p, np.zeros(k1)), basis.neutral[p])
        for i in range(k1):
            assert np.allclose(basis.eval_patch(p, np.eye(k1)[i]), basis.neutral[p] + basis.deltas[p][i])


def test_eval_patch_wrong_length(basis):
    with pytest.raises(ValueError, match="expected 3 blendweights"):
        basis.eval_patch(0, np.zeros(5))


def test_full_size_parameter_count():
    rng = np.random.default_rng(0)
    V, P, K = 2160, 432, 20
    shapes = rng.normal(size=(K, V, 3))
    patches = np.array_split(np.arange(V), P)
    b = PatchBlendshapeBasis(shapes, PatchLayout(patches, [[] for _ in patches]))
    assert b.K - 1 == 19
    assert b.patch_count * (b.K - 1) == 8208


def test_energy_zero_at_neutral(basis):
    e = energy(basis, basis.reconstruct(np.zeros((basis.patch_count, basis.K - 1))),
               np.zeros((basis.patch_count, basis.K - 1)))
    assert (e.ls, e.reg, e.o) == (0.0, 0.0, 0.0)


def test_energy_translated_target_counts_member_vertices(basis):
    beta = np.zeros((basis.patch_count, basis.K - 1))
    neutral = basis.reconstruct(beta)
    e = energy(basis, neutral + [1.0, 0.0, 0.0], beta)
    assert np.isclose(e.ls, sum(len(m) for m in basis.layout.patches))


def test_energy_consistency_counts_pairs_twice():
    mesh = grid_mesh(2)
    layout = compute_patch_centers(mesh, PatchLayout([[0, 1, 3, 4], [4, 5, 7, 8]], [[1], [0]]))
    shapes = np.stack([mesh.vertices, mesh.vertices + [0, 0, 1]])
    b = PatchBlendshapeBasis(shapes, layout)
    e = energy(b, mesh.vertices, np.array([[1.0], [0.0]]), weights=PbsWeights(1, 0, 1))
    assert e.o == 2.0
    assert e.reg == 1.0


def test_energy_topology_mismatch(basis):
    with pytest.raises(ValueError, match="topology"):
        energy(basis, np.zeros((3, 3)), np.zeros((basis.patch_count, basis.K - 1)))


def test_neutral_target_gives_zero_weights(basis):
    target = basis.reconstruct(np.zeros((basis.patch_count, basis.K - 1)))
    fit = solve_frame(basis, target, PbsWeights())
    assert np.abs(fit.beta).max() < 1e-4


def test_known_weights_recovered_exactly(basis):
    beta = np.tile([0.3, 0.7, 0.0], (basis.patch_count, 1))
    fit = solve_frame(basis, basis.reconstruct(beta), EXACT)
    assert np.abs(fit.beta - beta).max() < 1e-5
    # dense normal-equations oracle, patch by patch
    for p in range(basis.patch_count):
        A = basis.deltas[p].reshape(basis.K - 1, -1).T
        b = (basis.reconstruct(beta)[basis.layout.patches[p]] - basis.neutral[p]).ravel()
        assert np.allclose(np.linalg.solve(A.T @ A, A.T @ b), beta[p], atol=1e-8)


def test_rotated_target_recovers_rotation(basis):
    rng = np.random.default_rng(1)
    beta = rng.uniform(-0.2, 1.0, size=(basis.patch_count, basis.K - 1))
    Q = axis_angle_to_rotmat([0, 0, 1], np.deg2rad(30))
    t = np.array([3.0, -2.0, 5.0])
    fit = solve_frame(basis, basis.reconstruct(beta) @ Q.T + t, EXACT)
    assert np.abs(fit.rigid.rotation - Q).max() < 1e-4
    assert np.abs(fit.rigid.translation - t).max() < 1e-3
    assert np.abs(fit.beta - beta).max() < 1e-4
    assert abs(np.linalg.norm(fit.rigid.quat) - 1) < 1e-9


def test_energy_trace_is_non_increasing(basis):
    rng = np.random.default_rng(2)
    beta = rng.uniform(-0.2, 1.0, size=(basis.patch_count, basis.K - 1))
    target = basis.reconstruct(beta) @ random_rotation(rng).T + rng.normal(size=(1, 3))
    target = target + rng.normal(scale=0.05, size=target.shape)
    fit = solve_frame(basis, target, PbsWeights())
    assert all(b <= a for a, b in zip(fit.trace, fit.trace[1:]))


def _smoothed_abs(e, eps):
    return cp.norm(cp.hstack([e, np.sqrt(eps)]), 2)


@pytest.mark.parametrize("seed", range(4))
def test_subproblem_matches_convex_oracle(seed):
    """With the rigid part fixed, IRLS reaches the optimum of the smoothed convex problem."""
    rng = np.random.default_rng(seed)
    P, K = rng.integers(2, 4), rng.integers(2, 5)
    b, _ = make_basis(P=int(P), K=int(K), seed=seed, subdivision=1)
    beta = rng.uniform(-0.3, 1.0, size=(b.patch_count, b.K - 1))
    target = b.reconstruct(beta) + rng.normal(scale=0.5, size=(b.n_vertices, 3))
    w, eps = PbsWeights(1.0, 2.0, 5.0), 1e-8
    ours = solve_blendweights(b, target, w, eps=eps)
    x = cp.Variable((b.patch_count, b.K - 1))
    terms = []
    for p, m in enumerate(b.layout.patches):
        A = b.deltas[p].reshape(b.K - 1, -1).T
        terms.append(w.ls * cp.sum_squares(A @ x[p] - (target[m] - b.neutral[p]).ravel()))
        for i in range(b.K - 1):
            terms.append(w.reg * _smoothed_abs(x[p, i], eps))
            terms += [w.o * _smoothed_abs(x[p, i] - x[q, i], eps) for q in b.layout.neighbors[p]]
    cp.Problem(cp.Minimize(cp.sum(terms))).solve(solver=cp.CLARABEL)
    assert np.abs(ours - x.value).max() < 1e-6
    assert energy(b, target, ours, weights=w, eps=eps).total <= energy(b, target, x.value, weights=w, eps=eps).total + 1e-9


def test_translation_invariance(basis):
    rng = np.random.default_rng(4)
    beta = rng.uniform(-0.2, 1.0, size=(basis.patch_count, basis.K - 1))
    target = basis.reconstruct(beta) + rng.normal(scale=0.02, size=(basis.n_vertices, 3))
    a = solve_frame(basis, target, PbsWeights(), tol=1e-12)
    b = solve_frame(basis, target + [40.0, -7.0, 12.0], PbsWeights(), tol=1e-12)
    assert np.abs(a.beta - b.beta).max() < 1e-5


def test_regulariser_pulls_towards_zero(basis):
    rng = np.random.default_rng(5)
    target = basis.reconstruct(np.zeros((basis.patch_count, basis.K - 1)))
    target = target + rng.normal(scale=0.3, size=target.shape)
    norms = [np.abs(solve_frame(basis, target, PbsWeights(1, lam, 0)).beta).sum() for lam in (0, 1, 10, 100, 1e4)]
    assert all(b <= a + 1e-9 for a, b in zip(norms, norms[1:]))
    assert norms[-1] < 1e-3


def test_sequence_single_frame_equals_solve_frame(basis):
    beta = np.full((basis.patch_count, basis.K - 1), 0.25)
    target = basis.reconstruct(beta)
    seq = solve_sequence(basis, target[None], PbsWeights())
    assert np.array_equal(seq.betas[0], solve_frame(basis, target, PbsWeights()).beta)


def test_constant_sequence_is_stable(basis):
    beta = np.full((basis.patch_count, basis.K - 1), 0.4)
    seq = solve_sequence(basis, np.repeat(basis.reconstruct(beta)[None], 5, axis=0), PbsWeights())
    assert np.abs(seq.betas - seq.betas[0]).max() < 1e-6


def test_sequence_recovery(basis):
    rng = np.random.default_rng(6)
    betas = 0.4 + 0.5 * np.sin(np.arange(6)[:, None, None] * rng.uniform(0.1, 0.5, (1,) + (basis.patch_count,
                                                                                         basis.K - 1)))
    seq = solve_sequence(basis, np.stack([basis.reconstruct(b) for b in betas]), EXACT)
    assert np.abs(seq.betas - betas).max(axis=(1, 2)).max() < 1e-4


def test_sequence_error_names_frame(basis):
    good = basis.reconstruct(np.zeros((basis.patch_count, basis.K - 1)))
    bad = good.copy()
    bad[0, 0] = np.nan
    with pytest.raises((PbsError, ValueError), match="frame 1|non-finite|NaN"):
        solve_sequence(basis, np.stack([good, bad]), PbsWeights())


def test_degenerate_patch_does_not_crash():
    b, _ = make_basis(P=4, K=3)
    shapes = np.stack([b.reconstruct(np.zeros((4, 2)))] * 3)  # all deltas zero: singular normal equations
    flat = PatchBlendshapeBasis(shapes, b.layout)
    fit = solve_frame(flat, shapes[0], PbsWeights())
    assert np.all(np.isfinite(fit.beta))


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.0, 1.0))
def test_estimator_round_trip(basis, seed, scale):
    rng = np.random.default_rng(seed)
    beta = scale * rng.uniform(-0.2, 1.0, size=(2, basis.patch_count, basis.K - 1))
    shapes = np.concatenate([basis.reconstruct(np.zeros_like(beta[0]))[None],
                             [basis.reconstruct(np.eye(basis.K - 1)[i][None].repeat(basis.patch_count, 0))
                              for i in range(basis.K - 1)]])
    est = PatchBlendweightSolver(basis.layout, lambda_reg=0, lambda_o=0).fit(shapes)
    X = np.stack([basis.reconstruct(b) for b in beta])
    out = est.transform(X)
    assert out.shape == (2, basis.patch_count * (basis.K - 1))
    assert np.abs(out.reshape(beta.shape) - beta).max() < 1e-4
    assert np.allclose(est.inverse_transform(out), X, atol=1e-3)
    assert est.get_params()["lambda_reg"] == 0


def test_weights_validation():
    with pytest.raises(ValueError):
        PbsWeights(0.0, 0, 0)
    with pytest.raises(ValueError):
        PbsWeights(1.0, -1, 0)
