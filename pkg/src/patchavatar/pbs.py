"""Patch blendshape (PBS) model and per-frame blendweight solver.

Each patch owns a local linear blendshape model built from K static scans.
Blendweights are fitted to a tracked target mesh under a shared global rigid
transform, with an absolute-value prior on the weights and an L1 consistency
term between adjacent patches.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .mesh import Mesh, PatchLayout
from .rotations import quat_to_rotmat, rotmat_to_quat
from .validation import check_blendweights, check_vertices

logger = logging.getLogger(__name__)

RIDGE = 1e-9


class PbsError(RuntimeError):
    pass


@dataclass(frozen=True)
class PbsWeights:
    ls: float = 1.0
    reg: float = 1e-3
    o: float = 1e-2

    def __post_init__(self):
        if not self.ls > 0:
            raise ValueError(f"lambda_ls must be > 0, got {self.ls}")
        if self.reg < 0 or self.o < 0:
            raise ValueError("lambda_reg and lambda_o must be >= 0")


@dataclass
class RigidTransform:
    quat: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.quat = np.asarray(self.quat, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        n = np.linalg.norm(self.quat)
        if abs(n - 1.0) > 1e-9:
            self.quat = self.quat / n

    @classmethod
    def from_matrix(cls, R: np.ndarray, t: np.ndarray) -> "RigidTransform":
        return cls(rotmat_to_quat(R), t)

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_rotmat(self.quat)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def inverse_apply(self, points: np.ndarray) -> np.ndarray:
        return (points - self.translation) @ self.rotation


@dataclass
class EnergyTerms:
    ls: float
    reg: float
    o: float
    weights: PbsWeights

    @property
    def total(self) -> float:
        w = self.weights
        return w.ls * self.ls + w.reg * self.reg + w.o * self.o


class PatchBlendshapeBasis:
    """Neutral patch vertices plus K-1 delta shapes for every patch."""

    def __init__(self, shapes, layout: PatchLayout):
        shapes = check_vertices(shapes, name="shapes")
        if len(shapes) < 2:
            raise ValueError("need at least two shapes (neutral + one expression)")
        layout.validate(shapes.shape[1])
        self.layout = layout
        self.n_vertices = shapes.shape[1]
        self.neutral = [shapes[0, m] for m in layout.patches]
        self.deltas = [shapes[1:, m] - shapes[0, m] for m in layout.patches]
        # (3 V_p, K-1) design matrices for the least-squares term
        self._design = [d.reshape(len(d), -1).T for d in self.deltas]
        self._members = np.concatenate(layout.patches)
        self._offsets = np.cumsum([0] + [len(m) for m in layout.patches])

    @classmethod
    def from_meshes(cls, meshes: list[Mesh], layout: PatchLayout) -> "PatchBlendshapeBasis":
        faces = meshes[0].faces
        for m in meshes[1:]:
            if m.faces.shape != faces.shape or np.any(m.faces != faces):
                raise ValueError("blendshape meshes do not share topology")
        return cls(np.stack([m.vertices for m in meshes]), layout)

    @property
    def K(self) -> int:
        return len(self.deltas[0]) + 1

    @property
    def patch_count(self) -> int:
        return self.layout.patch_count

    def eval_patch(self, p: int, beta_p) -> np.ndarray:
        beta_p = np.asarray(beta_p, dtype=np.float64)
        if beta_p.shape != (self.K - 1,):
            raise ValueError(f"patch {p}: expected {self.K - 1} blendweights, got shape {beta_p.shape}")
        return self.neutral[p] + np.tensordot(beta_p, self.deltas[p], axes=1)

    def eval_all(self, beta: np.ndarray) -> np.ndarray:
        """Stacked patch-model vertices (sum V_p, 3), patch after patch."""
        return np.concatenate([self.eval_patch(p, beta[p]) for p in range(self.patch_count)])

    def reconstruct(self, beta: np.ndarray) -> np.ndarray:
        """Full-mesh vertices: each vertex averages the predictions of its owning patches.

        Vertices not covered by any patch stay at the neutral position.
        """
        stacked = self.eval_all(beta)
        sums = np.zeros((self.n_vertices, 3))
        counts = np.bincount(self._members, minlength=self.n_vertices).astype(np.float64)
        for a in range(3):
            sums[:, a] = np.bincount(self._members, weights=stacked[:, a], minlength=self.n_vertices)
        out = np.zeros((self.n_vertices, 3))
        covered = counts > 0
        out[covered] = sums[covered] / counts[covered, None]
        neutral_full = np.zeros((self.n_vertices, 3))
        for p, m in enumerate(self.layout.patches):
            neutral_full[m] = self.neutral[p]
        out[~covered] = neutral_full[~covered]
        return out

    def target_stack(self, target: np.ndarray) -> np.ndarray:
        return target[self._members]


def energy(basis: PatchBlendshapeBasis, target, beta, rigid: RigidTransform | None = None,
           weights: PbsWeights = PbsWeights(), eps: float = 0.0) -> EnergyTerms:
    """Weighted PBS fitting energy with per-term values.

    ``eps`` > 0 replaces |x| by sqrt(x^2 + eps) in both penalties; the solver
    minimises that smoothed form.
    """
    target = np.asarray(target, dtype=np.float64)
    if target.shape != (basis.n_vertices, 3):
        raise ValueError(f"target has shape {target.shape}, basis expects ({basis.n_vertices}, 3) (topology mismatch)")
    beta = check_blendweights(beta, basis.patch_count, basis.K - 1)[0]
    rigid = rigid or RigidTransform()
    model = rigid.apply(basis.eval_all(beta))
    e_ls = float(((basis.target_stack(target) - model) ** 2).sum())
    e_reg = float(np.sqrt(beta ** 2 + eps).sum())
    e_o = 0.0
    for p, nbrs in enumerate(basis.layout.neighbors):
        if len(nbrs):
            e_o += float(np.sqrt((beta[p] - beta[nbrs]) ** 2 + eps).sum())
    return EnergyTerms(e_ls, e_reg, e_o, weights)


def procrustes(source: np.ndarray, target: np.ndarray) -> RigidTransform:
    """Rigid transform minimising sum ||target - (R source + t)||^2 (Kabsch)."""
    mu_s, mu_t = source.mean(axis=0), target.mean(axis=0)
    H = (source - mu_s).T @ (target - mu_t)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    R = Vt.T @ D @ U.T
    return RigidTransform.from_matrix(R, mu_t - R @ mu_s)


@dataclass
class FrameFit:
    beta: np.ndarray
    rigid: RigidTransform
    energy: EnergyTerms
    trace: list[float]


class _BetaSystem:
    """Sparse normal equations of the beta subproblem for a fixed rigid transform."""

    def __init__(self, basis: PatchBlendshapeBasis, weights: PbsWeights):
        self.basis = basis
        self.weights = weights
        k1 = basis.K - 1
        P = basis.patch_count
        self.n = P * k1
        blocks = [2.0 * weights.ls * (A.T @ A) for A in basis._design]
        self.data_hessian = sp.block_diag(blocks, format="csr") + RIDGE * sp.identity(self.n, format="csr")
        # ordered neighbour pairs, expanded per coefficient
        pairs = [(p, q) for p, nbrs in enumerate(basis.layout.neighbors) for q in nbrs]
        self.pairs = np.array(pairs, dtype=np.int64).reshape(-1, 2)

    def rhs(self, target_local: np.ndarray) -> np.ndarray:
        w = self.weights
        out = []
        for p, A in enumerate(self.basis._design):
            b = (target_local[p] - self.basis.neutral[p]).ravel()
            out.append(2.0 * w.ls * (A.T @ b))
        return np.concatenate(out)

    def solve(self, rhs: np.ndarray, beta: np.ndarray, eps: float) -> np.ndarray:
        w = self.weights
        k1 = self.basis.K - 1
        H = self.data_hessian
        if w.reg > 0:
            H = H + sp.diags(w.reg / np.sqrt(beta.ravel() ** 2 + eps))
        if w.o > 0 and len(self.pairs):
            p, q = self.pairs[:, 0], self.pairs[:, 1]
            diff = beta[p] - beta[q]
            c = (w.o / np.sqrt(diff ** 2 + eps)).ravel()
            i = (p[:, None] * k1 + np.arange(k1)).ravel()
            j = (q[:, None] * k1 + np.arange(k1)).ravel()
            rows = np.concatenate([i, j, i, j])
            cols = np.concatenate([i, j, j, i])
            vals = np.concatenate([c, c, -c, -c])
            H = H + sp.csr_matrix((vals, (rows, cols)), shape=(self.n, self.n))
        x = spla.spsolve(sp.csc_matrix(H), rhs)
        return x.reshape(-1, k1)


def solve_blendweights(basis: PatchBlendshapeBasis, target, weights: PbsWeights = PbsWeights(),
                       rigid: RigidTransform | None = None, init=None, eps: float = 1e-8,
                       max_iter: int = 500, tol: float = 1e-13) -> np.ndarray:
    """Blendweights for a fixed rigid transform: IRLS on the smoothed, convex subproblem."""
    target = np.asarray(target, dtype=np.float64)
    rigid = rigid or RigidTransform()
    system = _BetaSystem(basis, weights)
    local = np.split(rigid.inverse_apply(basis.target_stack(target)), basis._offsets[1:-1])
    rhs = system.rhs(local)
    k1 = basis.K - 1
    beta = np.zeros((basis.patch_count, k1)) if init is None else check_blendweights(init, basis.patch_count, k1)[0]
    for _ in range(max_iter):
        cand = system.solve(rhs, beta, eps)
        step = np.abs(cand - beta).max()
        beta = cand
        if step <= tol * max(1.0, np.abs(cand).max()):
            break
    return beta


def solve_frame(basis: PatchBlendshapeBasis, target, weights: PbsWeights = PbsWeights(),
                init=None, rigid_init: RigidTransform | None = None, max_iter: int = 50,
                tol: float = 1e-6, eps: float = 1e-8, irls_iter: int = 20,
                _system: _BetaSystem | None = None) -> FrameFit:
    """Block-coordinate descent: Procrustes for the rigid part, IRLS for the blendweights.

    Every IRLS step minimises a quadratic majoriser of the smoothed energy, so
    the recorded ``trace`` never increases; a step that would increase it is
    rejected and ends the iteration.
    """
    target = np.asarray(target, dtype=np.float64)
    if target.shape != (basis.n_vertices, 3):
        raise ValueError(f"target has shape {target.shape}, basis expects ({basis.n_vertices}, 3) (topology mismatch)")
    k1 = basis.K - 1
    P = basis.patch_count
    beta = np.zeros((P, k1)) if init is None else check_blendweights(init, P, k1)[0].copy()
    system = _system or _BetaSystem(basis, weights)
    tstack = basis.target_stack(target)

    def smoothed(b, r):
        e = energy(basis, target, b, r, weights, eps).total
        if not np.isfinite(e):
            raise PbsError(f"non-finite PBS energy (beta range [{b.min():.3g}, {b.max():.3g}])")
        return e

    rigid = rigid_init or procrustes(basis.eval_all(beta), tstack)
    current = smoothed(beta, rigid)
    trace = [current]
    splits = basis._offsets[1:-1]
    for _ in range(max_iter):
        previous = current
        # (b) blendweights for fixed rigid transform, several majorise-minimise steps
        local = np.split(rigid.inverse_apply(tstack), splits)
        rhs = system.rhs(local)
        new_beta = beta
        for _ in range(irls_iter):
            cand = system.solve(rhs, new_beta, eps)
            if not np.all(np.isfinite(cand)):
                raise PbsError("non-finite blendweights from IRLS solve")
            step = np.abs(cand - new_beta).max()
            new_beta = cand
            if step <= 1e-13 * max(1.0, np.abs(cand).max()):
                break
        # (a) rigid transform for fixed blendweights
        new_rigid = procrustes(basis.eval_all(new_beta), tstack)
        cand_energy = smoothed(new_beta, new_rigid)
        if cand_energy > current:
            # rounding can push a converged step up by an ulp; keep the rigid update only if it helps
            only_beta = smoothed(new_beta, rigid)
            if only_beta <= current:
                beta, current = new_beta, only_beta
                trace.append(current)
            break
        beta, rigid, current = new_beta, new_rigid, cand_energy
        trace.append(current)
        if previous - current <= tol * max(previous, 1e-300):
            break
    return FrameFit(beta, rigid, energy(basis, target, beta, rigid, weights), trace)


@dataclass
class SequenceFit:
    betas: np.ndarray
    rigids: list[RigidTransform]
    energies: list[EnergyTerms]
    traces: list[list[float]]


def solve_sequence(basis: PatchBlendshapeBasis, sequence, weights: PbsWeights = PbsWeights(),
                   **kwargs) -> SequenceFit:
    """Fit every frame in order, warm-starting from the previous frame's solution."""
    seq = check_vertices(sequence, basis.n_vertices, name="sequence")
    system = _BetaSystem(basis, weights)
    betas, rigids, energies, traces = [], [], [], []
    init, rigid = None, None
    for t, target in enumerate(seq):
        try:
            fit = solve_frame(basis, target, weights, init=init, rigid_init=rigid, _system=system, **kwargs)
        except (PbsError, ValueError, np.linalg.LinAlgError) as err:
            raise PbsError(f"frame {t}: {err}") from err
        betas.append(fit.beta)
        rigids.append(fit.rigid)
        energies.append(fit.energy)
        traces.append(fit.trace)
        init, rigid = fit.beta, fit.rigid
        logger.debug("frame %d: E=%.6g after %d iterations", t, fit.energy.total, len(fit.trace) - 1)
    return SequenceFit(np.stack(betas), rigids, energies, traces)


class PatchBlendweightSolver(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` builds the per-patch basis, ``transform`` solves blendweights.

    ``transform`` returns a 2-D array (T, P*(K-1)) so it composes with other
    transformers; ``inverse_transform`` maps blendweights back to meshes.
    """

    def __init__(self, layout: PatchLayout | None = None, lambda_ls: float = 1.0, lambda_reg: float = 1e-3,
                 lambda_o: float = 1e-2, max_iter: int = 50, tol: float = 1e-6, eps: float = 1e-8):
        self.layout = layout
        self.lambda_ls = lambda_ls
        self.lambda_reg = lambda_reg
        self.lambda_o = lambda_o
        self.max_iter = max_iter
        self.tol = tol
        self.eps = eps

    def fit(self, X, y=None):
        """X: the K blendshape scans, (K, V, 3); the first is the neutral."""
        if self.layout is None:
            raise ValueError("PatchBlendweightSolver needs a patch layout")
        self.basis_ = PatchBlendshapeBasis(X, self.layout)
        self.weights_ = PbsWeights(self.lambda_ls, self.lambda_reg, self.lambda_o)
        self.n_features_out_ = self.basis_.patch_count * (self.basis_.K - 1)
        return self

    def transform(self, X):
        check_is_fitted(self, "basis_")
        fit = solve_sequence(self.basis_, X, self.weights_, max_iter=self.max_iter, tol=self.tol, eps=self.eps)
        self.rigids_ = fit.rigids
        self.energies_ = fit.energies
        return fit.betas.reshape(len(fit.betas), -1)

    def inverse_transform(self, X):
        check_is_fitted(self, "basis_")
        beta = check_blendweights(X, self.basis_.patch_count, self.basis_.K - 1)
        return np.stack([self.basis_.reconstruct(b) for b in beta])
