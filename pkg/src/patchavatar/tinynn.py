"""A small dense-network stack with hand-written gradients and Adam.

Networks are plain stacks of affine layers. A spec with ``instance_count`` > 1
describes a family of independent networks sharing one architecture (one per
patch); rows of a batch pick their instance through an index array.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .formats import read_container, write_container

ACTIVATIONS = ("relu", "sigmoid", "softplus", "none")


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inverse(y):
    y = np.asarray(y, dtype=np.float64)
    return np.where(y > 30.0, y, np.log(np.expm1(np.minimum(y, 30.0))))


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "sigmoid":
        return sigmoid(z)
    if name == "softplus":
        return softplus(z)
    return z


def _act_grad(name, z, a, g):
    if name == "relu":
        return g * (z > 0)
    if name == "sigmoid":
        return g * a * (1.0 - a)
    if name == "softplus":
        return g * sigmoid(z)
    return g


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple[int, ...]
    activations: tuple[str, ...]
    instance_count: int = 1

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "activations", tuple(self.activations))
        if len(self.widths) < 3:
            raise ValueError("an MLP needs at least one hidden layer")
        if any(w <= 0 for w in self.widths):
            raise ValueError(f"layer widths must be positive: {self.widths}")
        if len(self.activations) != len(self.widths) - 1:
            raise ValueError("need one activation per layer")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        if self.instance_count < 1:
            raise ValueError("instance_count must be >= 1")

    @classmethod
    def simple(cls, n_in, hidden, n_out, out_act="none", instance_count=1):
        """One ReLU hidden layer, the shape used by every network of the avatar."""
        return cls((n_in, hidden, n_out), ("relu", out_act), instance_count)

    @property
    def n_in(self):
        return self.widths[0]

    @property
    def n_out(self):
        return self.widths[-1]

    def to_json(self):
        return {"widths": list(self.widths), "activations": list(self.activations),
                "instance_count": self.instance_count}

    @classmethod
    def from_json(cls, d):
        return cls(tuple(d["widths"]), tuple(d["activations"]), d.get("instance_count", 1))


def init_params(spec: MlpSpec, rng: np.random.Generator) -> list[np.ndarray]:
    """Glorot-uniform weights, zero biases. Layout: [W0, b0, W1, b1, ...], W: (I, in, out)."""
    params = []
    I = spec.instance_count
    for n_in, n_out in zip(spec.widths[:-1], spec.widths[1:]):
        a = np.sqrt(6.0 / (n_in + n_out))
        params.append(rng.uniform(-a, a, size=(I, n_in, n_out)))
        params.append(np.zeros((I, n_out)))
    return params


@dataclass
class _Groups:
    """Row partition by instance index (identity partition is special-cased)."""

    identity: bool
    rows: list[tuple[int, np.ndarray]] = field(default_factory=list)

    @classmethod
    def build(cls, instance, n_rows, count):
        if count == 1:
            return cls(False, [(0, slice(None))])
        if instance is None:
            if n_rows != count:
                raise ValueError(f"family of {count} instances needs an instance index for {n_rows} rows")
            return cls(True)
        instance = np.asarray(instance, dtype=np.int64)
        if instance.shape != (n_rows,):
            raise ValueError("instance index must have one entry per row")
        if n_rows and (instance.min() < 0 or instance.max() >= count):
            raise ValueError("instance index out of range")
        order = np.argsort(instance, kind="stable")
        bounds = np.searchsorted(instance[order], np.arange(count + 1))
        rows = [(i, order[bounds[i]:bounds[i + 1]]) for i in range(count) if bounds[i + 1] > bounds[i]]
        return cls(False, rows)


def _affine(groups: _Groups, h, W, b):
    if groups.identity:
        return np.einsum("ni,nio->no", h, W) + b
    if len(groups.rows) == 1 and isinstance(groups.rows[0][1], slice):
        return h @ W[0] + b[0]
    out = np.empty((len(h), W.shape[2]))
    for i, rows in groups.rows:
        out[rows] = h[rows] @ W[i] + b[i]
    return out


def _affine_backward(groups: _Groups, h, W, g):
    gW = np.zeros_like(W)
    gb = np.zeros((W.shape[0], W.shape[2]))
    if groups.identity:
        gW[:] = h[:, :, None] * g[:, None, :]
        gb[:] = g
        gh = np.einsum("no,nio->ni", g, W)
        return gh, gW, gb
    if len(groups.rows) == 1 and isinstance(groups.rows[0][1], slice):
        gW[0] = h.T @ g
        gb[0] = g.sum(axis=0)
        return g @ W[0].T, gW, gb
    gh = np.empty((len(h), W.shape[1]))
    for i, rows in groups.rows:
        gW[i] = h[rows].T @ g[rows]
        gb[i] = g[rows].sum(axis=0)
        gh[rows] = g[rows] @ W[i].T
    return gh, gW, gb


@dataclass
class ForwardCache:
    groups: _Groups
    inputs: list[np.ndarray]
    pre: list[np.ndarray]
    post: list[np.ndarray]


def forward(params, spec: MlpSpec, x, instance=None):
    """Evaluate the network; returns (output, cache for ``backward``)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.n_in:
        raise ValueError(f"input shape {x.shape} does not match MLP input width {spec.n_in}")
    groups = _Groups.build(instance, len(x), spec.instance_count)
    h = x
    inputs, pre, post = [], [], []
    for layer, act in enumerate(spec.activations):
        W, b = params[2 * layer], params[2 * layer + 1]
        inputs.append(h)
        z = _affine(groups, h, W, b)
        h = _act(act, z)
        pre.append(z)
        post.append(h)
    return h, ForwardCache(groups, inputs, pre, post)


def backward(params, spec: MlpSpec, cache: ForwardCache, grad_out):
    """Reverse pass; returns (input gradient, parameter gradients in ``params`` layout)."""
    g = np.asarray(grad_out, dtype=np.float64)
    grads = [None] * len(params)
    for layer in reversed(range(len(spec.activations))):
        g = _act_grad(spec.activations[layer], cache.pre[layer], cache.post[layer], g)
        g, gW, gb = _affine_backward(cache.groups, cache.inputs[layer], params[2 * layer], g)
        grads[2 * layer], grads[2 * layer + 1] = gW, gb
    return g, grads


class Mlp:
    """Spec plus parameters, with convenience wrappers around ``forward``/``backward``."""

    def __init__(self, spec: MlpSpec, params=None, rng=None):
        self.spec = spec
        self.params = params if params is not None else init_params(spec, rng or np.random.default_rng(0))
        self._check()

    def _check(self):
        for layer, (n_in, n_out) in enumerate(zip(self.spec.widths[:-1], self.spec.widths[1:])):
            I = self.spec.instance_count
            if self.params[2 * layer].shape != (I, n_in, n_out) or self.params[2 * layer + 1].shape != (I, n_out):
                raise ValueError(f"parameter shapes do not match spec at layer {layer}")

    def __call__(self, x, instance=None):
        return forward(self.params, self.spec, x, instance)

    def backward(self, cache, grad_out):
        return backward(self.params, self.spec, cache, grad_out)

    @property
    def n_params(self):
        return sum(p.size for p in self.params)


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class ParamGroup:
    name: str
    params: list[np.ndarray]
    lr: float
    decay: float = 1.0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.m:
            self.m = [np.zeros_like(p) for p in self.params]
            self.v = [np.zeros_like(p) for p in self.params]


class Adam:
    """Adam with bias correction and a per-group multiplicative learning-rate decay.

    Parameters are updated in place so that views held elsewhere stay valid.
    """

    def __init__(self, betas=(0.9, 0.999), eps=1e-8):
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.decay_enabled = True
        self.groups: dict[str, ParamGroup] = {}

    def add_group(self, name, params, lr, decay=1.0):
        self.groups[name] = ParamGroup(name, list(params), float(lr), float(decay))

    def step(self, grads: dict[str, list[np.ndarray]]):
        for name, gs in grads.items():
            for g in gs:
                if not np.all(np.isfinite(g)):
                    raise NonFiniteGradient(f"non-finite gradient in parameter group {name!r}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, group in self.groups.items():
            gs = grads.get(name)
            if gs is not None:
                for p, g, m, v in zip(group.params, gs, group.m, group.v):
                    m *= self.beta1
                    m += (1.0 - self.beta1) * g
                    v *= self.beta2
                    v += (1.0 - self.beta2) * g * g
                    p -= group.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.decay_enabled:
                group.lr *= group.decay

    def resize_rows(self, name, keep: np.ndarray, n_new: int):
        """Re-index the moments of a per-row group after rows were removed/appended."""
        group = self.groups[name]
        for buf in (group.m, group.v):
            for k, arr in enumerate(buf):
                kept = arr[keep]
                buf[k] = np.concatenate([kept, np.zeros((n_new,) + arr.shape[1:])])

    def state_dict(self):
        return {"step": self.step_count, "decay_enabled": self.decay_enabled,
                "lr": {k: g.lr for k, g in self.groups.items()},
                "decay": {k: g.decay for k, g in self.groups.items()}}


def save_mlp(path, mlp: Mlp, lr_state: dict | None = None):
    arrays = {f"p{k}": p.astype("<f4") for k, p in enumerate(mlp.params)}
    write_container(path, arrays, {"spec": mlp.spec.to_json(), "instance_count": mlp.spec.instance_count,
                                   "lr_state": lr_state or {}})


def load_mlp(path) -> tuple[Mlp, dict]:
    arrays, meta = read_container(path)
    spec = MlpSpec.from_json(meta["spec"])
    params = [arrays[f"p{k}"].astype(np.float64) for k in range(2 * (len(spec.widths) - 1))]
    return Mlp(spec, params), meta.get("lr_state", {})


def flat_view(params) -> np.ndarray:
    return np.concatenate([p.ravel() for p in params])
