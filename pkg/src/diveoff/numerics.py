"""Small dense-tensor autodiff, MLPs, Adam and diagonal Gaussians.

Everything is float64 numpy underneath. The tape is define-by-run: each op on a
``Tensor`` that depends on a trainable leaf records its parents and a
vector-Jacobian product, and ``grad`` walks that graph in reverse.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
LOG_2PI = float(np.log(2.0 * np.pi))


class NonFiniteError(FloatingPointError):
    """A NaN or Inf showed up in a value that must stay finite."""


class DivergenceError(NonFiniteError):
    """Training produced non-finite losses or gradients."""


def check_finite(x: np.ndarray, what: str = "value", exc=NonFiniteError) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise exc(f"non-finite {what}")
    return x


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by ``(seed, name)``."""
    digest = hashlib.sha256(f"{int(seed)}/{name}".encode()).digest()
    key = int.from_bytes(digest[:16], "little")
    return np.random.Generator(np.random.Philox(key=key))


# ---------------------------------------------------------------------------
# Tensor + tape


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _vjp=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    __add__ = lambda a, b: add(a, b)
    __radd__ = lambda a, b: add(b, a)
    __sub__ = lambda a, b: sub(a, b)
    __rsub__ = lambda a, b: sub(b, a)
    __mul__ = lambda a, b: mul(a, b)
    __rmul__ = lambda a, b: mul(b, a)
    __truediv__ = lambda a, b: div(a, b)
    __neg__ = lambda a: neg(a)
    __matmul__ = lambda a, b: matmul(a, b)

    def __getitem__(self, idx) -> "Tensor":
        return getitem(self, idx)

    def sum(self, axis=None) -> "Tensor":
        return tsum(self, axis)

    def mean(self, axis=None) -> "Tensor":
        return tmean(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents: tuple, vjp) -> Tensor:
    live = tuple(p for p in parents if p.requires_grad)
    if not live:
        return Tensor(data)
    return Tensor(data, True, parents, vjp)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    return _node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)
    return _node(out, (a,), lambda g: (g * (out > 0),))


def linear(x, w, b) -> Tensor:
    """Fused ``x @ w + b`` for a batch of row vectors."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ValueError(f"linear dimension mismatch: {x.shape} @ {w.shape}")
    out = x.data @ w.data
    out += b.data
    need_x = x.requires_grad

    def vjp(g):
        return (g @ w.data.T if need_x else None, x.data.T @ g, g.sum(axis=0))

    return _node(out, (x, w, b), vjp)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp; the gradient is zero wherever the clamp is active."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data
    return _node(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)))


def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(a.data.sum(axis=axis), (a,), vjp)


def tmean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return tsum(a, axis) / float(n)


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]
    return _node(np.concatenate([p.data for p in parts], axis=axis), tuple(parts),
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        out = np.zeros_like(a.data)
        out[idx] = g
        return (out,)

    return _node(a.data[idx], (a,), vjp)


def _topo(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(loss: Tensor, params: Sequence[Tensor]) -> list:
    """Reverse-mode gradients of a scalar ``loss`` w.r.t. ``params``.

    Parameters the loss does not depend on get zeros.
    """
    if loss.data.size != 1:
        raise ValueError(f"grad needs a scalar loss, got shape {loss.shape}")
    check_finite(loss.data, "loss", DivergenceError)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None) if node._parents else grads.get(id(node))
        if g is None or node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return [grads.get(id(p), np.zeros_like(p.data)) for p in params]


def fd_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5) -> float:
    """Max relative error between ``grad`` and central differences.

    ``loss_fn`` must rebuild the loss from the current parameter values with
    any randomness held fixed.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = loss_fn()
    analytic = grad(base, params)
    # central-difference roundoff is about eps * |L| / step; the floor keeps it from
    # counting as error on components that are zero or tiny relative to the loss
    floor = 1e-6 * max(1.0, abs(base.item()))
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn().item()
            flat[i] = orig - step
            down = loss_fn().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            err = abs(gflat[i] - numeric) / max(floor, abs(numeric), abs(gflat[i]))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# MLPs


class Mlp:
    """ReLU MLP with identity output; ``layers`` holds (weight, bias) leaves."""

    def __init__(self, layers: list):
        self.layers = layers
        for (w, b), (w_next, _) in zip(layers, layers[1:]):
            if w.shape[1] != w_next.shape[0] or b.shape != (w.shape[1],):
                raise ValueError("layer dimensions do not chain")

    @classmethod
    def init(cls, sizes: Sequence[int], rng: np.random.Generator, final_scale: float = 1.0) -> "Mlp":
        layers = []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = 1.0 / np.sqrt(n_in)
            w = rng.uniform(-bound, bound, size=(n_in, n_out))
            b = rng.uniform(-bound, bound, size=n_out)
            if i == len(sizes) - 2:
                w, b = w * final_scale, b * final_scale
            layers.append((Tensor(w, True), Tensor(b, True)))
        return cls(layers)

    @property
    def sizes(self) -> list:
        return [self.layers[0][0].shape[0]] + [w.shape[1] for w, _ in self.layers]

    def parameters(self) -> list:
        return [t for layer in self.layers for t in layer]

    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def copy(self) -> "Mlp":
        return Mlp([(Tensor(w.data.copy(), True), Tensor(b.data.copy(), True)) for w, b in self.layers])

    def __call__(self, x) -> Tensor:
        return mlp_forward(self, x)

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Tape-free forward pass on plain arrays."""
        h = np.asarray(x, dtype=np.float64)
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            h = h @ w.data + b.data
            if i < last:
                np.maximum(h, 0.0, out=h)
        return h


def mlp_forward(mlp: Mlp, x) -> Tensor:
    x = as_tensor(x)
    if x.shape[-1] != mlp.sizes[0]:
        raise ValueError(f"input width {x.shape[-1]} != expected {mlp.sizes[0]}")
    h = x
    last = len(mlp.layers) - 1
    for i, (w, b) in enumerate(mlp.layers):
        h = linear(h, w, b)
        if i < last:
            h = relu(h)
    check_finite(h.data, "network output")
    return h


def polyak_update(target: Mlp, online: Mlp, tau: float) -> None:
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    for t, o in zip(target.parameters(), online.parameters()):
        if t.shape != o.shape:
            raise ValueError("target/online shape mismatch")
        t.data *= 1.0 - tau
        t.data += tau * o.data


class Adam:
    """Adam with bias correction; updates the parameter arrays in place."""

    def __init__(self, params: Sequence[Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: Sequence[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ValueError("grads not aligned with params")
        for g in grads:
            check_finite(g, "gradient", DivergenceError)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> list:
        return self.m + self.v


# ---------------------------------------------------------------------------
# Diagonal Gaussians


@dataclass(frozen=True)
class DiagGaussian:
    mean: Tensor
    log_std: Tensor

    def __post_init__(self):
        mean, log_std = as_tensor(self.mean), as_tensor(self.log_std)
        if mean.shape != log_std.shape:
            raise ValueError("mean and log_std must have the same shape")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "log_std", clip(log_std, LOG_STD_MIN, LOG_STD_MAX))

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]


def gaussian_log_prob(dist: DiagGaussian, x) -> Tensor:
    """Log density summed over the last axis (one value per row)."""
    x = as_tensor(x)
    if x.shape[-1] != dist.dim:
        raise ValueError("x and mean lengths differ")
    zscore = (x - dist.mean) * exp(neg(dist.log_std))
    per_dim = square(zscore) * -0.5 - dist.log_std
    return tsum(per_dim, axis=-1) - 0.5 * dist.dim * LOG_2PI


def gaussian_sample_reparam(dist: DiagGaussian, noise) -> Tensor:
    return dist.mean + exp(dist.log_std) * as_tensor(noise)


def kl_to_standard_normal(dist: DiagGaussian) -> Tensor:
    var = exp(dist.log_std * 2.0)
    per_dim = (square(dist.mean) + var - 1.0 - dist.log_std * 2.0) * 0.5
    return tsum(per_dim, axis=-1)


def log_prob_np(mean: np.ndarray, log_std: np.ndarray, x: np.ndarray) -> np.ndarray:
    log_std = np.clip(log_std, LOG_STD_MIN, LOG_STD_MAX)
    z = (x - mean) * np.exp(-log_std)
    return (-0.5 * z * z - log_std).sum(axis=-1) - 0.5 * mean.shape[-1] * LOG_2PI
