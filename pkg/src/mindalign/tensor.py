"""Dense-tensor numerics with reverse-mode automatic differentiation.

Graphs are built define-by-run: every operation returns a new ``Tensor``
holding references to its parents and a closure implementing its backward
rule. ``Tensor.backward`` walks the recorded graph in reverse topological
order and accumulates gradients into every leaf that requires them.

All data is float64. Any NaN/Inf produced by an operation is a contract
violation and raises ``NonFiniteError`` at the op that produced it.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Mapping

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "GraphError",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "tensor_sum",
    "tensor_mean",
    "softmax",
    "log",
    "exp",
    "gelu",
    "silu",
    "layernorm",
    "l2_normalize",
    "l1_loss",
    "mse_loss",
    "cosine_similarity",
    "cross_entropy_soft",
    "forward",
    "backward",
    "gradcheck",
]

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Operand shapes are inconsistent with the op signature."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared in tensor data."""


class GraphError(RuntimeError):
    """Graph misuse: backward on a non-scalar without upstream, etc."""


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("non-finite value in tensor data")
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, inverting numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    """N-dimensional float64 array with a gradient slot.

    `requires_grad` marks a leaf as trainable; tensors produced by ops
    require grad whenever any parent does. `grad`, when populated, has the
    same shape as `data`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[], None] | None = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple["Tensor", ...]) -> "Tensor":
        out = cls(data, requires_grad=any(p.requires_grad for p in parents))
        if out.requires_grad:
            out._parents = parents
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _acc(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, upstream: "Tensor | np.ndarray | None" = None) -> None:
        """Accumulate gradients of a scalar (or upstream-weighted) output."""
        if upstream is None:
            if self.size != 1:
                raise GraphError("backward on non-scalar output requires upstream")
            up = np.ones_like(self.data)
        else:
            up = upstream.data if isinstance(upstream, Tensor) else np.asarray(upstream, dtype=np.float64)
            if up.shape != self.shape:
                raise ShapeError(f"upstream shape {up.shape} != output shape {self.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited or not node.requires_grad:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self._acc(up)
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn()

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return tensor_slice(self, idx)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # method aliases used throughout the model code
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis, keepdims)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- elementwise and structural ops -------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = Tensor._from_op(_as_array(a.data + b.data), (a, b))

    def _bwd():
        a._acc(_unbroadcast(out.grad, a.shape))
        b._acc(_unbroadcast(out.grad, b.shape))

    out._backward_fn = _bwd
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = Tensor._from_op(_as_array(a.data - b.data), (a, b))

    def _bwd():
        a._acc(_unbroadcast(out.grad, a.shape))
        b._acc(_unbroadcast(-out.grad, b.shape))

    out._backward_fn = _bwd
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = Tensor._from_op(_as_array(a.data * b.data), (a, b))

    def _bwd():
        a._acc(_unbroadcast(out.grad * b.data, a.shape))
        b._acc(_unbroadcast(out.grad * a.data, b.shape))

    out._backward_fn = _bwd
    return out


def scale(a: Tensor, c: float) -> Tensor:
    a = _lift(a)
    c = float(c)
    out = Tensor._from_op(_as_array(a.data * c), (a,))

    def _bwd():
        a._acc(out.grad * c)

    out._backward_fn = _bwd
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = Tensor._from_op(_as_array(a.data @ b.data), (a, b))

    def _bwd():
        a._acc(out.grad @ b.data.T)
        b._acc(a.data.T @ out.grad)

    out._backward_fn = _bwd
    return out


def transpose(a: Tensor, axes=None) -> Tensor:
    a = _lift(a)
    out = Tensor._from_op(np.transpose(a.data, axes).copy(), (a,))
    inv = None if axes is None else tuple(np.argsort(axes))

    def _bwd():
        a._acc(np.transpose(out.grad, inv))

    out._backward_fn = _bwd
    return out


def reshape(a: Tensor, shape) -> Tensor:
    a = _lift(a)
    out = Tensor._from_op(a.data.reshape(shape).copy(), (a,))

    def _bwd():
        a._acc(out.grad.reshape(a.shape))

    out._backward_fn = _bwd
    return out


def tensor_slice(a: Tensor, idx) -> Tensor:
    a = _lift(a)
    out = Tensor._from_op(np.asarray(a.data[idx]).copy(), (a,))

    def _bwd():
        g = np.zeros_like(a.data)
        np.add.at(g, idx, out.grad)
        a._acc(g)

    out._backward_fn = _bwd
    return out


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [_lift(t) for t in tensors]
    out = Tensor._from_op(np.concatenate([t.data for t in ts], axis=axis), tuple(ts))
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def _bwd():
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * out.ndim
            sl[axis] = slice(lo, hi)
            t._acc(out.grad[tuple(sl)])

    out._backward_fn = _bwd
    return out


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    out = Tensor._from_op(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,))

    def _bwd():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._acc(np.broadcast_to(g, a.shape).copy())

    out._backward_fn = _bwd
    return out


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    count = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return scale(tensor_sum(a, axis, keepdims), 1.0 / float(count))


# -- nonlinearities ------------------------------------------------------


def log(a: Tensor) -> Tensor:
    a = _lift(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = Tensor._from_op(_as_array(np.log(a.data)), (a,))

    def _bwd():
        a._acc(out.grad / a.data)

    out._backward_fn = _bwd
    return out


def exp(a: Tensor) -> Tensor:
    a = _lift(a)
    out = Tensor._from_op(_as_array(np.exp(a.data)), (a,))

    def _bwd():
        a._acc(out.grad * out.data)

    out._backward_fn = _bwd
    return out


def gelu(a: Tensor) -> Tensor:
    """Exact gaussian-gated linear unit x * Phi(x)."""
    a = _lift(a)
    phi = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    out = Tensor._from_op(_as_array(a.data * phi), (a,))

    def _bwd():
        pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT2PI
        a._acc(out.grad * (phi + a.data * pdf))

    out._backward_fn = _bwd
    return out


def silu(a: Tensor) -> Tensor:
    a = _lift(a)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor._from_op(_as_array(a.data * sig), (a,))

    def _bwd():
        a._acc(out.grad * (sig * (1.0 + a.data * (1.0 - sig))))

    out._backward_fn = _bwd
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _lift(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor._from_op(_as_array(s), (a,))

    def _bwd():
        g = out.grad
        a._acc(s * (g - (g * s).sum(axis=axis, keepdims=True)))

    out._backward_fn = _bwd
    return out


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis with learnable gain/bias."""
    x, gain, bias = _lift(x), _lift(gain), _lift(bias)
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError("layernorm gain/bias must match last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor._from_op(_as_array(gain.data * xhat + bias.data), (x, gain, bias))

    def _bwd():
        dy = out.grad
        lead = tuple(range(dy.ndim - 1))
        gain._acc((dy * xhat).sum(axis=lead))
        bias._acc(dy.sum(axis=lead))
        dxh = dy * gain.data
        x._acc(inv * (dxh - dxh.mean(axis=-1, keepdims=True)
                      - xhat * (dxh * xhat).mean(axis=-1, keepdims=True)))

    out._backward_fn = _bwd
    return out


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Rows scaled by max(L2 norm, eps); exactly unit whenever norm >= eps."""
    x = _lift(x)
    r = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    d = np.maximum(r, eps)
    out = Tensor._from_op(_as_array(x.data / d), (x,))

    def _bwd():
        g = out.grad
        inner = (g * x.data).sum(axis=axis, keepdims=True)
        # below the clamp the map is linear in x, so the norm term vanishes
        x._acc(g / d - x.data * (inner * (r > eps) / (d * d * d)))

    out._backward_fn = _bwd
    return out


# -- losses --------------------------------------------------------------


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute difference over all elements."""
    pred, target = _lift(pred), _lift(target)
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss shapes differ: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    out = Tensor._from_op(np.asarray(np.abs(diff).mean()), (pred, target))
    n = pred.size

    def _bwd():
        g = out.grad * np.sign(diff) / n
        pred._acc(g)
        target._acc(-g)

    out._backward_fn = _bwd
    return out


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared difference over all elements."""
    pred, target = _lift(pred), _lift(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss shapes differ: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    out = Tensor._from_op(np.asarray((diff * diff).mean()), (pred, target))
    n = pred.size

    def _bwd():
        g = out.grad * 2.0 * diff / n
        pred._acc(g)
        target._acc(-g)

    out._backward_fn = _bwd
    return out


def cosine_similarity(a: Tensor, b: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Per-row cosine similarity along `axis` (composed from primitives)."""
    return tensor_sum(mul(l2_normalize(a, axis, eps), l2_normalize(b, axis, eps)),
                      axis=axis)


def cross_entropy_soft(logits: Tensor, soft_targets: np.ndarray | Tensor,
                       axis: int = -1) -> Tensor:
    """Mean soft-target cross-entropy: mean over rows of -sum t * log_softmax(z).

    Soft targets are treated as constants (no gradient flows into them); row
    masses need not sum to one.
    """
    logits = _lift(logits)
    t = soft_targets.data if isinstance(soft_targets, Tensor) else np.asarray(soft_targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise ShapeError(f"targets shape {t.shape} != logits shape {logits.shape}")
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    logq = z - lse
    n_rows = logits.size // logits.shape[axis]
    out = Tensor._from_op(np.asarray(-(t * logq).sum() / n_rows), (logits,))

    def _bwd():
        q = np.exp(logq)
        mass = t.sum(axis=axis, keepdims=True)
        logits._acc(out.grad * (q * mass - t) / n_rows)

    out._backward_fn = _bwd
    return out


# -- graph-level interface ----------------------------------------------

Graph = Callable[[Mapping[str, Tensor]], Tensor]


def forward(graph: Graph, bindings: Mapping[str, Tensor]) -> Tensor:
    """Evaluate a graph (a callable from bindings to an output tensor)."""
    return graph(bindings)


def backward(graph: Graph, bindings: Mapping[str, Tensor],
             upstream: Tensor | np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Gradient of the graph output for every requires_grad binding.

    Leaves that do not participate in the output get zero gradients.
    """
    for t in bindings.values():
        t.zero_grad()
    out = graph(bindings)
    out.backward(upstream)
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for k, t in bindings.items() if t.requires_grad}


def gradcheck(graph: Graph, bindings: Mapping[str, Tensor], eps: float = 1e-5,
              coords_per_param: int | None = None, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    The graph output must be scalar. With `coords_per_param` set, only that
    many randomly chosen coordinates per binding are probed (necessary for
    large parameter sets); otherwise every coordinate is checked.
    """
    out = graph(bindings)
    if out.size != 1:
        raise GraphError("gradcheck requires a scalar graph output")
    analytic = backward(graph, bindings)
    rng = np.random.Generator(np.random.PCG64(seed))
    worst = 0.0
    for name, grad in analytic.items():
        t = bindings[name]
        flat = t.data.reshape(-1)
        gflat = grad.reshape(-1)
        n = flat.size
        if coords_per_param is None or coords_per_param >= n:
            coords = range(n)
        else:
            coords = rng.choice(n, size=coords_per_param, replace=False)
        for i in coords:
            keep = flat[i]
            flat[i] = keep + eps
            hi = graph(bindings).item()
            flat[i] = keep - eps
            lo = graph(bindings).item()
            flat[i] = keep
            numeric = (hi - lo) / (2.0 * eps)
            a = gflat[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst
