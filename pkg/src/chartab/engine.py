"""Reverse-mode automatic differentiation over dense float64 arrays.

A Tensor wraps a numpy array and records the operation that produced it,
so that calling ``backward`` on a scalar loss fills in ``grad`` for every
tensor that participated and has ``requires_grad`` set.  Everything runs
in 64-bit floats; models here are small enough that precision is worth
more than speed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tensor",
    "matmul",
    "relu",
    "softmax",
    "layer_norm",
    "concat",
    "l1_loss",
    "cross_entropy",
    "clip_grad_norm",
    "AdamState",
    "adam_step",
    "uniform_init",
    "save_tensors",
    "load_tensors",
    "NumericalError",
]


class NumericalError(RuntimeError):
    """Raised when training produces a non-finite loss."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """Dense array node in the autodiff graph.

    ``lineage`` is implicit in ``_parents``/``_backward``; graphs are
    acyclic by construction since every op creates a fresh node.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- graph construction ------------------------------------------------

    @staticmethod
    def _lift(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    @staticmethod
    def _node(data, parents, backward) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Populate ``grad`` of every reachable grad-tracked tensor with
        d(self)/d(tensor).

        Requires a scalar; repeated calls accumulate into existing grads.
        """
        if self.data.size != 1:
            raise ValueError(
                f"backward requires a scalar, got shape {self.data.shape}"
            )
        if not self.requires_grad:
            return
        # postorder over the grad-tracked subgraph, iterative to spare the
        # recursion limit on deep per-batch graphs
        topo: list[Tensor] = []
        visited = {id(self)}
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    visited.add(id(p))
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads[id(node)]
            if node._backward is not None:
                for parent, pg in zip(node._parents, node._backward(g)):
                    if not parent.requires_grad or pg is None:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
        for node in topo:
            node._accumulate(grads[id(node)])

    # -- elementwise arithmetic ---------------------------------------------

    def __add__(self, other):
        a, b = self, Tensor._lift(other)
        data = a.data + b.data
        return Tensor._node(
            data,
            (a, b),
            lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
        )

    __radd__ = __add__

    def __mul__(self, other):
        a, b = self, Tensor._lift(other)
        data = a.data * b.data
        return Tensor._node(
            data,
            (a, b),
            lambda g: (
                _unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape),
            ),
        )

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-Tensor._lift(other))

    def __rsub__(self, other):
        return Tensor._lift(other) + (-self)

    def __truediv__(self, other):
        return self * (Tensor._lift(other) ** -1.0)

    def __rtruediv__(self, other):
        return Tensor._lift(other) * (self ** -1.0)

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("only scalar exponents are supported")
        a = self
        data = a.data ** p
        return Tensor._node(
            data, (a,), lambda g: (g * p * a.data ** (p - 1.0),)
        )

    def abs(self):
        a = self
        return Tensor._node(
            np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),)
        )

    # -- shape ops -----------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        old = a.data.shape
        return Tensor._node(
            a.data.reshape(shape), (a,), lambda g: (g.reshape(old),)
        )

    def flatten(self):
        return self.reshape(self.data.size)

    def swapaxes(self, ax1: int, ax2: int):
        a = self
        return Tensor._node(
            np.swapaxes(a.data, ax1, ax2),
            (a,),
            lambda g: (np.swapaxes(g, ax1, ax2),),
        )

    def sum(self, axis=None, keepdims: bool = False):
        a = self
        data = a.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is None:
                return (np.broadcast_to(g, a.data.shape).copy(),)
            gg = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gg, a.data.shape).copy(),)

        return Tensor._node(data, (a,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)


# -- matrix / network ops ------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy ``@`` semantics for stacked batches."""
    a, b = Tensor._lift(a), Tensor._lift(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(
            f"matmul requires >=2-d operands, got {a.data.shape} @ {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return ga, gb

    return Tensor._node(data, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    x = Tensor._lift(x)
    mask = x.data > 0
    return Tensor._node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def softmax(x: Tensor) -> Tensor:
    """Softmax along the last axis, computed in a shift-stable form."""
    x = Tensor._lift(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return Tensor._node(s, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = 1e-9) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then optionally
    apply an elementwise affine (gamma, beta)."""
    x = Tensor._lift(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    istd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * istd
    n = x.data.shape[-1]

    if gamma is None:
        def backward(g):
            gsum = g.mean(axis=-1, keepdims=True)
            gx = istd * (g - gsum - xhat * (g * xhat).sum(-1, keepdims=True) / n)
            return (gx,)

        return Tensor._node(xhat, (x,), backward)

    gamma = Tensor._lift(gamma)
    beta = Tensor._lift(beta) if beta is not None else Tensor(np.zeros(n))
    out = xhat * gamma.data + beta.data

    def backward(g):
        gxhat = g * gamma.data
        gx = istd * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).sum(-1, keepdims=True) / n
        )
        ggamma = _unbroadcast(g * xhat, gamma.data.shape)
        gbeta = _unbroadcast(g, beta.data.shape)
        return gx, ggamma, gbeta

    return Tensor._node(out, (x, gamma, beta), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [Tensor._lift(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return Tensor._node(data, tensors, backward)


# -- losses ----------------------------------------------------------------


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute difference; the subgradient at zero is taken as zero."""
    pred, target = Tensor._lift(pred), Tensor._lift(target)
    if pred.data.shape != target.data.shape:
        raise ValueError(
            f"l1_loss shape mismatch: {pred.data.shape} vs {target.data.shape}"
        )
    return (pred - target).abs().mean()


def cross_entropy(logits: Tensor, class_index) -> Tensor:
    """Negative log softmax probability of the true class.

    Accepts a single logit vector with an integer index, or a (batch, classes)
    matrix with one index per row (in which case the mean is returned).
    Uses the log-sum-exp form so huge logits do not overflow.
    """
    logits = Tensor._lift(logits)
    z = logits.data
    if z.ndim == 1:
        z2 = z[None, :]
        idx = np.asarray([class_index], dtype=np.intp)
    elif z.ndim == 2:
        z2 = z
        idx = np.asarray(class_index, dtype=np.intp)
        if idx.shape != (z2.shape[0],):
            raise ValueError("need one class index per logit row")
    else:
        raise ValueError(f"cross_entropy expects 1-d or 2-d logits, got {z.shape}")
    n, c = z2.shape
    if np.any(idx < 0) or np.any(idx >= c):
        raise IndexError(f"class index out of range for {c} classes")

    m = z2.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z2 - m).sum(axis=-1))
    loss = float((lse - z2[np.arange(n), idx]).mean())

    def backward(g):
        p = np.exp(z2 - lse[:, None])
        p[np.arange(n), idx] -= 1.0
        gz = p * (float(g) / n)
        return (gz.reshape(z.shape),)

    return Tensor._node(np.float64(loss), (logits,), backward)


# -- optimizer --------------------------------------------------------------


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale all grads so their global L2 norm is at most ``max_norm``.

    Returns the norm measured before clipping.  Parameters without a grad
    contribute nothing and are left untouched.
    """
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


@dataclass
class AdamState:
    """Per-parameter moment estimates plus hyperparameters."""

    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, learning_rate: float = 1e-4,
                   beta1: float = 0.9, beta2: float = 0.999,
                   epsilon: float = 1e-8) -> "AdamState":
        state = cls(learning_rate, beta1, beta2, epsilon)
        state.first_moment = [np.zeros_like(p.data) for p in params]
        state.second_moment = [np.zeros_like(p.data) for p in params]
        return state


def adam_step(params, state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``param.data``."""
    if len(state.first_moment) != len(params):
        raise ValueError("AdamState does not match the parameter list")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    for p, m, v in zip(params, state.first_moment, state.second_moment):
        if m.shape != p.data.shape:
            raise ValueError(
                f"moment shape {m.shape} drifted from parameter shape {p.data.shape}"
            )
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.data -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    """Weight tensor drawn uniformly from +-(1/fan_in)^0.5, grad-tracked."""
    bound = math.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


# -- serialization -----------------------------------------------------------

TENSOR_MAGIC = b"chartab-tensors-v1\n"


def save_tensors(fh, named: dict) -> None:
    """Write named arrays as a self-describing byte-stable container.

    Layout: magic line, one JSON line listing (name, shape) in order, then
    the row-major little-endian float64 data of each tensor back to back.
    """
    fh.write(TENSOR_MAGIC)
    entries = [
        {"name": name, "shape": list(np.asarray(arr.data if isinstance(arr, Tensor) else arr).shape)}
        for name, arr in named.items()
    ]
    fh.write(json.dumps(entries, separators=(",", ":")).encode("ascii") + b"\n")
    for _, arr in named.items():
        a = np.asarray(arr.data if isinstance(arr, Tensor) else arr, dtype="<f8")
        fh.write(np.ascontiguousarray(a).tobytes())


def load_tensors(fh) -> dict:
    """Inverse of :func:`save_tensors`; returns name -> float64 ndarray."""
    magic = fh.readline()
    if magic != TENSOR_MAGIC:
        raise ValueError(f"not a chartab tensor container (magic {magic!r})")
    entries = json.loads(fh.readline().decode("ascii"))
    out = {}
    for entry in entries:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        buf = fh.read(count * 8)
        if len(buf) != count * 8:
            raise ValueError(f"truncated tensor data for {entry['name']!r}")
        out[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).astype(np.float64)
    return out
