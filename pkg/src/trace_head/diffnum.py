"""Differentiable numeric primitives on float64 numpy arrays.

A :class:`Tensor` wraps an ndarray and, when any input requires a gradient,
records the closure that maps its output gradient back onto its inputs.
Calling :meth:`Tensor.backward` on a scalar walks that tape once in reverse
topological order and accumulates ``.grad`` on the leaves.
"""
from __future__ import annotations

import contextlib
import dataclasses
import hashlib
import threading
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np
from scipy.special import ndtr

_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes cannot be combined."""


class GradientCheckError(RuntimeError):
    """Raised when a gradient check cannot be carried out."""


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording a tape (inference, cached prefixes)."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @classmethod
    def from_op(cls, data, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        """Build an op output.

        ``backward(g)`` receives the output gradient and returns one gradient
        (or None) per parent, in order.
        """
        out = cls(data)
        if _grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    # -- introspection -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # -- arithmetic --------------------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor.from_op(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
        )

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor.from_op(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other) -> "Tensor":
        return self + (-as_tensor(other))

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor.from_op(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor.from_op(
            a / b,
            (self, other),
            lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)),
        )

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index) -> "Tensor":
        src_shape = self.shape

        def backward(g):
            out = np.zeros(src_shape)
            np.add.at(out, index, g)
            return (out,)

        return Tensor.from_op(self.data[index], (self,), backward)

    # -- reductions and reshaping -----------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        src_shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, src_shape).copy(),)

        return Tensor.from_op(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) / float(count)

    def reshape(self, *shape) -> "Tensor":
        src_shape = self.shape
        return Tensor.from_op(self.data.reshape(*shape), (self,), lambda g: (g.reshape(src_shape),))

    def swapaxes(self, a: int, b: int) -> "Tensor":
        return Tensor.from_op(self.data.swapaxes(a, b), (self,), lambda g: (g.swapaxes(a, b),))

    # -- reverse pass ------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Propagate d(self)/d(leaf) into every reachable leaf's ``.grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Elementwise ops
# ---------------------------------------------------------------------------

def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor.from_op(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor.from_op(np.log(xd), (x,), lambda g: (g / xd,))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ez = np.exp(xd[~pos])
    out[~pos] = ez / (1.0 + ez)
    return Tensor.from_op(out, (x,), lambda g: (g * out * (1.0 - out),))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return Tensor.from_op(np.clip(xd, lo, hi), (x,), lambda g: (g * inside,))


def gelu(x: Tensor) -> Tensor:
    """x * Phi(x) with the exact normal CDF."""
    xd = x.data
    cdf = ndtr(xd)
    pdf = np.exp(-0.5 * xd * xd) / np.sqrt(2.0 * np.pi)
    return Tensor.from_op(xd * cdf, (x,), lambda g: (g * (cdf + xd * pdf),))


def dropout(x: Tensor, p: float, train: bool, rng: "RngStream | None" = None) -> Tensor:
    """Inverted dropout; exact identity when ``train`` is false or ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs an RngStream")
    mask = (rng.uniform(x.shape) >= p) / (1.0 - p)
    return x * Tensor(mask)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return Tensor.from_op(ad @ bd, (a, b), backward)


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """Row-vector affine map ``x @ W + b``."""
    x, W = as_tensor(x), as_tensor(W)
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise ShapeError(f"linear: input shape {x.shape} does not match weight shape {W.shape}")
    out = matmul(x, W)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[1],):
            raise ShapeError(f"linear: bias shape {b.shape} does not match weight shape {W.shape}")
        out = out + b
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then ``gamma * . + beta``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv_std = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv_std
    gd = gamma.data

    def backward(g):
        dxhat = g * gd
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor.from_op(xhat * gd + beta.data, (x, gamma, beta), backward)


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-shifted softmax. Entries where ``mask`` is false get exactly zero."""
    x = as_tensor(x)
    z = x.data if mask is None else np.where(mask, x.data, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(out, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    return Tensor.from_op(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, bounds, axis=axis)),
    )


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Embedding lookup ``table[ids]`` with scatter-add backward."""
    ids = np.asarray(ids)
    n_rows = table.shape[0]

    def backward(g):
        out = np.zeros((n_rows,) + g.shape[ids.ndim:])
        np.add.at(out, ids, g)
        return (out,)

    return Tensor.from_op(table.data[ids], (table,), backward)


def weight_norm(v: Tensor, g: Tensor) -> Tensor:
    """Row-wise reparameterization: row i is ``g[i] / ||v[i]|| * v[i]``."""
    vd, gd = v.data, g.data
    norms = np.sqrt((vd * vd).sum(axis=1))
    if np.any(norms == 0):
        row = int(np.flatnonzero(norms == 0)[0])
        raise ZeroDivisionError(f"weight_norm: row {row} of v has zero norm")
    unit = vd / norms[:, None]

    def backward(grad):
        dg = (grad * unit).sum(axis=1)
        dv = (gd / norms)[:, None] * (grad - unit * dg[:, None])
        return dv, dg

    return Tensor.from_op(unit * gd[:, None], (v, g), backward)


def straight_through(hard: np.ndarray, soft: Tensor) -> Tensor:
    """Forward value ``hard``; gradient passes to ``soft`` unchanged."""
    return Tensor.from_op(np.asarray(hard, dtype=np.float64), (soft,), lambda g: (g,))


# ---------------------------------------------------------------------------
# Randomness
# ---------------------------------------------------------------------------

class RngStream:
    """Seeded Philox stream (counter-based, identical across platforms).

    ``counter`` is the number of scalars drawn so far.  Named children are
    independent streams derived from (seed, name), so e.g. the dropout stream
    can change without disturbing the Gumbel stream.
    """

    def __init__(self, seed: int, path: tuple[str, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        words = [self.seed & 0xFFFFFFFF, (self.seed >> 32) & 0xFFFFFFFF]
        for part in self.path:
            digest = hashlib.sha256(part.encode("utf-8")).digest()
            words.extend(int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4))
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))
        self.counter = 0

    def child(self, name: str) -> "RngStream":
        return RngStream(self.seed, self.path + (name,))

    def uniform(self, shape) -> np.ndarray:
        out = self._gen.random(shape)
        self.counter += out.size
        return out

    def normal(self, shape) -> np.ndarray:
        out = self._gen.standard_normal(shape)
        self.counter += out.size
        return out

    def integers(self, low: int, high: int, size=None):
        out = self._gen.integers(low, high, size=size)
        self.counter += int(np.size(out))
        return out

    def permutation(self, n: int) -> np.ndarray:
        self.counter += n
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, path={self.path}, counter={self.counter})"


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

class ParamStore:
    """Ordered collection of named leaf tensors; ``requires_grad`` is the trainable flag."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}

    def add(self, name: str, value, trainable: bool = True) -> Tensor:
        if name in self._tensors:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=trainable, name=name)
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self) -> list[str]:
        return list(self._tensors)

    def trainable(self) -> dict[str, Tensor]:
        return {k: t for k, t in self._tensors.items() if t.requires_grad}

    def set_trainable(self, flags: Mapping[str, bool]) -> None:
        for name, flag in flags.items():
            self._tensors[name].requires_grad = bool(flag)

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._tensors.items()}

    def load(self, arrays: Mapping[str, np.ndarray]) -> None:
        for name, arr in arrays.items():
            if name not in self._tensors:
                raise KeyError(f"unknown parameter {name!r}")
            target = self._tensors[name]
            if target.shape != np.shape(arr):
                raise ShapeError(f"{name}: expected shape {target.shape}, got {np.shape(arr)}")
            target.data = np.array(arr, dtype=np.float64)

    def size(self, trainable_only: bool = False) -> int:
        return sum(t.data.size for t in self._tensors.values() if t.requires_grad or not trainable_only)


# ---------------------------------------------------------------------------
# Finite-difference gradient check
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str | None
    worst_index: tuple[int, ...] | None
    rel_tol: float
    per_param: dict[str, float]
    checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.rel_tol

    @property
    def flagged(self) -> list[str]:
        return [name for name, err in self.per_param.items() if err > self.rel_tol]

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"max relative error {self.max_rel_error:.3e} at {self.worst_param}{list(self.worst_index or ())} "
            f"over {self.checked} scalars (tol {self.rel_tol:g}) {status}"
        )


def check_gradient(
    loss_fn: Callable[[], Tensor],
    params: ParamStore | Mapping[str, Tensor],
    rel_tol: float = 1e-4,
    h: float = 1e-5,
    floor: float = 1e-6,
    names: Iterable[str] | None = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients with central differences.

    Every scalar of every trainable tensor is perturbed by ``+-h``.  The
    relative error of one entry is ``|a - n| / max(|a|, |n|, floor)``; the
    floor keeps entries with vanishing gradient from dominating the report.
    """
    tensors = dict(params.items())
    selected = [n for n in (names if names is not None else tensors) if tensors[n].requires_grad]
    for n in selected:
        tensors[n].grad = None
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise GradientCheckError(f"loss is not finite: {loss.data}")
    loss.backward()
    analytic = {n: (tensors[n].grad if tensors[n].grad is not None else np.zeros(tensors[n].shape)) for n in selected}

    per_param: dict[str, float] = {}
    worst = (-1.0, None, None)
    checked = 0
    with no_grad():
        for n in selected:
            data = tensors[n].data
            worst_here = 0.0
            for idx in np.ndindex(data.shape):
                orig = data[idx]
                data[idx] = orig + h
                up = loss_fn().item()
                data[idx] = orig - h
                down = loss_fn().item()
                data[idx] = orig
                if not (np.isfinite(up) and np.isfinite(down)):
                    raise GradientCheckError(f"loss became non-finite perturbing {n}{list(idx)}")
                numeric = (up - down) / (2.0 * h)
                a = analytic[n][idx]
                err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                checked += 1
                worst_here = max(worst_here, err)
                if err > worst[0]:
                    worst = (err, n, idx)
            per_param[n] = worst_here
    return GradCheckReport(
        max_rel_error=max(worst[0], 0.0),
        worst_param=worst[1],
        worst_index=worst[2],
        rel_tol=rel_tol,
        per_param=per_param,
        checked=checked,
    )
