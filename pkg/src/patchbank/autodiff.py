"""Minimal reverse-mode autodiff over float64 numpy arrays.

Just enough machinery for the pretraining losses: elementwise arithmetic with
broadcasting, 2-D matmul, axis reductions, a few nonlinearities, and reshape.
Gradients accumulate on a tape of closures and are released by ``backward()``
on a scalar.  Everything runs in float64 so finite-difference checks are
meaningful.
"""

from __future__ import annotations

import numpy as np


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False,
                 _parents: tuple = (), _backward=None):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    # -- graph ----------------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() needs a scalar loss")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    def _accumulate(self, grad: np.ndarray):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out = Tensor(self.data + other.data, _parents=(self, other))

        def back(g):
            self._accumulate(_unbroadcast(g, self.data.shape))
            other._accumulate(_unbroadcast(g, other.data.shape))
        out._backward = back
        return out

    def __mul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out = Tensor(self.data * other.data, _parents=(self, other))

        def back(g):
            self._accumulate(_unbroadcast(g * other.data, self.data.shape))
            other._accumulate(_unbroadcast(g * self.data, other.data.shape))
        out._backward = back
        return out

    def __truediv__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out = Tensor(self.data / other.data, _parents=(self, other))

        def back(g):
            self._accumulate(_unbroadcast(g / other.data, self.data.shape))
            other._accumulate(_unbroadcast(-g * self.data / other.data ** 2,
                                           other.data.shape))
        out._backward = back
        return out

    def __neg__(self):
        return self * (-1.0)

    def __sub__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        return self + (-other)

    def __radd__(self, other):
        return self + other

    def __rmul__(self, other):
        return self * other

    def __rsub__(self, other):
        return Tensor(other) + (-self)

    def __rtruediv__(self, other):
        return Tensor(other) / self

    def __matmul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise ValueError("matmul supports 2-D operands only")
        out = Tensor(self.data @ other.data, _parents=(self, other))

        def back(g):
            self._accumulate(g @ other.data.T)
            other._accumulate(self.data.T @ g)
        out._backward = back
        return out

    def __pow__(self, p: float):
        out = Tensor(self.data ** p, _parents=(self,))

        def back(g):
            self._accumulate(g * p * self.data ** (p - 1))
        out._backward = back
        return out

    # -- reductions and shaping --------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), _parents=(self,))

        def back(g):
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            self._accumulate(np.broadcast_to(gg, self.data.shape).copy())
        out._backward = back
        return out

    def mean(self, axis=None, keepdims: bool = False):
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        out = Tensor(self.data.reshape(*shape), _parents=(self,))

        def back(g):
            self._accumulate(g.reshape(self.data.shape))
        out._backward = back
        return out

    # -- nonlinearities -----------------------------------------------------

    def exp(self):
        out = Tensor(np.exp(self.data), _parents=(self,))

        def back(g):
            self._accumulate(g * out.data)
        out._backward = back
        return out

    def log(self):
        out = Tensor(np.log(self.data), _parents=(self,))

        def back(g):
            self._accumulate(g / self.data)
        out._backward = back
        return out

    def sqrt(self):
        out = Tensor(np.sqrt(self.data), _parents=(self,))

        def back(g):
            self._accumulate(g * 0.5 / out.data)
        out._backward = back
        return out

    def relu(self):
        out = Tensor(np.maximum(self.data, 0.0), _parents=(self,))

        def back(g):
            self._accumulate(g * (self.data > 0))
        out._backward = back
        return out


# -- composite helpers ---------------------------------------------------


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    """Shift-invariant softmax; the subtracted max is treated as constant."""
    shift = Tensor(t.data.max(axis=axis, keepdims=True))
    e = (t - shift).exp()
    return e / e.sum(axis=axis, keepdims=True)


def logsumexp(t: Tensor, axis: int = -1) -> Tensor:
    shift = Tensor(t.data.max(axis=axis, keepdims=True))
    return (t - shift).exp().sum(axis=axis, keepdims=True).log() + shift


def row_norms(t: Tensor) -> Tensor:
    """(N, 1) L2 norms of the rows; rejects zero rows."""
    sq = (t * t).sum(axis=-1, keepdims=True)
    if np.any(sq.data <= 0):
        raise ValueError("cannot normalize a zero vector")
    return sq.sqrt()


def l2_normalize_rows(t: Tensor) -> Tensor:
    return t / row_norms(t)


def rescale_rows(t: Tensor, target_norm: float) -> Tensor:
    """Scale each row to the requested L2 norm (idempotent)."""
    return t * (target_norm / row_norms(t))
