"""Dense float64 tensors with reverse-mode autodiff and the AdamW optimizer.

Arrays are numpy-backed and row-major. Every op validates that its result is
finite, so NaN/Inf never propagates silently. Gradients accumulate into
``Tensor.grad`` after ``backward()`` on a scalar loss.
"""

from __future__ import annotations

import contextlib

import numpy as np


class NumericsError(ArithmeticError):
    """An operation produced a non-finite value."""


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


_GRAD_ENABLED = [True]


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (used for decode/eval)."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def _check_finite(arr):
    # single reduction pass: any NaN/Inf makes the sum non-finite
    with np.errstate(over="ignore"):
        total = arr.sum()
    if not np.isfinite(total):
        if np.all(np.isfinite(arr)):  # legitimate overflow of the sum only
            return arr
        raise NumericsError("non-finite value produced")
    return arr


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A float64 array plus optional gradient and backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents",
                 "_grad_own")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._parents = ()
        self._grad_own = False

    # -- construction ------------------------------------------------------

    @staticmethod
    def _result(data, parents, backward):
        out = Tensor.__new__(Tensor)
        out.data = _check_finite(np.asarray(data, dtype=np.float64))
        out.grad = None
        out._grad_own = False
        track = _GRAD_ENABLED[-1] and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(p for p in parents if p.requires_grad) if track else ()
        out._backward = backward if track else None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def _accum(self, g):
        if not self.requires_grad:
            return
        gu = _unbroadcast(g, self.data.shape)
        if self.grad is None:
            if not self._parents and self._backward is None:
                # leaf (parameter): own the buffer so callers can mutate it
                self.grad = gu.copy()
                self._grad_own = True
            else:
                # copy-on-write: keep a reference now, allocate only if a
                # second contribution arrives (gu may alias a child's grad)
                self.grad = gu
                self._grad_own = False
        elif self._grad_own:
            self.grad += gu
        else:
            self.grad = self.grad + gu
            self._grad_own = True

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic --------------------------------------------------------

    @staticmethod
    def _coerce(x):
        return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))

    def __add__(self, other):
        other = Tensor._coerce(other)

        def backward(g):
            self._accum(g)
            other._accum(g)

        return Tensor._result(self.data + other.data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self):
        def backward(g):
            self._accum(-g)

        return Tensor._result(-self.data, (self,), backward)

    def __sub__(self, other):
        return self + (-Tensor._coerce(other))

    def __rsub__(self, other):
        return Tensor._coerce(other) + (-self)

    def __mul__(self, other):
        other = Tensor._coerce(other)

        def backward(g):
            self._accum(g * other.data)
            other._accum(g * self.data)

        return Tensor._result(self.data * other.data, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._coerce(other)
        return self * other ** -1.0

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        out_data = self.data ** exponent

        def backward(g):
            self._accum(g * exponent * self.data ** (exponent - 1))

        return Tensor._result(out_data, (self,), backward)

    def matmul(self, other):
        other = Tensor._coerce(other)
        if self.data.shape[-1] != other.data.shape[-2 if other.ndim > 1 else 0]:
            raise ShapeError(
                f"matmul inner extents differ: {self.data.shape} vs {other.data.shape}"
            )
        a, b = self.data, other.data
        if a.ndim > 2 and b.ndim == 2:
            # fold the batch dims into one gemm; the weight grad then needs
            # no reduction over batch
            af = np.ascontiguousarray(a).reshape(-1, a.shape[-1])
            out_data = af.dot(b).reshape(a.shape[:-1] + (b.shape[-1],))

            def backward(g):
                gf = np.ascontiguousarray(g).reshape(-1, g.shape[-1])
                self._accum(gf.dot(b.T).reshape(a.shape))
                other._accum(af.T.dot(gf))

            return Tensor._result(out_data, (self, other), backward)

        def backward(g):
            self._accum(np.matmul(g, np.swapaxes(b, -1, -2)))
            other._accum(np.matmul(np.swapaxes(a, -1, -2), g))

        return Tensor._result(np.matmul(a, b), (self, other), backward)

    __matmul__ = matmul

    # -- shape manipulation ------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src_shape = self.data.shape

        def backward(g):
            self._accum(g.reshape(src_shape))

        return Tensor._result(self.data.reshape(shape), (self,), backward)

    def swapaxes(self, a, b):
        def backward(g):
            self._accum(np.swapaxes(g, a, b))

        return Tensor._result(np.swapaxes(self.data, a, b), (self,), backward)

    def transpose(self, axes):
        inv = np.argsort(axes)

        def backward(g):
            self._accum(np.transpose(g, inv))

        return Tensor._result(np.transpose(self.data, axes), (self,), backward)

    def __getitem__(self, key):
        src_shape = self.data.shape

        def backward(g):
            full = np.zeros(src_shape)
            full[key] = g
            self._accum(full)

        return Tensor._result(self.data[key], (self,), backward)

    # -- reductions and nonlinearities ---------------------------------------

    def sum(self, axis=None, keepdims=False):
        src_shape = self.data.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accum(np.broadcast_to(g, src_shape))

        return Tensor._result(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward)

    def mean(self, axis=None, keepdims=False):
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def max(self, axis):
        """Max along one axis; gradient flows to the (first) argmax entries."""
        idx = np.argmax(self.data, axis=axis)
        out_data = np.take_along_axis(self.data, np.expand_dims(idx, axis), axis=axis)
        out_data = np.squeeze(out_data, axis=axis)
        src_shape = self.data.shape

        def backward(g):
            full = np.zeros(src_shape)
            np.put_along_axis(
                full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis
            )
            self._accum(full)

        return Tensor._result(out_data, (self,), backward)

    def exp(self):
        out_data = np.exp(self.data)

        def backward(g):
            self._accum(g * out_data)

        return Tensor._result(out_data, (self,), backward)

    def log(self):
        def backward(g):
            self._accum(g / self.data)

        return Tensor._result(np.log(self.data), (self,), backward)

    def silu(self):
        sig = 1.0 / (1.0 + np.exp(-self.data))

        def backward(g):
            self._accum(g * sig * (1.0 + self.data * (1.0 - sig)))

        return Tensor._result(self.data * sig, (self,), backward)

    def softmax(self, axis=-1):
        """Numerically stable softmax along `axis` (max-subtracted)."""
        if self.data.shape[axis] == 0:
            raise ShapeError("softmax over an empty axis")
        out_data = self.data - self.data.max(axis=axis, keepdims=True)
        np.exp(out_data, out=out_data)
        out_data /= out_data.sum(axis=axis, keepdims=True)

        def backward(g):
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            self._accum(out_data * (g - dot))

        return Tensor._result(out_data, (self,), backward)

    # -- autodiff ------------------------------------------------------------

    def backward(self):
        if self.data.shape != ():
            raise ShapeError("backward requires a scalar loss")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        self._grad_own = True
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                node._backward = None  # graph is single-use


def concat(tensors, axis=0):
    tensors = [Tensor._coerce(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            t._accum(g[tuple(idx)])

    return Tensor._result(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward
    )


def embedding(table: Tensor, indices) -> Tensor:
    """Gather rows of `table` (V, D) by an integer index array."""
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise ShapeError("embedding index out of range")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, table.data.shape[1]))
        table._accum(full)

    return Tensor._result(table.data[idx], (table,), backward)


def matmul(a, b):
    return Tensor._coerce(a).matmul(b)


def softmax(x, axis=-1):
    return Tensor._coerce(x).softmax(axis=axis)


class AdamW:
    """AdamW with bias correction and decoupled weight decay.

    Betas default to (0.9, 0.95). `params` maps names to leaf tensors; the
    moment arrays are keyed the same way so the optimizer state serializes
    alongside the model.
    """

    def __init__(self, params, lr, beta1=0.9, beta2=0.95, eps=1e-8, weight_decay=0.0):
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None
            p._grad_own = False

    def clip_grad_norm(self, max_norm):
        # iterate by sorted name so the reduction order (and thus the exact
        # float result) does not depend on dict insertion order
        total = 0.0
        for name in sorted(self.params):
            p = self.params[name]
            if p.grad is not None:
                total += float(np.sum(p.grad * p.grad))
        norm = np.sqrt(total)
        if norm > max_norm > 0:
            scale = max_norm / norm
            for p in self.params.values():
                if p.grad is not None:
                    # fresh array: a stored grad may alias another tensor's
                    p.grad = p.grad * scale
                    p._grad_own = True
        return norm

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ShapeError(f"gradient shape mismatch for {name}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = p.data - self.lr * update
            _check_finite(p.data)
