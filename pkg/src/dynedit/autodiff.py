"""Small reverse-mode autodiff over dense float64 arrays, plus Adam.

Tensors record the operation that produced them; calling ``backward`` on a
result walks the recorded graph in reverse topological order. Gradients
accumulate by addition when a tensor feeds several consumers.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class ShapeError(ValueError):
    pass


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate operations without recording the graph."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(arr, opname):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite value produced by {opname}")


def _unbroadcast(grad, shape):
    # sum out axes that were broadcast on the way forward
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, _parents=(), op=""):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, op or "constructor")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = None
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    def __len__(self):
        return self.shape[0]

    # -- graph plumbing -------------------------------------------------

    @staticmethod
    def _make(data, parents, backward, op):
        _check_finite(data, op)
        parents = tuple(p for p in parents if isinstance(p, Tensor))
        track = _grad_enabled and any(p.requires_grad for p in parents)
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.requires_grad = track
        out.op = op
        if track:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    def backward(self, seed=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if seed is None:
            if self.data.size != 1:
                raise ShapeError("seed required for non-scalar output")
            seed = np.ones_like(self.data)
        seed = np.asarray(seed.data if isinstance(seed, Tensor) else seed, dtype=np.float64)
        if seed.shape != self.shape:
            raise ShapeError(f"seed shape {seed.shape} != output shape {self.shape}")

        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): seed}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    def zero_grad(self):
        self.grad = None

    # -- arithmetic -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return tsum(self, axis, keepdims) * (1.0 / n)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    def exp(self):
        return exp(self)

    def relu(self):
        return relu(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _broadcast_check(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a.data, b.data, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._make(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a.data, b.data, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._make(a.data - b.data, (a, b), bw, "sub")


def neg(a):
    return Tensor._make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a.data, b.data, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._make(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a.data, b.data, "div")
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return Tensor._make(out, (a, b), bw, "div")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor._make(a.data @ b.data, (a, b), bw, "matmul")


def exp(a):
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,), "exp")


def sin(a):
    return Tensor._make(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), "sin")


def cos(a):
    return Tensor._make(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),), "cos")


def tanh(a):
    out = np.tanh(a.data)
    return Tensor._make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a):
    pos = a.data > 0
    return Tensor._make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


def tabs(a):
    sgn = np.sign(a.data)
    return Tensor._make(np.abs(a.data), (a,), lambda g: (g * sgn,), "abs")


def norm(a, axis=-1, keepdims=False):
    """Euclidean norm along ``axis``; the subgradient at 0 is taken as 0."""
    n = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))
    safe = np.where(n > 0, n, 1.0)

    def bw(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (gk * a.data / safe * (n > 0),)

    out = n if keepdims else np.squeeze(n, axis=axis)
    return Tensor._make(out, (a,), bw, "norm")


def tsum(a, axis=None, keepdims=False):
    shape = a.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gk, shape).copy(),)

    return Tensor._make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw, "sum")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    sizes = [t.shape[ax] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=ax)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from exc
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return Tensor._make(out, tuple(tensors), bw, "concat")


def index(a, idx):
    """Basic or integer-array indexing; backward scatters with accumulation."""
    out = a.data[idx]
    shape = a.shape

    fancy = _is_fancy(idx)

    def bw(g):
        full = np.zeros(shape)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] += g
        return (full,)

    return Tensor._make(np.array(out, dtype=np.float64), (a,), bw, "index")


def _is_fancy(idx):
    parts = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def reshape(a, shape):
    old = a.shape
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def stack_columns(cols):
    """Stack a list of (P,) tensors into a (P, k) tensor."""
    return concat([reshape(c, (-1, 1)) for c in cols], axis=1)


def external(value, inputs, vjp, op="external"):
    """Wrap a value computed outside the graph.

    ``vjp(g)`` must return one gradient array per input. Used for queries
    against fields that are not themselves built from tensor primitives.
    """
    return Tensor._make(np.asarray(value, dtype=np.float64), tuple(inputs), vjp, op)


class Graph:
    """A traced function with an explicit forward/backward protocol.

    >>> g = Graph(lambda x, y: x * y)
    >>> g.forward(Tensor(2.0), Tensor(3.0)).item()
    6.0
    """

    def __init__(self, fn):
        self.fn = fn
        self.inputs = None
        self.output = None

    def forward(self, *inputs):
        self.inputs = [Tensor(as_tensor(x).data, requires_grad=True) for x in inputs]
        self.output = self.fn(*self.inputs)
        return self.output

    def backward(self, seed=None):
        if self.output is None:
            raise RuntimeError("backward called before forward")
        for x in self.inputs:
            x.zero_grad()
        self.output.backward(seed)
        return [x.grad if x.grad is not None else np.zeros(x.shape) for x in self.inputs]


# -- optimizer -------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0


def adam_step(state, params, grads):
    """One bias-corrected Adam update of ``params`` (arrays or Tensors), in place."""
    if len(params) != len(grads):
        raise ShapeError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros(_data(p).shape) for p in params]
        state.v = [np.zeros(_data(p).shape) for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        arr = p.data if isinstance(p, Tensor) else p
        g = np.zeros(arr.shape) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != arr.shape or state.m[i].shape != arr.shape:
            raise ShapeError(f"param {i}: shape {arr.shape} vs grad {g.shape}")
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        arr -= state.lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
        out.append(p)
    return out


class Adam:
    def __init__(self, params, lr=5e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        adam_step(self.state, self.params, [p.grad for p in self.params])


def numerical_grad(fn, params, eps=1e-4):
    """Central finite differences of scalar ``fn()`` w.r.t. each param array (in place perturbation)."""
    grads = []
    for p in params:
        arr = p.data if isinstance(p, Tensor) else p
        g = np.zeros(arr.shape)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            fp = float(_data(fn()))
            flat[k] = orig - eps
            fm = float(_data(fn()))
            flat[k] = orig
            gflat[k] = (fp - fm) / (2 * eps)
        grads.append(g)
    return grads


def grad_check(fn, params, eps=1e-4, rtol=1e-3, atol=1e-7):
    """Compare analytic and finite-difference gradients; returns (ok, max_rel_err)."""
    for p in params:
        p.grad = None
    out = fn()
    out.backward()
    analytic = [p.grad if p.grad is not None else np.zeros(p.shape) for p in params]
    with no_grad():
        numeric = numerical_grad(fn, params, eps)
    worst = 0.0
    ok = True
    for a, n in zip(analytic, numeric):
        scale = max(np.max(np.abs(n)), np.max(np.abs(a)), atol)
        err = np.max(np.abs(a - n)) / scale if a.size else 0.0
        worst = max(worst, err)
        if not np.allclose(a, n, rtol=rtol, atol=max(atol, rtol * scale)):
            ok = False
    return ok, worst
