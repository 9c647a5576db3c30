"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Values are numpy arrays; every differentiable operation records its parents
and a backward closure, so a forward pass builds an implicit DAG that
``backward`` walks in reverse topological order.  Training runs in 32-bit;
a global 64-bit mode exists for finite-difference verification.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

_DTYPE = np.float32


def set_precision(bits: int) -> None:
    """Switch the global default dtype (32 for training, 64 for verification)."""
    global _DTYPE
    if bits == 32:
        _DTYPE = np.float32
    elif bits == 64:
        _DTYPE = np.float64
    else:
        raise ContractError(f"precision must be 32 or 64, got {bits}")


def get_precision() -> int:
    return 64 if _DTYPE == np.float64 else 32


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(bits: int):
    prev = get_precision()
    set_precision(bits)
    try:
        yield
    finally:
        set_precision(prev)


class Tensor:
    """Dense n-dimensional array with an optional gradient slot.

    ``grad`` is allocated lazily and accumulates additively across backward
    sweeps; callers reset it between optimizer steps.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False,
                 _parents: tuple = (), _backward: Callable | None = None):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def _accum_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # ---- autodiff -----------------------------------------------------

    def backward(self) -> None:
        """Reverse sweep from a scalar loss; populates .grad on the graph."""
        if self.data.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {self.data.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accum_grad(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # ---- operator sugar ----------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(*dims) -> Tensor:
    return Tensor(np.zeros(dims, dtype=_DTYPE))


def _check_broadcast(a: np.ndarray, b: np.ndarray) -> None:
    # only full match, scalar, row (1,c) or column (r,1) broadcasts are supported
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    if a.ndim == 2 and b.ndim == 2:
        if (b.shape[0] == 1 and b.shape[1] == a.shape[1]) or \
           (b.shape[1] == 1 and b.shape[0] == a.shape[0]) or \
           (a.shape[0] == 1 and a.shape[1] == b.shape[1]) or \
           (a.shape[1] == 1 and a.shape[0] == b.shape[0]):
            return
    if a.ndim == 2 and b.ndim == 1 and b.shape[0] == a.shape[1]:
        return
    if b.ndim == 2 and a.ndim == 1 and a.shape[0] == b.shape[1]:
        return
    raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to the operand's shape."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# ---- elementwise ops --------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.data, b.data)
    out = Tensor(a.data + b.data, _parents=(a, b), _backward=None)

    def bwd(g):
        if a.requires_grad:
            a._accum_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum_grad(_unbroadcast(g, b.data.shape))
    out._backward = bwd
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.data, b.data)
    out = Tensor(a.data - b.data, _parents=(a, b))

    def bwd(g):
        if a.requires_grad:
            a._accum_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum_grad(_unbroadcast(-g, b.data.shape))
    out._backward = bwd
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.data, b.data)
    out = Tensor(a.data * b.data, _parents=(a, b))

    def bwd(g):
        if a.requires_grad:
            a._accum_grad(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accum_grad(_unbroadcast(g * a.data, b.data.shape))
    out._backward = bwd
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.data, b.data)
    out = Tensor(a.data / b.data, _parents=(a, b))

    def bwd(g):
        if a.requires_grad:
            a._accum_grad(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accum_grad(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))
    out._backward = bwd
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data, _parents=(a,))

    def bwd(g):
        if a.requires_grad:
            a._accum_grad(-g)
    out._backward = bwd
    return out


def sqrt(a: Tensor) -> Tensor:
    out = Tensor(np.sqrt(a.data), _parents=(a,))

    def bwd(g):
        if a.requires_grad:
            a._accum_grad(g * 0.5 / np.sqrt(a.data))
    out._backward = bwd
    return out


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0), _parents=(a,))

    def bwd(g):
        if a.requires_grad:
            a._accum_grad(g * (a.data > 0))
    out._backward = bwd
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(s, _parents=(a,))

    def bwd(g):
        if a.requires_grad:
            a._accum_grad(g * s * (1.0 - s))
    out._backward = bwd
    return out


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data), _parents=(a,))

    def bwd(g):
        if a.requires_grad:
            a._accum_grad(g / a.data)
    out._backward = bwd
    return out


# ---- structural ops ---------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul inner dims differ: {a.data.shape} x {b.data.shape}")
    out = Tensor(a.data @ b.data, _parents=(a, b))

    def bwd(g):
        if a.requires_grad:
            a._accum_grad(g @ b.data.T)
        if b.requires_grad:
            b._accum_grad(a.data.T @ g)
    out._backward = bwd
    return out


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D tensor, got {a.data.shape}")
    out = Tensor(a.data.T, _parents=(a,))

    def bwd(g):
        if a.requires_grad:
            a._accum_grad(g.T)
    out._backward = bwd
    return out


def reshape(a: Tensor, *dims) -> Tensor:
    out = Tensor(a.data.reshape(dims), _parents=(a,))

    def bwd(g):
        if a.requires_grad:
            a._accum_grad(g.reshape(a.data.shape))
    out._backward = bwd
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                 _parents=tuple(tensors))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accum_grad(g[tuple(sl)])
    out._backward = bwd
    return out


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack along a new leading axis (for cross-layer aggregation)."""
    out = Tensor(np.stack([t.data for t in tensors], axis=0),
                 _parents=tuple(tensors))

    def bwd(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accum_grad(g[i])
    out._backward = bwd
    return out


def select_rows(a: Tensor, indices: np.ndarray) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    out = Tensor(a.data[idx], _parents=(a,))

    def bwd(g):
        if a.requires_grad:
            acc = np.zeros_like(a.data)
            np.add.at(acc, idx, g)
            a._accum_grad(acc)
    out._backward = bwd
    return out


def scatter_rows(a: Tensor, indices: np.ndarray, num_rows: int) -> Tensor:
    """Place rows of ``a`` at ``indices`` of an otherwise-zero (num_rows, c) tensor."""
    idx = np.asarray(indices, dtype=np.int64)
    data = np.zeros((num_rows, a.data.shape[1]), dtype=a.data.dtype)
    data[idx] = a.data
    out = Tensor(data, _parents=(a,))

    def bwd(g):
        if a.requires_grad:
            a._accum_grad(g[idx])
    out._backward = bwd
    return out


# ---- reductions -------------------------------------------------------

def tsum(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum().reshape(1, 1), _parents=(a,))

    def bwd(g):
        if a.requires_grad:
            a._accum_grad(np.full_like(a.data, g.reshape(())))
    out._backward = bwd
    return out


def mean_axis0(a: Tensor) -> Tensor:
    """Mean over the leading axis, keeping it with extent 1."""
    out = Tensor(a.data.mean(axis=0, keepdims=True), _parents=(a,))
    n = a.data.shape[0]

    def bwd(g):
        if a.requires_grad:
            a._accum_grad(np.broadcast_to(g / n, a.data.shape).copy())
    out._backward = bwd
    return out


def mean_axis1(a: Tensor) -> Tensor:
    out = Tensor(a.data.mean(axis=1, keepdims=True), _parents=(a,))
    n = a.data.shape[1]

    def bwd(g):
        if a.requires_grad:
            a._accum_grad(np.broadcast_to(g / n, a.data.shape).copy())
    out._backward = bwd
    return out


def max_axis0(a: Tensor) -> Tensor:
    """Elementwise max over the leading axis; ties route to the first maximum."""
    data = a.data.max(axis=0)
    out = Tensor(data, _parents=(a,))
    winners = a.data.argmax(axis=0)

    def bwd(g):
        if a.requires_grad:
            acc = np.zeros_like(a.data)
            grid = np.ogrid[tuple(slice(s) for s in data.shape)]
            acc[(winners,) + tuple(grid)] = g
            a._accum_grad(acc)
    out._backward = bwd
    return out


# ---- softmax family ---------------------------------------------------

def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction; rows sum to 1."""
    if np.isnan(x.data).any():
        raise NumericError("softmax_rows: NaN in input")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    out = Tensor(s, _parents=(x,))

    def bwd(g):
        if x.requires_grad:
            dot = (g * s).sum(axis=1, keepdims=True)
            x._accum_grad(s * (g - dot))
    out._backward = bwd
    return out


def log_softmax_rows(x: Tensor) -> Tensor:
    if np.isnan(x.data).any():
        raise NumericError("log_softmax_rows: NaN in input")
    z = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = Tensor(z - lse, _parents=(x,))
    s = np.exp(z - lse)

    def bwd(g):
        if x.requires_grad:
            x._accum_grad(g - s * g.sum(axis=1, keepdims=True))
    out._backward = bwd
    return out


# ---- optimizer --------------------------------------------------------

class AdamW:
    """AdamW with decoupled weight decay over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 weight_decay: float = 0.05, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for name, p in self.params.items():
            if p.grad is None:
                raise ContractError(f"parameter '{name}' has no gradient")
            g = p.grad
            # decoupled decay, applied before the moment-driven update
            p.data -= self.lr * self.weight_decay * p.data
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---- finite-difference verification -----------------------------------

class GradCheckReport:
    def __init__(self, errors: dict[str, float], tol: float):
        self.errors = errors
        self.tol = tol

    @property
    def passed(self) -> bool:
        return all(e < self.tol for e in self.errors.values())

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    def __repr__(self):
        status = "pass" if self.passed else "FAIL"
        return f"GradCheckReport({status}, max={self.max_error:.3e}, tol={self.tol:.0e})"


def finite_diff_check(f: Callable[..., Tensor], inputs: dict[str, Tensor],
                      h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients of a scalar-valued f against central differences.

    Error metric per element is |analytic - numeric| / max(1, |numeric|), so
    near-zero gradients are judged absolutely. f is evaluated twice up front to
    detect non-determinism.
    """
    if not (1e-6 <= h <= 1e-3):
        raise ContractError(f"h={h} outside [1e-6, 1e-3]")
    args = list(inputs.values())
    out1 = f(*args)
    out2 = f(*args)
    if out1.data.size != 1:
        raise ContractError("finite_diff_check: f must return a scalar Tensor")
    if not np.array_equal(out1.data, out2.data):
        raise ContractError("finite_diff_check: f is not deterministic")

    for t in args:
        t.zero_grad()
    out1.backward()

    errors: dict[str, float] = {}
    for name, t in inputs.items():
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = 0.0
        flat = t.data.reshape(-1)
        a_flat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(*args).data.reshape(()))
            flat[i] = orig - h
            fm = float(f(*args).data.reshape(()))
            flat[i] = orig
            numeric = (fp - fm) / (2 * h)
            err = abs(a_flat[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
        errors[name] = worst
    return GradCheckReport(errors, tol)
