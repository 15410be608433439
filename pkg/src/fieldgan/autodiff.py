"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation builds a node of a dynamic DAG; backward() walks the graph
once in reverse topological order and accumulates gradients into the
requires_grad leaves. All math is double precision so finite-difference
checks can be tight.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

from .errors import ContractError, DomainError, ShapeError

LEAKY_SLOPE = 0.2

_grad_enabled = True


class no_grad:
    """Context manager that suppresses graph construction (forward-only)."""

    def __enter__(self):
        global _grad_enabled
        self._saved = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._saved
        return False


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A numpy float64 array plus optional gradient and tape linkage."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None

    # -- basic introspection -------------------------------------------------

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def is_leaf(self) -> bool:
        return not self._parents

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return tensor_matmul(self, _wrap(other))

    # -- method forms used throughout the package ----------------------------

    def relu(self):
        return relu(self)

    def leaky_relu(self):
        return leaky_relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def softplus(self):
        return softplus(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sin(self):
        return sin(self)

    def cos(self):
        return cos(self)

    def sum(self, axis=None):
        return tensor_reduce(self, "sum", axis)

    def mean(self, axis=None):
        return tensor_reduce(self, "mean", axis)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp) -> Tensor:
    """Build an op output; the tape link is dropped when grads are off."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic ---------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(data, (a, b), vjp)


def neg(x: Tensor) -> Tensor:
    x = _wrap(x)
    return _make(-x.data, (x,), lambda g: (-g,))


# -- the registered map functions ---------------------------------------------


# Derivative arrays are computed inside the vjp closures, not at forward
# time, so forward-only evaluation (no_grad) never pays for them.


def relu(x: Tensor) -> Tensor:
    x = _wrap(x)

    def vjp(g):
        return (g * (x.data > 0),)

    return _make(np.maximum(x.data, 0.0), (x,), vjp)


def leaky_relu(x: Tensor) -> Tensor:
    x = _wrap(x)

    def vjp(g):
        return (g * np.where(x.data > 0, 1.0, LEAKY_SLOPE),)

    return _make(np.where(x.data > 0, x.data, LEAKY_SLOPE * x.data), (x,), vjp)


def sigmoid(x: Tensor) -> Tensor:
    x = _wrap(x)
    s = expit(x.data)

    def vjp(g):
        return (g * s * (1.0 - s),)

    return _make(s, (x,), vjp)


def softplus(x: Tensor) -> Tensor:
    x = _wrap(x)

    def vjp(g):
        return (g * expit(x.data),)

    return _make(np.logaddexp(0.0, x.data), (x,), vjp)


def exp(x: Tensor) -> Tensor:
    x = _wrap(x)
    e = np.exp(x.data)

    def vjp(g):
        return (g * e,)

    return _make(e, (x,), vjp)


def log(x: Tensor) -> Tensor:
    x = _wrap(x)
    if np.any(x.data <= 0.0) or not np.all(np.isfinite(x.data)):
        raise DomainError("log requires finite inputs > 0")
    data = np.log(x.data)

    def vjp(g):
        return (g / x.data,)

    return _make(data, (x,), vjp)


def sin(x: Tensor) -> Tensor:
    x = _wrap(x)

    def vjp(g):
        return (g * np.cos(x.data),)

    return _make(np.sin(x.data), (x,), vjp)


def cos(x: Tensor) -> Tensor:
    x = _wrap(x)

    def vjp(g):
        return (-g * np.sin(x.data),)

    return _make(np.cos(x.data), (x,), vjp)


_MAP_FNS = {
    "relu": relu,
    "leaky_relu": leaky_relu,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "exp": exp,
    "log": log,
    "sin": sin,
    "cos": cos,
    "neg": neg,
}


def tensor_map(x: Tensor, fn: str) -> Tensor:
    """Elementwise application of a named function with analytic backward."""
    if fn not in _MAP_FNS:
        raise ContractError(f"unknown map function {fn!r}; have {sorted(_MAP_FNS)}")
    if fn in ("log", "softplus") and not np.all(np.isfinite(_wrap(x).data)):
        raise DomainError(f"{fn} requires finite inputs")
    return _MAP_FNS[fn](x)


# -- matmul, reductions, shape ops ---------------------------------------------


def tensor_matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-D operands, or stacked 2-D for matching 3-D ones."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim not in (2, 3) or b.ndim != a.ndim:
        raise ShapeError(f"matmul expects two 2-D or two 3-D tensors, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2] or (a.ndim == 3 and a.shape[0] != b.shape[0]):
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def vjp(g):
        at = np.swapaxes(a.data, -1, -2)
        bt = np.swapaxes(b.data, -1, -2)
        return g @ bt, at @ g

    return _make(data, (a, b), vjp)


def tensor_reduce(x: Tensor, op: str, axis: int | None = None) -> Tensor:
    x = _wrap(x)
    if op not in ("sum", "mean"):
        raise ContractError(f"unknown reduction {op!r}")
    if axis is not None and not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")
    data = x.data.sum(axis=axis) if op == "sum" else x.data.mean(axis=axis)
    scale = 1.0 if op == "sum" else (x.size if axis is None else x.shape[axis])

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape) / scale,)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape) / scale,)

    return _make(data, (x,), vjp)


def reshape(x: Tensor, shape) -> Tensor:
    x = _wrap(x)
    data = x.data.reshape(shape)

    def vjp(g):
        return (g.reshape(x.shape),)

    return _make(data, (x,), vjp)


def transpose(x: Tensor, axes=None) -> Tensor:
    x = _wrap(x)
    data = x.data.transpose(axes)
    inv = None if axes is None else np.argsort(axes)

    def vjp(g):
        return (g.transpose(inv),)

    return _make(data, (x,), vjp)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    if not ts:
        raise ContractError("concat of an empty sequence")
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, ts, vjp)


def cumsum(x: Tensor, axis: int = -1, exclusive: bool = False) -> Tensor:
    """Running sum along an axis; exclusive mode shifts in a leading zero."""
    x = _wrap(x)
    cs = np.cumsum(x.data, axis=axis)
    if exclusive:
        cs = np.roll(cs, 1, axis=axis)
        idx = [slice(None)] * x.ndim
        idx[axis] = 0
        cs[tuple(idx)] = 0.0

    def vjp(g):
        rev = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
        if exclusive:
            rev = rev - g
        return (rev,)

    return _make(cs, (x,), vjp)


# -- im2col convolution ---------------------------------------------------------


def im2col(x: Tensor, k: int, stride: int, pad: int) -> Tensor:
    """Extract k x k patches of a B,C,H,W tensor into a (B*H'*W', C*k*k) matrix."""
    x = _wrap(x)
    if x.ndim != 4:
        raise ShapeError(f"im2col expects B,C,H,W input, got {x.shape}")
    b, c, h, w = x.shape
    hp = (h + 2 * pad - k) // stride + 1
    wp = (w + 2 * pad - k) // stride + 1
    if h + 2 * pad < k or w + 2 * pad < k or hp < 1 or wp < 1:
        raise ShapeError(f"kernel {k} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # B,C,H',W',k,k
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b * hp * wp, c * k * k)

    def vjp(g):
        g6 = g.reshape(b, hp, wp, c, k, k).transpose(0, 3, 1, 2, 4, 5)
        gx = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gx[:, :, i : i + stride * (hp - 1) + 1 : stride,
                   j : j + stride * (wp - 1) + 1 : stride] += g6[..., i, j]
        if pad:
            gx = gx[:, :, pad:-pad, pad:-pad]
        return (gx,)

    return _make(cols, (x,), vjp)


def conv2d_forward(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation (no kernel flip) via im2col + matmul."""
    x, kernel = _wrap(x), _wrap(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape}, {kernel.shape}")
    b, c, h, w = x.shape
    f, ck, kh, kw = kernel.shape
    if ck != c or kh != kw:
        raise ShapeError(f"kernel {kernel.shape} incompatible with input {x.shape}")
    k = kh
    hp = (h + 2 * pad - k) // stride + 1
    wp = (w + 2 * pad - k) // stride + 1
    cols = im2col(x, k, stride, pad)
    kmat = reshape(kernel, (f, c * k * k))
    out = tensor_matmul(cols, transpose(kmat))  # (B*H'*W', F)
    return transpose(reshape(out, (b, hp, wp, f)), (0, 3, 1, 2))


# -- backward pass ---------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad leaf reachable from a scalar loss.

    Interior gradients live in a transient table, so repeated calls on the
    same graph accumulate leaf gradients exactly once per call.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf():
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# -- Adam ------------------------------------------------------------------------


class AdamState:
    """Adam moments for a fixed list of parameters."""

    def __init__(self, params: Sequence[Tensor], learning_rate: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        self.first_moment = [np.zeros_like(p.data) for p in params]
        self.second_moment = [np.zeros_like(p.data) for p in params]
        self.step_count = 0
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    """Bias-corrected Adam update; zeroes the gradients it consumed."""
    if len(params) != len(state.first_moment):
        raise ContractError(f"{len(params)} params vs state for {len(state.first_moment)}")
    for p in params:
        if p.grad is None:
            raise ContractError("adam_step requires every parameter to carry a gradient")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    for p, m, v in zip(params, state.first_moment, state.second_moment):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + state.epsilon)
        p.grad = None


# -- gradient verification ----------------------------------------------------------


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-4) -> float:
    """Max relative error between backward() and central differences at x.

    The relative error per coordinate is |g_ad - g_fd| / max(1, |g_ad|, |g_fd|).
    """
    x.requires_grad = True
    x.grad = None
    out = f(x)
    backward(out)
    if x.grad is None:
        raise ContractError("f(x) does not depend on x")
    g_ad = x.grad.copy()
    x.grad = None

    g_fd = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    fd_flat = g_fd.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(x).data.reshape(()))
            flat[i] = orig - h
            fm = float(f(x).data.reshape(()))
            flat[i] = orig
            fd_flat[i] = (fp - fm) / (2.0 * h)

    denom = np.maximum(1.0, np.maximum(np.abs(g_ad), np.abs(g_fd)))
    return float(np.max(np.abs(g_ad - g_fd) / denom))
