"""Numpy-backed tensors with reverse-mode automatic differentiation.

Every differentiable op builds its output through :func:`make_result`, which
wires the output to its parents with a closure mapping the upstream gradient
to one gradient per parent.  :func:`backward` walks the resulting graph in
reverse topological order.
"""
from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

_node_ids = itertools.count()
_default_dtype = np.float32
_active_tapes: list["Tape"] = []
_grad_enabled = True

# Set False to skip the per-op finiteness check (e.g. inside hot loops).
CHECK_FINITE = True


class NonFiniteError(FloatingPointError):
    """Raised when a forward op produces NaN or Inf from finite inputs."""


def get_default_dtype():
    return _default_dtype


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype used by tensor factories."""
    global _default_dtype
    prev = _default_dtype
    _default_dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _default_dtype = prev


@contextlib.contextmanager
def finite_checks(enabled: bool):
    """Temporarily toggle the per-op finiteness check."""
    global CHECK_FINITE
    prev = CHECK_FINITE
    CHECK_FINITE = enabled
    try:
        yield
    finally:
        CHECK_FINITE = prev


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tape:
    """Records every op executed while active.

    Entries are ``(op, input_ids, output_id, output_shape)`` in execution
    order, which is a valid topological order.  Used for activation
    accounting; gradient propagation itself follows the parent links.
    """

    def __init__(self):
        self.entries: list[tuple[str, tuple[int, ...], int, tuple[int, ...]]] = []

    def __enter__(self):
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc):
        _active_tapes.remove(self)
        return False

    def activation_elements(self, ops: Iterable[str] | None = None) -> int:
        wanted = None if ops is None else set(ops)
        return sum(math.prod(shape) for op, _, _, shape in self.entries if wanted is None or op in wanted)

    def elements_along(self, length: int) -> int:
        """Elements of every recorded output that has an axis of extent ``length``."""
        return sum(math.prod(shape) for _, _, _, shape in self.entries if length in shape)

    def max_axes_of(self, length: int) -> int:
        """Largest number of axes of extent ``length`` in any one output (2 would mean quadratic storage)."""
        return max((shape.count(length) for _, _, _, shape in self.entries), default=0)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            if not np.issubdtype(arr.dtype, np.floating):
                arr = arr.astype(_default_dtype)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node_id = next(_node_ids)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    # -- operator sugar ---------------------------------------------------
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    @property
    def T(self):
        return permute(self, tuple(range(self.ndim - 2)) + (self.ndim - 1, self.ndim - 2))


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else _default_dtype
    return Tensor(np.asarray(x, dtype=dtype))


def make_result(op: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap ``data`` as an op output and register its gradient closure.

    ``backward_fn(grad)`` returns one gradient (or None) per parent.
    """
    if CHECK_FINITE and data.dtype.kind == "f" and not np.isfinite(data).all():
        if all(np.isfinite(p.data).all() for p in parents):
            raise NonFiniteError(f"{op} produced non-finite values from finite inputs")
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    if _active_tapes:
        entry = (op, tuple(p.node_id for p in parents), out.node_id, tuple(data.shape))
        for tape in _active_tapes:
            tape.entries.append(entry)
    return out


# -- factories ---------------------------------------------------------------

def _check_shape(shape) -> tuple[int, ...]:
    shape = (shape,) if isinstance(shape, int) else tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise ValueError(f"tensor extents must be positive, got {shape}")
    return shape


def zeros(shape, requires_grad=False, dtype=None) -> Tensor:
    shape = _check_shape(shape)
    return Tensor(np.zeros(shape, dtype=dtype or _default_dtype), requires_grad)


def ones(shape, requires_grad=False, dtype=None) -> Tensor:
    return constant(shape, 1.0, requires_grad, dtype)


def constant(shape, value: float, requires_grad=False, dtype=None) -> Tensor:
    shape = _check_shape(shape)
    return Tensor(np.full(shape, value, dtype=dtype or _default_dtype), requires_grad)


def uniform(shape, lo=-1.0, hi=1.0, seed=None, rng=None, requires_grad=False) -> Tensor:
    shape = _check_shape(shape)
    rng = rng if rng is not None else np.random.default_rng(seed)
    return Tensor(rng.uniform(lo, hi, size=shape).astype(_default_dtype), requires_grad)


def normal(shape, mean_=0.0, std=1.0, seed=None, rng=None, requires_grad=False) -> Tensor:
    shape = _check_shape(shape)
    rng = rng if rng is not None else np.random.default_rng(seed)
    return Tensor(rng.normal(mean_, std, size=shape).astype(_default_dtype), requires_grad)


# -- broadcasting helpers -----------------------------------------------------

def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of trailing-axis broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


# -- elementwise ----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    return make_result("add", a.data + b.data, (a, b),
                       lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    return make_result("sub", a.data - b.data, (a, b),
                       lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    return make_result("mul", a.data * b.data, (a, b),
                       lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    if np.any(b.data == 0):
        raise ZeroDivisionError("division by zero in tensor div")
    out = a.data / b.data

    def backward(g):
        ga = g / b.data
        return unbroadcast(ga, a.shape), unbroadcast(-ga * out, b.shape)

    return make_result("div", out, (a, b), backward)


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


def elementwise(a, b, kind: str) -> Tensor:
    ops = {"add": add, "sub": sub, "mul": mul, "div": div}
    if kind not in ops:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return ops[kind](a, b)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_result("relu", a.data * mask, (a,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return make_result("gelu", out, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log of non-positive value")
    return make_result("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def clamp(a: Tensor, lo=None, hi=None) -> Tensor:
    out = np.clip(a.data, lo, hi)
    keep = np.ones(a.shape, dtype=bool)
    if lo is not None:
        keep &= a.data >= lo
    if hi is not None:
        keep &= a.data <= hi
    return make_result("clamp", out, (a,), lambda g: (g * keep,))


def unary(a: Tensor, kind: str) -> Tensor:
    ops = {"relu": relu, "gelu": gelu, "exp": exp, "log": log}
    if kind not in ops:
        raise ValueError(f"unknown unary kind {kind!r}")
    return ops[kind](a)


# -- reductions ------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(ax % ndim for ax in axes)


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return make_result("sum", np.asarray(out), (a,), backward)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum_(a, axes, keepdims), 1.0 / count)


# -- linear algebra --------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"inner extents differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ValueError(f"batch extents not broadcastable: {a.shape} @ {b.shape}") from None
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return make_result("matmul", out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with weight stored as [in, out]."""
    # fold leading axes so the weight gradient is a single GEMM
    lead = x.shape[:-1]
    flat = reshape(x, (-1, x.shape[-1])) if x.ndim != 2 else x
    out = matmul(flat, weight)
    if bias is not None:
        out = add(out, bias)
    return reshape(out, lead + (weight.shape[-1],)) if x.ndim != 2 else out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    out = a.data - a.data.max(axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=axis, keepdims=True)

    def backward(g):
        gx = g * out
        np.subtract(g, gx.sum(axis=axis, keepdims=True), out=gx)
        gx *= out
        return (gx,)

    return make_result("softmax", out, (a,), backward)


def layer_norm(a: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = 1e-5, axis: int = -1) -> Tensor:
    """Normalize along ``axis``; ``gamma``/``beta`` broadcast along that axis."""
    axis = axis % a.ndim
    x = a.data
    mu = x.mean(axis=axis, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    def backward(g):
        gx = inv * (g - g.mean(axis=axis, keepdims=True)
                    - xhat * (g * xhat).mean(axis=axis, keepdims=True))
        return (gx,)

    out = make_result("layer_norm", xhat, (a,), backward)
    if gamma is not None or beta is not None:
        shape = [1] * a.ndim
        shape[axis] = a.shape[axis]
        if gamma is not None:
            out = mul(out, reshape(gamma, tuple(shape)) if axis != a.ndim - 1 else gamma)
        if beta is not None:
            out = add(out, reshape(beta, tuple(shape)) if axis != a.ndim - 1 else beta)
    return out


# -- shape ops --------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ValueError(f"cannot reshape {a.shape} into {shape}") from None
    return make_result("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(ax % a.ndim for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ValueError(f"invalid permutation {axes} for rank {a.ndim}")
    inverse = tuple(np.argsort(axes))
    return make_result("permute", np.transpose(a.data, axes), (a,),
                       lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != axis):
            raise ValueError(f"concat extents differ off axis {axis}: "
                             f"{[t.shape for t in tensors]}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        index = [slice(None)] * ndim
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index[axis] = slice(lo, hi)
            grads.append(g[tuple(index)])
        return tuple(grads)

    return make_result("concat", out, tensors, backward)


def slice_(a: Tensor, idx) -> Tensor:
    out = a.data[idx]
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(p, (int, slice, type(Ellipsis))) or p is None for p in parts)

    def backward(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return make_result("slice", np.array(out), (a,), backward)


def pad(a: Tensor, widths, mode: str = "constant") -> Tensor:
    """Zero (or reflect) pad with per-axis ``(before, after)`` widths."""
    widths = tuple(tuple(w) for w in widths)
    out = np.pad(a.data, widths, mode=mode)
    if mode != "constant":
        raise NotImplementedError("only zero padding is differentiable")
    index = tuple(slice(lo, lo + s) for (lo, _), s in zip(widths, a.shape))
    return make_result("pad", out, (a,), lambda g: (g[index],))


# -- backward / gradcheck -------------------------------------------------------------

def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, retain_graph: bool = False) -> dict[int, Tensor]:
    """Back-propagate from a scalar ``root``.

    Leaf gradients are accumulated into ``leaf.grad`` and also returned as a
    map from node id to gradient tensor.  Leaves that do not require grad get
    no entry.
    """
    if root.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        raise RuntimeError("backward root is not attached to a gradient tape")
    order = _topological(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape, dtype=root.dtype)}
    result: dict[int, Tensor] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            result[node.node_id] = Tensor(node.grad)
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        if not retain_graph:
            node._backward = None
            node._parents = ()
            node.requires_grad = False
    return result


def gradcheck(f: Callable[[Tensor], Tensor], x: np.ndarray | Tensor, eps: float = 1e-5,
              floor: float = 1e-6) -> float:
    """Max relative error between tape and central-difference gradients.

    Runs in float64.  Relative error per coordinate is
    ``|a - n| / max(|a|, |n|, floor)``; the floor keeps coordinates whose true
    gradient is ~0 from dividing finite-difference noise by nothing.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    with default_dtype(np.float64):
        xt = Tensor(x0.copy(), requires_grad=True)
        y = f(xt)
        if y.size != 1 or not np.isfinite(y.data).all():
            raise ValueError("gradcheck function must return a finite scalar")
        if y.requires_grad:
            backward(y)
        analytic = xt.grad if xt.grad is not None else np.zeros_like(x0)
        numeric = np.zeros_like(x0)
        flat = x0.reshape(-1)
        num_flat = numeric.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = f(Tensor(x0.copy())).data.item()
                flat[i] = orig - eps
                fm = f(Tensor(x0.copy())).data.item()
                flat[i] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise ValueError("gradcheck function is not finite near x")
                num_flat[i] = (fp - fm) / (2 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if x0.size else 0.0
