"""
Numeric Core
Dense tensors with tape-based reverse-mode differentiation over a closed op set,
plus a central-difference gradient oracle.
"""

from __future__ import annotations

import itertools
import logging
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Any, Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

from errors import ContractError, DimensionError, NumericalError

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float64

# Recording is context-local: each thread / task gets its own switch.
_GRAD_ENABLED: ContextVar[bool] = ContextVar("qkcv_grad_enabled", default=True)
_SEQUENCE = itertools.count()

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]
Backward = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

# Closed set of differentiable primitives; every entry has a backward rule below.
OP_SET = (
    "matmul", "batched_matmul", "transpose", "add", "sub", "mul", "div", "broadcast",
    "scale", "exp", "log", "elu", "sigmoid", "tanh", "softmax", "layer_norm",
    "concatenate", "reshape", "sum", "mean", "masked_fill",
)


@dataclass(eq=False)
class Node:
    """One recorded op: its inputs, output identity and backward rule"""
    op: str
    inputs: Tuple["Tensor", ...]
    output_id: int
    backward: Backward
    seq: int


class Tensor:
    """
    Dense n-dimensional real array that can take part in gradient recording.

    Tensors are value-like: ops never mutate their inputs. ``grad`` is only
    filled by ``backward()``; ``grad_of`` returns gradients without touching it.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_node", "__weakref__")

    def __init__(self, data: Any, requires_grad: bool = False, name: Optional[str] = None,
                 dtype: Any = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=dtype or (data.dtype if isinstance(data, np.ndarray)
                                              and data.dtype.kind == "f" else DEFAULT_DTYPE))
        if not np.all(np.isfinite(arr)):
            raise NumericalError(f"tensor '{name or 'unnamed'}' contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[Node] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out.data = arr
        out.requires_grad = False
        out.grad = None
        out.name = None
        out._node = None
        return out

    def __repr__(self) -> str:
        label = f" '{self.name}'" if self.name else ""
        return f"<Tensor{label} shape={self.shape} dtype={self.dtype} requires_grad={self.requires_grad}>"

    # -- properties ---------------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
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

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every gradient-requiring leaf"""
        tape = Tape.of(self)
        grads = tape.backward(self)
        for leaf in tape.leaves():
            g = grads.get(id(leaf))
            if g is None:
                continue
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g

    # -- operators ----------------------------------------------------------

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return self.__mul__(other)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)


def as_tensor(value: ArrayLike, dtype: Any = None) -> Tensor:
    """Wrap constants; tensors pass through untouched"""
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


# =============================================================================
# RECORDING
# =============================================================================

def is_grad_enabled() -> bool:
    return _GRAD_ENABLED.get()


@contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording them (evaluation, finite differences)"""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


def _check_finite(op: str, arr: np.ndarray, exempt: Optional[np.ndarray] = None) -> None:
    bad = ~np.isfinite(arr)
    if exempt is not None:
        bad &= ~np.broadcast_to(exempt, arr.shape)
    if bad.any():
        raise NumericalError(f"op '{op}' produced {int(bad.sum())} non-finite value(s)")


def _record(op: str, data: np.ndarray, inputs: Tuple[Tensor, ...], backward: Backward,
            exempt: Optional[np.ndarray] = None) -> Tensor:
    _check_finite(op, data, exempt)
    out = Tensor._wrap(data)
    if _GRAD_ENABLED.get() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(op, inputs, id(out), backward, next(_SEQUENCE))
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``"""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tape:
    """
    Ordered record of the ops that produced a tensor.

    Nodes are kept in recording order, so backward is a reverse replay.
    """

    def __init__(self, nodes: List[Node]):
        self.nodes = sorted(nodes, key=lambda n: n.seq)
        self.gradients: Optional[Dict[int, np.ndarray]] = None

    @classmethod
    def of(cls, output: Tensor) -> "Tape":
        nodes: Dict[int, Node] = {}
        stack = [output]
        while stack:
            t = stack.pop()
            node = t._node
            if node is None or id(node) in nodes:
                continue
            nodes[id(node)] = node
            stack.extend(node.inputs)
        return cls(list(nodes.values()))

    def ops(self) -> List[str]:
        return [n.op for n in self.nodes]

    def leaves(self) -> List[Tensor]:
        """Gradient-requiring leaf tensors reachable on this tape"""
        seen: Dict[int, Tensor] = {}
        for node in self.nodes:
            for t in node.inputs:
                if t.requires_grad and t._node is None:
                    seen.setdefault(id(t), t)
        return list(seen.values())

    def backward(self, output: Tensor, seed: Optional[np.ndarray] = None) -> Dict[int, np.ndarray]:
        grads: Dict[int, np.ndarray] = {
            id(output): np.ones_like(output.data) if seed is None else np.asarray(seed, dtype=output.dtype)
        }
        for node in reversed(self.nodes):
            g = grads.pop(node.output_id, None)
            if g is None:
                continue
            contributions = node.backward(g)
            for t, c in zip(node.inputs, contributions):
                if c is None or not t.requires_grad:
                    continue
                _check_finite(f"{node.op} (backward)", c)
                key = id(t)
                grads[key] = grads[key] + c if key in grads else c
        self.gradients = grads
        return grads


def grad_of(loss: Tensor, params: Iterable[Tensor]) -> Dict[Tensor, Tensor]:
    """
    Gradient of a scalar loss with respect to each parameter.

    Args:
        loss: Single-element tensor
        params: Tensors to differentiate against

    Returns:
        Mapping param -> gradient tensor of the same shape; parameters that are
        not on the loss path (or do not require grad) get exact zeros.
    """
    if loss.size != 1:
        raise ContractError(f"grad_of needs a scalar loss, got shape {loss.shape}")
    params = list(params)
    grads: Dict[int, np.ndarray] = {}
    if loss._node is not None:
        grads = Tape.of(loss).backward(loss)
    return {
        p: Tensor._wrap(grads[id(p)].copy() if id(p) in grads and p.requires_grad
                        else np.zeros_like(p.data))
        for p in params
    }


# =============================================================================
# PRIMITIVES
# =============================================================================

def _needs(t: Tensor) -> bool:
    return t.requires_grad


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product with numpy batch broadcasting over leading dims"""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _matmul("matmul", a, b)


def batched_matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product over identical leading batch dims"""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 3 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"batched_matmul shape mismatch: {a.shape} @ {b.shape}")
    return _matmul("batched_matmul", a, b)


def _matmul(op: str, a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if _needs(a) else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if _needs(b) else None
        return ga, gb
    return _record(op, np.matmul(a.data, b.data), (a, b), backward)


def transpose(x: ArrayLike, axes: Optional[Sequence[int]] = None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(a % x.ndim for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose axes {axes} invalid for shape {x.shape}")
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)
    return _record("transpose", np.transpose(x.data, axes), (x,), backward)


def swapaxes(x: ArrayLike, a1: int, a2: int) -> Tensor:
    x = as_tensor(x)
    order = list(range(x.ndim))
    order[a1], order[a2] = order[a2], order[a1]
    return transpose(x, order)


def _broadcast_shapes(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes("add", a, b)

    def backward(g):
        return (_unbroadcast(g, a.shape) if _needs(a) else None,
                _unbroadcast(g, b.shape) if _needs(b) else None)
    return _record("add", a.data + b.data, (a, b), backward)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes("sub", a, b)

    def backward(g):
        return (_unbroadcast(g, a.shape) if _needs(a) else None,
                _unbroadcast(-g, b.shape) if _needs(b) else None)
    return _record("sub", a.data - b.data, (a, b), backward)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes("mul", a, b)

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape) if _needs(a) else None,
                _unbroadcast(g * a.data, b.shape) if _needs(b) else None)
    return _record("mul", a.data * b.data, (a, b), backward)


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape) if _needs(a) else None,
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if _needs(b) else None)
    return _record("div", out, (a, b), backward)


def broadcast_to(x: ArrayLike, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise DimensionError(f"cannot broadcast {x.shape} to {shape}") from None

    def backward(g):
        return (_unbroadcast(g, x.shape),)
    return _record("broadcast", out, (x,), backward)


def scale(x: ArrayLike, factor: float) -> Tensor:
    x = as_tensor(x)
    factor = float(factor)

    def backward(g):
        return (g * factor,)
    return _record("scale", x.data * factor, (x,), backward)


def exp(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)

    def backward(g):
        return (g * out,)
    return _record("exp", out, (x,), backward)


def log(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)

    def backward(g):
        return (g / x.data,)
    return _record("log", out, (x,), backward)


def elu(x: ArrayLike, alpha: float = 1.0) -> Tensor:
    x = as_tensor(x)
    neg = x.data <= 0
    out = np.where(neg, alpha * np.expm1(np.minimum(x.data, 0.0)), x.data)

    def backward(g):
        return (g * np.where(neg, out + alpha, 1.0),)
    return _record("elu", out, (x,), backward)


def sigmoid(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    out = special.expit(x.data)

    def backward(g):
        return (g * out * (1.0 - out),)
    return _record("sigmoid", out, (x,), backward)


def tanh(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - out * out),)
    return _record("tanh", out, (x,), backward)


def softmax_lastdim(x: ArrayLike) -> Tensor:
    """
    Softmax over the last axis.

    scipy's softmax subtracts the row max before exponentiating, so logits
    such as [1000, 999] are safe. -inf logits (masked keys) map to exact zeros.
    """
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError(f"softmax needs a non-empty last dim, got shape {x.shape}")
    with np.errstate(invalid="ignore"):
        out = special.softmax(x.data, axis=-1)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)
    return _record("softmax", out, (x,), backward)


def layer_norm(x: ArrayLike, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no affine)"""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std

    def backward(g):
        return (inv_std * (g - g.mean(axis=-1, keepdims=True)
                           - xhat * (g * xhat).mean(axis=-1, keepdims=True)),)
    return _record("layer_norm", xhat, (x,), backward)


def concatenate(tensors: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise DimensionError("concatenate needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concatenate: {[t.shape for t in tensors]}: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        parts = np.split(g, bounds, axis=axis)
        return tuple(p if _needs(t) else None for p, t in zip(parts, tensors))
    return _record("concatenate", out, tensors, backward)


def reshape(x: ArrayLike, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} to {tuple(shape)}") from None

    def backward(g):
        return (g.reshape(x.shape),)
    return _record("reshape", out, (x,), backward)


def reduce_sum(x: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)
    return _record("sum", np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward)


def reduce_mean(x: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else x.shape[axis]

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)
    return _record("mean", np.asarray(x.data.mean(axis=axis, keepdims=keepdims)), (x,), backward)


def masked_fill(x: ArrayLike, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is True by ``value`` (which may be -inf)"""
    x = as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    try:
        full = np.broadcast_to(mask, x.shape)
    except ValueError:
        raise DimensionError(f"mask {mask.shape} does not broadcast to {x.shape}") from None
    out = np.where(full, value, x.data).astype(x.dtype)

    def backward(g):
        return (np.where(full, 0.0, g),)
    return _record("masked_fill", out, (x,), backward, exempt=full)


# =============================================================================
# COMPOSITES
# =============================================================================

def linear(x: ArrayLike, W: ArrayLike, b: Optional[ArrayLike] = None) -> Tensor:
    """y = xW + b over the last axis"""
    x, W = as_tensor(x), as_tensor(W)
    if W.ndim != 2 or x.ndim < 1 or x.shape[-1] != W.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {W.shape}")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[1],):
            raise DimensionError(f"linear: bias {b.shape} does not match weight {W.shape}")
    squeeze = x.ndim == 1
    if squeeze:
        x = reshape(x, (1, x.shape[0]))
    y = matmul(x, W)
    if b is not None:
        y = add(y, b)
    return reshape(y, (W.shape[1],)) if squeeze else y


def one_hot(codes: np.ndarray, depth: int, dtype: Any = None) -> Tensor:
    codes = np.asarray(codes, dtype=np.int64)
    return Tensor._wrap(np.eye(depth, dtype=dtype or DEFAULT_DTYPE)[codes])


def embedding_lookup(codes: np.ndarray, table: Tensor) -> Tensor:
    """Rows of ``table`` selected by integer codes (one-hot product keeps absent rows at zero gradient)"""
    return matmul(one_hot(codes, table.shape[0], table.dtype), table)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    if not training or rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return mul(x, Tensor._wrap(keep))


def pinball(error: Tensor, q: Union[float, np.ndarray]) -> Tensor:
    """q*e for e >= 0, (q-1)*e for e < 0; an array q broadcasts over the last axis"""
    positive = masked_fill(error, error.data < 0, 0.0)
    negative = masked_fill(error, error.data >= 0, 0.0)
    if np.isscalar(q):
        return add(scale(positive, q), scale(negative, q - 1.0))
    q = np.asarray(q, dtype=error.dtype)
    return add(mul(positive, Tensor._wrap(q)), mul(negative, Tensor._wrap(q - 1.0)))


# =============================================================================
# FINITE-DIFFERENCE ORACLE
# =============================================================================

def finite_difference_check(f: Callable[..., Tensor], inputs: Sequence[ArrayLike], eps: float = 1e-5,
                            max_coords: Optional[int] = None, seed: int = 0) -> float:
    """
    Compare reverse-mode gradients of ``f`` against central differences.

    The (possibly tensor-valued) output is projected onto a fixed random
    direction so every input coordinate gets a scalar derivative to compare.

    Args:
        f: Deterministic function of the input tensors
        inputs: Float64 arrays/tensors; they are copied, never mutated
        eps: Central-difference step in [1e-7, 1e-3]
        max_coords: Check at most this many sampled coordinates per input
        seed: Seed for the projection and coordinate sampling

    Returns:
        max |analytic - numeric| / max(1, |numeric|) over checked coordinates
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ContractError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    arrays = [np.asarray(x.data if isinstance(x, Tensor) else x) for x in inputs]
    if any(a.dtype.kind == "f" and a.dtype != np.float64 for a in arrays):
        raise ContractError("finite differences require double precision")
    leaves = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]

    rng = np.random.default_rng(seed)
    first = f(*leaves)
    with no_grad():
        second = f(*leaves)
    if first.shape != second.shape or not np.array_equal(first.data, second.data):
        raise ContractError("function is not deterministic: two forward passes differ")
    direction = rng.standard_normal(first.shape) if first.ndim else np.array(1.0)
    loss = reduce_sum(mul(first, Tensor._wrap(direction)))
    analytic = grad_of(loss, leaves)

    def projected() -> float:
        with no_grad():
            return float((f(*leaves).data * direction).sum())

    worst = 0.0
    for leaf in leaves:
        flat = leaf.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        g = analytic[leaf].data.reshape(-1)
        for i in coords:
            original = flat[i]
            flat[i] = original + eps
            plus = projected()
            flat[i] = original - eps
            minus = projected()
            flat[i] = original
            numeric = (plus - minus) / (2.0 * eps)
            worst = max(worst, abs(g[i] - numeric) / max(1.0, abs(numeric)))
    logger.debug("finite difference check: max rel err %.3e over %d inputs", worst, len(leaves))
    return worst
