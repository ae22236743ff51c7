"""Reverse-mode automatic differentiation on dense float64 tensors.

A ``Tensor`` wraps a C-contiguous float64 numpy array. Operations executed
while a ``Tape`` is active are recorded in execution order (which is a
topological order for a define-by-run graph); ``Tape.backward`` replays the
records in reverse and accumulates gradients into every tensor that
participates in the graph. Tensors created outside a tape are plain values.

The op set is intentionally small: matmul, elementwise arithmetic and
activations, softmax/log-softmax, reductions, and structural ops. Everything
a model needs is composed from these.
"""

from __future__ import annotations

import struct

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError, FormatError

# When True, every op output is checked for NaN/Inf. Enabled by the test
# suite; off by default so intentionally-diverging runs surface as
# TrainingError in the training loop instead of an assertion here.
DEBUG_FINITE_CHECKS = False

_TAPE_STACK: list["Tape"] = []

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def set_debug_checks(enabled: bool) -> None:
    global DEBUG_FINITE_CHECKS
    DEBUG_FINITE_CHECKS = bool(enabled)


class Tensor:
    """Dense float64 array with optional participation in gradient taping."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: "Tape" | None = None

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
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- operator sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


class Tape:
    """Execution-ordered record of differentiable operations.

    Use as a context manager around the forward pass, then call
    ``backward(loss)`` once. Each record is visited exactly once during the
    reverse sweep; records whose output never received a gradient are
    skipped. Single-threaded by design.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, object]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` on every tensor reachable from ``loss``."""
        if loss.data.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {loss.data.shape}"
            )
        if loss._tape is not self:
            raise ContractError("loss was not produced through this tape")
        if self._consumed:
            raise ContractError("backward was already called on this tape")
        self._consumed = True
        loss._accumulate(np.ones_like(loss.data))
        for out, rule in reversed(self._records):
            g = out.grad
            if g is None:
                continue
            rule(g)


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _tracked(t: Tensor, tape: Tape) -> bool:
    return t.requires_grad or t._tape is tape


def _make_output(data: np.ndarray) -> Tensor:
    if DEBUG_FINITE_CHECKS and not np.all(np.isfinite(data)):
        raise AssertionError("forward op produced non-finite values")
    return Tensor(data)


def _record(out: Tensor, inputs: tuple[Tensor, ...], rule) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(_tracked(t, tape) for t in inputs):
        out._tape = tape
        tape._records.append((out, rule))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise DimensionError(
            f"{op}: shapes {a.data.shape} and {b.data.shape} are not broadcastable"
        ) from None


# -- elementwise ops ----------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "add")
    out = _make_output(a.data + b.data)

    def rule(g, a=a, b=b):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(g, b.data.shape))

    return _record(out, (a, b), rule)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "sub")
    out = _make_output(a.data - b.data)

    def rule(g, a=a, b=b):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(-g, b.data.shape))

    return _record(out, (a, b), rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "mul")
    out = _make_output(a.data * b.data)

    def rule(g, a=a, b=b):
        a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _record(out, (a, b), rule)


def scale(a: Tensor, s: float) -> Tensor:
    out = _make_output(a.data * s)

    def rule(g, a=a, s=s):
        a._accumulate(g * s)

    return _record(out, (a,), rule)


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    out = _make_output(t)

    def rule(g, a=a, t=t):
        a._accumulate(g * (1.0 - t * t))

    return _record(out, (a,), rule)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU: x * Phi(x)."""
    x = a.data
    phi_cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = _make_output(x * phi_cdf)

    def rule(g, a=a, x=x, phi_cdf=phi_cdf):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        a._accumulate(g * (phi_cdf + x * pdf))

    return _record(out, (a,), rule)


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    out = _make_output(e)

    def rule(g, a=a, e=e):
        a._accumulate(g * e)

    return _record(out, (a,), rule)


def log(a: Tensor) -> Tensor:
    out = _make_output(np.log(a.data))

    def rule(g, a=a):
        a._accumulate(g / a.data)

    return _record(out, (a,), rule)


def powf(a: Tensor, p: float) -> Tensor:
    """Elementwise power with a constant real exponent."""
    y = a.data ** p
    out = _make_output(y)

    def rule(g, a=a, p=p):
        a._accumulate(g * p * a.data ** (p - 1.0))

    return _record(out, (a,), rule)


# -- reductions ----------------------------------------------------------


def _restore_axes(g: np.ndarray, axis, keepdims: bool, ndim: int) -> np.ndarray:
    if keepdims or axis is None:
        return g
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % ndim for ax in axes)
    for ax in sorted(axes):
        g = np.expand_dims(g, ax)
    return g


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = _make_output(np.sum(a.data, axis=axis, keepdims=keepdims))

    def rule(g, a=a, axis=axis, keepdims=keepdims):
        g = _restore_axes(np.asarray(g), axis, keepdims, a.data.ndim)
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad += g  # broadcasts across the reduced axes

    return _record(out, (a,), rule)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.data.shape[ax] for ax in axes]))
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- softmax family -------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax via max subtraction."""
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / np.sum(e, axis=axis, keepdims=True)
    out = _make_output(s)

    def rule(g, a=a, s=s, axis=axis):
        inner = np.sum(g * s, axis=axis, keepdims=True)
        a._accumulate(s * (g - inner))

    return _record(out, (a,), rule)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    ls = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = _make_output(ls)

    def rule(g, a=a, ls=ls, axis=axis):
        a._accumulate(g - np.exp(ls) * np.sum(g, axis=axis, keepdims=True))

    return _record(out, (a,), rule)


# -- matmul ----------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(
            f"matmul requires rank >= 2 operands, got {a.data.shape} @ {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(
            f"matmul inner extents differ: {a.data.shape} @ {b.data.shape}"
        )
    try:
        np.broadcast_shapes(a.data.shape[:-2], b.data.shape[:-2])
    except ValueError:
        raise DimensionError(
            f"matmul batch extents not broadcastable: {a.data.shape} @ {b.data.shape}"
        ) from None
    out = _make_output(np.matmul(a.data, b.data))

    def rule(g, a=a, b=b):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        a._accumulate(_unbroadcast(ga, a.data.shape))
        b._accumulate(_unbroadcast(gb, b.data.shape))

    return _record(out, (a, b), rule)


# -- structural ops ---------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    try:
        data = np.reshape(a.data, shape)
    except ValueError:
        raise DimensionError(
            f"cannot reshape {a.data.shape} into {tuple(shape)}"
        ) from None
    out = _make_output(data)

    def rule(g, a=a):
        a._accumulate(np.reshape(g, a.data.shape))

    return _record(out, (a,), rule)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(ax % a.data.ndim for ax in axes) != list(range(a.data.ndim)):
        raise DimensionError(
            f"transpose axes {axes} invalid for shape {a.data.shape}"
        )
    out = _make_output(np.ascontiguousarray(np.transpose(a.data, axes)))
    inverse = tuple(np.argsort([ax % a.data.ndim for ax in axes]))

    def rule(g, a=a, inverse=inverse):
        a._accumulate(np.transpose(g, inverse))

    return _record(out, (a,), rule)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat of an empty sequence")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.data.shape for t in tensors]
        raise DimensionError(f"concat extents inconsistent: {shapes}") from None
    out = _make_output(data)
    ax = axis % tensors[0].data.ndim
    sizes = [t.data.shape[ax] for t in tensors]

    def rule(g, tensors=tensors, ax=ax, sizes=sizes):
        offset = 0
        for t, n in zip(tensors, sizes):
            key = [slice(None)] * g.ndim
            key[ax] = slice(offset, offset + n)
            t._accumulate(g[tuple(key)])
            offset += n

    return _record(out, tuple(tensors), rule)


def slice_(a: Tensor, key) -> Tensor:
    """Basic (non-fancy) indexing; backward scatters into the sliced region."""
    out = _make_output(np.ascontiguousarray(a.data[key]))

    def rule(g, a=a, key=key):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[key] += g

    return _record(out, (a,), rule)


# -- checkpoint format --------------------------------------------------------
#
# Binary layout (all little-endian):
#   magic "KSEG" | version u16 | tensor count u32
#   per tensor: name length u16 | UTF-8 name | rank u8 | extents rank*u64
#               | values float64

CHECKPOINT_MAGIC = b"KSEG"
CHECKPOINT_VERSION = 1


def write_checkpoint(path, tensors: dict) -> None:
    """Serialize named arrays (or Tensors) to the KSEG checkpoint format."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.ascontiguousarray(
            value.data if isinstance(value, Tensor) else value, dtype="<f8"
        )
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def read_checkpoint(path) -> dict:
    """Read a KSEG checkpoint into a name -> float64 ndarray dict."""
    with open(path, "rb") as fh:
        blob = fh.read()
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise FormatError(f"checkpoint truncated at byte {pos}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != CHECKPOINT_MAGIC:
        raise FormatError("not a KSEG checkpoint (bad magic)")
    version, count = struct.unpack("<HI", take(6))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    result: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        n_values = int(np.prod(shape, dtype=np.int64)) if rank else 1
        data = np.frombuffer(take(8 * n_values), dtype="<f8").reshape(shape)
        result[name] = np.ascontiguousarray(data, dtype=np.float64)
    if pos != len(view):
        raise FormatError("trailing bytes after last tensor")
    return result
