"""Dense float64 tensors with reverse-mode automatic differentiation.

Evaluation is eager: every operation computes its value immediately and
records its inputs plus a backward rule, so ``backward`` on a scalar
output fills the ``grad`` buffer of every tensor created with
``requires_grad=True``. Repeated ``backward`` calls accumulate; call
``zero_grad`` (or ``ParamStore.zero_grads``) between optimizer steps.

Deliberate restrictions keep shape bugs loud:

* row-major float64 only, numpy is the storage backend;
* the only implicit broadcasting is *suffix* broadcasting: the smaller
  operand's shape must equal the trailing dimensions of the larger one
  (a scalar matches anything) — no size-1 stretching;
* every public operation checks its output for NaN/Inf and raises
  ``NonFiniteError`` instead of propagating poison values.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform; message names the op and shapes."""


class GraphError(RuntimeError):
    """Backward called on an output that cannot be differentiated."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class Tensor:
    """A dense float64 array plus an optional gradient buffer.

    Values are immutable by convention once created; only ``grad`` is
    mutated (by ``backward`` and ``zero_grad``). A tensor and the graph
    it belongs to must stay on one worker; independent graphs are safe
    to run concurrently.
    """

    __slots__ = ("data", "requires_grad", "grad", "_op", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor literal contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None

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
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """Read-only view of the underlying array."""
        view = self.data.view()
        view.flags.writeable = False
        return view

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """Copy of the value with no graph history and no gradient."""
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    # Operator sugar; scalars and arrays are wrapped as constants.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        return transpose(self, axes)


def as_tensor(value) -> Tensor:
    """Wrap scalars/arrays as constant tensors; pass tensors through."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _make(data: np.ndarray, op: str, parents: tuple[Tensor, ...],
          backward_fn: Callable[[np.ndarray], None] | None) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"op '{op}' produced NaN or Inf")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    out._op = op
    out._parents = parents if out.requires_grad else ()
    out._backward_fn = backward_fn if out.requires_grad else None
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad and t._backward_fn is None:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _suffix_check(op: str, big: tuple[int, ...], small: tuple[int, ...]) -> None:
    k = len(small)
    if k > len(big) or (k > 0 and big[len(big) - k:] != small):
        raise ShapeError(f"op '{op}': shape {small} is not a suffix of {big}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over the leading axes introduced by suffix broadcast."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


def _elementwise_pair(op: str, a: Tensor, b: Tensor):
    """Return (a_data, b_data) after validating the suffix-broadcast rule."""
    if a.shape == b.shape:
        return
    if len(a.shape) >= len(b.shape):
        _suffix_check(op, a.shape, b.shape)
    else:
        _suffix_check(op, b.shape, a.shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _elementwise_pair("add", a, b)
    out_data = a.data + b.data

    def backward_fn(g):
        _accumulate(a, _reduce_to(g, a.shape))
        _accumulate(b, _reduce_to(g, b.shape))

    return _make(out_data, "add", (a, b), backward_fn)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _elementwise_pair("sub", a, b)
    out_data = a.data - b.data

    def backward_fn(g):
        _accumulate(a, _reduce_to(g, a.shape))
        _accumulate(b, _reduce_to(-g, b.shape))

    return _make(out_data, "sub", (a, b), backward_fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _elementwise_pair("mul", a, b)
    out_data = a.data * b.data

    def backward_fn(g):
        _accumulate(a, _reduce_to(g * b.data, a.shape))
        _accumulate(b, _reduce_to(g * a.data, b.shape))

    return _make(out_data, "mul", (a, b), backward_fn)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _elementwise_pair("div", a, b)
    out_data = a.data / b.data

    def backward_fn(g):
        _accumulate(a, _reduce_to(g / b.data, a.shape))
        _accumulate(b, _reduce_to(-g * a.data / (b.data * b.data), b.shape))

    return _make(out_data, "div", (a, b), backward_fn)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def backward_fn(g):
        _accumulate(a, -g)

    return _make(-a.data, "neg", (a,), backward_fn)


def matmul(a, b) -> Tensor:
    """Stacked matrix product.

    Both operands must have rank >= 2. Leading (batch) dimensions must
    be identical, or one operand may be a plain rank-2 matrix shared
    across the other's batch.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"op 'matmul': operands must be rank>=2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"op 'matmul': inner dims differ, {a.shape} @ {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"op 'matmul': batch dims differ, {a.shape} @ {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def backward_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _accumulate(a, _reduce_to(ga, a.shape))
        _accumulate(b, _reduce_to(gb, b.shape))

    return _make(out_data, "matmul", (a, b), backward_fn)


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"op 'transpose': axes {axes} invalid for shape {a.shape}")
    inverse = tuple(np.argsort(axes))

    def backward_fn(g):
        _accumulate(a, g.transpose(inverse))

    return _make(a.data.transpose(axes), "transpose", (a,), backward_fn)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out_data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"op 'reshape': cannot reshape {a.shape} to {shape}") from exc
    old_shape = a.shape

    def backward_fn(g):
        _accumulate(a, g.reshape(old_shape))

    return _make(out_data, "reshape", (a,), backward_fn)


def repeat_axis(a, axis: int, reps: int) -> Tensor:
    """Tile a size-1 axis to ``reps`` copies (explicit inner broadcast)."""
    a = as_tensor(a)
    axis = axis if axis >= 0 else a.ndim + axis
    if a.shape[axis] != 1:
        raise ShapeError(f"op 'repeat_axis': axis {axis} of {a.shape} is not size 1")

    def backward_fn(g):
        _accumulate(a, g.sum(axis=axis, keepdims=True))

    return _make(np.repeat(a.data, reps, axis=axis), "repeat_axis", (a,), backward_fn)


def concat(parts: Sequence, axis: int) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("op 'concat': no operands")
    ndim = parts[0].ndim
    axis = axis if axis >= 0 else ndim + axis
    for p in parts[1:]:
        if p.ndim != ndim:
            raise ShapeError(f"op 'concat': rank mismatch {[q.shape for q in parts]}")
        for d in range(ndim):
            if d != axis and p.shape[d] != parts[0].shape[d]:
                raise ShapeError(f"op 'concat': shapes {[q.shape for q in parts]} on axis {axis}")
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]

    def backward_fn(g):
        offset = 0
        for p, n in zip(parts, sizes):
            sl = [slice(None)] * ndim
            sl[axis] = slice(offset, offset + n)
            _accumulate(p, g[tuple(sl)])
            offset += n

    return _make(out_data, "concat", tuple(parts), backward_fn)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    axis = axis if axis >= 0 else a.ndim + axis
    if not (0 <= start <= stop <= a.shape[axis]):
        raise ShapeError(f"op 'slice_axis': [{start}:{stop}] invalid for axis {axis} of {a.shape}")
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)

    def backward_fn(g):
        full = np.zeros_like(a.data)
        full[sl] = g
        _accumulate(a, full)

    return _make(a.data[sl].copy(), "slice_axis", (a,), backward_fn)


def gather_rows(table, ids) -> Tensor:
    """Select rows of a rank-2 table by integer index array.

    ``table`` is (N, D); ``ids`` any integer shape S. Output S + (D,).
    Backward scatter-adds into the selected rows.
    """
    table = as_tensor(table)
    if table.ndim != 2:
        raise ShapeError(f"op 'gather_rows': table must be rank 2, got {table.shape}")
    idx = np.asarray(ids)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError("op 'gather_rows': ids must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"op 'gather_rows': ids out of range for table {table.shape}")

    def backward_fn(g):
        if table.requires_grad or table._backward_fn is not None:
            acc = np.zeros_like(table.data)
            np.add.at(acc, idx.reshape(-1), g.reshape(-1, table.shape[1]))
            _accumulate(table, acc)

    return _make(table.data[idx], "gather_rows", (table,), backward_fn)


def gather_last(a, ids) -> Tensor:
    """Pick one entry along the last axis: out[...] = a[..., ids[...]]."""
    a = as_tensor(a)
    idx = np.asarray(ids)
    if idx.shape != a.shape[:-1]:
        raise ShapeError(f"op 'gather_last': ids shape {idx.shape} != {a.shape[:-1]}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[-1]):
        raise ShapeError(f"op 'gather_last': ids out of range for {a.shape}")
    out_data = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        _accumulate(a, full)

    return _make(out_data, "gather_last", (a,), backward_fn)


def tsum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is None:
            _accumulate(a, np.full(a.shape, float(np.asarray(g).reshape(()))))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(gg, a.shape).copy())

    return _make(np.asarray(out_data), "sum", (a,), backward_fn)


def tmean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    if count == 0:
        raise ShapeError("op 'mean': reduction over zero elements")
    out_data = a.data.mean(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is None:
            _accumulate(a, np.full(a.shape, float(np.asarray(g).reshape(())) / count))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(gg / count, a.shape).copy())

    return _make(np.asarray(out_data), "mean", (a,), backward_fn)


def softmax(a) -> Tensor:
    """Softmax over the last axis (numerically stabilized)."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        _accumulate(a, y * (g - dot))

    return _make(y, "softmax", (a,), backward_fn)


def log_softmax(a) -> Tensor:
    """Log-softmax over the last axis (numerically stabilized)."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out_data = shifted - lse
    y = np.exp(out_data)

    def backward_fn(g):
        _accumulate(a, g - y * g.sum(axis=-1, keepdims=True))

    return _make(out_data, "log_softmax", (a,), backward_fn)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward_fn(g):
        _accumulate(a, g * out_data)

    return _make(out_data, "exp", (a,), backward_fn)


def log(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.log(a.data)

    def backward_fn(g):
        _accumulate(a, g / a.data)

    return _make(out_data, "log", (a,), backward_fn)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def backward_fn(g):
        _accumulate(a, g * 0.5 / out_data)

    return _make(out_data, "sqrt", (a,), backward_fn)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def backward_fn(g):
        _accumulate(a, g * (1.0 - out_data * out_data))

    return _make(out_data, "tanh", (a,), backward_fn)


def gelu(a) -> Tensor:
    """Smooth GELU (tanh form); composed from primitives."""
    a = as_tensor(a)
    cubic = mul(mul(a, a), a)
    inner = mul(add(a, mul(cubic, 0.044715)), 0.7978845608028654)
    return mul(mul(a, 0.5), add(tanh(inner), 1.0))


def backward(output: Tensor) -> None:
    """Reverse-mode sweep from a scalar output.

    Leaf parameters accumulate into existing ``grad`` buffers across
    repeated calls; zero them first for a fresh result. Interior nodes
    use ``grad`` as a scratch cotangent buffer and are cleared on exit.
    Raises on non-scalar outputs and on outputs detached from every
    differentiable input.
    """
    if output.data.size != 1:
        raise GraphError(f"backward requires a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        raise GraphError("output is detached: no differentiable inputs feed it")

    # Post-order DFS: parents come before children, output last.
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    # Interior nodes must start from a clean cotangent buffer.
    for node in order:
        if node._backward_fn is not None:
            node.grad = None

    if output._backward_fn is None:
        _accumulate(output, np.ones_like(output.data))
        return
    output.grad = np.ones_like(output.data)

    for node in reversed(order):
        fn = node._backward_fn
        if fn is None or node.grad is None:
            continue
        g = node.grad
        node.grad = None  # free interior buffer before fanning out
        fn(g)


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()


# ---------------------------------------------------------------------------
# Parameter store and its on-disk format.

_MAGIC = b"COMDAD1"


class ParamStore:
    """Named collection of learnable tensors.

    All entries require gradients; names are unique and shapes are
    fixed at creation. ``version`` counts optimizer steps. The binary
    format is: magic ``COMDAD1``, then per entry (insertion order):
    u32 name length, name bytes (utf-8), u32 rank, u32 per dimension,
    raw little-endian float64 values. Round-trips are bit-exact.
    """

    def __init__(self):
        self._entries: dict[str, Tensor] = {}
        self.version = 0

    def add(self, name: str, value) -> Tensor:
        if name in self._entries:
            raise ValueError(f"parameter {name!r} already exists")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def subset(self, prefixes: Sequence[str]) -> list[str]:
        """Names matching any dotted prefix, in insertion order."""
        return [n for n in self._entries
                if any(n == p or n.startswith(p + ".") for p in prefixes)]

    def zero_grads(self) -> None:
        for t in self._entries.values():
            t.zero_grad()

    def to_bytes(self) -> bytes:
        chunks = [_MAGIC]
        for name, t in self._entries.items():
            encoded = name.encode("utf-8")
            chunks.append(struct.pack("<I", len(encoded)))
            chunks.append(encoded)
            chunks.append(struct.pack("<I", t.ndim))
            chunks.append(struct.pack(f"<{t.ndim}I", *t.shape))
            chunks.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return b"".join(chunks)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ParamStore":
        if blob[: len(_MAGIC)] != _MAGIC:
            raise ValueError("bad parameter file: magic mismatch")
        store = cls()
        offset = len(_MAGIC)
        while offset < len(blob):
            (name_len,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            name = blob[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            dims = struct.unpack_from(f"<{rank}I", blob, offset)
            offset += 4 * rank
            count = int(np.prod(dims, dtype=np.int64)) if rank else 1
            values = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
            offset += 8 * count
            store.add(name, values.astype(np.float64).reshape(dims))
        return store

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ParamStore":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


# ---------------------------------------------------------------------------
# Finite-difference gradient verification.

@dataclass
class GradCheckReport:
    """Per-parameter analytic-vs-numeric comparison."""

    tolerance: float
    step: float
    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def max_rel_error(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def summary(self) -> str:
        lines = [f"{'PASS' if self.passed else 'FAIL'} "
                 f"max_rel_error={self.max_rel_error:.3e} tolerance={self.tolerance:.1e}"]
        for name, err in sorted(self.per_param.items(), key=lambda kv: -kv[1]):
            lines.append(f"  {name}: {err:.3e}")
        return "\n".join(lines)


def grad_check(loss_fn: Callable[[], Tensor], params: "ParamStore | dict[str, Tensor]",
               step: float = 1e-5, tolerance: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    ``loss_fn`` must rebuild the scalar loss from the parameters' current
    values on every call. ``step`` is the central-difference half-width.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    entries = dict(params.items()) if isinstance(params, ParamStore) else dict(params)

    for t in entries.values():
        t.zero_grad()
    out = loss_fn()
    backward(out)
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for name, t in entries.items()}

    report = GradCheckReport(tolerance=tolerance, step=step)
    for name, t in entries.items():
        flat = t.data.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            up = loss_fn().item()
            flat[i] = original - step
            down = loss_fn().item()
            flat[i] = original
            numeric = (up - down) / (2.0 * step)
            a = analytic[name].reshape(-1)[i]
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
        report.per_param[name] = worst
    return report
