"""Dense tensors with reverse-mode automatic differentiation on a per-step tape.

Tensors wrap a row-major numpy buffer. Every differentiable operation appends
an entry to the active tape; ``backward`` on a scalar replays the tape in
reverse record order exactly once, accumulating gradients additively into
every tensor that requires them. Broadcasting is deliberately restricted to
scalar-vs-tensor and equal shapes; anything richer (row biases, per-row
scaling) is a dedicated op with its own backward rule.

Precision is selectable per process: float64 is the default (tight gradient
checks), training switches to float32 via ``set_default_dtype``.
"""

from __future__ import annotations

import json
import struct
from typing import Callable, Iterable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.dtype(np.float64)

CHECKPOINT_MAGIC = b"VOX2SURF-CKPT\x00\x00\x00"


def set_default_dtype(dtype) -> None:
    """Set the scalar precision used for newly created tensors."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dt}; need float32 or float64")
    _DEFAULT_DTYPE = dt


def default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


class _TapeEntry:
    __slots__ = ("out", "backward")

    def __init__(self, out: "Tensor", backward: Callable):
        self.out = out
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Entries are appended in execution order, so every entry's inputs were
    produced by strictly earlier entries (or are leaves). The backward pass
    walks the record once, in reverse.
    """

    def __init__(self):
        self.entries: list[_TapeEntry] = []

    def record(self, out: "Tensor", backward: Callable) -> None:
        out.node = len(self.entries)
        self.entries.append(_TapeEntry(out, backward))

    def clear(self) -> None:
        self.entries.clear()

    def __len__(self) -> int:
        return len(self.entries)


_ACTIVE_TAPE = Tape()


def active_tape() -> Tape:
    return _ACTIVE_TAPE


def reset_tape() -> None:
    """Discard all recorded operations. Called once per training step."""
    _ACTIVE_TAPE.clear()


class Tensor:
    """Dense n-dimensional array of scalars carrying an optional gradient.

    ``data`` is the row-major buffer (last axis fastest), ``grad`` an optional
    buffer of the same shape, and ``node`` the index of the producing entry on
    the tape (None for leaves and detached tensors).
    """

    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        dt = np.dtype(dtype) if dtype is not None else _DEFAULT_DTYPE
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dt))
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node: int | None = None

    # -- basic introspection ------------------------------------------------

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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # -- gradient bookkeeping ----------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """A tensor sharing this buffer but cut from the tape; never
        accumulates gradient."""
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.grad = None
        t.requires_grad = False
        t.node = None
        return t

    def backward(self) -> None:
        backward(self)

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return pow_(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def tanh(self):
        return tanh(self)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _record(out: Tensor, backward: Callable) -> Tensor:
    out.requires_grad = True
    _ACTIVE_TAPE.record(out, backward)
    return out


def _needs_tape(*tensors: Tensor) -> bool:
    return any(t.requires_grad for t in tensors)


# -- backward driver --------------------------------------------------------


def backward(root: Tensor) -> None:
    """Populate ``grad`` for every tape tensor upstream of a scalar root.

    Accumulation is additive: calling backward twice without zeroing doubles
    every gradient. The pass visits each recorded operation at most once, in
    reverse record order.
    """
    if root.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.shape}")
    if root.node is None:
        raise ValueError("backward root is not on the tape")
    entries = _ACTIVE_TAPE.entries
    scratch: dict[int, np.ndarray] = {}
    seen: dict[int, Tensor] = {}
    scratch[id(root)] = np.ones_like(root.data)
    seen[id(root)] = root
    for entry in reversed(entries[: root.node + 1]):
        g = scratch.get(id(entry.out))
        if g is None:
            continue
        for tensor, contrib in entry.backward(g):
            if not tensor.requires_grad:
                continue
            key = id(tensor)
            if key in scratch:
                scratch[key] = scratch[key] + contrib
            else:
                scratch[key] = contrib
                seen[key] = tensor
    for key, tensor in seen.items():
        if tensor.requires_grad:
            g = scratch[key].astype(tensor.dtype, copy=False)
            tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g


# -- elementwise ops --------------------------------------------------------


def _binary_shapes(a: Tensor, b: Tensor, opname: str) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ValueError(f"{opname}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # only the scalar-vs-tensor case ever needs reduction
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape) if int(np.prod(shape)) == 1 else g


def add(a, b) -> Tensor:
    a = _as_tensor(a, _DEFAULT_DTYPE)
    b = _as_tensor(b, a.dtype)
    _binary_shapes(a, b, "add")
    out = Tensor(a.data + b.data)
    if _needs_tape(a, b):
        def bwd(g):
            return ((a, _reduce_to(g, a.shape)), (b, _reduce_to(g, b.shape)))
        _record(out, bwd)
    return out


def sub(a, b) -> Tensor:
    a = _as_tensor(a, _DEFAULT_DTYPE)
    b = _as_tensor(b, a.dtype)
    _binary_shapes(a, b, "sub")
    out = Tensor(a.data - b.data)
    if _needs_tape(a, b):
        def bwd(g):
            return ((a, _reduce_to(g, a.shape)), (b, _reduce_to(-g, b.shape)))
        _record(out, bwd)
    return out


def mul(a, b) -> Tensor:
    a = _as_tensor(a, _DEFAULT_DTYPE)
    b = _as_tensor(b, a.dtype)
    _binary_shapes(a, b, "mul")
    out = Tensor(a.data * b.data)
    if _needs_tape(a, b):
        ad, bd = a.data, b.data
        def bwd(g):
            return ((a, _reduce_to(g * bd, a.shape)), (b, _reduce_to(g * ad, b.shape)))
        _record(out, bwd)
    return out


def div(a, b) -> Tensor:
    a = _as_tensor(a, _DEFAULT_DTYPE)
    b = _as_tensor(b, a.dtype)
    _binary_shapes(a, b, "div")
    out = Tensor(a.data / b.data)
    if _needs_tape(a, b):
        ad, bd = a.data, b.data
        def bwd(g):
            return (
                (a, _reduce_to(g / bd, a.shape)),
                (b, _reduce_to(-g * ad / (bd * bd), b.shape)),
            )
        _record(out, bwd)
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    if _needs_tape(a):
        _record(out, lambda g: ((a, -g),))
    return out


def pow_(a: Tensor, exponent: float) -> Tensor:
    p = float(exponent)
    out = Tensor(a.data ** p)
    if _needs_tape(a):
        ad = a.data
        _record(out, lambda g: ((a, g * p * ad ** (p - 1.0)),))
    return out


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data))
    if _needs_tape(a):
        od = out.data
        _record(out, lambda g: ((a, g * od),))
    return out


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))
    if _needs_tape(a):
        ad = a.data
        _record(out, lambda g: ((a, g / ad),))
    return out


def sqrt(a: Tensor) -> Tensor:
    out = Tensor(np.sqrt(a.data))
    if _needs_tape(a):
        od = out.data
        _record(out, lambda g: ((a, g / (2.0 * od)),))
    return out


def safe_sqrt(a: Tensor) -> Tensor:
    """sqrt clamped at zero, with a zero subgradient there instead of the
    infinite one of the exact derivative."""
    out = Tensor(np.sqrt(np.maximum(a.data, 0.0)))
    if _needs_tape(a):
        od = out.data
        scale = np.where(od > 0.0, 0.5 / np.where(od > 0.0, od, 1.0), 0.0)
        _record(out, lambda g: ((a, g * scale),))
    return out


def tanh(a: Tensor) -> Tensor:
    out = Tensor(np.tanh(a.data))
    if _needs_tape(a):
        od = out.data
        _record(out, lambda g: ((a, g * (1.0 - od * od)),))
    return out


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    mask = a.data > 0.0
    out = Tensor(np.where(mask, a.data, slope * a.data))
    if _needs_tape(a):
        _record(out, lambda g: ((a, np.where(mask, g, slope * g)),))
    return out


# -- shape ops --------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    if _needs_tape(a):
        orig = a.shape
        _record(out, lambda g: ((a, g.reshape(orig)),))
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    if _needs_tape(*tensors):
        sizes = [t.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]
        def bwd(g):
            pieces = np.split(g, splits, axis=axis)
            return tuple(zip(tensors, pieces))
        _record(out, bwd)
    return out


def sum_(a: Tensor, axis=None) -> Tensor:
    out = Tensor(np.sum(a.data, axis=axis))
    if _needs_tape(a):
        shape = a.shape
        def bwd(g):
            if axis is None:
                return ((a, np.broadcast_to(g, shape).copy()),)
            return ((a, np.broadcast_to(np.expand_dims(g, axis), shape).copy()),)
        _record(out, bwd)
    return out


def mean(a: Tensor, axis=None) -> Tensor:
    out = Tensor(np.mean(a.data, axis=axis))
    if _needs_tape(a):
        shape = a.shape
        n = a.size if axis is None else shape[axis]
        def bwd(g):
            if axis is None:
                return ((a, np.broadcast_to(g / n, shape).copy()),)
            return ((a, np.broadcast_to(np.expand_dims(g / n, axis), shape).copy()),)
        _record(out, bwd)
    return out


# -- linear algebra ---------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dimensions differ, {a.shape} vs {b.shape}")
    out = Tensor(a.data @ b.data)
    if _needs_tape(a, b):
        ad, bd = a.data, b.data
        def bwd(g):
            return ((a, g @ bd.T), (b, ad.T @ g))
        _record(out, bwd)
    return out


# -- indexed / segmented ops ------------------------------------------------


def scatter_rows(idx: np.ndarray, rows: np.ndarray, out_rows: int) -> np.ndarray:
    """Sum ``rows`` into an ``[out_rows, ...]`` buffer keyed by leading index.

    Accumulates in float64 via bincount (much faster than np.add.at and
    order-independent), then casts back to the input dtype.
    """
    flat = rows.reshape(rows.shape[0], -1)
    c = flat.shape[1]
    keys = (idx[:, None] * c + np.arange(c, dtype=np.intp)).reshape(-1)
    acc = np.bincount(keys, weights=flat.reshape(-1), minlength=out_rows * c)
    return acc.reshape((out_rows,) + rows.shape[1:]).astype(rows.dtype, copy=False)


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows of ``a`` by integer index; backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.intp)
    out = Tensor(a.data[idx])
    if _needs_tape(a):
        rows = a.shape[0]
        _record(out, lambda g: ((a, scatter_rows(idx, g, rows)),))
    return out


def segment_sum(a: Tensor, seg: np.ndarray, num_segments: int) -> Tensor:
    """Sum rows of ``a`` into ``num_segments`` buckets given per-row ids."""
    seg = np.asarray(seg, dtype=np.intp)
    out = Tensor(scatter_rows(seg, a.data, num_segments))
    if _needs_tape(a):
        _record(out, lambda g: ((a, g[seg]),))
    return out


def scale_rows(a: Tensor, s) -> Tensor:
    """Multiply each row of a rank-2 tensor by a per-row scalar."""
    s = _as_tensor(s, a.dtype)
    if s.ndim != 1 or a.ndim != 2 or s.shape[0] != a.shape[0]:
        raise ValueError(f"scale_rows: shapes {a.shape} and {s.shape} do not align")
    out = Tensor(a.data * s.data[:, None])
    if _needs_tape(a, s):
        ad, sd = a.data, s.data
        def bwd(g):
            return ((a, g * sd[:, None]), (s, np.sum(g * ad, axis=1)))
        _record(out, bwd)
    return out


def add_bias(a: Tensor, b: Tensor) -> Tensor:
    """Add a length-F bias vector to every row of an [N, F] tensor."""
    if a.ndim != 2 or b.ndim != 1 or a.shape[1] != b.shape[0]:
        raise ValueError(f"add_bias: shapes {a.shape} and {b.shape} do not align")
    out = Tensor(a.data + b.data[None, :])
    if _needs_tape(a, b):
        def bwd(g):
            return ((a, g), (b, np.sum(g, axis=0)))
        _record(out, bwd)
    return out


# -- 3D convolution ---------------------------------------------------------


def _conv3d_out_extent(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv3d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate a [C,D,H,W] volume with a [C',C,k,k,k] kernel."""
    if x.ndim != 4 or kernel.ndim != 5:
        raise ValueError(f"conv3d: need [C,D,H,W] and [C',C,k,k,k], got {x.shape} and {kernel.shape}")
    co, ci, k1, k2, k3 = kernel.shape
    if not (k1 == k2 == k3) or k1 % 2 == 0:
        raise ValueError(f"conv3d: kernel must be cubic with odd extent, got {kernel.shape[2:]}")
    if ci != x.shape[0]:
        raise ValueError(f"conv3d: input channels {x.shape[0]} != kernel channels {ci}")
    k = k1
    c, d, h, w = x.shape
    od = _conv3d_out_extent(d, k, stride, padding)
    oh = _conv3d_out_extent(h, k, stride, padding)
    ow = _conv3d_out_extent(w, k, stride, padding)
    if od <= 0 or oh <= 0 or ow <= 0:
        raise ValueError(
            f"conv3d: output extent non-positive for input {x.shape[1:]}, "
            f"kernel {k}, stride {stride}, padding {padding}")

    xp = np.pad(x.data, ((0, 0), (padding,) * 2, (padding,) * 2, (padding,) * 2))
    # im2col: windows -> (C*k^3, od*oh*ow)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))
    win = win[:, ::stride, ::stride, ::stride]
    col = win.reshape(c, od * oh * ow, k ** 3).transpose(0, 2, 1).reshape(c * k ** 3, -1)
    kmat = kernel.data.reshape(co, ci * k ** 3)
    out_data = (kmat @ col).reshape(co, od, oh, ow)
    if bias is not None:
        out_data = out_data + bias.data[:, None, None, None]
    out = Tensor(out_data)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    if _needs_tape(*inputs):
        col_saved = col
        pad_shape = xp.shape
        def bwd(g):
            gmat = g.reshape(co, -1)
            grads = []
            if kernel.requires_grad:
                gk = (gmat @ col_saved.T).reshape(kernel.shape)
                grads.append((kernel, gk))
            if x.requires_grad:
                dcol = (kmat.T @ gmat).reshape(c, k, k, k, od, oh, ow)
                dxp = np.zeros(pad_shape, dtype=g.dtype)
                for i in range(k):
                    for j in range(k):
                        for l in range(k):
                            dxp[:, i:i + stride * od:stride,
                                j:j + stride * oh:stride,
                                l:l + stride * ow:stride] += dcol[:, i, j, l]
                if padding:
                    dxp = dxp[:, padding:padding + d, padding:padding + h,
                              padding:padding + w]
                grads.append((x, dxp))
            if bias is not None and bias.requires_grad:
                grads.append((bias, np.sum(g, axis=(1, 2, 3))))
            return grads
        _record(out, bwd)
    return out


def upsample_nearest2(x: Tensor) -> Tensor:
    """Double each spatial extent of a [C,D,H,W] volume by voxel repetition."""
    if x.ndim != 4:
        raise ValueError(f"upsample_nearest2: need [C,D,H,W], got {x.shape}")
    out = Tensor(x.data.repeat(2, axis=1).repeat(2, axis=2).repeat(2, axis=3))
    if _needs_tape(x):
        c, d, h, w = x.shape
        def bwd(g):
            return ((x, g.reshape(c, d, 2, h, 2, w, 2).sum(axis=(2, 4, 6))),)
        _record(out, bwd)
    return out


# -- custom-op hook ---------------------------------------------------------


def apply_op(out_data: np.ndarray, inputs: Sequence[Tensor],
             backward: Callable) -> Tensor:
    """Wrap an externally computed forward result as a tape operation.

    ``backward(g)`` must return (tensor, grad) pairs for the given inputs.
    Used by modules that define ops with non-trivial gather/scatter rules
    (trilinear sampling, for instance) without widening this module.
    """
    out = Tensor(out_data)
    if _needs_tape(*inputs):
        _record(out, backward)
    return out


# -- parameter checkpoint ---------------------------------------------------
#
# Layout: 16-byte magic, little-endian uint64 header length, UTF-8 JSON
# header, then the raw little-endian scalar payloads back to back. The header
# holds {"meta": {...}, "params": [{"name", "shape", "dtype", "offset",
# "nbytes"}, ...]} with offsets relative to the end of the header.


def save_checkpoint(path, params: dict[str, Tensor], meta: dict | None = None) -> None:
    entries = []
    payloads = []
    offset = 0
    for name in sorted(params):
        t = params[name]
        arr = np.ascontiguousarray(t.data, dtype=t.data.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        entries.append({
            "name": name,
            "shape": list(t.shape),
            "dtype": str(np.dtype(t.data.dtype).name),
            "offset": offset,
            "nbytes": len(raw),
        })
        payloads.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "params": entries},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for raw in payloads:
            f.write(raw)


def load_checkpoint(path) -> tuple[dict[str, Tensor], dict]:
    with open(path, "rb") as f:
        magic = f.read(16)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        body = f.read()
    params: dict[str, Tensor] = {}
    for e in header["params"]:
        dt = np.dtype(e["dtype"]).newbyteorder("<")
        raw = body[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=dt).reshape(e["shape"]).astype(e["dtype"])
        params[e["name"]] = Tensor(arr, requires_grad=True, dtype=e["dtype"])
    return params, header.get("meta", {})


def parameters_as_dict(named: Iterable[tuple[str, Tensor]]) -> dict[str, Tensor]:
    return dict(named)
