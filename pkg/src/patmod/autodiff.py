"""Dense float64 tensors with reverse-mode differentiation on an explicit tape.

A ``Tape`` is an append-only list of operation nodes built during one forward
pass.  Appending at execution time guarantees topological order, so a single
reverse sweep in ``backward`` visits every node after all of its consumers.
Tensors without a ``node_id`` are constants; gradients flow only into tensors
that were produced on the tape or explicitly watched as parameters.

Tapes are single-use: ``backward`` freezes the tape and the caller discards it.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError

Array = np.ndarray


def _as_array(values) -> Array:
    arr = np.asarray(values, dtype=np.float64)
    return arr


class DTensor:
    """A dense n-dimensional float64 value, optionally attached to a tape."""

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, tape: "Tape | None" = None, node_id: int | None = None):
        self.data = _as_array(data)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> Array:
        return self.data

    def __repr__(self) -> str:
        tag = f", node={self.node_id}" if self.node_id is not None else ""
        return f"DTensor(shape={self.shape}{tag})"

    # Operator sugar; all arithmetic routes through the module-level ops so
    # that tape recording happens in exactly one place.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(values) -> DTensor:
    """Wrap values as a tape-less DTensor."""
    return DTensor(values)


def _coerce(t) -> DTensor:
    return t if isinstance(t, DTensor) else DTensor(t)


class Node:
    """One recorded operation: kind tag, producing inputs, backward rule."""

    __slots__ = ("kind", "inputs", "backward")

    def __init__(self, kind: str, inputs: tuple, backward: Callable | None):
        self.kind = kind
        self.inputs = inputs  # node ids (or None for constant slots)
        self.backward = backward  # grad_out -> list of grads aligned with inputs


class Parameter:
    """A named, persistent tensor updated by the optimizer."""

    __slots__ = ("name", "tensor", "trainable", "grad")

    def __init__(self, name: str, values, trainable: bool = True):
        self.name = name
        self.tensor = _coerce(values)
        self.trainable = trainable
        self.grad: Array | None = None

    @property
    def data(self) -> Array:
        return self.tensor.data

    @data.setter
    def data(self, values: Array) -> None:
        self.tensor.data = _as_array(values)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.tensor.shape})"


class Tape:
    """Append-only gradient tape for one forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.frozen = False
        self._param_nodes: dict[int, Parameter] = {}

    def _record(self, kind: str, data: Array, input_ids: tuple, backward) -> DTensor:
        if self.frozen:
            raise ContractError("cannot record on a frozen tape")
        self.nodes.append(Node(kind, input_ids, backward))
        return DTensor(data, tape=self, node_id=len(self.nodes) - 1)

    def watch(self, param: Parameter) -> DTensor:
        """Register a parameter as a leaf and return its on-tape tensor."""
        t = self._record("leaf", param.tensor.data, (), None)
        self._param_nodes[t.node_id] = param
        return t

    def leaf(self, values) -> DTensor:
        """Place a constant input on the tape (gradients computed but unnamed)."""
        return self._record("leaf", _as_array(values), (), None)


def _tape_of(tensors: Iterable[DTensor]) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise ContractError("operands live on different tapes")
    return tape


def _node_ids(tensors: Sequence[DTensor], tape: Tape | None) -> tuple:
    return tuple(t.node_id if t.tape is tape and tape is not None else None for t in tensors)


def _emit(kind: str, data: Array, inputs: Sequence[DTensor], backward) -> DTensor:
    tape = _tape_of(inputs)
    if tape is None:
        return DTensor(data)
    return tape._record(kind, data, _node_ids(inputs, tape), backward)


# ---------------------------------------------------------------------------
# broadcasting helpers (only rule: a 1xd row over an nxd matrix)


def _broadcast_pair(a: Array, b: Array, op: str):
    if a.shape == b.shape:
        return None
    if a.ndim == 2 and b.ndim == 2:
        if a.shape[1] == b.shape[1] and (b.shape[0] == 1 or a.shape[0] == 1):
            return "row"
        if a.shape[0] == b.shape[0] and (b.shape[1] == 1 or a.shape[1] == 1):
            return "col"
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    if grad.shape == shape:
        return grad
    if shape[0] == 1:
        return grad.sum(axis=0, keepdims=True)
    return grad.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> DTensor:
    a, b = _coerce(a), _coerce(b)
    _broadcast_pair(a.data, b.data, "add")
    out = a.data + b.data

    def backward(g):
        return [_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)]

    return _emit("add", out, (a, b), backward)


def sub(a, b) -> DTensor:
    a, b = _coerce(a), _coerce(b)
    _broadcast_pair(a.data, b.data, "sub")
    out = a.data - b.data

    def backward(g):
        return [_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)]

    return _emit("sub", out, (a, b), backward)


def mul(a, b) -> DTensor:
    a, b = _coerce(a), _coerce(b)
    _broadcast_pair(a.data, b.data, "mul")
    ad, bd = a.data, b.data
    out = ad * bd

    def backward(g):
        return [_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)]

    return _emit("mul", out, (a, b), backward)


def scale(a, c: float) -> DTensor:
    a = _coerce(a)
    c = float(c)
    out = a.data * c

    def backward(g):
        return [g * c]

    return _emit("scale", out, (a,), backward)


def relu(a) -> DTensor:
    a = _coerce(a)
    out = np.maximum(a.data, 0.0)

    def backward(g):
        return [g * (out > 0.0)]

    return _emit("relu", out, (a,), backward)


_TANH_LIM = np.nextafter(1.0, 0.0)


def tanh(a) -> DTensor:
    a = _coerce(a)
    # keep outputs strictly inside (-1, 1): float64 tanh saturates to 1.0 above ~19
    out = np.clip(np.tanh(a.data), -_TANH_LIM, _TANH_LIM)

    def backward(g):
        return [g * (1.0 - out * out)]

    return _emit("tanh", out, (a,), backward)


_ELEMENTWISE = {"relu": relu, "tanh": tanh, "add": add, "sub": sub, "mul": mul, "scale": scale}


def elementwise(op: str, *args) -> DTensor:
    """Dispatch-by-name front end for the elementwise family."""
    if op not in _ELEMENTWISE:
        raise ContractError(f"unknown elementwise op {op!r}")
    return _ELEMENTWISE[op](*args)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> DTensor:
    a, b = _coerce(a), _coerce(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul: expects matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions disagree, {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def backward(g):
        return [g @ bd.T, ad.T @ g]

    return _emit("matmul", out, (a, b), backward)


def _apply_activation(out: Array, activation: str | None) -> None:
    if activation == "relu":
        np.maximum(out, 0.0, out=out)
    elif activation == "tanh":
        np.tanh(out, out=out)
        np.clip(out, -_TANH_LIM, _TANH_LIM, out=out)
    elif activation is not None:
        raise ContractError(f"unknown activation {activation!r}")


def _activation_grad(g: Array, out: Array, activation: str | None) -> Array:
    if activation == "relu":
        return g * (out > 0.0)
    if activation == "tanh":
        return g * (1.0 - out * out)
    return g


def linear(x, w, b, activation: str | None = None) -> DTensor:
    """Fully connected layer x @ w + b with an optionally fused activation.

    ``b`` is a 1 x n row (a plain bias, or bias plus a feature projection).
    One tape node; the bias add and activation run in place on the fresh
    matmul output, which matters on memory-bound hosts.
    """
    x, w, b = _coerce(x), _coerce(w), _coerce(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"linear: incompatible shapes {x.shape} x {w.shape}")
    if b.shape != (1, w.shape[1]):
        raise DimensionError(f"linear: bias must be 1x{w.shape[1]}, got {b.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd
    out += b.data[0]
    _apply_activation(out, activation)

    def backward(g):
        g = _activation_grad(g, out, activation)
        return [g @ wd.T, xd.T @ g, g.sum(axis=0, keepdims=True)]

    return _emit("linear", out, (x, w, b), backward)


def linear_blockfeat(x, feats, w_x, w_f, b, block_rows: int, activation: str | None = None) -> DTensor:
    """Fully connected layer over [x | feature] where the feature is constant
    within each block of ``block_rows`` consecutive rows.

    Computes x @ w_x + feats @ w_f + b without materializing the wide
    concatenated input: row block i receives the projection of feats[i].
    """
    x, feats, w_x, w_f, b = (_coerce(t) for t in (x, feats, w_x, w_f, b))
    n_out = w_x.shape[1]
    n_blocks = feats.shape[0]
    if x.shape[0] != n_blocks * block_rows:
        raise DimensionError(
            f"linear_blockfeat: {n_blocks} blocks of {block_rows} rows need "
            f"{n_blocks * block_rows} rows, got {x.shape[0]}"
        )
    if x.shape[1] != w_x.shape[0] or feats.shape[1] != w_f.shape[0] or w_f.shape[1] != n_out:
        raise DimensionError(
            f"linear_blockfeat: incompatible shapes x{x.shape} wx{w_x.shape} "
            f"f{feats.shape} wf{w_f.shape}"
        )
    if b.shape != (1, n_out):
        raise DimensionError(f"linear_blockfeat: bias must be 1x{n_out}, got {b.shape}")
    xd, fd = x.data, feats.data
    rows = fd @ w_f.data
    rows += b.data[0]
    out = xd @ w_x.data
    out.reshape(n_blocks, block_rows, n_out)[...] += rows[:, None, :]
    _apply_activation(out, activation)
    wxd, wfd = w_x.data, w_f.data

    def backward(g):
        g = _activation_grad(g, out, activation)
        rows_g = g.reshape(n_blocks, block_rows, n_out).sum(axis=1)
        return [
            g @ wxd.T,
            rows_g @ wfd.T,
            xd.T @ g,
            fd.T @ rows_g,
            rows_g.sum(axis=0, keepdims=True),
        ]

    return _emit("linear_blockfeat", out, (x, feats, w_x, w_f, b), backward)


def conv2d(x, kernel, stride: int = 1, pad: int = 0) -> DTensor:
    """Direct cross-correlation of a CxHxW input with an OxCxkxk kernel.

    Accumulates over kernel taps (no im2col); H' = (H + 2*pad - k)//stride + 1.
    """
    x, kernel = _coerce(x), _coerce(kernel)
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise DimensionError(f"conv2d: expects CxHxW and OxCxkxk, got {x.shape}, {kernel.shape}")
    if stride < 1:
        raise DomainError(f"conv2d: stride must be >= 1, got {stride}")
    c_in, h, w = x.shape
    c_out, c_k, kh, kw = kernel.shape
    if c_k != c_in:
        raise DimensionError(f"conv2d: channel mismatch, input {x.shape} vs kernel {kernel.shape}")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise DimensionError(
            f"conv2d: kernel {kernel.shape} larger than padded input {(c_in, h + 2 * pad, w + 2 * pad)}"
        )
    h_out = (h + 2 * pad - kh) // stride + 1
    w_out = (w + 2 * pad - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)))
    kd = kernel.data
    out = np.zeros((c_out, h_out, w_out))
    for ky in range(kh):
        for kx in range(kw):
            xs = xp[:, ky : ky + stride * h_out : stride, kx : kx + stride * w_out : stride]
            out += (kd[:, :, ky, kx] @ xs.reshape(c_in, -1)).reshape(c_out, h_out, w_out)

    def backward(g):
        gm = g.reshape(c_out, -1)
        dk = np.zeros_like(kd)
        dxp = np.zeros_like(xp)
        for ky in range(kh):
            for kx in range(kw):
                xs = xp[:, ky : ky + stride * h_out : stride, kx : kx + stride * w_out : stride]
                dk[:, :, ky, kx] = gm @ xs.reshape(c_in, -1).T
                dxp[:, ky : ky + stride * h_out : stride, kx : kx + stride * w_out : stride] += (
                    kd[:, :, ky, kx].T @ gm
                ).reshape(c_in, h_out, w_out)
        dx = dxp[:, pad : pad + h, pad : pad + w] if pad else dxp
        return [dx, dk]

    return _emit("conv2d", out, (x, kernel), backward)


# ---------------------------------------------------------------------------
# shape ops


def concat(tensors: Sequence, axis: int = 0) -> DTensor:
    tensors = [_coerce(t) for t in tensors]
    if not tensors:
        raise DomainError("concat: empty tensor list")
    base = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(base) or any(
            s != b for i, (s, b) in enumerate(zip(t.shape, base)) if i != axis
        ):
            raise DimensionError(f"concat: shape {t.shape} incompatible with {base} on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return [
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis) for i in range(len(tensors))
        ]

    return _emit("concat", out, tensors, backward)


def reshape(a, shape) -> DTensor:
    a = _coerce(a)
    old = a.shape
    out = a.data.reshape(shape)

    def backward(g):
        return [g.reshape(old)]

    return _emit("reshape", out, (a,), backward)


def gather_rows(a, indices) -> DTensor:
    """Select rows of a 2-D tensor; backward scatter-adds into the source."""
    a = _coerce(a)
    if a.data.ndim != 2:
        raise DimensionError(f"gather_rows: expects a matrix, got {a.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    out = a.data[idx]

    def backward(g):
        da = np.zeros_like(a.data)
        np.add.at(da, idx, g)
        return [da]

    return _emit("gather_rows", out, (a,), backward)


def tile_rows(row, n: int) -> DTensor:
    """Repeat a 1xd row n times; backward sums the incoming rows."""
    row = _coerce(row)
    if row.data.ndim != 2 or row.shape[0] != 1:
        raise DimensionError(f"tile_rows: expects a 1xd row, got {row.shape}")
    out = np.repeat(row.data, n, axis=0)

    def backward(g):
        return [g.sum(axis=0, keepdims=True)]

    return _emit("tile_rows", out, (row,), backward)


# ---------------------------------------------------------------------------
# reductions


def reduce_sum(a, axis: int | None = None) -> DTensor:
    a = _coerce(a)
    _check_axis(a, axis)
    out = a.data.sum(axis=axis)
    shape = a.shape

    def backward(g):
        if axis is None:
            return [np.full(shape, g)]
        return [np.broadcast_to(np.expand_dims(g, axis), shape).copy()]

    return _emit("sum", out, (a,), backward)


def reduce_mean(a, axis: int | None = None) -> DTensor:
    a = _coerce(a)
    _check_axis(a, axis)
    count = a.data.size if axis is None else a.shape[axis]
    out = a.data.mean(axis=axis)
    shape = a.shape

    def backward(g):
        if axis is None:
            return [np.full(shape, g / count)]
        return [np.broadcast_to(np.expand_dims(g, axis), shape).copy() / count]

    return _emit("mean", out, (a,), backward)


def min_over_rows(a) -> tuple[DTensor, Array]:
    """Per-row minimum of a matrix: values (n,) plus argmin column indices.

    Gradient flows only to the argmin cells; ties resolve to the lowest index.
    """
    a = _coerce(a)
    if a.data.ndim != 2:
        raise DimensionError(f"min_over_rows: expects a matrix, got {a.shape}")
    if a.shape[1] == 0:
        raise DomainError("min_over_rows: empty reduction axis")
    idx = np.argmin(a.data, axis=1)
    rows = np.arange(a.shape[0])
    out = a.data[rows, idx]

    def backward(g):
        da = np.zeros_like(a.data)
        da[rows, idx] = g
        return [da]

    return _emit("min_over_rows", out, (a,), backward), idx


def max_over_columns(a) -> DTensor:
    """Column-wise maximum of a matrix -> 1xd; gradient routes to argmax rows."""
    a = _coerce(a)
    if a.data.ndim != 2:
        raise DimensionError(f"max_over_columns: expects a matrix, got {a.shape}")
    if a.shape[0] == 0:
        raise DomainError("max_over_columns: empty reduction axis")
    idx = np.argmax(a.data, axis=0)
    cols = np.arange(a.shape[1])
    out = a.data[idx, cols][None, :]

    def backward(g):
        da = np.zeros_like(a.data)
        da[idx, cols] = g[0]
        return [da]

    return _emit("max_over_columns", out, (a,), backward)


def row_norm(a) -> DTensor:
    """Euclidean norm of each row of an nxd matrix -> (n,).

    Zero rows get zero gradient (subgradient choice at the non-smooth point).
    """
    a = _coerce(a)
    if a.data.ndim != 2:
        raise DimensionError(f"row_norm: expects a matrix, got {a.shape}")
    out = np.sqrt((a.data * a.data).sum(axis=1))
    ad = a.data

    def backward(g):
        safe = np.where(out > 0.0, out, 1.0)
        return [(g / safe * (out > 0.0))[:, None] * ad]

    return _emit("row_norm", out, (a,), backward)


def reduce(op: str, a, axis: int | None = None):
    """Dispatch-by-name front end for reductions."""
    if op == "sum":
        return reduce_sum(a, axis)
    if op == "mean":
        return reduce_mean(a, axis)
    if op == "min_over_rows":
        return min_over_rows(a)
    raise ContractError(f"unknown reduce op {op!r}")


def _check_axis(a: DTensor, axis: int | None) -> None:
    if axis is not None:
        if axis >= a.data.ndim:
            raise DimensionError(f"axis {axis} out of range for shape {a.shape}")
        if a.shape[axis] == 0:
            raise DomainError("empty reduction axis")
    elif a.data.size == 0:
        raise DomainError("empty reduction")


# ---------------------------------------------------------------------------
# backward sweep


def backward(loss: DTensor, into_params: bool = True) -> dict[str, DTensor]:
    """Reverse sweep from a scalar loss; returns gradients for watched parameters.

    Freezes the tape and returns {name: gradient}; parameters with no path to
    the loss get zeros.  With ``into_params`` each Parameter also accumulates
    its gradient buffer in place; pass False when several tapes run
    concurrently and the caller reduces the returned maps itself.
    """
    if loss.tape is None or loss.node_id is None:
        raise ContractError("loss is not on a tape")
    if loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    tape = loss.tape
    grads: dict[int, Array] = {loss.node_id: np.ones_like(loss.data)}
    collected: dict[int, Array] = {}
    for nid in range(loss.node_id, -1, -1):
        g = grads.pop(nid, None)
        if g is None:
            continue
        node = tape.nodes[nid]
        if nid in tape._param_nodes:
            collected[nid] = g if nid not in collected else collected[nid] + g
            continue
        if node.backward is None:
            continue
        for input_id, gin in zip(node.inputs, node.backward(g)):
            if input_id is None:
                continue
            if input_id in grads:
                grads[input_id] = grads[input_id] + gin
            else:
                grads[input_id] = gin
    tape.frozen = True
    result = {}
    for nid, param in tape._param_nodes.items():
        g = collected.get(nid)
        if g is None:
            g = np.zeros_like(param.data)
        if into_params:
            param.grad = g if param.grad is None else param.grad + g
        result[param.name] = DTensor(g)
    return result


def clear_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# finite-difference oracle


def grad_check(f: Callable, x, eps: float = 1e-6, floor: float = 1e-2) -> float:
    """Worst relative deviation between tape gradients and central differences.

    ``f`` maps a DTensor to a tensor; non-scalar outputs are summed before
    differentiation.  Each coordinate of ``x`` is perturbed by +-eps.  The
    relative error uses max(|fd|, |g|, floor) as denominator so near-zero
    gradients are compared with an absolute floor.  NaN anywhere reports inf.
    """
    x = np.asarray(x, dtype=np.float64)

    def f_scalar(values: Array) -> float:
        out = f(DTensor(values))
        if isinstance(out, tuple):
            out = out[0]
        return float(out.data.sum())

    tape = Tape()
    p = Parameter("x", x.copy())
    out = f(tape.watch(p))
    if isinstance(out, tuple):
        out = out[0]
    if out.data.size != 1:
        out = reduce_sum(out)
    if not np.isfinite(out.data).all():
        return float("inf")
    analytic = backward(out)["x"].data

    worst = 0.0
    flat = x.copy().reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = f_scalar(flat.reshape(x.shape))
        flat[i] = orig - eps
        f_minus = f_scalar(flat.reshape(x.shape))
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            return float("inf")
        fd = (f_plus - f_minus) / (2.0 * eps)
        g = analytic.reshape(-1)[i]
        rel = abs(fd - g) / max(abs(fd), abs(g), floor)
        worst = max(worst, rel)
    return worst
