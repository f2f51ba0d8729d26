"""Dense-tensor engine with reverse-mode automatic differentiation.

Everything in this package that needs gradients runs through the two
classes here.  A ``Tape`` records primitive operations in execution
order; ``backward`` replays the record once, in reverse, accumulating
exact derivatives into every reachable tensor.  Tensors hold double
precision numpy arrays.  Operations whose inputs carry no tape run as
plain numpy forward computations, which is how evaluation and
finite-difference probing avoid graph overhead.

Deliberate restrictions, chosen for verifiability over generality:

* double precision only,
* no broadcasting beyond scalar-with-tensor,
* logs clamp their argument to ``LOG_FLOOR`` so cross-entropy terms can
  never produce NaN or infinity,
* single-threaded tape use.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError, ShapeMismatchError

LOG_FLOOR = 1e-12
# Keeps sigmoid output strictly inside (0, 1) even where float64 would
# round to an exact endpoint (|x| > ~36).
SIGMOID_EPS = 1e-15


class Tape:
    """Ordered record of primitive operations for one reverse sweep.

    Operation outputs are appended in execution order, so every parent
    precedes its children and a single reversed pass visits each node
    exactly once.  Not thread safe; one tape per training loop.
    """

    def __init__(self):
        self._ops: list[Tensor] = []

    def __len__(self) -> int:
        return len(self._ops)

    def _record(self, t: "Tensor") -> int:
        self._ops.append(t)
        return len(self._ops) - 1

    def clear(self) -> None:
        """Drop all recorded operations and their closures."""
        for t in self._ops:
            t._bwd = None
            t._parents = ()
        self._ops.clear()

    def backward(self, loss: "Tensor") -> None:
        """Accumulate d(loss)/d(tensor) into ``grad`` of every reachable tensor.

        ``loss`` must be a scalar recorded on this tape.  Gradients add
        into existing ``grad`` buffers (create them zeroed beforehand if
        accumulation across calls is not wanted).  The tape is cleared
        afterwards.
        """
        if loss.tape is not self or loss.node is None:
            raise NumericError("backward target is not recorded on this tape")
        if loss.data.shape != ():
            raise ShapeMismatchError(
                f"backward requires a scalar loss, got shape {loss.data.shape}"
            )
        loss.grad = np.ones((), dtype=np.float64)
        for t in reversed(self._ops):
            if t.grad is None or t._bwd is None:
                continue
            t._bwd(t.grad)
        self.clear()


class Tensor:
    """Dense float64 array, optionally tracked on a tape.

    ``grad`` is populated by ``Tape.backward``; leaves keep whatever
    buffer they had (zero it between iterations).  ``node`` is the
    position on the tape for operation outputs and ``None`` for leaves.
    """

    __slots__ = ("data", "grad", "tape", "node", "_parents", "_bwd")

    def __init__(self, values, tape: Tape | None = None):
        self.data = np.array(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.tape = tape
        self.node: int | None = None
        self._parents: tuple = ()
        self._bwd = None

    @classmethod
    def _op(cls, data: np.ndarray, parents: tuple, bwd) -> "Tensor":
        tape = _common_tape(parents)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.tape = tape
        out.node = None
        out._parents = ()
        out._bwd = None
        if tape is not None:
            out._parents = parents
            out._bwd = bwd
            out.node = tape._record(out)
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __float__(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        if self.tape is None:
            raise NumericError("tensor is not attached to a tape")
        self.tape.backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, taped={self.tape is not None})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _common_tape(parents: tuple) -> Tape | None:
    tape = None
    for p in parents:
        if p.tape is None:
            continue
        if tape is None:
            tape = p.tape
        elif tape is not p.tape:
            raise NumericError("operands live on different tapes")
    return tape


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _wants_grad(t: Tensor) -> bool:
    # Constants (tensors never bound to a tape) take no part in
    # differentiation; closures skip their gradient work entirely.
    return t.tape is not None


def _check_elementwise(a: Tensor, b: Tensor, opname: str) -> None:
    if a.data.shape != b.data.shape and a.data.shape != () and b.data.shape != ():
        raise ShapeMismatchError(
            f"{opname}: shapes {a.data.shape} and {b.data.shape} do not match "
            "(only scalar-with-tensor mixing is allowed)"
        )


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    # Undo the scalar-with-tensor broadcast in the backward direction.
    if shape == () and g.shape != ():
        return g.sum()
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise(a, b, "add")

    def bwd(g):
        if _wants_grad(a):
            _accum(a, _reduce_to(g, a.data.shape))
        if _wants_grad(b):
            _accum(b, _reduce_to(g, b.data.shape))

    return Tensor._op(a.data + b.data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise(a, b, "sub")

    def bwd(g):
        if _wants_grad(a):
            _accum(a, _reduce_to(g, a.data.shape))
        if _wants_grad(b):
            _accum(b, _reduce_to(-g, b.data.shape))

    return Tensor._op(a.data - b.data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise(a, b, "mul")

    def bwd(g):
        if _wants_grad(a):
            _accum(a, _reduce_to(g * b.data, a.data.shape))
        if _wants_grad(b):
            _accum(b, _reduce_to(g * a.data, b.data.shape))

    return Tensor._op(a.data * b.data, (a, b), bwd)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def bwd(g):
        if _wants_grad(a):
            _accum(a, -g)

    return Tensor._op(-a.data, (a,), bwd)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a) -> Tensor:
    """Elementwise max(x, 0); the subgradient at 0 is taken as 0."""
    a = _as_tensor(a)
    mask = a.data > 0.0

    def bwd(g):
        if _wants_grad(a):
            _accum(a, g * mask)

    return Tensor._op(np.where(mask, a.data, 0.0), (a,), bwd)


def _sigmoid_values(x: np.ndarray) -> np.ndarray:
    # Piecewise form never exponentiates a positive argument, so no
    # overflow for any finite input.
    out = np.empty_like(x)
    flat_x = x.reshape(-1)
    flat_o = out.reshape(-1)
    pos = flat_x >= 0.0
    flat_o[pos] = 1.0 / (1.0 + np.exp(-flat_x[pos]))
    ex = np.exp(flat_x[~pos])
    flat_o[~pos] = ex / (1.0 + ex)
    np.clip(out, SIGMOID_EPS, 1.0 - SIGMOID_EPS, out=out)
    return out


def sigmoid(a) -> Tensor:
    """Elementwise logistic function, output strictly inside (0, 1)."""
    a = _as_tensor(a)
    s = _sigmoid_values(a.data)

    def bwd(g):
        if _wants_grad(a):
            _accum(a, g * s * (1.0 - s))

    return Tensor._op(s, (a,), bwd)


def log(a) -> Tensor:
    """Natural log with the argument clamped to ``LOG_FLOOR``.

    Below the floor the output is constant, so the derivative there is 0.
    """
    a = _as_tensor(a)
    clamped = np.maximum(a.data, LOG_FLOOR)
    above = a.data >= LOG_FLOOR

    def bwd(g):
        if _wants_grad(a):
            _accum(a, np.where(above, g / clamped, 0.0))

    return Tensor._op(np.log(clamped), (a,), bwd)


# ---------------------------------------------------------------------------
# reductions


def total(a) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    a = _as_tensor(a)

    def bwd(g):
        if _wants_grad(a):
            _accum(a, np.full(a.data.shape, float(g)))

    return Tensor._op(np.asarray(a.data.sum()), (a,), bwd)


def mean(a) -> Tensor:
    """Arithmetic mean of all elements, as a scalar tensor."""
    a = _as_tensor(a)
    n = a.data.size
    if n == 0:
        raise ShapeMismatchError("mean of an empty tensor")

    def bwd(g):
        if _wants_grad(a):
            _accum(a, np.full(a.data.shape, float(g) / n))

    return Tensor._op(np.asarray(a.data.mean()), (a,), bwd)


def max_elem(a) -> Tensor:
    """Maximum element; the gradient routes to the first argmax only."""
    a = _as_tensor(a)
    if a.data.size == 0:
        raise ShapeMismatchError("max of an empty tensor")
    j = int(np.argmax(a.data.reshape(-1)))

    def bwd(g):
        if not _wants_grad(a):
            return
        buf = np.zeros(a.data.shape, dtype=np.float64)
        buf.reshape(-1)[j] = float(g)
        _accum(a, buf)

    return Tensor._op(np.asarray(a.data.reshape(-1)[j]), (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra on instance matrices


def _need(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeMismatchError(msg)


def dot(u, v) -> Tensor:
    """Inner product of two equal-length vectors, as a scalar."""
    u, v = _as_tensor(u), _as_tensor(v)
    _need(
        u.data.ndim == 1 and v.data.ndim == 1 and u.data.shape == v.data.shape,
        f"dot: need equal-length vectors, got {u.data.shape} and {v.data.shape}",
    )

    def bwd(g):
        if _wants_grad(u):
            _accum(u, float(g) * v.data)
        if _wants_grad(v):
            _accum(v, float(g) * u.data)

    return Tensor._op(np.asarray(u.data @ v.data), (u, v), bwd)


def rows_dot(m, v) -> Tensor:
    """Dot product of every row of ``m`` [N, C] with ``v`` [C] -> [N]."""
    m, v = _as_tensor(m), _as_tensor(v)
    _need(
        m.data.ndim == 2 and v.data.ndim == 1 and m.data.shape[1] == v.data.shape[0],
        f"rows_dot: need [N, C] by [C], got {m.data.shape} and {v.data.shape}",
    )

    def bwd(g):
        if _wants_grad(m):
            _accum(m, np.outer(g, v.data))
        if _wants_grad(v):
            _accum(v, m.data.T @ g)

    return Tensor._op(m.data @ v.data, (m, v), bwd)


def weighted_row_sum(m, w) -> Tensor:
    """Weighted sum of the rows of ``m`` [N, C] with weights ``w`` [N] -> [C]."""
    m, w = _as_tensor(m), _as_tensor(w)
    _need(
        m.data.ndim == 2 and w.data.ndim == 1 and m.data.shape[0] == w.data.shape[0],
        f"weighted_row_sum: need [N, C] by [N], got {m.data.shape} and {w.data.shape}",
    )

    def bwd(g):
        if _wants_grad(m):
            _accum(m, np.outer(w.data, g))
        if _wants_grad(w):
            _accum(w, m.data @ g)

    return Tensor._op(m.data.T @ w.data, (m, w), bwd)


def rows_mean(m, idx) -> Tensor:
    """Mean of the rows of ``m`` [N, C] selected by ``idx`` -> [C].

    ``idx`` must hold unique row indices; it is data, not a
    differentiable input, so no gradient flows through the selection.
    """
    m = _as_tensor(m)
    idx = np.asarray(idx, dtype=np.intp)
    _need(m.data.ndim == 2, f"rows_mean: need [N, C], got {m.data.shape}")
    if idx.size == 0:
        raise ShapeMismatchError("rows_mean: empty index set")
    k = idx.size

    def bwd(g):
        if not _wants_grad(m):
            return
        buf = np.zeros(m.data.shape, dtype=np.float64)
        buf[idx] = g / k
        _accum(m, buf)

    return Tensor._op(m.data[idx].mean(axis=0), (m,), bwd)


def softmax(a) -> Tensor:
    """Softmax over a 1-D field, computed max-shifted for overflow safety."""
    a = _as_tensor(a)
    _need(a.data.ndim == 1, f"softmax: need a 1-D field, got {a.data.shape}")
    shifted = a.data - a.data.max()
    e = np.exp(shifted)
    out = e / e.sum()

    def bwd(g):
        if _wants_grad(a):
            _accum(a, out * (g - float(g @ out)))

    return Tensor._op(out, (a,), bwd)


# ---------------------------------------------------------------------------
# convolution
#
# The arithmetic runs channels-last: one padded [N, Hp, Wp, C] buffer,
# and for each kernel offset a contiguous-run slab feeds a single small
# matmul.  This keeps the memory traffic in long runs instead of the
# per-pixel gather an im2col layout would need at these sizes.


def _check_conv_args(x: Tensor, kernels: Tensor, bias: Tensor,
                     channel_axis: int) -> tuple:
    _need(
        kernels.data.ndim == 4 and kernels.data.shape[2] == kernels.data.shape[3],
        f"conv2d: kernels must be [Cout, Cin, k, k], got {kernels.data.shape}",
    )
    cout, cin, k, _ = kernels.data.shape
    _need(k % 2 == 1, f"conv2d: kernel size must be odd, got {k}")
    _need(
        x.data.shape[channel_axis] == cin,
        f"conv2d: input channels {x.data.shape[channel_axis]} do not match "
        f"kernels {kernels.data.shape}",
    )
    _need(
        bias.data.shape == (cout,),
        f"conv2d: bias must be [{cout}], got {bias.data.shape}",
    )
    return cout, cin, k


def _shift_stack(kernels: np.ndarray) -> np.ndarray:
    # [Cout, Cin, k, k] -> [k*k, Cin, Cout], one matrix per kernel offset.
    cout, cin, k, _ = kernels.shape
    return np.ascontiguousarray(
        kernels.transpose(2, 3, 1, 0).reshape(k * k, cin, cout)
    )


def _conv_forward_nhwc(xt: np.ndarray, wstack: np.ndarray, bias: np.ndarray,
                       k: int):
    n, h, w, cin = xt.shape
    cout = wstack.shape[2]
    pad = k // 2
    xp = np.zeros((n, h + 2 * pad, w + 2 * pad, cin), dtype=np.float64)
    xp[:, pad : pad + h, pad : pad + w, :] = xt
    out = np.empty((n * h * w, cout), dtype=np.float64)
    out[:] = bias
    i = 0
    for dy in range(k):
        for dx in range(k):
            slab = xp[:, dy : dy + h, dx : dx + w, :].reshape(n * h * w, cin)
            out += slab @ wstack[i]
            i += 1
    return out.reshape(n, h, w, cout), xp


def _conv_backward_nhwc(gt: np.ndarray, xp: np.ndarray, wstack: np.ndarray,
                        k: int, need_dx: bool, need_dw: bool):
    n, h, w, cout = gt.shape
    cin = wstack.shape[1]
    pad = k // 2
    gmat = gt.reshape(n * h * w, cout)
    dw_stack = None
    if need_dw:
        dw_stack = np.empty_like(wstack)
        i = 0
        for dy in range(k):
            for dx in range(k):
                slab = xp[:, dy : dy + h, dx : dx + w, :].reshape(n * h * w, cin)
                dw_stack[i] = slab.T @ gmat
                i += 1
    dxt = None
    if need_dx:
        dxp = np.zeros_like(xp)
        i = 0
        for dy in range(k):
            for dx in range(k):
                contrib = (gmat @ wstack[i].T).reshape(n, h, w, cin)
                dxp[:, dy : dy + h, dx : dx + w, :] += contrib
                i += 1
        dxt = dxp[:, pad : pad + h, pad : pad + w, :]
    db = gmat.sum(axis=0)
    return dxt, dw_stack, db


def _unstack_dw(dw_stack: np.ndarray, kernels_shape: tuple) -> np.ndarray:
    cout, cin, k, _ = kernels_shape
    return dw_stack.reshape(k, k, cin, cout).transpose(3, 2, 0, 1)


def conv2d(x, kernels, bias) -> Tensor:
    """2-D cross-correlation with zero 'same' padding.

    ``x`` is [Cin, H, W] for one image or [N, Cin, H, W] for a batch of
    independent images; ``kernels`` is [Cout, Cin, k, k] with odd k and
    ``bias`` is [Cout].  Output spatial extent equals the input extent.
    """
    x, kernels, bias = _as_tensor(x), _as_tensor(kernels), _as_tensor(bias)
    _need(
        x.data.ndim in (3, 4),
        f"conv2d: input must be [Cin, H, W] or [N, Cin, H, W], got {x.data.shape}",
    )
    batched = x.data.ndim == 4
    cout, cin, k = _check_conv_args(x, kernels, bias, 1 if batched else 0)
    xb = x.data if batched else x.data[None]
    wstack = _shift_stack(kernels.data)

    out, xp = _conv_forward_nhwc(
        np.ascontiguousarray(xb.transpose(0, 2, 3, 1)), wstack, bias.data, k
    )
    data = out.transpose(0, 3, 1, 2)
    if not batched:
        data = data[0]

    def bwd(g):
        g4 = g if batched else g[None]
        gt = np.ascontiguousarray(g4.transpose(0, 2, 3, 1))
        dxt, dw_stack, db = _conv_backward_nhwc(
            gt, xp, wstack, k, _wants_grad(x), _wants_grad(kernels)
        )
        if dw_stack is not None:
            _accum(kernels, _unstack_dw(dw_stack, kernels.data.shape))
        if _wants_grad(bias):
            _accum(bias, db)
        if dxt is not None:
            dx = dxt.transpose(0, 3, 1, 2)
            _accum(x, dx if batched else dx[0])

    return Tensor._op(data, (x, kernels, bias), bwd)


def conv2d_nhwc(x, kernels, bias) -> Tensor:
    """Same operation as ``conv2d`` on channels-last input [N, H, W, Cin].

    This is the layout the feature extractor uses internally; it avoids
    the layout conversions of the channels-first wrapper.
    """
    x, kernels, bias = _as_tensor(x), _as_tensor(kernels), _as_tensor(bias)
    _need(
        x.data.ndim == 4,
        f"conv2d_nhwc: input must be [N, H, W, Cin], got {x.data.shape}",
    )
    cout, cin, k = _check_conv_args(x, kernels, bias, 3)
    wstack = _shift_stack(kernels.data)
    out, xp = _conv_forward_nhwc(
        np.ascontiguousarray(x.data), wstack, bias.data, k
    )

    def bwd(g):
        dxt, dw_stack, db = _conv_backward_nhwc(
            np.ascontiguousarray(g), xp, wstack, k,
            _wants_grad(x), _wants_grad(kernels),
        )
        if dw_stack is not None:
            _accum(kernels, _unstack_dw(dw_stack, kernels.data.shape))
        if _wants_grad(bias):
            _accum(bias, db)
        if dxt is not None:
            _accum(x, np.ascontiguousarray(dxt))

    return Tensor._op(out, (x, kernels, bias), bwd)


def nhwc_rows(x) -> Tensor:
    """[N, H, W, C] -> [N*H*W, C]; a reshape, so locations stay (n, y, x)."""
    x = _as_tensor(x)
    _need(x.data.ndim == 4, f"nhwc_rows: need [N, H, W, C], got {x.data.shape}")
    n, h, w, c = x.data.shape

    def bwd(g):
        if _wants_grad(x):
            _accum(x, g.reshape(n, h, w, c))

    return Tensor._op(x.data.reshape(n * h * w, c), (x,), bwd)


def channels_last_rows(x) -> Tensor:
    """[N, C, H, W] -> [N*H*W, C] with locations ordered (n, y, x) row-major."""
    x = _as_tensor(x)
    _need(
        x.data.ndim == 4,
        f"channels_last_rows: need [N, C, H, W], got {x.data.shape}",
    )
    n, c, h, w = x.data.shape

    def bwd(g):
        if _wants_grad(x):
            _accum(x, g.reshape(n, h, w, c).transpose(0, 3, 1, 2))

    return Tensor._op(x.data.transpose(0, 2, 3, 1).reshape(n * h * w, c), (x,), bwd)


def backward(loss: Tensor) -> None:
    """Run the reverse sweep for ``loss`` on its tape (see ``Tape.backward``)."""
    loss.backward()
