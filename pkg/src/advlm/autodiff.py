"""Reverse-mode automatic differentiation over float64 numpy buffers.

The op set is exactly what the toy driving model and the attack losses
need: elementwise arithmetic, matmul, a stride-2 3x3 convolution, relu,
reductions, concat, log_softmax, an NLL gather, abs/sign/clamp, reshape
and an embedding-row gather. Graphs are single-shot: build, call
:func:`backward` once, rebuild. Every public op validates output
finiteness so NaN/Inf surface at the op that produced them.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested op."""


class NumericError(ArithmeticError):
    """An op produced NaN or Inf."""


class GraphError(RuntimeError):
    """Graph lifecycle violation (reuse, double backward, bad root)."""


class Graph:
    """Topologically ordered single-shot computation graph.

    Nodes are appended in construction order, so every node's parents
    have smaller indices. ``backward`` walks the list once, in reverse.
    """

    def __init__(self):
        self.nodes = []
        self.consumed = False

    def register(self, tensor: "Tensor", op: str, parents, backward_fn) -> None:
        tensor._graph = self
        tensor._index = len(self.nodes)
        self.nodes.append((op, tuple(p._index for p in parents), backward_fn, tensor))

    def absorb(self, other: "Graph") -> None:
        """Append another graph's nodes; topological order is preserved
        because the two graphs share no edges until the op being built."""
        offset = len(self.nodes)
        for op, parents, backward_fn, tensor in other.nodes:
            tensor._graph = self
            tensor._index += offset
            self.nodes.append(
                (op, tuple(i + offset for i in parents), backward_fn, tensor)
            )
        other.nodes = []


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    return arr


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op} produced non-finite values")


class Tensor:
    """N-dimensional float64 array that can participate in one graph."""

    __slots__ = ("data", "requires_grad", "grad", "_graph", "_index")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        _check_finite("tensor", self.data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._graph = None
        self._index = -1

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, shape):
        return reshape(self, shape)


def _lift(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _graph_of(parents) -> Graph:
    graph = None
    for p in parents:
        other = p._graph
        if other is None:
            continue
        if other.consumed:
            raise GraphError("graph already consumed by backward")
        if graph is None:
            graph = other
        elif graph is not other:
            graph.absorb(other)
    if graph is None:
        graph = Graph()
    if graph.consumed:
        raise GraphError("graph already consumed by backward")
    for p in parents:
        if p._graph is None and p.requires_grad:
            graph.register(p, "leaf", (), None)
    return graph


def _result(op: str, data: np.ndarray, parents, backward_fn) -> Tensor:
    _check_finite(op, data)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._graph = None
    out._index = -1
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        graph = _graph_of(parents)
        tracked = [p for p in parents if p.requires_grad]
        graph.register(out, op, tracked, backward_fn)
    else:
        out.requires_grad = False
    return out


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> str:
    """Classify the allowed add/sub shape pairs: equal, frame-broadcast
    (b matches a minus its leading axis) or scalar b."""
    if a.data.shape == b.data.shape:
        return "equal"
    if b.data.shape == () or b.data.size == 1 and b.data.ndim == 0:
        return "scalar_b"
    if a.data.shape == () :
        return "scalar_a"
    if a.data.ndim == b.data.ndim + 1 and a.data.shape[1:] == b.data.shape:
        return "frame_b"
    if b.data.ndim == a.data.ndim + 1 and b.data.shape[1:] == a.data.shape:
        return "frame_a"
    raise ShapeError(f"{op}: incompatible shapes {a.data.shape} and {b.data.shape}")


def _reduce_to(g: np.ndarray, kind: str, side: str) -> np.ndarray:
    if kind == "equal":
        return g
    if (kind == "scalar_b" and side == "b") or (kind == "scalar_a" and side == "a"):
        return g.sum()
    if (kind == "frame_b" and side == "b") or (kind == "frame_a" and side == "a"):
        return g.sum(axis=0)
    return g


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    kind = _binary_shapes("add", a, b)
    out_data = a.data + b.data

    def bw(g):
        _accum(a, _reduce_to(g, kind, "a"))
        _accum(b, _reduce_to(g, kind, "b"))

    return _result("add", out_data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    kind = _binary_shapes("sub", a, b)
    out_data = a.data - b.data

    def bw(g):
        _accum(a, _reduce_to(g, kind, "a"))
        _accum(b, -_reduce_to(g, kind, "b"))

    return _result("sub", out_data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    kind = _binary_shapes("mul", a, b)
    if kind not in ("equal", "scalar_a", "scalar_b"):
        raise ShapeError(f"mul: incompatible shapes {a.data.shape} and {b.data.shape}")
    out_data = a.data * b.data

    def bw(g):
        _accum(a, _reduce_to(g * b.data, kind, "a"))
        _accum(b, _reduce_to(g * a.data, kind, "b"))

    return _result("mul", out_data, (a, b), bw)


def neg(x) -> Tensor:
    x = _lift(x)

    def bw(g):
        _accum(x, -g)

    return _result("neg", -x.data, (x,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}"
        )
    out_data = a.data @ b.data

    def bw(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _result("matmul", out_data, (a, b), bw)


def relu(x) -> Tensor:
    x = _lift(x)
    mask = x.data > 0.0

    def bw(g):
        _accum(x, g * mask)

    return _result("relu", np.where(mask, x.data, 0.0), (x,), bw)


def sum_(x, axis=None) -> Tensor:
    x = _lift(x)
    out_data = x.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            _accum(x, np.broadcast_to(g, x.data.shape))
        else:
            _accum(x, np.broadcast_to(np.expand_dims(g, axis), x.data.shape))

    return _result("sum", out_data, (x,), bw)


def mean(x, axis=None) -> Tensor:
    x = _lift(x)
    out_data = x.data.mean(axis=axis)
    n = x.data.size if axis is None else x.data.shape[axis]

    def bw(g):
        if axis is None:
            _accum(x, np.broadcast_to(g / n, x.data.shape))
        else:
            _accum(x, np.broadcast_to(np.expand_dims(g / n, axis), x.data.shape))

    return _result("mean", out_data, (x,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty input list")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return _result("concat", out_data, tuple(tensors), bw)


def log_softmax(x) -> Tensor:
    """Log-softmax along the last axis (numerically stable)."""
    x = _lift(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out_data = shifted - logsumexp
    softmax = np.exp(out_data)

    def bw(g):
        _accum(x, g - softmax * g.sum(axis=-1, keepdims=True))

    return _result("log_softmax", out_data, (x,), bw)


def nll(logp: Tensor, target: int) -> Tensor:
    """Negative log-likelihood gather -logp[target] for a 1-D logp vector."""
    logp = _lift(logp)
    if logp.data.ndim != 1:
        raise ShapeError(f"nll: expected 1-D log-probabilities, got {logp.data.shape}")
    target = int(target)
    if not 0 <= target < logp.data.shape[0]:
        raise ShapeError(
            f"nll: target {target} out of range for {logp.data.shape[0]} classes"
        )
    out_data = np.asarray(-logp.data[target])

    def bw(g):
        gx = np.zeros_like(logp.data)
        gx[target] = -g
        _accum(logp, gx)

    return _result("nll", out_data, (logp,), bw)


def abs_(x) -> Tensor:
    x = _lift(x)
    s = np.sign(x.data)

    def bw(g):
        _accum(x, g * s)

    return _result("abs", np.abs(x.data), (x,), bw)


def sign(x) -> Tensor:
    """Elementwise sign. Derivative is zero a.e., so the result is detached."""
    x = _lift(x)
    return Tensor(np.sign(x.data))


def clamp(x, lo: float, hi: float) -> Tensor:
    x = _lift(x)
    if lo > hi:
        raise ValueError(f"clamp: lo={lo} exceeds hi={hi}")
    mask = (x.data >= lo) & (x.data <= hi)

    def bw(g):
        _accum(x, g * mask)

    return _result("clamp", np.clip(x.data, lo, hi), (x,), bw)


def reshape(x, shape) -> Tensor:
    x = _lift(x)
    out_data = x.data.reshape(shape)

    def bw(g):
        _accum(x, g.reshape(x.data.shape))

    return _result("reshape", out_data, (x,), bw)


def take_rows(table: Tensor, ids) -> Tensor:
    """Gather rows of a 2-D table; backward scatter-adds into the table."""
    table = _lift(table)
    if table.data.ndim != 2:
        raise ShapeError(f"take_rows: expected 2-D table, got {table.data.shape}")
    ids = np.asarray(ids, dtype=np.int64)
    out_data = table.data[ids]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        _accum(table, gt)

    return _result("take_rows", out_data, (table,), bw)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int):
    n, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    s0, s1, s2, s3 = xp.strides
    patches = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
    )
    return patches.reshape(n, c * kh * kw, ho * wo), ho, wo


def _col2im(gcols, n, c, h, w, kh, kw, stride, pad, ho, wo):
    gx = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    gp = gcols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gp[
                :, :, i, j
            ]
    if pad == 0:
        return gx
    return gx[:, :, pad : pad + h, pad : pad + w]


def conv2d(x: Tensor, kernel: Tensor, bias=None, stride: int = 2, pad: int = 1) -> Tensor:
    """2-D convolution with zero padding.

    ``x`` is a single C,H,W frame or an N,C,H,W batch; ``kernel`` is
    O,C,kh,kw and ``bias``, when given, is O. Returns the same rank as
    the input.
    """
    x = _lift(x)
    kernel = _lift(kernel)
    single = x.data.ndim == 3
    if x.data.ndim not in (3, 4):
        raise ShapeError(f"conv2d: expected C,H,W or N,C,H,W input, got {x.data.shape}")
    if kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: expected O,C,kh,kw kernel, got {kernel.data.shape}")
    xb = x.data[None] if single else x.data
    n, c, h, w = xb.shape
    o, ck, kh, kw = kernel.data.shape
    if ck != c:
        raise ShapeError(
            f"conv2d: input channels {x.data.shape} do not match kernel {kernel.data.shape}"
        )
    if bias is not None:
        bias = _lift(bias)
        if bias.data.shape != (o,):
            raise ShapeError(
                f"conv2d: bias shape {bias.data.shape} does not match {o} output channels"
            )
    xp = np.pad(xb, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    kmat = kernel.data.reshape(o, c * kh * kw)
    out = np.matmul(kmat, cols)  # (O,K) @ (N,K,P) -> (N,O,P)
    if bias is not None:
        out = out + bias.data[None, :, None]
    out_data = out.reshape(n, o, ho, wo)
    if single:
        out_data = out_data[0]

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def bw(g):
        gb = g[None] if single else g
        gflat = gb.reshape(n, o, ho * wo)
        if bias is not None:
            _accum(bias, gflat.sum(axis=(0, 2)))
        if kernel.requires_grad:
            gk = np.matmul(gflat, cols.transpose(0, 2, 1)).sum(axis=0)
            _accum(kernel, gk.reshape(o, c, kh, kw))
        if x.requires_grad:
            gcols = np.matmul(kmat.T, gflat)
            gx = _col2im(gcols, n, c, h, w, kh, kw, stride, pad, ho, wo)
            _accum(x, gx[0] if single else gx)

    return _result("conv2d", out_data, parents, bw)


def backward(root: Tensor) -> None:
    """Run one reverse pass from a scalar root, filling leaf ``grad``s.

    The graph is consumed: a second backward on any tensor of the same
    graph raises :class:`GraphError`.
    """
    if root.data.size != 1:
        raise GraphError(f"backward root must be scalar, got shape {root.data.shape}")
    graph = root._graph
    if graph is None:
        raise GraphError("root does not participate in a graph")
    if graph.consumed:
        raise GraphError("graph already consumed by backward")
    graph.consumed = True
    root.grad = np.ones_like(root.data)
    for _, _, backward_fn, tensor in reversed(graph.nodes[: root._index + 1]):
        if backward_fn is None or tensor.grad is None:
            continue
        backward_fn(tensor.grad)


def grad_check(f, x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between autodiff and central finite differences.

    ``f`` maps a Tensor to a scalar Tensor and must be deterministic.
    The error at each coordinate is |analytic - fd| / max(1, |fd|).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    base = np.array(x.data, copy=True)
    leaf = Tensor(base.copy(), requires_grad=True)
    out = f(leaf)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ShapeError("grad_check: f must return a scalar tensor")
    if out._graph is not None:
        backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base)

    worst = 0.0
    flat = base.reshape(-1)
    fd = np.zeros_like(flat)
    for i in range(flat.size):
        xp = base.copy().reshape(-1)
        xp[i] += h
        f_plus = f(Tensor(xp.reshape(base.shape))).item()
        xm = base.copy().reshape(-1)
        xm[i] -= h
        f_minus = f(Tensor(xm.reshape(base.shape))).item()
        fd[i] = (f_plus - f_minus) / (2.0 * h)
    a = analytic.reshape(-1)
    for i in range(flat.size):
        err = abs(a[i] - fd[i]) / max(1.0, abs(fd[i]))
        worst = max(worst, err)
    return worst
