"""Dense tensors with reverse-mode automatic differentiation.

Single-threaded numpy backend. Storage is float32 by default (float64
available through `use_dtype` for high-precision gradient checks);
reductions always accumulate in float64. Non-finite values are rejected
at leaf creation, and after every op when debug checks are enabled.
"""

from __future__ import annotations

import contextlib
import numpy as np

_DEFAULT_DTYPE = np.float32
_DEBUG_CHECKS = False


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    if dtype not in (np.float32, np.float64):
        raise ValueError("dtype must be float32 or float64")
    _DEFAULT_DTYPE = dtype


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_debug_checks(flag: bool) -> None:
    """When on, every op output is checked for NaN/Inf."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(flag)


@contextlib.contextmanager
def use_dtype(dtype):
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def debug_checks(flag: bool = True):
    global _DEBUG_CHECKS
    prev = _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(flag)
    try:
        yield
    finally:
        _DEBUG_CHECKS = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to the shape of a broadcast operand."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """N-d array node in a dynamically built computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        if not np.all(np.isfinite(arr)):
            raise ValueError("non-finite values in tensor data")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @classmethod
    def _result(cls, data: np.ndarray, parents, op: str, backward):
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.requires_grad = any(p.requires_grad for p in parents)
        t.op = op
        if t.requires_grad:
            t._parents = tuple(parents)
            t._backward = backward
        else:
            t._parents = ()
            t._backward = None
        if _DEBUG_CHECKS and not np.all(np.isfinite(data)):
            raise FloatingPointError(f"non-finite values produced by op '{op}'")
        return t

    # ---- basic properties -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.grad = None
        t.requires_grad = False
        t._parents = ()
        t._backward = None
        t.op = "detach"
        return t

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op}, grad={self.requires_grad})"

    # ---- arithmetic -------------------------------------------------------

    @staticmethod
    def _coerce(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))

    def __add__(self, other):
        a, b = self, Tensor._coerce(other)
        out_data = a.data + b.data

        def backward(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return Tensor._result(out_data, (a, b), "add", backward)

    __radd__ = __add__

    def __sub__(self, other):
        a, b = self, Tensor._coerce(other)
        out_data = a.data - b.data

        def backward(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return Tensor._result(out_data, (a, b), "sub", backward)

    def __rsub__(self, other):
        return Tensor._coerce(other) - self

    def __mul__(self, other):
        a, b = self, Tensor._coerce(other)
        out_data = a.data * b.data

        def backward(g):
            return (_unbroadcast(g * b.data, a.shape),
                    _unbroadcast(g * a.data, b.shape))

        return Tensor._result(out_data, (a, b), "mul", backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        a, b = self, Tensor._coerce(other)
        out_data = a.data / b.data

        def backward(g):
            return (_unbroadcast(g / b.data, a.shape),
                    _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

        return Tensor._result(out_data, (a, b), "div", backward)

    def __rtruediv__(self, other):
        return Tensor._coerce(other) / self

    def __neg__(self):
        def backward(g):
            return (-g,)

        return Tensor._result(-self.data, (self,), "neg", backward)

    def __pow__(self, p: float):
        pf = float(p)
        out_data = self.data ** pf

        def backward(g):
            return (g * pf * self.data ** (pf - 1.0),)

        return Tensor._result(out_data, (self,), "pow", backward)

    def __matmul__(self, other):
        a, b = self, Tensor._coerce(other)
        out_data = np.matmul(a.data, b.data)

        def backward(g):
            if b.data.ndim == 1:
                ga = np.multiply.outer(g, b.data) if g.ndim else g * b.data
                gb = np.tensordot(g, a.data, axes=(range(g.ndim), range(g.ndim)))
            elif a.data.ndim == 1:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
                gb = np.multiply.outer(a.data, g)
            else:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

        return Tensor._result(out_data, (a, b), "matmul", backward)

    # ---- shape ops --------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape

        def backward(g):
            return (g.reshape(old),)

        return Tensor._result(self.data.reshape(shape), (self,), "reshape", backward)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = np.argsort(axes)

        def backward(g):
            return (g.transpose(inv),)

        return Tensor._result(self.data.transpose(axes), (self,), "transpose", backward)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(*axes)

    def __getitem__(self, idx):
        out_data = self.data[idx]
        shape, dtype = self.shape, self.data.dtype

        def backward(g):
            gx = np.zeros(shape, dtype=dtype)
            np.add.at(gx, idx, g)
            return (gx,)

        return Tensor._result(out_data, (self,), "getitem", backward)

    # ---- elementwise ------------------------------------------------------

    def exp(self):
        out_data = np.exp(self.data)

        def backward(g):
            return (g * out_data,)

        return Tensor._result(out_data, (self,), "exp", backward)

    def log(self):
        out_data = np.log(self.data)

        def backward(g):
            return (g / self.data,)

        return Tensor._result(out_data, (self,), "log", backward)

    def sqrt(self):
        out_data = np.sqrt(self.data)

        def backward(g):
            return (g * (0.5 / out_data),)

        return Tensor._result(out_data, (self,), "sqrt", backward)

    def tanh(self):
        out_data = np.tanh(self.data)

        def backward(g):
            return (g * (1.0 - out_data * out_data),)

        return Tensor._result(out_data, (self,), "tanh", backward)

    def sigmoid(self):
        out_data = 1.0 / (1.0 + np.exp(-self.data))

        def backward(g):
            return (g * out_data * (1.0 - out_data),)

        return Tensor._result(out_data, (self,), "sigmoid", backward)

    def relu(self):
        out_data = np.maximum(self.data, 0)

        def backward(g):
            return (g * (self.data > 0),)

        return Tensor._result(out_data, (self,), "relu", backward)

    def gelu(self):
        """tanh-approximate GELU (smooth, finite-difference friendly)."""
        x = self.data
        c = np.float64(0.7978845608028654)  # sqrt(2/pi)
        inner = (c * (x + 0.044715 * x ** 3)).astype(x.dtype)
        th = np.tanh(inner)
        out_data = (0.5 * x * (1.0 + th)).astype(x.dtype)

        def backward(g):
            dinner = c * (1.0 + 3 * 0.044715 * x * x)
            d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner
            return (g * d.astype(x.dtype),)

        return Tensor._result(out_data, (self,), "gelu", backward)

    def abs(self):
        out_data = np.abs(self.data)
        sign = np.sign(self.data)

        def backward(g):
            return (g * sign,)

        return Tensor._result(out_data, (self,), "abs", backward)

    # ---- reductions (float64 accumulation) ---------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out_data = np.sum(self.data, axis=axis, keepdims=keepdims,
                          dtype=np.float64).astype(self.data.dtype)
        shape, nd = self.shape, self.ndim

        def backward(g):
            if axis is None:
                return (np.broadcast_to(g, shape).astype(g.dtype),)
            ax = axis if isinstance(axis, tuple) else (axis,)
            ax = tuple(a % nd for a in ax)
            if not keepdims:
                for a in sorted(ax):
                    g = np.expand_dims(g, a)
            return (np.broadcast_to(g, shape),)

        return Tensor._result(out_data, (self,), "sum", backward)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.size
        else:
            ax = axis if isinstance(axis, tuple) else (axis,)
            n = int(np.prod([self.shape[a] for a in ax]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def softmax(self, axis: int = -1):
        z = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(z)
        out_data = e / e.sum(axis=axis, keepdims=True, dtype=np.float64).astype(e.dtype)

        def backward(g):
            dot = np.sum(g * out_data, axis=axis, keepdims=True, dtype=np.float64)
            return (out_data * (g - dot.astype(g.dtype)),)

        return Tensor._result(out_data, (self,), "softmax", backward)

    def log_softmax(self, axis: int = -1):
        z = self.data - self.data.max(axis=axis, keepdims=True)
        lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True, dtype=np.float64)).astype(z.dtype)
        out_data = z - lse
        sm = np.exp(out_data)

        def backward(g):
            tot = np.sum(g, axis=axis, keepdims=True, dtype=np.float64).astype(g.dtype)
            return (g - sm * tot,)

        return Tensor._result(out_data, (self,), "log_softmax", backward)


# ---- free functions --------------------------------------------------------


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [Tensor._coerce(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._result(out_data, tuple(tensors), "concat", backward)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [Tensor._coerce(t) for t in tensors]
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        parts = np.split(g, len(tensors), axis=axis)
        return tuple(p.squeeze(axis) for p in parts)

    return Tensor._result(out_data, tuple(tensors), "stack", backward)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup `weight[ids]` with scatter-add backward."""
    ids = np.asarray(ids)
    out_data = weight.data[ids]
    vshape, dtype = weight.shape, weight.data.dtype

    def backward(g):
        gw = np.zeros(vshape, dtype=dtype)
        np.add.at(gw, ids, g)
        return (gw,)

    return Tensor._result(out_data, (weight,), "embedding", backward)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """2-d convolution, NCHW layout, square kernel, via im2col."""
    B, C, H, W = x.shape
    O, C2, K, _ = w.shape
    if C != C2:
        raise ValueError(f"conv2d channel mismatch: {C} vs {C2}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    OH = (H + 2 * pad - K) // stride + 1
    OW = (W + 2 * pad - K) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (K, K), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]                 # (B, C, OH, OW, K, K)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * OH * OW, C * K * K)
    wmat = w.data.reshape(O, C * K * K)
    out = cols @ wmat.T
    if b is not None:
        out = out + b.data
    out_data = out.reshape(B, OH, OW, O).transpose(0, 3, 1, 2)
    out_data = np.ascontiguousarray(out_data)

    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(B * OH * OW, O)
        gw = (gmat.T @ cols).reshape(w.shape)
        gcols = gmat @ wmat                              # (B*OH*OW, C*K*K)
        gcols = gcols.reshape(B, OH, OW, C, K, K).transpose(0, 3, 1, 2, 4, 5)
        gx = np.zeros_like(xp)
        for i in range(K):
            for j in range(K):
                gx[:, :, i:i + OH * stride:stride, j:j + OW * stride:stride] += gcols[..., i, j]
        if pad:
            gx = gx[:, :, pad:-pad, pad:-pad]
        if b is None:
            return gx, gw
        gb = gmat.sum(axis=0, dtype=np.float64).astype(g.dtype)
        return gx, gw, gb

    return Tensor._result(out_data, parents, "conv2d", backward)


def avg_pool2d(x: Tensor, k: int = 2) -> Tensor:
    B, C, H, W = x.shape
    if H % k or W % k:
        raise ValueError("avg_pool2d requires divisible spatial dims")
    out_data = x.data.reshape(B, C, H // k, k, W // k, k).mean(axis=(3, 5),
                                                               dtype=np.float64)
    out_data = out_data.astype(x.data.dtype)

    def backward(g):
        g = g[:, :, :, None, :, None] / (k * k)
        return (np.broadcast_to(g, (B, C, H // k, k, W // k, k)).reshape(B, C, H, W),)

    return Tensor._result(out_data, (x,), "avg_pool2d", backward)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x spatial upsampling."""
    B, C, H, W = x.shape
    out_data = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward(g):
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5), dtype=np.float64)
                .astype(g.dtype),)

    return Tensor._result(out_data, (x,), "upsample2x", backward)


# ---- backward driver --------------------------------------------------------


class Graph:
    """Named parameter leaves of a model; the op graph itself is dynamic."""

    def __init__(self, params: dict[str, Tensor]):
        self.params = dict(params)

    def names(self):
        return list(self.params)


def _toposort(root: Tensor) -> list[Tensor]:
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and (p.requires_grad or p._parents):
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse-mode pass from a scalar loss.

    Returns gradients keyed by tensor id for every requires_grad tensor
    reachable from the loss. Leaves with requires_grad=False never get an
    entry. The graph can be traversed again afterward.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
    if not np.isfinite(loss.data):
        raise FloatingPointError(f"non-finite loss (op '{loss.op}')")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    order = _toposort(loss)
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if not p.requires_grad and not p._parents:
                continue
            if _DEBUG_CHECKS and not np.all(np.isfinite(pg)):
                raise FloatingPointError(f"non-finite gradient at op '{node.op}'")
            pg = pg if pg.shape == p.data.shape else pg.reshape(p.data.shape)
            acc = grads.get(id(p))
            grads[id(p)] = pg.copy() if acc is None else acc + pg
        if node is not loss:
            del grads[id(node)]  # keep only what parents still need
    return grads


def forward_backward(graph: Graph, loss: Tensor) -> dict[str, Tensor]:
    """Gradient map (parameter name -> gradient Tensor) for the graph's leaves.

    Parameters with requires_grad=False are absent from the result.
    """
    grads = backward(loss)
    out = {}
    for name, p in graph.params.items():
        if p.requires_grad and id(p) in grads:
            out[name] = Tensor(grads[id(p)], dtype=p.data.dtype)
    return out
