"""Dense float64 tensors with define-by-run reverse-mode autodiff.

Small by design: exactly the operations needed to train a 28x28 CNN
classifier (convolution, pooling, affine layers, softmax-family losses)
plus the elementwise arithmetic used by the consistency and information
losses. The graph is rebuilt on every forward pass; ``backward`` walks the
recorded nodes in reverse creation order exactly once.
"""

from __future__ import annotations

import itertools
import threading

import numpy as np

_TID = itertools.count()
_STATE = threading.local()


def _grad_enabled() -> bool:
    return getattr(_STATE, "grad_enabled", True)


class no_grad:
    """Context manager that suppresses tape construction (teacher forwards)."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _STATE.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _STATE.grad_enabled = self._prev
        return False


class Tensor:
    """N-d float64 array, optionally participating in the gradient tape.

    ``grad`` is allocated lazily and accumulates across ``backward`` calls
    until ``zero_grad``. Data is treated as immutable once the tensor has
    been consumed by an operation.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_tid")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents = ()
        self._backward = None
        self._tid = next(_TID)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- arithmetic sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return pow_const(self, exponent)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def backward(self):
        backward(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data, parents, backward_fn, op) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.op = op
    return out


def _accum(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss: Tensor):
    """Populate ``grad`` on every tape-connected tensor reachable from ``loss``.

    Repeated calls without ``zero_grad`` accumulate.
    """
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")

    # Reachable sub-DAG, visited in reverse creation order (a valid reverse
    # topological order since every op is created after its inputs).
    nodes = []
    seen = {id(loss)}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._backward is not None:
            nodes.append(t)
        for p in t._parents:
            if id(p) not in seen and p.requires_grad:
                seen.add(id(p))
                stack.append(p)
    nodes.sort(key=lambda t: t._tid, reverse=True)

    # Interior grads are pass-local; only leaves accumulate across calls.
    for t in nodes:
        t.grad = None
    _accum(loss, np.ones_like(loss.data))
    for t in nodes:
        t._backward(t.grad)


# -- elementwise and reduction ops ------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), bwd, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), bwd, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), bwd, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, (a, b), bwd, "div")


def pow_const(a: Tensor, exponent: float) -> Tensor:
    e = float(exponent)
    data = a.data**e

    def bwd(g):
        _accum(a, g * e * a.data ** (e - 1.0))

    return _make(data, (a,), bwd, "pow")


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def bwd(g):
        _accum(a, g / a.data)

    return _make(data, (a,), bwd, "log")


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def bwd(g):
        _accum(a, g * data)

    return _make(data, (a,), bwd, "exp")


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)

    def bwd(g):
        _accum(a, g * (a.data > 0.0))

    return _make(data, (a,), bwd, "relu")


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    _check_axis(a, axis)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape))

    return _make(data, (a,), bwd, "sum")


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    _check_axis(a, axis)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.data.shape[axis]

    def bwd(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape) / count)

    return _make(data, (a,), bwd, "mean")


def reshape(a: Tensor, *shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    data = a.data.reshape(shape)

    def bwd(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(data, (a,), bwd, "reshape")


def _check_axis(a: Tensor, axis):
    if axis is not None and not (-a.data.ndim <= axis < a.data.ndim):
        raise ValueError(f"axis {axis} out of range for shape {a.data.shape}")


# -- softmax family ----------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    _check_axis(a, axis)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        _accum(a, (g - dot) * data)

    return _make(data, (a,), bwd, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    _check_axis(a, axis)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse
    soft = np.exp(data)

    def bwd(g):
        _accum(a, g - soft * g.sum(axis=axis, keepdims=True))

    return _make(data, (a,), bwd, "log_softmax")


# -- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shapes incompatible: {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _make(data, (a, b), bwd, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight + bias`` for x:[N,D], weight:[D,M], bias:[M]."""
    if bias.data.shape != (weight.data.shape[1],):
        raise ValueError(
            f"bias shape {bias.data.shape} does not match output width {weight.data.shape[1]}"
        )
    return add(matmul(x, weight), bias)


# -- convolution and pooling -------------------------------------------------


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Valid cross-correlation, stride 1, no padding.

    x:[N,C,H,W], kernel:[F,C,KH,KW], bias:[F] -> [N,F,H-KH+1,W-KW+1].
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ValueError(
            f"conv2d expects 4-d input and kernel, got {x.data.shape} and {kernel.data.shape}"
        )
    n, c, h, w = x.data.shape
    f, ck, kh, kw = kernel.data.shape
    if ck != c:
        raise ValueError(f"conv2d channel mismatch: input has {c}, kernel expects {ck}")
    if h < kh or w < kw:
        raise ValueError(f"conv2d spatial dims {h}x{w} smaller than kernel {kh}x{kw}")
    if bias.data.shape != (f,):
        raise ValueError(f"conv2d bias shape {bias.data.shape}, expected ({f},)")
    oh, ow = h - kh + 1, w - kw + 1

    win = np.lib.stride_tricks.sliding_window_view(x.data, (kh, kw), axis=(2, 3))
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * kh * kw)
    wmat = kernel.data.reshape(f, c * kh * kw)
    out = cols @ wmat.T + bias.data
    data = out.reshape(n, oh, ow, f).transpose(0, 3, 1, 2)

    def bwd(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, f)
        if kernel.requires_grad:
            _accum(kernel, (gm.T @ cols).reshape(f, c, kh, kw))
        if bias.requires_grad:
            _accum(bias, gm.sum(axis=0))
        if x.requires_grad:
            gcols = (gm @ wmat).reshape(n, oh, ow, c, kh, kw)
            gx = np.zeros((n, c, h, w))
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i : i + oh, j : j + ow] += gcols[:, :, :, :, i, j].transpose(
                        0, 3, 1, 2
                    )
            _accum(x, gx)

    return _make(data, (x, kernel, bias), bwd, "conv2d")


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2. Gradient goes to the first max in each
    window under row-major scan (deterministic tie-break)."""
    if x.data.ndim != 4:
        raise ValueError(f"maxpool2x2 expects 4-d input, got {x.data.shape}")
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2x2 requires even spatial dims, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    win = np.ascontiguousarray(
        x.data.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5)
    ).reshape(n, c, h2, w2, 4)
    idx = win.argmax(axis=-1)
    data = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        gwin = np.zeros((n, c, h2, w2, 4))
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gx = gwin.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        _accum(x, gx)

    return _make(data, (x,), bwd, "maxpool2x2")


# -- losses -------------------------------------------------------------------


def mse_loss(a: Tensor, b: Tensor) -> Tensor:
    """Mean over the leading (batch) axis of the squared L2 distance."""
    if a.data.shape != b.data.shape:
        raise ValueError(f"mse_loss shape mismatch: {a.data.shape} vs {b.data.shape}")
    batch = a.data.shape[0] if a.data.ndim >= 1 else 1
    diff = a.data - b.data
    data = np.asarray((diff * diff).sum() / batch)

    def bwd(g):
        scaled = (2.0 / batch) * g * diff
        if a.requires_grad:
            _accum(a, scaled)
        if b.requires_grad:
            _accum(b, -scaled)

    return _make(data, (a, b), bwd, "mse_loss")


def nll_loss(logp: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under log-probs [N,K]."""
    y = np.asarray(labels)
    if logp.data.ndim != 2:
        raise ValueError(f"nll_loss expects [N,K] log-probs, got {logp.data.shape}")
    n, k = logp.data.shape
    if y.shape != (n,):
        raise ValueError(f"nll_loss labels shape {y.shape}, expected ({n},)")
    if y.min() < 0 or y.max() >= k:
        raise ValueError(f"label out of range [0,{k}): {y.min()}..{y.max()}")
    rows = np.arange(n)
    data = np.asarray(-logp.data[rows, y].mean())

    def bwd(g):
        gl = np.zeros((n, k))
        gl[rows, y] = -g / n
        _accum(logp, gl)

    return _make(data, (logp,), bwd, "nll_loss")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    return nll_loss(log_softmax(logits, axis=-1), labels)
