"""Dense float tensors with reverse-mode automatic differentiation.

The engine is deliberately small: it provides exactly the operations the two
model families need (conv, 2x2 maxpool, nearest upsample, relu/sigmoid,
channel concat, coordinate augmentation, elementwise arithmetic and full
reductions) plus SGD/Adam steps and He initialisation. Broadcasting is
limited to same-shape operands and python scalars.

Training math runs in float32; the finite-difference oracles build the same
graphs in float64 (a Tensor keeps the dtype of the array it is given).
"""

from __future__ import annotations

import contextlib
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import rng


class ShapeError(ValueError):
    """Operand dimensions are incompatible; the message reports them."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference / data preparation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-d float array acting as a node in an implicit gradient graph.

    Operation outputs keep references to their parent tensors plus a closure
    that routes gradients backwards; ``backward()`` on a scalar loss sorts
    that graph topologically and fills ``grad`` on every tensor that
    requires it. Tensors that do not require grad never store one.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backprop")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None and isinstance(data, np.ndarray) and data.dtype in (
            np.float32,
            np.float64,
        ):
            arr = np.ascontiguousarray(data)
        else:
            arr = np.ascontiguousarray(np.asarray(data, dtype=dtype or np.float32))
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backprop = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    # -- graph plumbing ----------------------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents: tuple["Tensor", ...], backprop) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        tracked = tuple(p for p in parents if p.requires_grad)
        if _grad_enabled and tracked:
            out.requires_grad = True
            out._parents = tracked
            out._backprop = backprop
        else:
            out.requires_grad = False
            out._parents = ()
            out._backprop = None
        return out

    def _accum(self, g: np.ndarray, own: bool = False) -> None:
        # own=True means g's buffer is exclusively ours and may be kept/mutated
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = g if own else np.array(g)
        else:
            self.grad += g

    def backward(self) -> None:
        """Reverse traversal from a scalar; fills grad on reachable tensors."""
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.data.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                topo.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for p in t._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for t in reversed(topo):
            if t._backprop is not None:
                t._backprop()

    def zero_grad(self) -> None:
        self.grad = None

    # -- elementwise arithmetic (same shape or python scalar) ---------------

    def _coerce(self, other) -> np.ndarray | float:
        if isinstance(other, Tensor):
            if other.data.shape != self.data.shape:
                raise ShapeError(
                    f"elementwise operands differ in shape: {self.data.shape} vs {other.data.shape}"
                )
            return other
        if isinstance(other, (int, float)):
            return float(other)
        raise TypeError(f"unsupported operand type {type(other).__name__}")

    def __add__(self, other):
        other = self._coerce(other)
        if isinstance(other, Tensor):
            out_data = self.data + other.data

            def backprop():
                self._accum(out.grad)
                other._accum(out.grad)

            out = Tensor._result(out_data, (self, other), backprop)
        else:
            out_data = self.data + other

            def backprop():
                self._accum(out.grad)

            out = Tensor._result(out_data, (self,), backprop)
        return out

    __radd__ = __add__

    def __neg__(self):
        out_data = -self.data

        def backprop():
            self._accum(-out.grad, own=True)

        out = Tensor._result(out_data, (self,), backprop)
        return out

    def __sub__(self, other):
        other = self._coerce(other)
        if isinstance(other, Tensor):
            out_data = self.data - other.data

            def backprop():
                self._accum(out.grad)
                other._accum(-out.grad, own=True)

            out = Tensor._result(out_data, (self, other), backprop)
        else:
            out_data = self.data - other

            def backprop():
                self._accum(out.grad)

            out = Tensor._result(out_data, (self,), backprop)
        return out

    def __rsub__(self, other):
        return (-self) + float(other)

    def __mul__(self, other):
        other = self._coerce(other)
        if isinstance(other, Tensor):
            out_data = self.data * other.data

            def backprop():
                self._accum(out.grad * other.data, own=True)
                other._accum(out.grad * self.data, own=True)

            out = Tensor._result(out_data, (self, other), backprop)
        else:
            out_data = self.data * other

            def backprop():
                self._accum(out.grad * other, own=True)

            out = Tensor._result(out_data, (self,), backprop)
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        if isinstance(other, Tensor):
            out_data = self.data / other.data

            def backprop():
                self._accum(out.grad / other.data, own=True)
                other._accum(-out.grad * self.data / (other.data * other.data), own=True)

            out = Tensor._result(out_data, (self, other), backprop)
        else:
            out_data = self.data / other

            def backprop():
                self._accum(out.grad / other, own=True)

            out = Tensor._result(out_data, (self,), backprop)
        return out

    def __rtruediv__(self, other):
        num = float(other)
        out_data = num / self.data

        def backprop():
            self._accum(-out.grad * num / (self.data * self.data), own=True)

        out = Tensor._result(out_data, (self,), backprop)
        return out

    def sum(self) -> "Tensor":
        out_data = self.data.sum()

        def backprop():
            self._accum(np.broadcast_to(out.grad, self.data.shape))

        out = Tensor._result(np.asarray(out_data), (self,), backprop)
        return out

    def mean(self) -> "Tensor":
        n = self.data.size
        out_data = self.data.mean()

        def backprop():
            self._accum(np.broadcast_to(out.grad / n, self.data.shape))

        out = Tensor._result(np.asarray(out_data), (self,), backprop)
        return out


def as_tensor(x, dtype=None) -> Tensor:
    """Wrap an array as a constant (non-differentiable) tensor."""
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=False, dtype=dtype)


# -- neural ops --------------------------------------------------------------


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeError(msg)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of [N,C,H,W] with [F,C,kh,kw] plus per-channel bias.

    Kernel sides must be odd and the output size (H + 2p - kh)/stride + 1
    integral. Differentiable w.r.t. input, weight and bias.
    """
    _require(x.data.ndim == 4, f"conv2d input must be [N,C,H,W], got shape {x.data.shape}")
    _require(weight.data.ndim == 4, f"conv2d weight must be [F,C,kh,kw], got shape {weight.data.shape}")
    n, c, h, w = x.data.shape
    f, cw, kh, kw = weight.data.shape
    _require(cw == c, f"conv2d channel mismatch: input has {c} channels, weight expects {cw} "
                      f"(input {x.data.shape}, weight {weight.data.shape})")
    _require(kh % 2 == 1 and kw % 2 == 1, f"conv2d kernel sides must be odd, got {kh}x{kw}")
    _require(bias.data.shape == (f,), f"conv2d bias must have shape ({f},), got {bias.data.shape}")
    _require(stride >= 1 and padding >= 0, f"conv2d needs stride >= 1, padding >= 0, got {stride}, {padding}")
    span_h = h + 2 * padding - kh
    span_w = w + 2 * padding - kw
    _require(span_h >= 0 and span_h % stride == 0 and span_w >= 0 and span_w % stride == 0,
             f"conv2d output size not integral for input {h}x{w}, kernel {kh}x{kw}, "
             f"stride {stride}, padding {padding}")
    ho = span_h // stride + 1
    wo = span_w // stride + 1

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    # columns laid out [N, C*kh*kw, Ho*Wo] so the copy runs over contiguous
    # rows and the batched GEMM emits NCHW directly
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(windows.transpose(0, 1, 4, 5, 2, 3)).reshape(
        n, c * kh * kw, ho * wo
    )
    w2 = weight.data.reshape(f, c * kh * kw)
    out_data = (w2 @ cols).reshape(n, f, ho, wo)
    out_data += bias.data.reshape(1, f, 1, 1)

    def backprop():
        g2 = out.grad.reshape(n, f, ho * wo)
        if weight.requires_grad:
            gw = (g2 @ cols.transpose(0, 2, 1)).sum(axis=0)
            weight._accum(gw.reshape(weight.data.shape), own=True)
        if bias.requires_grad:
            bias._accum(out.grad.sum(axis=(0, 2, 3)), own=True)
        if x.requires_grad:
            gc = (w2.T @ g2).reshape(n, c, kh, kw, ho, wo)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gc[
                        :, :, i, j
                    ]
            if padding:
                x._accum(np.ascontiguousarray(gxp[:, :, padding : padding + h, padding : padding + w]), own=True)
            else:
                x._accum(gxp, own=True)

    out = Tensor._result(out_data, (x, weight, bias), backprop)
    return out


def maxpool2(x: Tensor) -> Tensor:
    """2x2 non-overlapping max pool; H and W must be even.

    Gradient routes to the stored argmax; ties go to the first position of
    the window in row-major order.
    """
    _require(x.data.ndim == 4, f"maxpool2 input must be [N,C,H,W], got shape {x.data.shape}")
    n, c, h, w = x.data.shape
    _require(h % 2 == 0 and w % 2 == 0, f"maxpool2 needs even H and W, got {h}x{w}")
    ho, wo = h // 2, w // 2
    win = np.ascontiguousarray(
        x.data.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5)
    ).reshape(n, c, ho, wo, 4)
    idx = win.argmax(axis=-1)
    out_data = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backprop():
        scatter = np.zeros((n, c, ho, wo, 4), dtype=out.grad.dtype)
        np.put_along_axis(scatter, idx[..., None], out.grad[..., None], axis=-1)
        gx = scatter.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        x._accum(np.ascontiguousarray(gx), own=True)

    out = Tensor._result(out_data, (x,), backprop)
    return out


def upsample_nearest2(x: Tensor) -> Tensor:
    """Replicate each pixel into a 2x2 block; backward sums the 4 children."""
    _require(x.data.ndim == 4, f"upsample input must be [N,C,H,W], got shape {x.data.shape}")
    n, c, h, w = x.data.shape
    out_data = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def backprop():
        x._accum(out.grad.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)), own=True)

    out = Tensor._result(out_data, (x,), backprop)
    return out


def relu(x: Tensor) -> Tensor:
    """max(0, x); gradient at exactly 0 is 0."""
    out_data = np.maximum(x.data, 0)

    def backprop():
        x._accum(out.grad * (x.data > 0), own=True)

    out = Tensor._result(out_data, (x,), backprop)
    return out


def sigmoid(x: Tensor) -> Tensor:
    """1/(1+exp(-x)), computed branch-wise so intermediates stay finite."""
    z = np.exp(-np.abs(x.data))
    out_data = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.data.dtype)

    def backprop():
        x._accum(out.grad * out_data * (1.0 - out_data), own=True)

    out = Tensor._result(out_data, (x,), backprop)
    return out


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the channel axis; a's channels come first."""
    _require(a.data.ndim == 4 and b.data.ndim == 4,
             f"concat operands must be [N,C,H,W], got {a.data.shape} and {b.data.shape}")
    _require(a.data.shape[0] == b.data.shape[0] and a.data.shape[2:] == b.data.shape[2:],
             f"concat spatial/batch mismatch: {a.data.shape} vs {b.data.shape}")
    ca = a.data.shape[1]
    out_data = np.concatenate((a.data, b.data), axis=1)

    def backprop():
        a._accum(out.grad[:, :ca])
        b._accum(out.grad[:, ca:])

    out = Tensor._result(out_data, (a, b), backprop)
    return out


def coord_channels(h: int, w: int, dtype=np.float32) -> np.ndarray:
    """[2,H,W] grid: x (column) then y (row), each linear in [-1, 1].

    A single row or column maps to 0.
    """
    xs = np.zeros(w, dtype=dtype) if w == 1 else (2.0 * np.arange(w, dtype=dtype) / (w - 1) - 1.0)
    ys = np.zeros(h, dtype=dtype) if h == 1 else (2.0 * np.arange(h, dtype=dtype) / (h - 1) - 1.0)
    grid = np.empty((2, h, w), dtype=dtype)
    grid[0] = xs[None, :]
    grid[1] = ys[:, None]
    return grid


def coord_augment(x: Tensor) -> Tensor:
    """Append normalised x and y coordinate channels to [N,C,H,W]."""
    _require(x.data.ndim == 4, f"coord_augment input must be [N,C,H,W], got shape {x.data.shape}")
    n, c, h, w = x.data.shape
    grid = coord_channels(h, w, dtype=x.data.dtype)
    out_data = np.concatenate((x.data, np.broadcast_to(grid, (n, 2, h, w))), axis=1)

    def backprop():
        x._accum(out.grad[:, :c])

    out = Tensor._result(out_data, (x,), backprop)
    return out


# -- initialisation and optimisers -------------------------------------------


def he_init(shape: tuple[int, ...], fan_in: int, seed: int) -> Tensor:
    """float32 parameter tensor from a seeded N(0, 2/fan_in) stream."""
    if fan_in < 1:
        raise ValueError(f"fan_in must be >= 1, got {fan_in}")
    count = int(np.prod(shape))
    vals = rng.normal(seed, count, std=math.sqrt(2.0 / fan_in))
    return Tensor(vals.astype(np.float32).reshape(shape), requires_grad=True)


def sgd_step(params: list[np.ndarray], grads: list[np.ndarray], lr: float) -> None:
    """In-place plain SGD update."""
    if len(params) != len(grads):
        raise ShapeError(f"sgd_step got {len(params)} params but {len(grads)} grads")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"sgd_step shape mismatch: param {p.shape} vs grad {g.shape}")
    for p, g in zip(params, grads):
        p -= lr * g


class AdamState:
    """First/second moment buffers plus the shared timestep."""

    def __init__(self, params: list[np.ndarray]):
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0


def adam_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """In-place Adam update with bias correction; advances state.t."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError(
            f"adam_step got {len(params)} params, {len(grads)} grads, state of {len(state.m)}"
        )
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"adam_step shape mismatch: param {p.shape}, grad {g.shape}, state {m.shape}")
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


class Adam:
    """Adam over a list of parameter tensors (uses their .grad buffers)."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState([p.data for p in self.params])

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step([p.data for p in self.params], grads, self.state,
                  self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


class SGD:
    """Plain SGD over a list of parameter tensors."""

    def __init__(self, params: list[Tensor], lr: float = 1e-2):
        self.params = list(params)
        self.lr = lr

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        sgd_step([p.data for p in self.params], grads, self.lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
