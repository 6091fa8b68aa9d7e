"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op's backward is itself written in terms of differentiable ops, so
gradients can be differentiated again (``grad(..., create_graph=True)``).
Grad-CAM relies on this: the channel weights are gradients, and the
alignment losses need their derivative with respect to the parameters.

Layout is row-major NCHW. Binary ops accept equal shapes or a scalar on one
side; anything else needs an explicit ``expand``/``reshape``.
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


class GraphError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def enable_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = True
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def _as_array(data) -> np.ndarray:
    arr = np.array(data, dtype=np.float64)
    return arr


class Tensor:
    """A float64 array plus an optional link to the op that produced it."""

    __slots__ = ("data", "requires_grad", "grad", "_ctx", "name", "retain_grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = data if isinstance(data, np.ndarray) and data.dtype == np.float64 else _as_array(data)
        if any(s <= 0 for s in arr.shape):
            raise ValueError(f"tensor shape must have positive entries, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._ctx: Function | None = None
        self.name = name
        self.retain_grad = False

    # -- basic properties ---------------------------------------------------
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
    def is_leaf(self) -> bool:
        return self._ctx is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})\n{self.data!r}"

    def __len__(self) -> int:
        return self.shape[0]

    # -- arithmetic ---------------------------------------------------------
    def __add__(self, other):
        return Add.apply(self, _lift(other))

    def __radd__(self, other):
        return Add.apply(_lift(other), self)

    def __sub__(self, other):
        return Sub.apply(self, _lift(other))

    def __rsub__(self, other):
        return Sub.apply(_lift(other), self)

    def __mul__(self, other):
        return Mul.apply(self, _lift(other))

    def __rmul__(self, other):
        return Mul.apply(_lift(other), self)

    def __truediv__(self, other):
        return Div.apply(self, _lift(other))

    def __rtruediv__(self, other):
        return Div.apply(_lift(other), self)

    def __neg__(self):
        return Neg.apply(self)

    def __pow__(self, exponent: float):
        if isinstance(exponent, Tensor):
            raise TypeError("only scalar float exponents are supported")
        return PowScalar.apply(self, exponent=float(exponent))

    def __matmul__(self, other):
        return MatMul.apply(self, other)

    def __getitem__(self, index):
        return Slice.apply(self, index=_normalize_slices(index, self.shape))

    # -- elementwise --------------------------------------------------------
    def exp(self):
        return Exp.apply(self)

    def log(self):
        return Log.apply(self)

    def abs(self):
        return Abs.apply(self)

    def relu(self):
        return ReLU.apply(self)

    def sigmoid(self):
        return Sigmoid.apply(self)

    def tanh(self):
        return Tanh.apply(self)

    def sqrt(self):
        return PowScalar.apply(self, exponent=0.5)

    def clamp(self, lo: float | None = None, hi: float | None = None):
        return Clamp.apply(self, lo=lo, hi=hi)

    # -- reductions / shape -------------------------------------------------
    def sum(self, axes=None, keepdims: bool = False):
        return Sum.apply(self, axes=_normalize_axes(axes, self.ndim), keepdims=keepdims)

    def mean(self, axes=None, keepdims: bool = False):
        ax = _normalize_axes(axes, self.ndim)
        count = int(np.prod([self.shape[a] for a in ax])) if ax else 1
        return Sum.apply(self, axes=ax, keepdims=keepdims) * (1.0 / count)

    def abs_sum(self, axes=None, keepdims: bool = False):
        return self.abs().sum(axes, keepdims)

    def max(self, axes=None, keepdims: bool = False):
        return Max.apply(self, axes=_normalize_axes(axes, self.ndim), keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        new_shape = np.empty(self.shape, dtype=np.uint8).reshape(shape).shape
        return Reshape.apply(self, shape=new_shape)

    def transpose(self, *perm):
        if len(perm) == 1 and isinstance(perm[0], (tuple, list)):
            perm = tuple(perm[0])
        if not perm:
            perm = tuple(reversed(range(self.ndim)))
        if sorted(perm) != list(range(self.ndim)):
            raise ValueError(f"invalid permutation {perm} for shape {self.shape}")
        return Transpose.apply(self, perm=tuple(perm))

    @property
    def T(self):
        return self.transpose()

    def expand(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Expand.apply(self, shape=tuple(int(s) for s in shape))

    def pick(self, index: Sequence[int]):
        """Row-wise selection ``out[i] = self[i, index[i]]`` for a 2-D tensor."""
        return Pick.apply(self, index=np.asarray(index, dtype=np.int64))

    # -- autograd -----------------------------------------------------------
    def backward(self, retain_graph: bool = False) -> None:
        backward(self, retain_graph=retain_graph)


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float, np.floating, np.integer)):
        return Tensor(float(x))
    raise TypeError(f"cannot combine Tensor with {type(x).__name__}")


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def _normalize_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, (int, np.integer)):
        axes = (int(axes),)
    out = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise ValueError(f"axis {a} out of range for {ndim}-d tensor")
        out.append(a % ndim)
    if len(set(out)) != len(out):
        raise ValueError(f"duplicate axes {axes}")
    return tuple(sorted(out))


def _normalize_slices(index, shape) -> tuple[slice, ...]:
    if not isinstance(index, tuple):
        index = (index,)
    if len(index) > len(shape):
        raise IndexError(f"too many indices for shape {shape}")
    out = []
    for idx, n in zip(index, shape):
        if not isinstance(idx, slice):
            raise TypeError("tensor indexing supports basic slices only; use pick() for gathers")
        start, stop, step = idx.indices(n)
        if step != 1:
            raise ValueError("slice steps other than 1 are not supported")
        if stop <= start:
            raise ValueError(f"empty slice {idx} on axis of size {n}")
        out.append(slice(start, stop))
    out.extend(slice(0, n) for n in shape[len(index):])
    return tuple(out)


# ---------------------------------------------------------------------------
# Function machinery
# ---------------------------------------------------------------------------


class Function:
    """One recorded op. Subclasses implement ``forward`` on arrays and
    ``backward`` on Tensors (so the backward pass is differentiable too)."""

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs
        self.needs = tuple(t.requires_grad for t in inputs)
        self.freed = False

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        fn = cls(*inputs)
        fn.kwargs = kwargs
        out_data = fn.forward(*(t.data for t in inputs), **kwargs)
        if not np.all(np.isfinite(out_data)):
            raise FloatingPointError(f"{cls.__name__} produced non-finite values")
        out = Tensor(out_data)
        if _GRAD_ENABLED and any(fn.needs):
            out.requires_grad = True
            out._ctx = fn
        return out

    def forward(self, *arrays, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: Tensor) -> tuple[Tensor | None, ...]:
        raise NotImplementedError


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ValueError(
            f"{op}: shapes {a.shape} and {b.shape} differ; broadcasting is limited to "
            "scalar-tensor, use expand() or reshape()"
        )


def _reduce_to(grad: Tensor, like: Tensor) -> Tensor:
    if like.ndim == 0 and grad.ndim != 0:
        return grad.sum()
    return grad


class Add(Function):
    def forward(self, a, b):
        _check_binary(*self.inputs, "add")
        return a + b

    def backward(self, g):
        a, b = self.inputs
        return _reduce_to(g, a), _reduce_to(g, b)


class Sub(Function):
    def forward(self, a, b):
        _check_binary(*self.inputs, "sub")
        return a - b

    def backward(self, g):
        a, b = self.inputs
        return _reduce_to(g, a), _reduce_to(-g, b)


class Mul(Function):
    def forward(self, a, b):
        _check_binary(*self.inputs, "mul")
        return a * b

    def backward(self, g):
        a, b = self.inputs
        ga = _reduce_to(g * b, a) if self.needs[0] else None
        gb = _reduce_to(g * a, b) if self.needs[1] else None
        return ga, gb


class Div(Function):
    def forward(self, a, b):
        _check_binary(*self.inputs, "div")
        return a / b

    def backward(self, g):
        a, b = self.inputs
        ga = _reduce_to(g / b, a) if self.needs[0] else None
        gb = _reduce_to(-(g * a) / (b * b), b) if self.needs[1] else None
        return ga, gb


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, g):
        return (-g,)


class PowScalar(Function):
    def forward(self, a, exponent):
        return a**exponent

    def backward(self, g):
        (a,) = self.inputs
        p = self.kwargs["exponent"]
        if p == 1.0:
            return (g,)
        if p == 2.0:
            return (g * a * 2.0,)
        return (g * (a ** (p - 1.0)) * p,)


class Exp(Function):
    def forward(self, a):
        return np.exp(a)

    def backward(self, g):
        return (g * self.inputs[0].exp(),)


class Log(Function):
    def forward(self, a):
        if np.any(a <= 0):
            raise FloatingPointError("log of a non-positive value")
        return np.log(a)

    def backward(self, g):
        return (g / self.inputs[0],)


class Abs(Function):
    def forward(self, a):
        return np.abs(a)

    def backward(self, g):
        return (g * Tensor(np.sign(self.inputs[0].data)),)


class ReLU(Function):
    def forward(self, a):
        return np.maximum(a, 0.0)

    def backward(self, g):
        return (g * Tensor((self.inputs[0].data > 0).astype(np.float64)),)


def _sigmoid(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


class Sigmoid(Function):
    def forward(self, a):
        return _sigmoid(a)

    def backward(self, g):
        s = self.inputs[0].sigmoid()
        return (g * s * (1.0 - s),)


class Tanh(Function):
    def forward(self, a):
        return np.tanh(a)

    def backward(self, g):
        t = self.inputs[0].tanh()
        return (g * (1.0 - t * t),)


class Clamp(Function):
    def forward(self, a, lo, hi):
        return np.clip(a, -np.inf if lo is None else lo, np.inf if hi is None else hi)

    def backward(self, g):
        a = self.inputs[0].data
        lo, hi = self.kwargs["lo"], self.kwargs["hi"]
        keep = np.ones_like(a)
        if lo is not None:
            keep[a < lo] = 0.0
        if hi is not None:
            keep[a > hi] = 0.0
        return (g * Tensor(keep),)


class Sum(Function):
    def forward(self, a, axes, keepdims):
        return np.asarray(a.sum(axis=axes, keepdims=keepdims), dtype=np.float64)

    def backward(self, g):
        (a,) = self.inputs
        axes = self.kwargs["axes"]
        if not self.kwargs["keepdims"]:
            kept = tuple(1 if i in axes else n for i, n in enumerate(a.shape))
            g = g.reshape(kept)
        return (g.expand(a.shape),)


class Max(Function):
    """Max reduction; the gradient goes to the first maximal entry (row-major)."""

    def forward(self, a, axes, keepdims):
        return np.asarray(a.max(axis=axes, keepdims=keepdims), dtype=np.float64)

    def backward(self, g):
        (a,) = self.inputs
        axes = self.kwargs["axes"]
        data = a.data
        rest = tuple(i for i in range(data.ndim) if i not in axes)
        moved = np.transpose(data, rest + axes)
        lead = moved.shape[: len(rest)]
        flat = moved.reshape(lead + (-1,))
        arg = flat.argmax(axis=-1)
        onehot = np.zeros_like(flat)
        np.put_along_axis(onehot, arg[..., None], 1.0, axis=-1)
        onehot = onehot.reshape(moved.shape)
        inv = np.argsort(rest + axes)
        onehot = np.transpose(onehot, inv)
        kept = tuple(1 if i in axes else n for i, n in enumerate(data.shape))
        return (g.reshape(kept).expand(data.shape) * Tensor(onehot),)


class Reshape(Function):
    def forward(self, a, shape):
        return a.reshape(shape)

    def backward(self, g):
        return (g.reshape(self.inputs[0].shape),)


class Transpose(Function):
    def forward(self, a, perm):
        return np.transpose(a, perm)

    def backward(self, g):
        inv = tuple(int(i) for i in np.argsort(self.kwargs["perm"]))
        return (g.transpose(inv),)


class Expand(Function):
    def forward(self, a, shape):
        if a.ndim != len(shape):
            raise ValueError(f"expand: rank mismatch {a.shape} -> {shape}")
        for s, t in zip(a.shape, shape):
            if s != t and s != 1:
                raise ValueError(f"expand: cannot expand {a.shape} to {shape}")
        return np.broadcast_to(a, shape)

    def backward(self, g):
        (a,) = self.inputs
        axes = tuple(i for i, (s, t) in enumerate(zip(a.shape, self.kwargs["shape"])) if s != t)
        if not axes:
            return (g,)
        return (g.sum(axes, keepdims=True),)


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
        return a @ b

    def backward(self, g):
        a, b = self.inputs
        ga = g @ b.transpose(1, 0) if self.needs[0] else None
        gb = a.transpose(1, 0) @ g if self.needs[1] else None
        return ga, gb


class Pick(Function):
    def forward(self, a, index):
        if a.ndim != 2 or index.shape != (a.shape[0],):
            raise ValueError(f"pick: need 2-d input and one index per row, got {a.shape}, {index.shape}")
        if np.any(index < 0) or np.any(index >= a.shape[1]):
            raise IndexError(f"pick: index out of range for {a.shape[1]} columns")
        return a[np.arange(a.shape[0]), index]

    def backward(self, g):
        return (Unpick.apply(g, index=self.kwargs["index"], width=self.inputs[0].shape[1]),)


class Unpick(Function):
    def forward(self, g, index, width):
        out = np.zeros((g.shape[0], width))
        out[np.arange(g.shape[0]), index] = g
        return out

    def backward(self, gg):
        return (gg.pick(self.kwargs["index"]),)


class Slice(Function):
    def forward(self, a, index):
        return np.ascontiguousarray(a[index])

    def backward(self, g):
        return (Unslice.apply(g, index=self.kwargs["index"], shape=self.inputs[0].shape),)


class Unslice(Function):
    def forward(self, g, index, shape):
        out = np.zeros(shape)
        out[index] = g
        return out

    def backward(self, gg):
        return (Slice.apply(gg, index=self.kwargs["index"]),)


# ---------------------------------------------------------------------------
# Convolution. Three bilinear ops that are closed under differentiation:
#   y  = conv(x, w)
#   gx = conv_input_grad(gy, w)   (transposed convolution)
#   gw = conv_kernel_grad(x, gy)
# ---------------------------------------------------------------------------


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]  # N, C, H', W', kh, kw


def _conv_out_size(n: int, k: int, stride: int, padding: int) -> int:
    span = n + 2 * padding - k
    if span < 0:
        raise ValueError(f"conv2d: kernel size {k} exceeds padded input size {n + 2 * padding}")
    if span % stride:
        raise ValueError(
            f"conv2d: output size ({n}+2*{padding}-{k})/{stride}+1 is not an integer"
        )
    return span // stride + 1


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    n, c, h, wd = x.shape
    f, c2, kh, kw = w.shape
    ho = _conv_out_size(h, kh, stride, padding)
    wo = _conv_out_size(wd, kw, stride, padding)
    win = _windows(_pad(x, padding), kh, kw, stride)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    out = cols @ w.reshape(f, -1).T
    return np.ascontiguousarray(out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2))


def _conv_kernel_grad(x: np.ndarray, gy: np.ndarray, kshape, stride: int, padding: int) -> np.ndarray:
    n, c, _, _ = x.shape
    f = gy.shape[1]
    kh, kw = kshape
    win = _windows(_pad(x, padding), kh, kw, stride)
    ho, wo = gy.shape[2], gy.shape[3]
    win = win[:, :, :ho, :wo]
    cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * kh * kw, n * ho * wo)
    gmat = np.ascontiguousarray(gy.transpose(1, 0, 2, 3)).reshape(f, n * ho * wo)
    return (gmat @ cols.T).reshape(f, c, kh, kw)


def _conv_input_grad(gy: np.ndarray, w: np.ndarray, in_hw, stride: int, padding: int) -> np.ndarray:
    n, f, ho, wo = gy.shape
    _, c, kh, kw = w.shape
    h, wd = in_hw
    if stride > 1:
        dil = np.zeros((n, f, (ho - 1) * stride + 1, (wo - 1) * stride + 1))
        dil[:, :, ::stride, ::stride] = gy
    else:
        dil = gy
    full = np.pad(dil, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    wflip = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    gxp = _conv_forward(full, wflip, 1, 0)
    # gxp covers the padded input; crop the padding back off
    return np.ascontiguousarray(gxp[:, :, padding:padding + h, padding:padding + wd])


class Conv2d(Function):
    def forward(self, x, w, stride, padding):
        if x.ndim != 4 or w.ndim != 4:
            raise ValueError(f"conv2d: need 4-d input and kernel, got {x.shape} and {w.shape}")
        if x.shape[1] != w.shape[1]:
            raise ValueError(
                f"conv2d: input {x.shape} has {x.shape[1]} channels but kernel {w.shape} expects {w.shape[1]}"
            )
        if stride < 1:
            raise ValueError("conv2d: stride must be >= 1")
        return _conv_forward(x, w, stride, padding)

    def backward(self, g):
        x, w = self.inputs
        s, p = self.kwargs["stride"], self.kwargs["padding"]
        gx = ConvInputGrad.apply(g, w, in_hw=x.shape[2:], stride=s, padding=p) if self.needs[0] else None
        gw = ConvKernelGrad.apply(x, g, kshape=w.shape[2:], stride=s, padding=p) if self.needs[1] else None
        return gx, gw


class ConvInputGrad(Function):
    def forward(self, gy, w, in_hw, stride, padding):
        return _conv_input_grad(gy, w, in_hw, stride, padding)

    def backward(self, gg):
        gy, w = self.inputs
        s, p = self.kwargs["stride"], self.kwargs["padding"]
        d_gy = Conv2d.apply(gg, w, stride=s, padding=p) if self.needs[0] else None
        d_w = ConvKernelGrad.apply(gg, gy, kshape=w.shape[2:], stride=s, padding=p) if self.needs[1] else None
        return d_gy, d_w


class ConvKernelGrad(Function):
    def forward(self, x, gy, kshape, stride, padding):
        return _conv_kernel_grad(x, gy, kshape, stride, padding)

    def backward(self, gg):
        x, gy = self.inputs
        s, p = self.kwargs["stride"], self.kwargs["padding"]
        d_x = ConvInputGrad.apply(gy, gg, in_hw=x.shape[2:], stride=s, padding=p) if self.needs[0] else None
        d_gy = Conv2d.apply(x, gg, stride=s, padding=p) if self.needs[1] else None
        return d_x, d_gy


# ---------------------------------------------------------------------------
# Backward engine
# ---------------------------------------------------------------------------


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for inp in reversed(node._ctx.inputs):
                if inp.requires_grad and id(inp) not in seen:
                    stack.append((inp, False))
    return order


def _propagate(root: Tensor, targets: Sequence[Tensor] | None, create_graph: bool, retain_graph: bool):
    if root.size != 1:
        raise GraphError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise GraphError("root does not require grad; nothing was recorded")
    order = _toposort(root)
    relevant: set[int] | None = None
    if targets is not None:
        target_ids = {id(t) for t in targets}
        relevant = set()
        for node in order:
            if id(node) in target_ids or (
                node._ctx is not None and any(id(i) in relevant for i in node._ctx.inputs)
            ):
                relevant.add(id(node))
    grads: dict[int, Tensor] = {id(root): Tensor(np.ones(root.shape))}
    ctx_mgr = enable_grad() if create_graph else no_grad()
    with ctx_mgr:
        for node in reversed(order):
            fn = node._ctx
            if fn is None:
                continue
            if relevant is not None and id(node) not in relevant:
                continue
            g = grads.get(id(node))
            if g is None:
                continue
            if fn.freed:
                raise GraphError("graph has been freed by an earlier backward(); pass retain_graph=True")
            saved_needs = fn.needs
            if relevant is not None:
                fn.needs = tuple(n and id(i) in relevant for n, i in zip(fn.needs, fn.inputs))
            try:
                in_grads = fn.backward(g)
            finally:
                fn.needs = saved_needs
            for inp, ig in zip(fn.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if relevant is not None and id(inp) not in relevant:
                    continue
                prev = grads.get(id(inp))
                grads[id(inp)] = ig if prev is None else prev + ig
    if not retain_graph:
        for node in order:
            if node._ctx is not None:
                node._ctx.freed = True
    return order, grads


def backward(root: Tensor, retain_graph: bool = False) -> None:
    """Accumulate d(root)/d(t) into ``t.grad`` for every leaf that requires grad
    (and for non-leaves flagged ``retain_grad``)."""
    order, grads = _propagate(root, None, create_graph=False, retain_graph=retain_graph)
    for node in order:
        if node.requires_grad and (node._ctx is None or node.retain_grad):
            g = grads.get(id(node))
            if g is None:
                continue
            if not np.all(np.isfinite(g.data)):
                raise FloatingPointError("non-finite gradient")
            node.grad = g.data.copy() if node.grad is None else node.grad + g.data


def grad(root: Tensor, inputs: Sequence[Tensor], create_graph: bool = False,
         retain_graph: bool | None = None) -> list[Tensor]:
    """Return d(root)/d(input) for each input without touching ``.grad``.

    Inputs may be intermediate tensors. With ``create_graph`` the returned
    tensors are themselves differentiable.
    """
    if retain_graph is None:
        retain_graph = create_graph
    inputs = list(inputs)
    _, grads = _propagate(root, inputs, create_graph=create_graph, retain_graph=retain_graph)
    out = []
    for t in inputs:
        g = grads.get(id(t))
        out.append(g if g is not None else Tensor(np.zeros(t.shape)))
    return out


# ---------------------------------------------------------------------------
# Public op surface
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    out = Conv2d.apply(x, kernel, stride=int(stride), padding=int(padding))
    if bias is not None:
        f = kernel.shape[0]
        if bias.shape != (f,):
            raise ValueError(f"conv2d: bias shape {bias.shape} does not match {f} filters")
        out = out + bias.reshape(1, f, 1, 1).expand(out.shape)
    return out


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return x.relu()
    if kind == "sigmoid":
        return x.sigmoid()
    raise ValueError(f"unknown activation {kind!r}")


def reduce(x: Tensor, kind: str, axes=None) -> Tensor:
    if kind == "sum":
        return x.sum(axes)
    if kind == "mean":
        return x.mean(axes)
    if kind == "abs_sum":
        return x.abs_sum(axes)
    raise ValueError(f"unknown reduction {kind!r}")


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    # align-corners: output index i sits at input coordinate i*(n_in-1)/(n_out-1)
    m = np.zeros((n_out, n_in))
    if n_in == 1 or n_out == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    m[np.arange(n_out), lo] = 1.0 - frac
    m[np.arange(n_out), lo + 1] += frac
    return m


def bilinear_upsample(x: Tensor, target: tuple[int, int]) -> Tensor:
    """Align-corners bilinear upsampling of an ``(N, 1, h, w)`` map to ``target``."""
    if x.ndim != 4 or x.shape[1] != 1:
        raise ValueError(f"bilinear_upsample expects (N,1,h,w), got {x.shape}")
    n, _, h, w = x.shape
    big_h, big_w = target
    if big_h < h or big_w < w:
        raise ValueError(f"bilinear_upsample: cannot downsample {h}x{w} to {big_h}x{big_w}")
    if (big_h, big_w) == (h, w):
        return x
    rows = Tensor(_interp_matrix(h, big_h))
    cols = Tensor(_interp_matrix(w, big_w))
    t = x.reshape(n * h, w) @ cols.transpose(1, 0)           # (N*h, W)
    t = t.reshape(n, h, big_w).transpose(0, 2, 1).reshape(n * big_w, h)
    t = t @ rows.transpose(1, 0)                               # (N*W, H)
    return t.reshape(n, big_w, big_h).transpose(0, 2, 1).reshape(n, 1, big_h, big_w)


def avg_pool2x2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2x2 needs even spatial dims, got {h}x{w}")
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean((3, 5))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shift = Tensor(x.data.max(axis=axis, keepdims=True))
    e = (x - shift.expand(x.shape)).exp()
    return e / e.sum(axis, keepdims=True).expand(x.shape)


def broadcast_channels(m: Tensor, channels: int) -> Tensor:
    """Repeat a single-channel ``(N,1,H,W)`` map across ``channels``."""
    n, _, h, w = m.shape
    return m.expand(n, channels, h, w)


def finite_difference_check(fn, x: Tensor | np.ndarray, step: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central| / max(1, |central|)."""
    if not 0 < step <= 1e-2:
        raise ValueError(f"step must be in (0, 1e-2], got {step}")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    out = fn(xt)
    if not np.isfinite(out.data).all():
        raise FloatingPointError("function value is not finite")
    (analytic,) = grad(out, [xt])
    analytic = analytic.data
    numeric = np.empty_like(x0)
    flat = x0.reshape(-1)
    num_flat = numeric.reshape(-1)
    # inputs keep requires_grad so functions that differentiate internally still work
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        fp = fn(Tensor(x0.copy(), requires_grad=True)).item()
        flat[i] = old - step
        fm = fn(Tensor(x0.copy(), requires_grad=True)).item()
        flat[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError("non-finite function value during finite differencing")
        num_flat[i] = (fp - fm) / (2 * step)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))


def parameters_hash(params: Iterable[Tensor]) -> str:
    import hashlib

    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()
