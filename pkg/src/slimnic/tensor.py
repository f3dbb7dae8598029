"""Dense float32 tensors with reverse-mode differentiation.

Only the operations the codec needs are provided. Convolution forwards
accumulate in a fixed order (input channel, then kernel row, then kernel
column) so that removing an all-zero input channel leaves every other
partial sum bit-identical; the pruner relies on this.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, NumericError

DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=DTYPE)
    return np.ascontiguousarray(arr)


class Tensor:
    """A float32 array plus the bookkeeping needed for backprop."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return mean(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data if data.dtype == DTYPE else data.astype(DTYPE)
    out.grad = None
    out.name = ""
    out._parents = ()
    out._backward = None
    out.requires_grad = False
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            pg = pg.astype(DTYPE, copy=False)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def grad(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _make(out, (a, b), grad)


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * ad * g,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (0.5 * g / out,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


_LN2 = DTYPE(np.log(2.0))


def log2(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log2(ad), (a,), lambda g: (g / (ad * _LN2),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # branch-free and overflow-safe for float32
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(DTYPE)


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor); gradient is zero where the floor is active."""
    ad = a.data
    keep = ad >= floor
    return _make(np.maximum(ad, DTYPE(floor)), (a,), lambda g: (g * keep,))


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.asarray(a.data.sum(), dtype=DTYPE), (a,),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return _make(np.asarray(a.data.mean(dtype=DTYPE), dtype=DTYPE), (a,),
                 lambda g: (np.full(shape, g / DTYPE(n), dtype=DTYPE),))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def take(a: Tensor, index) -> Tensor:
    shape = a.shape

    def grad(g):
        out = np.zeros(shape, dtype=DTYPE)
        out[index] = g
        return (out,)

    return _make(np.ascontiguousarray(a.data[index]), (a,), grad)


def stack(items: Sequence[Tensor]) -> Tensor:
    items = [_wrap(t) for t in items]
    data = np.stack([t.data for t in items])
    return _make(data, items, lambda g: tuple(g[i] for i in range(len(items))))


# ---------------------------------------------------------------- convolution


def _check_nchw(name: str, t: Tensor) -> None:
    if t.data.ndim != 4:
        raise DimensionError(f"{name}: expected 4 axes (B, C, H, W), got shape {t.shape}")


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def deconv_output_size(size: int, k: int, stride: int, padding: int, output_padding: int) -> int:
    return (size - 1) * stride - 2 * padding + k + output_padding


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    b, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(wd, k, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    out = np.zeros((b, cout, ho, wo), dtype=DTYPE)
    tmp = np.empty_like(out)
    hspan, wspan = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for ci in range(cin):
        plane = xp[:, ci:ci + 1]
        for ki in range(k):
            for kj in range(k):
                patch = plane[:, :, ki:ki + hspan:stride, kj:kj + wspan:stride]
                np.multiply(w[:, ci, ki, kj].reshape(1, cout, 1, 1), patch, out=tmp)
                np.add(out, tmp, out=out)
    return out


def _deconv_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int,
                    output_padding: int) -> np.ndarray:
    b, cin, h, wd = x.shape
    _, cout, k, _ = w.shape
    ho = deconv_output_size(h, k, stride, padding, output_padding)
    wo = deconv_output_size(wd, k, stride, padding, output_padding)
    full_h = (h - 1) * stride + k + output_padding
    full_w = (wd - 1) * stride + k + output_padding
    full = np.zeros((b, cout, full_h, full_w), dtype=DTYPE)
    tmp = np.empty((b, cout, h, wd), dtype=DTYPE)
    hspan, wspan = stride * (h - 1) + 1, stride * (wd - 1) + 1
    for ci in range(cin):
        plane = x[:, ci:ci + 1]
        for ki in range(k):
            for kj in range(k):
                np.multiply(w[ci, :, ki, kj].reshape(1, cout, 1, 1), plane, out=tmp)
                view = full[:, :, ki:ki + hspan:stride, kj:kj + wspan:stride]
                np.add(view, tmp, out=view)
    return np.ascontiguousarray(full[:, :, padding:padding + ho, padding:padding + wo])


def _scatter_windows(g: np.ndarray, w: np.ndarray, stride: int, padding: int,
                     out_h: int, out_w: int) -> np.ndarray:
    """Transpose of the strided window gather; order-free (gradients only).

    g: (B, O, Ho, Wo); w: (O, I, k, k). Returns (B, I, out_h, out_w).
    """
    b, o, ho, wo = g.shape
    _, i, k, _ = w.shape
    full_h = max((ho - 1) * stride + k, out_h + 2 * padding)
    full_w = max((wo - 1) * stride + k, out_w + 2 * padding)
    full = np.zeros((b, i, full_h, full_w), dtype=DTYPE)
    hspan, wspan = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for ki in range(k):
        for kj in range(k):
            contrib = np.einsum("bohw,oi->bihw", g, w[:, :, ki, kj], optimize=True)
            full[:, :, ki:ki + hspan:stride, kj:kj + wspan:stride] += contrib
    return full[:, :, padding:padding + out_h, padding:padding + out_w]


def _gather_windows(x: np.ndarray, k: int, stride: int, padding: int, ho: int, wo: int) -> np.ndarray:
    """(B, C, H, W) -> (B, C, Ho, Wo, k, k) strided windows of the zero-padded input."""
    b, c, h, wd = x.shape
    need_h = (ho - 1) * stride + k
    need_w = (wo - 1) * stride + k
    pad_b = max(0, need_h - h - padding)
    pad_r = max(0, need_w - wd - padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, pad_b), (padding, pad_r)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, :need_h - k + 1:stride, :need_w - k + 1:stride][:, :, :ho, :wo]


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor], stride: int = 1,
           padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` [B,Cin,H,W] with ``kernel`` [Cout,Cin,k,k]."""
    x, kernel = _wrap(x), _wrap(kernel)
    _check_nchw("conv2d input", x)
    _check_nchw("conv2d kernel", kernel)
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv2d: stride {stride} / padding {padding} invalid")
    cout, cin, k, k2 = kernel.shape
    if k != k2:
        raise DimensionError(f"conv2d: kernel must be square, got {k}x{k2}")
    if x.shape[1] != cin:
        raise DimensionError(f"conv2d: input channel axis 1 has {x.shape[1]}, "
                             f"kernel in-channel axis 1 has {cin}")
    if bias is not None:
        bias = _wrap(bias)
        if bias.shape != (cout,):
            raise DimensionError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    h, w = x.shape[2:]
    ho, wo = conv_output_size(h, k, stride, padding), conv_output_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: output size {ho}x{wo} from input {h}x{w}, kernel {k}")

    xd, wd = x.data, kernel.data
    out = _conv_forward(xd, wd, stride, padding)
    if bias is not None:
        out += bias.data.reshape(1, cout, 1, 1)

    def grad(g):
        gx = gw = gb = None
        if x.requires_grad:
            gx = _scatter_windows(g, wd, stride, padding, h, w)
        if kernel.requires_grad:
            cols = _gather_windows(xd, k, stride, padding, ho, wo)
            gw = np.einsum("bchwij,bohw->ocij", cols, g, optimize=True)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, kernel) + ((bias,) if bias is not None else (_wrap(0.0),))
    return _make(out, parents, grad)


def deconv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor], stride: int = 1,
             padding: int = 0, output_padding: int = 0) -> Tensor:
    """Transposed convolution; ``kernel`` is [Cin, Cout, k, k]."""
    x, kernel = _wrap(x), _wrap(kernel)
    _check_nchw("deconv2d input", x)
    _check_nchw("deconv2d kernel", kernel)
    cin, cout, k, k2 = kernel.shape
    if k != k2:
        raise DimensionError(f"deconv2d: kernel must be square, got {k}x{k2}")
    if stride < 1 or padding < 0 or not 0 <= output_padding < stride:
        raise DimensionError(f"deconv2d: stride {stride} / padding {padding} / "
                             f"output_padding {output_padding} invalid")
    if x.shape[1] != cin:
        raise DimensionError(f"deconv2d: input channel axis 1 has {x.shape[1]}, "
                             f"kernel in-channel axis 0 has {cin}")
    if bias is not None:
        bias = _wrap(bias)
        if bias.shape != (cout,):
            raise DimensionError(f"deconv2d: bias shape {bias.shape} != ({cout},)")
    h, w = x.shape[2:]
    ho = deconv_output_size(h, k, stride, padding, output_padding)
    wo = deconv_output_size(w, k, stride, padding, output_padding)
    if ho < 1 or wo < 1:
        raise DimensionError(f"deconv2d: output size {ho}x{wo} from input {h}x{w}")

    xd, wd = x.data, kernel.data
    out = _deconv_forward(xd, wd, stride, padding, output_padding)
    if bias is not None:
        out += bias.data.reshape(1, cout, 1, 1)

    def grad(g):
        gx = gw = gb = None
        if x.requires_grad:
            gx = _conv_grad_input(g, wd, stride, padding, h, w)
        if kernel.requires_grad:
            cols = _gather_windows(g, k, stride, padding, h, w)
            gw = np.einsum("bihw,bohwjk->iojk", xd, cols, optimize=True)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, kernel) + ((bias,) if bias is not None else (_wrap(0.0),))
    return _make(out, parents, grad)


def _conv_grad_input(g: np.ndarray, w: np.ndarray, stride: int, padding: int,
                     h: int, wd: int) -> np.ndarray:
    # adjoint of the transposed conv is a plain conv with the same kernel
    k = w.shape[2]
    cols = _gather_windows(g, k, stride, padding, h, wd)
    return np.einsum("bohwjk,iojk->bihw", cols, w, optimize=True)


# ---------------------------------------------------------------- GDN


def gdn(x: Tensor, beta: Tensor, gamma: Tensor, inverse: bool = False) -> Tensor:
    """y_i = x_i / sqrt(beta_i + sum_j gamma_ij x_j^2); the inverse multiplies.

    ``beta`` and ``gamma`` are the effective (already non-negative) values.
    """
    x, beta, gamma = _wrap(x), _wrap(beta), _wrap(gamma)
    _check_nchw("gdn input", x)
    c = x.shape[1]
    if beta.shape != (c,) or gamma.shape != (c, c):
        raise DimensionError(f"gdn: {c} channels but beta {beta.shape}, gamma {gamma.shape}")
    xd = x.data
    if not np.isfinite(xd).all():
        raise NumericError("gdn: non-finite input")
    gd = gamma.data
    xsq = xd * xd
    norm = np.empty_like(xd)
    norm[...] = beta.data.reshape(1, c, 1, 1)
    tmp = np.empty_like(xd)
    for j in range(c):
        np.multiply(gd[:, j].reshape(1, c, 1, 1), xsq[:, j:j + 1], out=tmp)
        np.add(norm, tmp, out=norm)
    root = np.sqrt(norm)
    out = xd * root if inverse else xd / root

    def grad(g):
        if inverse:
            gx_direct = g * root
            t = g * xd * (0.5 / root)
        else:
            gx_direct = g / root
            t = -0.5 * g * xd / (norm * root)
        gx = gx_direct + 2.0 * xd * np.einsum("bihw,ij->bjhw", t, gd, optimize=True)
        gbeta = t.sum(axis=(0, 2, 3))
        ggamma = np.einsum("bihw,bjhw->ij", t, xsq, optimize=True)
        return gx, gbeta, ggamma

    return _make(out, (x, beta, gamma), grad)


# ---------------------------------------------------------------- fused ops


def channel_mask(x: Tensor, mask: Tensor) -> Tensor:
    """Multiply channel c of x [B,C,H,W] by mask[c]."""
    x, mask = _wrap(x), _wrap(mask)
    _check_nchw("mask input", x)
    c = x.shape[1]
    if mask.shape != (c,):
        raise DimensionError(f"mask length {mask.shape} does not match {c} channels")
    xd, md = x.data, mask.data
    m4 = md.reshape(1, c, 1, 1)
    return _make(xd * m4, (x, mask),
                 lambda g: (g * m4, (g * xd).sum(axis=(0, 2, 3))))


def step_gate(alpha: Tensor, sharpness: float) -> Tensor:
    """Hard threshold alpha >= 0 forward; derivative of sigmoid(sharpness*alpha) backward."""
    alpha = _wrap(alpha)
    ad = alpha.data
    out = (ad >= 0).astype(DTYPE)

    def grad(g):
        s = _sigmoid(DTYPE(sharpness) * ad)
        return (g * DTYPE(sharpness) * s * (1.0 - s),)

    return _make(out, (alpha,), grad)


def logistic_bin_mass(y: Tensor, loc: Tensor, scale: Tensor) -> Tensor:
    """Logistic probability mass of the unit bin centred on y, per element.

    loc/scale have shape (C,) and broadcast over (B, C, H, W).
    """
    y, loc, scale = _wrap(y), _wrap(loc), _wrap(scale)
    _check_nchw("rate input", y)
    c = y.shape[1]
    if loc.shape != (c,) or scale.shape != (c,):
        raise DimensionError(f"entropy model has {loc.shape}/{scale.shape} params for {c} channels")
    mu = loc.data.reshape(1, c, 1, 1)
    b = scale.data.reshape(1, c, 1, 1)
    centered = y.data - mu
    upper = (centered + DTYPE(0.5)) / b
    lower = (centered - DTYPE(0.5)) / b
    # evaluate in the tail nearest zero to avoid 1 - 1 cancellation
    sign = np.where(upper + lower > 0, DTYPE(-1.0), DTYPE(1.0))
    su, sl = _sigmoid(sign * upper), _sigmoid(sign * lower)
    mass = np.abs(su - sl)

    def grad(g):
        du = su * (1.0 - su) / b
        dl = sl * (1.0 - sl) / b
        dy = g * (du - dl)
        dmu = -dy
        dscale = g * (-(du * upper) + dl * lower)
        return (dy, dmu.sum(axis=(0, 2, 3)), dscale.sum(axis=(0, 2, 3)))

    return _make(mass.astype(DTYPE), (y, loc, scale), grad)
