"""Minimal reverse-mode differentiable tensor engine.

Dense float64 NCHW tensors on a dynamic tape: every op records its inputs
and a backward closure, ``backward()`` replays the tape in reverse
topological order. Covers exactly the primitives the two model families
need (convolution, transposed convolution, 2x2 pooling/upsampling,
elementwise nonlinearities, channel concat, losses) plus the padding and
arithmetic glue between them.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that disables tape recording (eval-only forwards)."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class Tensor:
    """Dense n-dimensional array of float64 scalars with optional gradient.

    Data is a single flat-compatible row-major buffer; ``grad`` (same shape)
    is populated by :func:`backward` and accumulates across calls until
    :func:`reset_grads`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a one-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar used by the models; scalars are plain Python numbers.
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


@dataclass
class Parameter:
    """Named trainable tensor; the name is the checkpoint/optimizer key."""

    name: str
    tensor: Tensor

    def __post_init__(self):
        self.tensor.requires_grad = True

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self):
        return self.tensor.grad


def _make(data: np.ndarray, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes differ: {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make(x.data * s, (x,), lambda g: (g * s,))


def add_scalar(x: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make(x.data + s, (x,), lambda g: (g,))


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)
    mask = x.data > 0.0  # subgradient 0 at the kink
    return _make(out, (x,), lambda g: (g * mask,))


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_stable(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _make(t, (x,), lambda g: (g * (1.0 - t * t),))


def hard_clip01(x: Tensor) -> Tensor:
    """Saturating clamp to [0, 1]; gradient 0 outside the interval."""
    out = np.clip(x.data, 0.0, 1.0)
    mask = (x.data >= 0.0) & (x.data <= 1.0)
    return _make(out, (x,), lambda g: (g * mask,))


_ACTIVATIONS = {
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "hard_clip01": hard_clip01,
}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation kind {kind!r}; choose from {sorted(_ACTIVATIONS)}")
    return fn(x)


# ---------------------------------------------------------------------------
# im2col / col2im: exact adjoint pair shared by both convolution directions
# ---------------------------------------------------------------------------

def _conv_out_size(h: int, w: int, k: int, stride: int, pad: int):
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    return ho, wo


def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """(N,C,H,W) -> (N*Ho*Wo, C*K*K) patch matrix."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(n * ho * wo, c * k * k)


def _col2im(cols: np.ndarray, out_shape, k: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add patches back to (N,C,H,W)."""
    n, c, h, w = out_shape
    ho, wo = _conv_out_size(h, w, k, stride, pad)
    cols6 = cols.reshape(n, ho, wo, c, k, k)
    padded = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for i in range(k):
        for j in range(k):
            padded[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                cols6[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    if pad:
        return np.ascontiguousarray(padded[:, :, pad : pad + h, pad : pad + w])
    return padded


def _check_conv_args(x: Tensor, weight: Tensor, bias, stride: int, zero_pad: int, op: str):
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"{op}: need 4-D input and kernel, got {x.shape} and {weight.shape}")
    if stride < 1:
        raise ValueError(f"{op}: stride must be positive, got {stride}")
    if zero_pad < 0:
        raise ValueError(f"{op}: zero_pad must be non-negative, got {zero_pad}")
    if weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"{op}: kernel must be square, got {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1] if op == "conv2d_transpose" else weight.shape[0],):
        raise ShapeError(f"{op}: bias shape {bias.shape} does not match kernel {weight.shape}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, zero_pad: int = 0) -> Tensor:
    """2-D cross-correlation; kernel layout (out_ch, in_ch, K, K)."""
    _check_conv_args(x, weight, bias, stride, zero_pad, "conv2d")
    n, c, h, w = x.shape
    o, ci, k, _ = weight.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels (shape {x.shape}) but kernel expects"
                         f" {ci} (shape {weight.shape})")
    if h + 2 * zero_pad < k or w + 2 * zero_pad < k:
        raise ShapeError(f"conv2d: kernel {k}x{k} larger than padded input {x.shape} with pad {zero_pad}")
    ho, wo = _conv_out_size(h, w, k, stride, zero_pad)
    cols = _im2col(x.data, k, stride, zero_pad)
    wmat = weight.data.reshape(o, c * k * k)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    parents = (x, weight) if bias is None else (x, weight, bias)
    needs = tuple(p.requires_grad for p in parents)

    def bwd(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, o)
        gx = _col2im(gmat @ wmat, (n, c, h, w), k, stride, zero_pad) if needs[0] else None
        gw = (gmat.T @ cols).reshape(o, c, k, k) if needs[1] else None
        if bias is None:
            return gx, gw
        gb = gmat.sum(axis=0) if needs[2] else None
        return gx, gw, gb

    return _make(np.ascontiguousarray(out), parents, bwd)


def conv2d_transpose(x: Tensor, weight: Tensor, bias: Tensor | None = None,
                     stride: int = 1, zero_pad: int = 0) -> Tensor:
    """Transposed convolution, the exact adjoint of :func:`conv2d`.

    Kernel layout (in_ch, out_ch, K, K); output spatial size is
    (H-1)*stride - 2*zero_pad + K.
    """
    _check_conv_args(x, weight, bias, stride, zero_pad, "conv2d_transpose")
    n, c, h, w = x.shape
    ci, o, k, _ = weight.shape
    if ci != c:
        raise ShapeError(f"conv2d_transpose: input has {c} channels (shape {x.shape}) but kernel"
                         f" expects {ci} (shape {weight.shape})")
    ho = (h - 1) * stride - 2 * zero_pad + k
    wo = (w - 1) * stride - 2 * zero_pad + k
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d_transpose: output size {ho}x{wo} not positive for input {x.shape},"
                         f" kernel {k}, stride {stride}, pad {zero_pad}")
    rows = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(n * h * w, c)
    kmat = weight.data.reshape(c, o * k * k)
    out = _col2im(rows @ kmat, (n, o, ho, wo), k, stride, zero_pad)
    if bias is not None:
        out += bias.data[:, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)
    needs = tuple(p.requires_grad for p in parents)

    def bwd(g):
        gcols = _im2col(g, k, stride, zero_pad)
        gx = None
        if needs[0]:
            gx = (gcols @ kmat.T).reshape(n, h, w, c).transpose(0, 3, 1, 2)
            gx = np.ascontiguousarray(gx)
        gw = (rows.T @ gcols).reshape(c, o, k, k) if needs[1] else None
        if bias is None:
            return gx, gw
        gb = g.sum(axis=(0, 2, 3)) if needs[2] else None
        return gx, gw, gb

    return _make(out, parents, bwd)


# ---------------------------------------------------------------------------
# pooling / resampling / layout
# ---------------------------------------------------------------------------

def pool_max2(x: Tensor) -> Tensor:
    """Max over each 2x2 block; ties route the gradient to the first element
    in row-major block order."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"pool_max2: spatial dims must be even, got {x.shape}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = np.ascontiguousarray(blocks).reshape(n, c, h // 2, w // 2, 4)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        gx = gflat.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (np.ascontiguousarray(gx).reshape(n, c, h, w),)

    return _make(out, (x,), bwd)


def upsample_nearest2(x: Tensor) -> Tensor:
    """Replicate each pixel into a 2x2 block; gradient sums the 4 copies."""
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bwd(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(out, (x,), bwd)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError(f"concat_channels: need 4-D tensors, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: batch/spatial dims differ: {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def bwd(g):
        return np.ascontiguousarray(g[:, :ca]), np.ascontiguousarray(g[:, ca:])

    return _make(out, (a, b), bwd)


def pad2d(x: Tensor, pads) -> Tensor:
    """Zero-pad spatial dims by (top, bottom, left, right)."""
    t, b, l, r = (int(v) for v in pads)
    if min(t, b, l, r) < 0:
        raise ValueError(f"pad2d: negative pad {pads}")
    out = np.pad(x.data, ((0, 0), (0, 0), (t, b), (l, r)))
    h, w = x.shape[2], x.shape[3]

    def bwd(g):
        return (np.ascontiguousarray(g[:, :, t : t + h, l : l + w]),)

    return _make(out, (x,), bwd)


def crop2d(x: Tensor, crops) -> Tensor:
    """Remove (top, bottom, left, right) rows/cols; adjoint of :func:`pad2d`."""
    t, b, l, r = (int(v) for v in crops)
    if min(t, b, l, r) < 0:
        raise ValueError(f"crop2d: negative crop {crops}")
    n, c, h, w = x.shape
    if t + b >= h or l + r >= w:
        raise ShapeError(f"crop2d: crops {crops} remove all of {x.shape}")
    out = np.ascontiguousarray(x.data[:, :, t : h - b, l : w - r])

    def bwd(g):
        return (np.pad(g, ((0, 0), (0, 0), (t, b), (l, r))),)

    return _make(out, (x,), bwd)


# ---------------------------------------------------------------------------
# reductions and losses
# ---------------------------------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.full_like(x.data, float(g)),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return _make(np.asarray(x.data.mean()), (x,), lambda g: (np.full_like(x.data, float(g) / n),))


def l1_mean(x: Tensor) -> Tensor:
    """Mean absolute value; subgradient 0 at 0."""
    n = x.data.size
    sgn = np.sign(x.data)
    return _make(np.asarray(np.abs(x.data).mean()), (x,), lambda g: (sgn * (float(g) / n),))


BERNOULLI_EPS = 1e-7


def bernoulli_nll(pred: Tensor, target: Tensor) -> Tensor:
    """Mean Bernoulli negative log-likelihood -[t*ln(p) + (1-t)*ln(1-p)].

    Predictions are clamped to [eps, 1-eps]; values outside [0, 1] indicate
    an upstream bug and raise.
    """
    _check_same_shape(pred, target, "bernoulli_nll")
    p, t = pred.data, target.data
    if p.min() < 0.0 or p.max() > 1.0:
        raise ValueError(
            f"bernoulli_nll: predictions outside [0, 1] (min {p.min():.3g}, max {p.max():.3g});"
            " upstream producer must emit probabilities")
    pc = np.clip(p, BERNOULLI_EPS, 1.0 - BERNOULLI_EPS)
    n = p.size
    loss = -(t * np.log(pc) + (1.0 - t) * np.log1p(-pc)).mean()
    inside = (p > BERNOULLI_EPS) & (p < 1.0 - BERNOULLI_EPS)

    def bwd(g):
        gp = (pc - t) / (pc * (1.0 - pc)) * (float(g) / n) * inside
        return gp, None

    return _make(np.asarray(loss), (pred, target), bwd)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def _toposort(root: Tensor):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every reachable requires_grad tensor.

    Gradients accumulate across repeated calls; use :func:`reset_grads`
    between training steps.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    order = _toposort(loss)
    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg


def reset_grads(tensors) -> None:
    """Clear grads on tensors or Parameters (iterable)."""
    for t in tensors:
        if isinstance(t, Parameter):
            t.tensor.grad = None
        else:
            t.grad = None
