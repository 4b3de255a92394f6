"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine covers exactly what the rest of the package needs: elementwise
math, softmax, per-channel moments, 2-D convolution, batch normalization,
dropout, linear/concat/reshape/pooling plumbing, and a finite-difference
gradient oracle (``grad_check``).

Shape rule (the only implicit one): binary operations accept equal shapes,
or shapes that become equal after left-padding the lower-rank operand with
singleton axes and expanding singleton extents. Gradients flowing through
an expanded axis are summed back over it.

Everything is float64. Forward execution is deterministic: identical
inputs and RngState draws give bit-identical outputs on any platform.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

_MASK64 = (1 << 64) - 1


# ---------------------------------------------------------------------------
# deterministic RNG

def _splitmix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h = ((h ^ byte) * 0x100000001B3) & _MASK64
    return h


class RngState:
    """Counter-based deterministic random stream (Philox core).

    Identical seed plus identical call sequence yields the identical value
    sequence on every platform. ``derive`` splits off an independent child
    stream keyed by integers and/or strings, so per-sample / per-parameter
    streams do not depend on call order.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def derive(self, *parts) -> "RngState":
        h = _splitmix64(self.seed)
        for part in parts:
            if isinstance(part, str):
                part = _fnv1a64(part.encode("utf-8"))
            h = _splitmix64(h ^ (int(part) & _MASK64))
        return RngState(h)

    def normal(self, shape=()) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


# ---------------------------------------------------------------------------
# tensor + tape

class Tensor:
    """N-d float64 array plus the bookkeeping reverse mode needs.

    A leaf is constructed directly (optionally with ``requires_grad``);
    operation outputs carry references to their parents and a backward
    rule. ``grad`` is populated by ``backward`` and accumulates across
    repeated calls until ``zero_grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "parents", "op", "_backward")

    def __init__(self, data, requires_grad: bool = False, parents: tuple = (),
                 backward: Optional[Callable] = None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        self.parents = parents
        self.op = op
        self._backward = backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise(
            ValueError(f"item() needs a single-element tensor, got shape {self.shape}"))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, op="detach")

    def backward(self) -> None:
        backward(self)

    # shape / reduction conveniences
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axes=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axes, keepdims)

    def mean(self, axes=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axes, keepdims)

    # operators
    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, as_tensor(other))

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"


def _raise(err):
    raise err


def as_tensor(value) -> Tensor:
    """Wrap scalars/arrays as constant tensors; pass tensors through."""
    return value if isinstance(value, Tensor) else Tensor(value, op="const")


def _node(data: np.ndarray, parents: tuple, backward: Callable, op: str) -> Tensor:
    # skip recording when nothing upstream wants gradients
    if any(p.requires_grad for p in parents):
        return Tensor(data, parents=parents, backward=backward, op=op)
    return Tensor(data, op=op)


class Tape:
    """Topologically ordered operation list reaching one root tensor.

    Every entry appears after all entries producing its inputs; a single
    reverse traversal therefore populates the grad of every requires_grad
    tensor reachable from the root.
    """

    def __init__(self, entries: list):
        self.entries = entries

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order: list = []
        seen: set = set()
        stack: list = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node.parents:
                stack.append((parent, False))
        return cls(order)

    def backward(self) -> None:
        # gradient arrays are shared, never mutated in place: accumulation
        # always allocates, so aliasing a parent grad to a child grad is safe
        root = self.entries[-1]
        flowing: dict = {id(root): np.ones_like(root.data)}
        for node in reversed(self.entries):
            g = flowing.pop(id(node), None)
            if g is None or not node.requires_grad:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in node._backward(g):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                if key in flowing:
                    flowing[key] = flowing[key] + pg
                else:
                    flowing[key] = pg


def backward(loss: Tensor) -> None:
    """Reverse-propagate d(loss)/d(leaf) into every reachable requires_grad tensor.

    Repeated calls without zero_grad accumulate.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    Tape.from_root(loss).backward()


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()


# ---------------------------------------------------------------------------
# broadcasting helpers (singleton-extent expansion only)

def _pad_shape(shape: tuple, rank: int) -> tuple:
    return (1,) * (rank - len(shape)) + shape


def _check_broadcast(sa: tuple, sb: tuple) -> tuple:
    rank = max(len(sa), len(sb))
    pa, pb = _pad_shape(sa, rank), _pad_shape(sb, rank)
    out = []
    for da, db in zip(pa, pb):
        if da == db or da == 1 or db == 1:
            out.append(max(da, db))
        else:
            raise ValueError(
                f"shapes {sa} and {sb} do not match and are not singleton-expandable")
    return tuple(out)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient contributions back over axes that were expanded."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise unary

def _first_bad_index(mask: np.ndarray) -> tuple:
    flat = int(np.argmax(mask))
    return np.unravel_index(flat, mask.shape)


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0.0)
    mask = x.data > 0

    def back(g):
        return ((x, g * mask),)

    return _node(y, (x,), back, "relu")


def sigmoid(x: Tensor) -> Tensor:
    t = np.exp(-np.abs(x.data))
    y = np.where(x.data >= 0, 1.0 / (1.0 + t), t / (1.0 + t))

    def back(g):
        return ((x, g * y * (1.0 - y)),)

    return _node(y, (x,), back, "sigmoid")


def texp(x: Tensor) -> Tensor:
    y = np.exp(x.data)

    def back(g):
        return ((x, g * y),)

    return _node(y, (x,), back, "exp")


def tlog(x: Tensor) -> Tensor:
    bad = x.data <= 0
    if bad.any():
        idx = _first_bad_index(bad)
        raise ValueError(f"log needs strictly positive entries; offending index {idx} "
                         f"holds {x.data[idx]}")
    y = np.log(x.data)

    def back(g):
        return ((x, g / x.data),)

    return _node(y, (x,), back, "log")


def tsqrt(x: Tensor) -> Tensor:
    bad = x.data <= 0
    if bad.any():
        idx = _first_bad_index(bad)
        raise ValueError(f"sqrt needs strictly positive entries; offending index {idx} "
                         f"holds {x.data[idx]}")
    y = np.sqrt(x.data)

    def back(g):
        return ((x, g / (2.0 * y)),)

    return _node(y, (x,), back, "sqrt")


def tabs(x: Tensor) -> Tensor:
    y = np.abs(x.data)
    sign = np.sign(x.data)  # sign(0) == 0: the |.| subgradient at 0 is taken as 0

    def back(g):
        return ((x, g * sign),)

    return _node(y, (x,), back, "abs")


def neg(x: Tensor) -> Tensor:
    def back(g):
        return ((x, -g),)

    return _node(-x.data, (x,), back, "neg")


def reciprocal(x: Tensor) -> Tensor:
    bad = x.data == 0
    if bad.any():
        idx = _first_bad_index(bad)
        raise ValueError(f"reciprocal of zero at index {idx}")
    y = 1.0 / x.data

    def back(g):
        return ((x, -g * y * y),)

    return _node(y, (x,), back, "reciprocal")


_UNARY = {
    "relu": relu,
    "sigmoid": sigmoid,
    "exp": texp,
    "log": tlog,
    "sqrt": tsqrt,
    "abs": tabs,
    "neg": neg,
    "reciprocal": reciprocal,
}


def elementwise_unary(kind: str, x: Tensor) -> Tensor:
    if kind not in _UNARY:
        raise ValueError(f"unknown unary op {kind!r}; choose from {sorted(_UNARY)}")
    return _UNARY[kind](x)


# ---------------------------------------------------------------------------
# elementwise binary

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape)
    y = a.data + b.data

    def back(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    return _node(y, (a, b), back, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape)
    y = a.data - b.data

    def back(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape)))

    return _node(y, (a, b), back, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape)
    y = a.data * b.data

    def back(g):
        return ((a, _unbroadcast(g * b.data, a.shape)),
                (b, _unbroadcast(g * a.data, b.shape)))

    return _node(y, (a, b), back, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape)
    bad = b.data == 0
    if bad.any():
        idx = _first_bad_index(bad)
        raise ValueError(f"division by zero at denominator index {idx}")
    y = a.data / b.data

    def back(g):
        return ((a, _unbroadcast(g / b.data, a.shape)),
                (b, _unbroadcast(-g * y / b.data, b.shape)))

    return _node(y, (a, b), back, "div")


_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise_binary(kind: str, a: Tensor, b: Tensor) -> Tensor:
    if kind not in _BINARY:
        raise ValueError(f"unknown binary op {kind!r}; choose from {sorted(_BINARY)}")
    return _BINARY[kind](a, b)


# ---------------------------------------------------------------------------
# reductions / softmax

def _normalize_axes(axes, ndim: int) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(sorted(a % ndim for a in axes))
    if len(set(axes)) != len(axes):
        raise ValueError(f"duplicate axes in {axes}")
    return axes


def reduce_sum(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    ax = _normalize_axes(axes, x.ndim)
    y = x.data.sum(axis=ax, keepdims=keepdims)

    def back(g):
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, ax) if ax else gg
        return ((x, np.broadcast_to(gg, x.shape)),)

    return _node(y, (x,), back, "sum")


def reduce_mean(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    ax = _normalize_axes(axes, x.ndim)
    count = 1
    for a in ax:
        count *= x.shape[a]
    return mul(reduce_sum(x, ax, keepdims), as_tensor(1.0 / count))


def softmax(x: Tensor, axes) -> Tensor:
    """Numerically stable softmax over the given axis set (max-subtraction)."""
    if axes is None or (isinstance(axes, (tuple, list)) and len(axes) == 0):
        raise ValueError("softmax needs a non-empty axis set")
    ax = _normalize_axes(axes, x.ndim)
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=ax, keepdims=True)

    def back(g):
        inner = (g * y).sum(axis=ax, keepdims=True)
        return ((x, (g - inner) * y),)

    return _node(y, (x,), back, "softmax")


def reduce_moments(x: Tensor) -> tuple:
    """Per-sample, per-channel spatial mean and biased variance of a 4-D map.

    Both outputs have shape (N, C, 1, 1); the variance divides by the full
    pixel count M = H*W.
    """
    if x.ndim != 4:
        raise ValueError(f"reduce_moments needs a (N, C, H, W) tensor, got {x.shape}")
    n, c, h, w = x.shape
    if h * w < 1:
        raise ValueError("reduce_moments needs at least one spatial position")
    inv = 1.0 / (h * w)
    mean = mul(reduce_sum(x, (2, 3), keepdims=True), as_tensor(inv))
    centered = sub(x, mean)
    var = mul(reduce_sum(mul(centered, centered), (2, 3), keepdims=True), as_tensor(inv))
    return mean, var


# ---------------------------------------------------------------------------
# shape plumbing

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    y = x.data.reshape(shape)

    def back(g):
        return ((x, g.reshape(x.shape)),)

    return _node(y, (x,), back, "reshape")


def flatten(x: Tensor) -> Tensor:
    """Collapse all axes after the first (batch) axis."""
    n = x.shape[0]
    return reshape(x, (n, int(x.data.size // max(n, 1))))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim:
            raise ValueError(f"concat rank mismatch: {tensors[0].shape} vs {t.shape}")
        for a in range(ndim):
            if a != axis and t.shape[a] != tensors[0].shape[a]:
                raise ValueError(
                    f"concat extents differ off axis {axis}: {tensors[0].shape} vs {t.shape}")
    y = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def back(g):
        pieces = np.split(g, bounds, axis=axis)
        return tuple(zip(tensors, pieces))

    return _node(y, tuple(tensors), back, "concat")


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis (the consecutive-pair loss needs it)."""
    axis = axis % x.ndim
    if start < 0 or start + length > x.shape[axis]:
        raise ValueError(f"narrow [{start}:{start + length}] exceeds extent "
                         f"{x.shape[axis]} on axis {axis}")
    index = tuple(slice(None) if a != axis else slice(start, start + length)
                  for a in range(x.ndim))
    y = x.data[index]

    def back(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return ((x, full),)

    return _node(y, (x,), back, "narrow")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Differentiable clamp built from relu; pass-through gradient inside [lo, hi]."""
    return as_tensor(lo) + relu(x - lo) - relu(x - hi)


def mean_pool2d(x: Tensor, out_hw: tuple) -> Tensor:
    """Average-pool a (N, C, H, W) map to a target spatial size.

    The target must divide the input extents (integer pooling factors).
    """
    if x.ndim != 4:
        raise ValueError(f"mean_pool2d needs a 4-D tensor, got {x.shape}")
    n, c, h, w = x.shape
    oh, ow = out_hw
    if oh < 1 or ow < 1 or h % oh or w % ow:
        raise ValueError(f"target {out_hw} must divide spatial extents ({h}, {w})")
    fh, fw = h // oh, w // ow
    if fh == 1 and fw == 1:
        return x
    blocks = reshape(x, (n, c, oh, fh, ow, fw))
    return mul(reduce_sum(blocks, (3, 5)), as_tensor(1.0 / (fh * fw)))


# ---------------------------------------------------------------------------
# linear / conv / batchnorm / dropout

def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map y = x @ weight.T + bias, weight shaped (out, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear shape mismatch: x {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"linear bias shape {bias.shape} != ({weight.shape[0]},)")
    y = x.data @ weight.data.T
    if bias is not None:
        y = y + bias.data

    def back(g):
        grads = [(x, g @ weight.data), (weight, g.T @ x.data)]
        if bias is not None:
            grads.append((bias, g.sum(axis=0)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(y, parents, back, "linear")


def _conv_windows(padded: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c = padded.shape[:2]
    sn, sc, sh, sw = padded.strides
    return np.lib.stride_tricks.as_strided(
        padded, (n, c, oh, ow, k, k), (sn, sc, stride * sh, stride * sw, sh, sw))


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with square 1x1 or 3x3 kernels, stride 1 or 2, pad 0 or 1."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d needs 4-D x and weight, got {x.shape} and {weight.shape}")
    co, ci, kh, kw = weight.shape
    if kh != kw or kh not in (1, 3):
        raise ValueError(f"conv2d supports 1x1 and 3x3 kernels, got {kh}x{kw}")
    if stride not in (1, 2) or padding not in (0, 1):
        raise ValueError(f"conv2d supports stride 1/2 and padding 0/1, "
                         f"got stride={stride} padding={padding}")
    n, c_in, h, w = x.shape
    if c_in != ci:
        raise ValueError(f"conv2d channel mismatch: input has {c_in}, weight expects {ci}")
    if bias is not None and bias.shape != (co,):
        raise ValueError(f"conv2d bias shape {bias.shape} != ({co},)")
    k = kh
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError(f"conv2d output would be empty for input {x.shape}")

    if padding:
        padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        padded = x.data
    windows = _conv_windows(padded, k, stride, oh, ow)
    y = np.tensordot(windows, weight.data, axes=([1, 4, 5], [1, 2, 3]))
    y = np.ascontiguousarray(y.transpose(0, 3, 1, 2))
    if bias is not None:
        y += bias.data[None, :, None, None]

    def back(g):
        grads = []
        # d/dweight: correlate input windows with the output gradient
        dw = np.tensordot(windows, g, axes=([0, 2, 3], [0, 2, 3]))
        grads.append((weight, np.ascontiguousarray(dw.transpose(3, 0, 1, 2))))
        # d/dx: one contraction over output channels, then scatter each
        # kernel tap back onto the padded grid (windows may overlap)
        dcols = np.tensordot(g, weight.data, axes=([1], [0]))  # (N,Ho,Wo,Cin,k,k)
        dxp = np.zeros_like(padded)
        for ih in range(k):
            for iw in range(k):
                dxp[:, :, ih:ih + stride * oh:stride, iw:iw + stride * ow:stride] += (
                    dcols[:, :, :, :, ih, iw].transpose(0, 3, 1, 2))
        if padding:
            dxp = dxp[:, :, padding:padding + h, padding:padding + w]
        grads.append((x, dxp))
        if bias is not None:
            grads.append((bias, g.sum(axis=(0, 2, 3))))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(y, parents, back, "conv2d")


class RunningStats:
    """Per-channel running mean/variance for batch normalization."""

    def __init__(self, channels: int):
        self.mean = np.zeros(channels, dtype=np.float64)
        self.var = np.ones(channels, dtype=np.float64)

    def copy(self) -> "RunningStats":
        out = RunningStats(len(self.mean))
        out.mean = self.mean.copy()
        out.var = self.var.copy()
        return out


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, stats: RunningStats,
                mode: str, eps: float = 1e-5, momentum: float = 0.1) -> Tensor:
    """Channelwise batch normalization over (N, H, W).

    Train mode normalizes by batch statistics (biased variance) and updates
    the running stats in place; eval mode normalizes by the running stats.
    """
    if x.ndim != 4:
        raise ValueError(f"batchnorm2d needs a 4-D tensor, got {x.shape}")
    if eps <= 0:
        raise ValueError(f"batchnorm2d eps must be positive, got {eps}")
    n, c, h, w = x.shape
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"gamma/beta must be ({c},), got {gamma.shape} and {beta.shape}")

    if mode == "train":
        count = n * h * w
        if count == 0:
            raise ValueError("batchnorm2d cannot normalize an empty batch")
        mean = x.data.mean(axis=(0, 2, 3), keepdims=True)
        centered = x.data - mean
        var = np.mean(centered * centered, axis=(0, 2, 3), keepdims=True)
        ivar = 1.0 / np.sqrt(var + eps)
        xhat = centered * ivar
        y = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
        stats.mean += momentum * (mean.reshape(c) - stats.mean)
        stats.var += momentum * (var.reshape(c) - stats.var)

        def back(g):
            dbeta = g.sum(axis=(0, 2, 3))
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dxhat = g * gamma.data[None, :, None, None]
            # biased-variance batchnorm backward
            dx = (ivar / count) * (count * dxhat
                                   - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                                   - xhat * (dxhat * xhat).sum(axis=(0, 2, 3),
                                                               keepdims=True))
            return ((x, dx), (gamma, dgamma), (beta, dbeta))

        return _node(y, (x, gamma, beta), back, "batchnorm2d")

    scale = gamma.data / np.sqrt(stats.var + eps)
    shift = beta.data - stats.mean * scale
    y = x.data * scale[None, :, None, None] + shift[None, :, None, None]

    def back_eval(g):
        return ((x, g * scale[None, :, None, None]),
                (gamma, (g * ((x.data - stats.mean[None, :, None, None])
                              / np.sqrt(stats.var + eps)[None, :, None, None])
                         ).sum(axis=(0, 2, 3))),
                (beta, g.sum(axis=(0, 2, 3))))

    return _node(y, (x, gamma, beta), back_eval, "batchnorm2d")


def dropout(x: Tensor, p: float, mode: str, rng: Optional[RngState] = None) -> Tensor:
    """Inverted dropout: train mode zeroes with probability p and rescales
    survivors by 1/(1-p); eval mode is the identity."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an RngState")
    keep = (rng.uniform(x.shape) >= p) / (1.0 - p)

    def back(g):
        return ((x, g * keep),)

    return _node(x.data * keep, (x,), back, "dropout")


# differentiable op registry: the gradient-check suite covers each of these
DIFFERENTIABLE_OPS = (
    "relu", "sigmoid", "exp", "log", "sqrt", "abs", "neg", "reciprocal",
    "add", "sub", "mul", "div",
    "softmax", "sum", "moments",
    "reshape", "concat", "narrow", "clamp", "mean_pool2d",
    "linear", "conv2d", "batchnorm2d", "dropout",
)


# ---------------------------------------------------------------------------
# finite-difference oracle

def grad_check(f: Callable, inputs: Sequence[Tensor], h: float = 1e-6) -> float:
    """Compare tape gradients of a scalar program against central differences.

    ``f(*inputs)`` must be a pure scalar-valued tensor program. Returns the
    maximum relative error over every coordinate of every input, where the
    relative error divides by max(|analytic|, |numeric|, 1e-8).
    """
    zero_grads(inputs)
    out = f(*inputs)
    if out.data.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued program, got {out.shape}")
    backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy()
                for t in inputs]

    worst = 0.0
    for which, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        ref = analytic[which].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(*inputs).data.reshape(-1)[0])
            flat[i] = orig - h
            fm = float(f(*inputs).data.reshape(-1)[0])
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise ValueError(
                    f"non-finite program value while perturbing input {which} "
                    f"coordinate {i}: f(+h)={fp}, f(-h)={fm}")
            numeric = (fp - fm) / (2.0 * h)
            denom = max(abs(numeric), abs(ref[i]), 1e-8)
            worst = max(worst, abs(numeric - ref[i]) / denom)
    return worst


# ---------------------------------------------------------------------------
# serialization ("ECT1": magic, rank, extents, little-endian float64 payload)

_MAGIC = b"ECT1"


def save_tensor_data(path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", arr.ndim))
        for extent in arr.shape:
            fh.write(struct.pack("<Q", extent))
        fh.write(arr.astype("<f8", copy=False).tobytes())


def load_tensor_data(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != _MAGIC:
        raise ValueError(f"{path}: not an ECT1 tensor file")
    (rank,) = struct.unpack_from("<Q", blob, 4)
    header_end = 12 + 8 * rank
    if len(blob) < header_end:
        raise ValueError(f"{path}: truncated ECT1 header")
    shape = struct.unpack_from(f"<{rank}Q" if rank else "", blob, 12) if rank else ()
    count = 1
    for extent in shape:
        count *= extent
    expected = header_end + 8 * count
    if len(blob) != expected:
        raise ValueError(f"{path}: payload holds {len(blob) - header_end} bytes, "
                         f"expected {8 * count}")
    data = np.frombuffer(blob, dtype="<f8", offset=header_end, count=count)
    return data.reshape(shape).astype(np.float64)
