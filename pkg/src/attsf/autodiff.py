"""Dense tensor ops with reverse-mode automatic differentiation.

Everything is backed by numpy arrays in channel-last layout
(batch, height, width, channels). float32 is the training dtype;
passing float64 arrays switches the whole graph to float64, which the
gradient-check tests rely on.
"""

from __future__ import annotations

import itertools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


# When True, every op asserts its output is finite. Slow; meant for tests.
CHECK_FINITE = False


def _finite(arr):
    if CHECK_FINITE and not np.all(np.isfinite(arr)):
        raise FloatingPointError("non-finite value produced by op")
    return arr


class Rng:
    """Seeded random stream (PCG64). Same seed, same stream, bit for bit."""

    ALGORITHM = "pcg64"

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, mean, std, shape, dtype=np.float32):
        return self._gen.normal(mean, std, size=shape).astype(dtype)

    def uniform(self, low, high, shape, dtype=np.float32):
        return self._gen.uniform(low, high, size=shape).astype(dtype)

    def integers(self, low, high=None):
        return int(self._gen.integers(low, high))

    def permutation(self, n):
        return self._gen.permutation(n)

    def get_state(self) -> dict:
        return {
            "algorithm": self.ALGORITHM,
            "seed": self.seed,
            "state": self._gen.bit_generator.state,
        }

    def set_state(self, state: dict) -> None:
        if state.get("algorithm") != self.ALGORITHM:
            raise ValueError(f"rng algorithm mismatch: {state.get('algorithm')}")
        self.seed = int(state["seed"])
        self._gen = np.random.Generator(np.random.PCG64())
        self._gen.bit_generator.state = state["state"]


class Variable:
    """Node in the autodiff DAG: a value plus an optional gradient slot."""

    __slots__ = ("value", "grad", "parents", "vjps", "requires_grad", "name", "op")

    def __init__(self, value, parents=(), vjps=(), requires_grad=False,
                 name=None, op="leaf"):
        self.value = np.asarray(value)
        self.grad = None
        self.parents = tuple(parents)
        self.vjps = tuple(vjps)
        self.requires_grad = bool(requires_grad) or any(
            p.requires_grad for p in self.parents)
        self.name = name
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Variable(op={self.op}, shape={self.value.shape}, name={self.name})"

    # Convenience arithmetic; scalars are promoted to constants.
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return mul(_wrap(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _wrap(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_wrap(other, self.dtype), self)

    def __neg__(self):
        return mul(self, _wrap(-1.0, self.dtype))


def parameter(value, name=None):
    return Variable(value, requires_grad=True, name=name, op="param")


def constant(value, name=None):
    return Variable(value, requires_grad=False, name=name, op="const")


def _wrap(x, dtype):
    if isinstance(x, Variable):
        return x
    return Variable(np.asarray(x, dtype=dtype))


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, iter(root.parents))]
    seen.add(id(root))
    while stack:
        node, parents = stack[-1]
        advanced = False
        for p in parents:
            if id(p) not in seen:
                seen.add(id(p))
                stack.append((p, iter(p.parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def backward(loss: Variable, parameters=None) -> None:
    """Populate .grad on every requires-grad node reachable from loss.

    loss must be scalar. Parameters listed but unreachable from the loss
    get a zero gradient instead of None.
    """
    if loss.value.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node.grad is None or not node.parents:
            continue
        g = node.grad
        for parent, vjp in zip(node.parents, node.vjps):
            if not parent.requires_grad or vjp is None:
                continue
            contrib = vjp(g)
            if parent.grad is None:
                parent.grad = contrib
            else:
                parent.grad = parent.grad + contrib
    if parameters is not None:
        for p in parameters:
            if p.grad is None:
                p.grad = np.zeros_like(p.value)


def _unbroadcast(grad, shape):
    """Reduce grad back to `shape` after numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_check(a_shape, b_shape, opname):
    try:
        np.broadcast_shapes(a_shape, b_shape)
    except ValueError:
        raise ShapeError(f"{opname}: shapes {a_shape} and {b_shape} "
                         "are not broadcastable") from None


def add(a, b):
    _broadcast_check(a.shape, b.shape, "add")
    out = _finite(a.value + b.value)
    return Variable(out, (a, b),
                    (lambda g: _unbroadcast(g, a.shape),
                     lambda g: _unbroadcast(g, b.shape)), op="add")


def sub(a, b):
    _broadcast_check(a.shape, b.shape, "sub")
    out = _finite(a.value - b.value)
    return Variable(out, (a, b),
                    (lambda g: _unbroadcast(g, a.shape),
                     lambda g: _unbroadcast(-g, b.shape)), op="sub")


def mul(a, b):
    _broadcast_check(a.shape, b.shape, "mul")
    out = _finite(a.value * b.value)
    return Variable(out, (a, b),
                    (lambda g: _unbroadcast(g * b.value, a.shape),
                     lambda g: _unbroadcast(g * a.value, b.shape)), op="mul")


def div(a, b):
    _broadcast_check(a.shape, b.shape, "div")
    out = _finite(a.value / b.value)
    return Variable(out, (a, b),
                    (lambda g: _unbroadcast(g / b.value, a.shape),
                     lambda g: _unbroadcast(-g * a.value / (b.value ** 2), b.shape)),
                    op="div")


def mul_broadcast(a, mask):
    """Feature map times an attention mask (B×1×1×C or B×H×W×1)."""
    return mul(a, mask)


def absolute(a):
    out = np.abs(a.value)
    sign = np.sign(a.value)
    return Variable(out, (a,), (lambda g: g * sign,), op="abs")


def sum_all(a):
    out = np.asarray(a.value.sum(), dtype=a.dtype)
    return Variable(out, (a,),
                    (lambda g: np.broadcast_to(g, a.shape).astype(a.dtype),),
                    op="sum")


def mean_all(a):
    n = a.value.size
    out = np.asarray(a.value.mean(), dtype=a.dtype)
    return Variable(out, (a,),
                    (lambda g: np.broadcast_to(g / n, a.shape).astype(a.dtype),),
                    op="mean")


def reshape(a, shape):
    out = a.value.reshape(shape)
    return Variable(out, (a,), (lambda g: g.reshape(a.shape),), op="reshape")


def transpose_last2(a):
    out = a.value.swapaxes(-1, -2)
    return Variable(out, (a,), (lambda g: g.swapaxes(-1, -2),), op="transpose")


def activation(a, mode, slope=0.2):
    x = a.value
    if mode == "relu":
        out = np.maximum(x, 0)
        dmask = (x > 0).astype(x.dtype)
        return Variable(out, (a,), (lambda g: g * dmask,), op="relu")
    if mode == "leaky_relu":
        dmask = np.where(x > 0, x.dtype.type(1), x.dtype.type(slope))
        return Variable(x * dmask, (a,), (lambda g: g * dmask,), op="leaky_relu")
    if mode == "sigmoid":
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        dmask = out * (1.0 - out)
        return Variable(out, (a,), (lambda g: g * dmask,), op="sigmoid")
    raise ValueError(f"unknown activation mode: {mode}")


def relu(a):
    return activation(a, "relu")


def leaky_relu(a, slope=0.2):
    return activation(a, "leaky_relu", slope)


def sigmoid(a):
    return activation(a, "sigmoid")


def _same_pads(extent, stride, k):
    out = -(-extent // stride)
    total = max((out - 1) * stride + k - extent, 0)
    return total // 2, total - total // 2


def conv2d(x, kernel, bias=None, stride=1, padding="same"):
    """2-D cross-correlation, zero padded. x: B×H×W×Cin, kernel: k×k×Cin×Cout."""
    xv, wv = x.value, kernel.value
    if xv.ndim != 4 or wv.ndim != 4:
        raise ShapeError(f"conv2d: input rank {xv.ndim}, kernel rank {wv.ndim}, "
                         "both must be 4")
    B, H, W, Cin = xv.shape
    kh, kw, wcin, Cout = wv.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square with odd extent, got "
                         f"{kh}x{kw}")
    if wcin != Cin:
        raise ShapeError(f"conv2d: input channel axis ({Cin}) does not match "
                         f"kernel input axis ({wcin})")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    k, s = kh, stride
    if padding == "same":
        pt, pb = _same_pads(H, s, k)
        pl, pr = _same_pads(W, s, k)
    elif padding == "valid":
        pt = pb = pl = pr = 0
        if H < k or W < k:
            raise ShapeError(f"conv2d: valid padding needs spatial extents >= {k}, "
                             f"got {H}x{W}")
    else:
        raise ValueError(f"unknown padding: {padding}")
    xp = np.pad(xv, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::s, ::s]
    Ho, Wo = win.shape[1], win.shape[2]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(
        B * Ho * Wo, k * k * Cin)
    wmat = wv.reshape(k * k * Cin, Cout)
    out = cols @ wmat
    if bias is not None:
        out = out + bias.value
    out = out.reshape(B, Ho, Wo, Cout)
    _finite(out)

    def vjp_x(g):
        dcols = g.reshape(B * Ho * Wo, Cout) @ wmat.T
        dcols = dcols.reshape(B, Ho, Wo, k, k, Cin)
        dxp = np.zeros_like(xp)
        for i, j in itertools.product(range(k), range(k)):
            dxp[:, i:i + s * Ho:s, j:j + s * Wo:s, :] += dcols[:, :, :, i, j, :]
        return dxp[:, pt:pt + H, pl:pl + W, :]

    def vjp_w(g):
        return (cols.T @ g.reshape(B * Ho * Wo, Cout)).reshape(wv.shape)

    parents = [x, kernel]
    vjps = [vjp_x, vjp_w]
    if bias is not None:
        parents.append(bias)
        vjps.append(lambda g: g.sum(axis=(0, 1, 2)))
    return Variable(out, parents, vjps, op="conv2d")


def maxpool2d(x, window, stride):
    """Max pooling; backward routes to the first max in scan order."""
    xv = x.value
    B, H, W, C = xv.shape
    w, s = window, stride
    if w < 1:
        raise ShapeError(f"maxpool2d: window must be >= 1, got {w}")
    if w > H or w > W:
        raise ShapeError(f"maxpool2d: window {w} exceeds spatial extents {H}x{W}")
    win = sliding_window_view(xv, (w, w), axis=(1, 2))[:, ::s, ::s]
    Ho, Wo = win.shape[1], win.shape[2]
    flat = np.ascontiguousarray(win).reshape(B, Ho, Wo, C, w * w)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        dx = np.zeros_like(xv)
        b_i, oh_i, ow_i, c_i = np.indices(idx.shape, sparse=False)
        hi = oh_i * s + idx // w
        wi = ow_i * s + idx % w
        np.add.at(dx, (b_i, hi, wi, c_i), g)
        return dx

    return Variable(out, (x,), (vjp,), op="maxpool2d")


def upsample_nearest(x, factor):
    """Nearest-neighbour upsampling by an integer factor."""
    if factor < 1:
        raise ShapeError(f"upsample_nearest: factor must be >= 1, got {factor}")
    xv = x.value
    B, H, W, C = xv.shape
    f = factor
    out = xv.repeat(f, axis=1).repeat(f, axis=2)

    def vjp(g):
        return g.reshape(B, H, f, W, f, C).sum(axis=(2, 4))

    return Variable(out, (x,), (vjp,), op="upsample")


def pool_global(x, mode, axis):
    """Global pooling: axis='spatial' -> B×1×1×C, axis='channel' -> B×H×W×1."""
    xv = x.value
    if xv.ndim != 4:
        raise ShapeError(f"pool_global: expected rank-4 input, got {xv.ndim}")
    B, H, W, C = xv.shape
    if axis == "spatial":
        red_axes = (1, 2)
    elif axis == "channel":
        red_axes = (3,)
    else:
        raise ValueError(f"unknown pooling axis: {axis}")
    if mode == "avg":
        out = xv.mean(axis=red_axes, keepdims=True)
        n = H * W if axis == "spatial" else C

        def vjp(g):
            return np.broadcast_to(g / n, xv.shape).astype(xv.dtype)

        return Variable(out, (x,), (vjp,), op="gap")
    if mode != "max":
        raise ValueError(f"unknown pooling mode: {mode}")
    if axis == "spatial":
        flat = xv.reshape(B, H * W, C)
        idx = flat.argmax(axis=1)
        out = np.take_along_axis(flat, idx[:, None, :], axis=1).reshape(B, 1, 1, C)

        def vjp(g):
            dflat = np.zeros_like(flat)
            np.put_along_axis(dflat, idx[:, None, :], g.reshape(B, 1, C), axis=1)
            return dflat.reshape(xv.shape)

        return Variable(out, (x,), (vjp,), op="gmp")
    idx = xv.argmax(axis=3)
    out = np.take_along_axis(xv, idx[..., None], axis=3)

    def vjp(g):
        dx = np.zeros_like(xv)
        np.put_along_axis(dx, idx[..., None], g, axis=3)
        return dx

    return Variable(out, (x,), (vjp,), op="gmp")


def concat_channels(inputs):
    """Concatenate along the channel axis; backward slices the gradient back."""
    if not inputs:
        raise ShapeError("concat: needs at least one input")
    base = inputs[0].shape
    for v in inputs[1:]:
        if v.shape[:-1] != base[:-1]:
            raise ShapeError("concat: non-channel extents differ: "
                             + ", ".join(str(v.shape) for v in inputs))
    out = np.concatenate([v.value for v in inputs], axis=-1)
    offsets = np.cumsum([0] + [v.shape[-1] for v in inputs])

    def make_vjp(lo, hi):
        return lambda g: g[..., lo:hi]

    vjps = [make_vjp(offsets[i], offsets[i + 1]) for i in range(len(inputs))]
    return Variable(out, tuple(inputs), tuple(vjps), op="concat")


def matmul_batched(a, b):
    """Batched matrix product: B×M×K @ B×K×N -> B×M×N."""
    av, bv = a.value, b.value
    if av.ndim != 3 or bv.ndim != 3:
        raise ShapeError(f"matmul: expected rank-3 operands, got "
                         f"{av.ndim} and {bv.ndim}")
    if av.shape[0] != bv.shape[0] or av.shape[2] != bv.shape[1]:
        raise ShapeError(f"matmul: incompatible shapes {av.shape} and {bv.shape}")
    out = np.matmul(av, bv)
    return Variable(out, (a, b),
                    (lambda g: np.matmul(g, bv.swapaxes(-1, -2)),
                     lambda g: np.matmul(av.swapaxes(-1, -2), g)),
                    op="matmul")


def softmax_lastaxis(x):
    xv = x.value
    shifted = xv - xv.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return out * (g - (g * out).sum(axis=-1, keepdims=True))

    return Variable(out, (x,), (vjp,), op="softmax")


def init_he_normal(shape, rng: Rng, dtype=np.float32):
    """He-normal weights: N(0, 2/fan_in) with fan_in = prod(shape[:-1])."""
    fan_in = int(np.prod(shape[:-1]))
    if fan_in < 1:
        raise ValueError(f"init_he_normal: fan-in must be >= 1 for shape {shape}")
    std = np.sqrt(2.0 / fan_in)
    return rng.normal(0.0, std, shape, dtype=dtype)
