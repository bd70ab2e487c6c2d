"""Minimal reverse-mode automatic differentiation over numpy arrays.

The engine provides exactly the primitives the two network branches need:
3D convolution, max pooling, batch normalization, affine maps, the usual
activations, scatter/gather for graph message passing, dropout, and a small
set of arithmetic/reduction/view ops. The primitive set is closed (module
constant ``PRIMITIVE_KINDS``); there is no dynamic op registration.

Conventions:
  * A ``Tensor`` wraps one numpy array. float64 is the test-mode dtype;
    float32 is used for training speed. Ops preserve the input dtype.
  * No implicit broadcasting. The only shape-bending allowed is the bias
    add inside ``linear``/``conv3d`` and the per-channel affine inside
    ``batchnorm``. ``add``/``mul`` accept a python scalar or an
    exact-shape tensor, nothing else.
  * Randomness (dropout) and running statistics (batchnorm) are driven by
    explicitly passed generators/state, never by global state.
  * ``backward`` accumulates into ``.grad``; repeated calls without
    ``zero_grad`` sum their contributions.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor", "ShapeError", "PRIMITIVE_KINDS",
    "conv3d", "maxpool3d", "batchnorm", "linear", "relu", "sigmoid",
    "log_softmax", "exp", "log", "clamp", "dropout", "scatter_sum",
    "index_select", "add", "mul", "reduce_sum", "reduce_mean", "reduce_max",
    "concat", "reshape", "row_outer", "finite_difference_check",
    "zero_grads",
]

PRIMITIVE_KINDS = frozenset({
    # the core set
    "conv3d", "maxpool3d", "batchnorm", "linear", "relu", "sigmoid",
    "log_softmax", "scatter_sum", "dropout", "add", "mul", "sum", "mean",
    "concat", "index_select",
    # auxiliary kinds needed by the losses, readout and attribution
    "exp", "log", "clamp", "max", "reshape", "row_outer",
})


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class _Node:
    """Graph record: the producing primitive, its inputs, and a backward rule.

    ``backward_fn`` maps the upstream gradient (numpy array, same shape as
    the node's output) to a tuple of gradients aligned with ``inputs``;
    entries for inputs that do not require grad may be None.
    """

    __slots__ = ("kind", "inputs", "backward_fn")

    def __init__(self, kind: str, inputs: tuple["Tensor", ...],
                 backward_fn: Callable[[np.ndarray], tuple]):
        assert kind in PRIMITIVE_KINDS, kind
        self.kind = kind
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor:
    """An n-d numeric array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 node: Optional[_Node] = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node = node

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    # Convenience arithmetic (same-shape tensors or python scalars only).
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, mul(other, -1.0))
        return add(self, -float(other))

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_max(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def backward(self) -> None:
        """Populate ``.grad`` on every reachable requires_grad tensor.

        Only valid on scalar tensors. Traverses the (acyclic) graph once in
        reverse topological order; grads accumulate across repeated calls.
        """
        if self.size != 1:
            raise ShapeError(
                f"backward requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return

        order = _toposort(self)
        # Per-call gradients live in a local map so that repeated backward
        # calls each add exactly one contribution to the persistent .grad.
        local: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for t in order:
            g = local.pop(id(t), None)
            if g is None:
                continue
            _accum(t, g)
            if t.node is None:
                continue
            grads = t.node.backward_fn(g)
            for inp, gi in zip(t.node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                prev = local.get(id(inp))
                local[id(inp)] = np.asarray(gi) if prev is None else prev + gi

    def __repr__(self):
        return (f"Tensor(shape={self.shape}, dtype={self.data.dtype}, "
                f"requires_grad={self.requires_grad})")


def _toposort(root: Tensor) -> list[Tensor]:
    """Reverse topological order of the graph above ``root`` (root first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for inp in t.node.inputs:
                if id(inp) not in seen and inp.requires_grad:
                    stack.append((inp, False))
    order.reverse()
    return order


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def _make(data: np.ndarray, kind: str, inputs: tuple[Tensor, ...],
          backward_fn) -> Tensor:
    requires = any(t.requires_grad for t in inputs)
    node = _Node(kind, inputs, backward_fn) if requires else None
    return Tensor(data, requires_grad=requires, node=node)


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    """a + b where b is a same-shape Tensor or a python scalar."""
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
        out = a.data + b.data
        return _make(out, "add", (a, b), lambda g: (g, g))
    out = a.data + float(b)
    return _make(out, "add", (a,), lambda g: (g,))


def mul(a: Tensor, b) -> Tensor:
    """a * b where b is a same-shape Tensor or a python scalar."""
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}")
        ad, bd = a.data, b.data
        return _make(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad))
    c = float(b)
    return _make(a.data * c, "mul", (a,), lambda g: (g * c,))


# ---------------------------------------------------------------------------
# Activations and pointwise functions
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0), "relu", (x,),
                 lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # Split by sign for overflow safety.
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, "sigmoid", (x,), lambda g: (g * out * (1.0 - out),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, "exp", (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    d = x.data
    return _make(np.log(d), "log", (x,), lambda g: (g / d,))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes where lo <= x <= hi."""
    d = x.data
    inside = (d >= lo) & (d <= hi)
    return _make(np.clip(d, lo, hi), "clamp", (x,),
                 lambda g: (g * inside,))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable log-softmax along ``axis`` (max subtraction)."""
    d = x.data
    shifted = d - d.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, "log_softmax", (x,), backward)


def dropout(x: Tensor, p: float, mode: str, rng: np.random.Generator) -> Tensor:
    """Inverted dropout. Train mode zeroes with prob p and rescales
    survivors by 1/(1-p); eval mode is the identity. The mask is drawn from
    the passed rng and recorded for backward."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout requires 0 <= p < 1, got {p}")
    if mode == "eval" or p == 0.0:
        return _make(x.data.copy(), "dropout", (x,), lambda g: (g,))
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")
    keep = (rng.random(x.shape) >= p)
    scale = 1.0 / (1.0 - p)
    mask = keep.astype(x.data.dtype) * scale
    return _make(x.data * mask, "dropout", (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# Reductions, views, concatenation
# ---------------------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.data.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)
    shape = x.shape

    def backward(g):
        gg = g
        if not keepdims and axes is not None:
            gg = np.expand_dims(g, axes)
        return (np.broadcast_to(gg, shape).copy() if gg.shape != shape
                else gg.copy(),)

    return _make(np.asarray(out), "sum", (x,), backward)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.data.ndim)
    count = (x.size if axes is None
             else math.prod(x.shape[a] for a in axes))
    out = x.data.mean(axis=axes, keepdims=keepdims)
    shape = x.shape

    def backward(g):
        gg = g
        if not keepdims and axes is not None:
            gg = np.expand_dims(g, axes)
        return (np.broadcast_to(gg / count, shape).copy(),)

    return _make(np.asarray(out), "mean", (x,), backward)


def reduce_max(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max along one axis; gradient routes to the (lowest-index) argmax."""
    ax = axis % x.data.ndim
    out = x.data.max(axis=ax, keepdims=keepdims)
    arg = x.data.argmax(axis=ax)  # first occurrence = lowest index
    shape = x.shape

    def backward(g):
        gg = g if keepdims else np.expand_dims(g, ax)
        gx = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(gx, np.expand_dims(arg, ax), gg, axis=ax)
        return (gx,)

    return _make(np.asarray(out), "max", (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    orig = x.shape
    return _make(x.data.reshape(shape), "reshape", (x,),
                 lambda g: (g.reshape(orig),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of zero tensors")
    ax = axis % tensors[0].data.ndim
    sizes = [t.shape[ax] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=ax)
            for i in range(len(sizes)))

    return _make(out, "concat", tuple(tensors), backward)


def index_select(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather rows/columns by integer index (repeats allowed). The backward
    pass scatter-adds the upstream gradient back, so repeated indices sum."""
    idx = np.asarray(indices, dtype=np.intp)
    ax = axis % x.data.ndim
    n = x.shape[ax]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"index out of range for axis {ax} of size {n}")
    out = np.take(x.data, idx, axis=ax)
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        if ax == 0:
            np.add.at(gx, idx, g)
        else:
            gxm = np.moveaxis(gx, ax, 0)
            np.add.at(gxm, idx, np.moveaxis(g, ax, 0))
        return (gx,)

    return _make(out, "index_select", (x,), backward)


def row_outer(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise outer product, flattened: out[r, i*F + j] = a[r,i] * b[r,j]
    for a (R,K) and b (R,F). Both backward contractions are single
    vectorized reductions, which keeps this cheap inside message passing."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(
            f"row_outer expects (R,K) and (R,F), got {a.shape}, {b.shape}")
    r, k = a.shape
    f = b.shape[1]
    ad, bd = a.data, b.data
    out = (ad[:, :, None] * bd[:, None, :]).reshape(r, k * f)

    def backward(g):
        g3 = g.reshape(r, k, f)
        return ((g3 * bd[:, None, :]).sum(axis=2),
                (g3 * ad[:, :, None]).sum(axis=1))

    return _make(out, "row_outer", (a, b), backward)


# ---------------------------------------------------------------------------
# Graph aggregation
# ---------------------------------------------------------------------------

def scatter_sum(values: Tensor, targets, out_size: int) -> Tensor:
    """Row i of the output is the sum of value rows with target i.

    Rows with no contribution are zero. The backward pass gathers the
    upstream gradient by index (exact adjoint of index_select).
    """
    idx = np.asarray(targets, dtype=np.intp)
    if values.data.ndim != 2:
        raise ShapeError(f"scatter_sum expects 2-d values, got {values.shape}")
    if idx.shape != (values.shape[0],):
        raise ShapeError(
            f"targets length {idx.shape} does not match values rows "
            f"{values.shape[0]}")
    if idx.size and (idx.min() < 0 or idx.max() >= out_size):
        raise IndexError(f"scatter target out of range [0, {out_size})")
    out = np.zeros((out_size, values.shape[1]), dtype=values.data.dtype)
    np.add.at(out, idx, values.data)
    return _make(out, "scatter_sum", (values,), lambda g: (g[idx],))


# ---------------------------------------------------------------------------
# Dense layers
# ---------------------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map: (B, Fin) @ (Fout, Fin)^T + bias."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(
            f"linear expects 2-d operands, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"linear inner dims differ: input {x.shape} vs weight "
            f"{weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(
                f"linear bias shape {bias.shape} != ({weight.shape[0]},)")
        out = out + bias.data

    xd, wd = x.data, weight.data
    if bias is not None:
        def backward(g):
            return (g @ wd, g.T @ xd, g.sum(axis=0))
        return _make(out, "linear", (x, weight, bias), backward)

    def backward(g):
        return (g @ wd, g.T @ xd)
    return _make(out, "linear", (x, weight), backward)


# ---------------------------------------------------------------------------
# 3D convolution and pooling
# ---------------------------------------------------------------------------

def conv3d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (B,Cin,D,H,W) with (Cout,Cin,k,k,k).

    Output spatial extent is floor((D + 2*padding - k)/stride) + 1 per axis.
    Implemented as im2col + one matmul; the column matrix is kept for the
    backward pass.
    """
    if x.data.ndim != 5 or kernel.data.ndim != 5:
        raise ShapeError(
            f"conv3d expects 5-d input/kernel, got {x.shape}, {kernel.shape}")
    B, Cin, D, H, W = x.shape
    Cout, Ck, k1, k2, k3 = kernel.shape
    if not (k1 == k2 == k3):
        raise ShapeError(f"conv3d kernel must be cubic, got {kernel.shape}")
    k = k1
    if k % 2 != 1:
        raise ShapeError(f"conv3d kernel size must be odd, got {k}")
    if Ck != Cin:
        raise ShapeError(
            f"conv3d channel mismatch: input has {Cin}, kernel expects {Ck}")
    if min(D, H, W) + 2 * padding < k:
        raise ShapeError(
            f"conv3d spatial extent {(D, H, W)} with padding {padding} "
            f"smaller than kernel {k}")
    if bias is not None and bias.shape != (Cout,):
        raise ShapeError(f"conv3d bias shape {bias.shape} != ({Cout},)")

    if padding:
        pad = ((0, 0), (0, 0)) + ((padding, padding),) * 3
        xp = np.pad(x.data, pad)
    else:
        xp = x.data
    s = stride
    Do = (D + 2 * padding - k) // s + 1
    Ho = (H + 2 * padding - k) // s + 1
    Wo = (W + 2 * padding - k) // s + 1

    win = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))
    win = win[:, :, ::s, ::s, ::s]                      # B,Cin,Do,Ho,Wo,k,k,k
    cols = win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(
        B * Do * Ho * Wo, Cin * k ** 3)
    wmat = kernel.data.reshape(Cout, Cin * k ** 3)
    out2 = cols @ wmat.T
    if bias is not None:
        out2 = out2 + bias.data
    out = out2.reshape(B, Do, Ho, Wo, Cout).transpose(0, 4, 1, 2, 3)
    out = np.ascontiguousarray(out)

    padded_shape = xp.shape

    def backward(g):
        g2 = g.transpose(0, 2, 3, 4, 1).reshape(B * Do * Ho * Wo, Cout)
        gw = (g2.T @ cols).reshape(Cout, Cin, k, k, k)
        gcols = (g2 @ wmat).reshape(B, Do, Ho, Wo, Cin, k, k, k)
        gxp = np.zeros(padded_shape, dtype=g.dtype)
        for dz in range(k):
            for dy in range(k):
                for dx in range(k):
                    contrib = gcols[:, :, :, :, :, dz, dy, dx]
                    gxp[:, :,
                        dz:dz + Do * s:s,
                        dy:dy + Ho * s:s,
                        dx:dx + Wo * s:s] += contrib.transpose(0, 4, 1, 2, 3)
        if padding:
            gx = gxp[:, :, padding:padding + D, padding:padding + H,
                     padding:padding + W]
        else:
            gx = gxp
        if bias is not None:
            return (gx, gw, g2.sum(axis=0))
        return (gx, gw)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, "conv3d", inputs, backward)


def maxpool3d(x: Tensor, window: int, stride: Optional[int] = None) -> Tensor:
    """Max pooling over cubic windows. The gradient routes to the argmax
    voxel only; ties go to the lowest linear index within the window."""
    if x.data.ndim != 5:
        raise ShapeError(f"maxpool3d expects 5-d input, got {x.shape}")
    B, C, D, H, W = x.shape
    w = int(window)
    s = int(stride) if stride is not None else w
    if w > min(D, H, W):
        raise ShapeError(
            f"maxpool3d window {w} larger than spatial extents {(D, H, W)}")

    win = sliding_window_view(x.data, (w, w, w), axis=(2, 3, 4))
    win = win[:, :, ::s, ::s, ::s]
    B_, C_, Do, Ho, Wo = win.shape[:5]
    flatwin = win.reshape(B, C, Do, Ho, Wo, w ** 3)
    arg = flatwin.argmax(axis=-1)
    out = np.take_along_axis(flatwin, arg[..., None], axis=-1)[..., 0]

    # Global flat index of each window's argmax, for backward scatter.
    dz, rem = np.divmod(arg, w * w)
    dy, dx = np.divmod(rem, w)
    z0 = np.arange(Do) * s
    y0 = np.arange(Ho) * s
    x0 = np.arange(Wo) * s
    zz = z0[None, None, :, None, None] + dz
    yy = y0[None, None, None, :, None] + dy
    xx = x0[None, None, None, None, :] + dx
    bb, cc = np.meshgrid(np.arange(B), np.arange(C), indexing="ij")
    bb = bb[:, :, None, None, None]
    cc = cc[:, :, None, None, None]
    flat_idx = (((bb * C + cc) * D + zz) * H + yy) * W + xx

    shape = x.shape

    def backward(g):
        gx = np.zeros(B * C * D * H * W, dtype=g.dtype)
        np.add.at(gx, flat_idx.reshape(-1), g.reshape(-1))
        return (gx.reshape(shape),)

    return _make(np.ascontiguousarray(out), "maxpool3d", (x,), backward)


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------

def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor,
              running_mean: np.ndarray, running_var: np.ndarray,
              mode: str, eps: float = 1e-5, momentum: float = 0.1):
    """Per-channel batch normalization for (B,C) or (B,C,D,H,W) input.

    Train mode normalizes by the batch statistics and returns updated
    running stats (functional: the caller decides whether to commit them);
    eval mode normalizes by the running stats. Returns ``(out, (rm, rv))``.
    Rejects batches of size 1 in train mode (degenerate variance).
    """
    d = x.data
    if d.ndim not in (2, 5):
        raise ShapeError(f"batchnorm expects 2-d or 5-d input, got {x.shape}")
    C = d.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(
            f"batchnorm affine shapes {gamma.shape}/{beta.shape} != ({C},)")
    axes = (0,) if d.ndim == 2 else (0, 2, 3, 4)
    bshape = (1, C) if d.ndim == 2 else (1, C, 1, 1, 1)
    gview = gamma.data.reshape(bshape)
    bview = beta.data.reshape(bshape)

    if mode == "train":
        if d.shape[0] < 2:
            raise ShapeError(
                "batchnorm train mode requires batch size >= 2")
        m = d.mean(axis=axes)
        v = d.var(axis=axes)                      # biased, for normalization
        count = d.size // C
        unbiased = v * count / max(count - 1, 1)
        new_rm = (1 - momentum) * running_mean + momentum * m
        new_rv = (1 - momentum) * running_var + momentum * unbiased
        inv = 1.0 / np.sqrt(v + eps)
        xhat = (d - m.reshape(bshape)) * inv.reshape(bshape)
        out = gview * xhat + bview

        def backward(g):
            gbeta = g.sum(axis=axes)
            ggamma = (g * xhat).sum(axis=axes)
            ghat = g * gview
            n = count
            gx = (inv.reshape(bshape) / n) * (
                n * ghat
                - ghat.sum(axis=axes).reshape(bshape)
                - xhat * (ghat * xhat).sum(axis=axes).reshape(bshape))
            return (gx, ggamma, gbeta)

        t = _make(out, "batchnorm", (x, gamma, beta), backward)
        return t, (new_rm, new_rv)

    if mode != "eval":
        raise ValueError(f"unknown mode {mode!r}")
    inv = 1.0 / np.sqrt(running_var + eps)
    xhat = (d - running_mean.reshape(bshape)) * inv.reshape(bshape)
    out = gview * xhat + bview

    def backward(g):
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        gx = g * gview * inv.reshape(bshape)
        return (gx, ggamma, gbeta)

    t = _make(out, "batchnorm", (x, gamma, beta), backward)
    return t, (running_mean.copy(), running_var.copy())


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------

def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor,
                            h: float = 1e-5,
                            kink_margin: Optional[float] = None) -> float:
    """Compare backward() against central differences, coordinate by
    coordinate. Returns the max relative error with denominator
    max(|analytic|, |numeric|, 1e-8).

    ``f`` must be pure. For piecewise-linear ops (relu, maxpool, clamp),
    pass ``kink_margin`` to nudge near-zero input coordinates away from the
    kink before checking.
    """
    base = x.data.astype(np.float64).copy()
    if kink_margin:
        small = np.abs(base) < kink_margin
        base = np.where(small, np.where(base >= 0, kink_margin,
                                        -kink_margin), base)

    probe = Tensor(base.copy(), requires_grad=True)
    y = f(probe)
    if y.size != 1:
        raise ShapeError("finite_difference_check requires scalar f(x)")
    if not np.isfinite(y.data).all():
        raise ValueError("f(x) is not finite at the check point")
    y.backward()
    analytic = (probe.grad.copy() if probe.grad is not None
                else np.zeros_like(base))

    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(base.copy())).item()
        flat[i] = orig - h
        fm = f(Tensor(base.copy())).item()
        flat[i] = orig
        num_flat[i] = (fp - fm) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
