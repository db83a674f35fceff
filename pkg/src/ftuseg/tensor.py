"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tensor` wraps a numpy ``float64`` array (row-major storage) and
remembers how it was produced.  Calling :meth:`Tensor.backward` on a scalar
walks the recorded graph once in reverse topological order and accumulates
``d(scalar)/d(node)`` into ``node.grad`` for every node that requires a
gradient.  Only the operations needed by the segmentation stack are provided;
general broadcasting beyond bias-style adds is intentionally out of scope.

Gradients are validated against central finite differences (see
:func:`finite_diff_grad`), which is the reference oracle used by the test
suite for every op and for whole models.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

Array = np.ndarray


def _as_array(values) -> Array:
    arr = np.asarray(values, dtype=np.float64)
    if any(d <= 0 for d in arr.shape):
        raise ValueError(f"tensor extents must be positive, got shape {arr.shape}")
    return arr


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse-mode autodiff.

    ``requires_grad=True`` marks trainable leaves; interior nodes inherit the
    flag from their parents.  ``grad`` stays ``None`` until ``backward`` visits
    the node, so a parameter that a loss never touches keeps ``grad is None``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, values, requires_grad: bool = False):
        self.data: Array = _as_array(values)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[Array], None] | None = None
        self._op = "leaf"

    @classmethod
    def _from_op(cls, values: Array, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = _as_array(values)
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = tuple(parents)
        out._backward = backward if out.requires_grad else None
        out._op = op
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def _accumulate(self, g: Array) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Populate ``grad`` on every gradient-requiring ancestor of a scalar."""
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        # Iterative DFS: model graphs are deep enough to overflow the
        # recursion limit on larger inputs.
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen and parent.requires_grad:
                    stack.append((parent, False))
        if not self.requires_grad:
            return
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return add(self, scale(other, -1.0))

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def reshape(self, *shape: int) -> "Tensor":
        return reshape(self, shape)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def mean(self) -> "Tensor":
        return tensor_mean(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``g`` down to ``shape``; inverse of numpy broadcasting in add/mul."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def backward(g: Array) -> None:
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(g, b.data.shape))

    return Tensor._from_op(out_data, (a, b), backward, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def backward(g: Array) -> None:
        a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return Tensor._from_op(out_data, (a, b), backward, "mul")


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)

    def backward(g: Array) -> None:
        a._accumulate(g * factor)

    return Tensor._from_op(a.data * factor, (a,), backward, "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g: Array) -> None:
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)

    return Tensor._from_op(out_data, (a, b), backward, "matmul")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    out_data = np.where(mask, a.data, 0.0)

    def backward(g: Array) -> None:
        a._accumulate(g * mask)

    return Tensor._from_op(out_data, (a,), backward, "relu")


def sigmoid(a: Tensor) -> Tensor:
    out_data = sigmoid_array(a.data)

    def backward(g: Array) -> None:
        a._accumulate(g * out_data * (1.0 - out_data))

    return Tensor._from_op(out_data, (a,), backward, "sigmoid")


def sigmoid_array(z: Array) -> Array:
    """Numerically stable logistic function on a raw array."""
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    ez = np.exp(shifted)
    out_data = ez / ez.sum(axis=axis, keepdims=True)

    def backward(g: Array) -> None:
        # d softmax: s * (g - sum(g * s)) along the normalized axis.
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        a._accumulate(out_data * (g - dot))

    return Tensor._from_op(out_data, (a,), backward, "softmax")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(d) for d in shape)
    out_data = a.data.reshape(shape)

    def backward(g: Array) -> None:
        a._accumulate(g.reshape(a.data.shape))

    return Tensor._from_op(out_data, (a,), backward, "reshape")


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ValueError(f"transpose expects a 2-d tensor, got {a.shape}")

    def backward(g: Array) -> None:
        a._accumulate(g.T)

    return Tensor._from_op(a.data.T.copy(), (a,), backward, "transpose")


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ValueError("concat needs at least one tensor")
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g: Array) -> None:
        for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            part._accumulate(g[tuple(index)])

    return Tensor._from_op(out_data, tuple(parts), backward, "concat")


def tensor_sum(a: Tensor) -> Tensor:
    def backward(g: Array) -> None:
        a._accumulate(np.full(a.data.shape, float(g.reshape(()))))

    return Tensor._from_op(a.data.sum(), (a,), backward, "sum")


def tensor_mean(a: Tensor) -> Tensor:
    n = a.data.size

    def backward(g: Array) -> None:
        a._accumulate(np.full(a.data.shape, float(g.reshape(())) / n))

    return Tensor._from_op(a.data.mean(), (a,), backward, "mean")


# -- convolution -----------------------------------------------------------


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation of ``x`` with ``kernel``.

    ``x`` is ``[C_in, H, W]`` or batched ``[N, C_in, H, W]``; ``kernel`` is
    ``[C_out, C_in, kH, kW]``.  Zero padding, integer stride, no dilation.
    """
    if kernel.data.ndim != 4:
        raise ValueError(f"kernel must be [C_out, C_in, kH, kW], got {kernel.shape}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be >= 0, got {padding}")
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise ValueError(f"input must be [C,H,W] or [N,C,H,W], got {x.shape}")
    n, c_in, h, w = xd.shape
    c_out, kc, kh, kw = kernel.shape
    if kc != c_in:
        raise ValueError(f"kernel expects {kc} input channels, input has {c_in}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ValueError(
            f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}"
        )
    if padding:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = xd
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride, :, :]  # [N, C_in, OH, OW, kH, kW]
    out_data = np.einsum("ncxyij,fcij->nfxy", windows, kernel.data, optimize=True)

    def backward(g: Array) -> None:
        gb = g[None] if squeeze else g
        if kernel.requires_grad:
            gk = np.einsum("nfxy,ncxyij->fcij", gb, windows, optimize=True)
            kernel._accumulate(gk)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            # Scatter per kernel tap: each (i, j) contributes to a strided
            # slice of the padded input gradient.
            for i in range(kh):
                for j in range(kw):
                    contrib = np.einsum("nfxy,fc->ncxy", gb, kernel.data[:, :, i, j])
                    gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += contrib
            if padding:
                gxp = gxp[:, :, padding : padding + h, padding : padding + w]
            x._accumulate(gxp[0] if squeeze else gxp)

    out = out_data[0] if squeeze else out_data
    return Tensor._from_op(out, (x, kernel), backward, "conv2d")


# -- resampling ------------------------------------------------------------


def _bilinear_weights(in_size: int, out_size: int) -> Array:
    """Row matrix ``W`` with ``out = W @ in`` for 1-d bilinear resampling.

    Source coordinates use half-pixel centers: ``s = (d + 0.5) * in/out - 0.5``
    clamped to ``[0, in - 1]`` (the align-corners-false convention).
    """
    if out_size < 1 or in_size < 1:
        raise ValueError("sizes must be positive")
    dest = np.arange(out_size, dtype=np.float64)
    s = (dest + 0.5) * (in_size / out_size) - 0.5
    s = np.clip(s, 0.0, in_size - 1.0)
    lo = np.floor(s).astype(np.int64)
    lo = np.clip(lo, 0, in_size - 1)
    hi = np.clip(lo + 1, 0, in_size - 1)
    frac = s - lo
    weights = np.zeros((out_size, in_size))
    rows = np.arange(out_size)
    np.add.at(weights, (rows, lo), 1.0 - frac)
    np.add.at(weights, (rows, hi), frac)
    return weights


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resample of ``[C, h, w]`` to ``[C, out_h, out_w]``.

    Separable linear map: ``out = Wr @ x @ Wc^T`` per channel, so the backward
    pass is the transposed map.  Works for both up- and downscaling.
    """
    if x.data.ndim != 3:
        raise ValueError(f"expected [C, h, w], got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {out_h}x{out_w}")
    _, h, w = x.shape
    wr = _bilinear_weights(h, int(out_h))
    wc = _bilinear_weights(w, int(out_w))
    out_data = wr @ x.data @ wc.T

    def backward(g: Array) -> None:
        x._accumulate(wr.T @ g @ wc)

    return Tensor._from_op(out_data, (x,), backward, "upsample_bilinear")


def downsample_avg(x: Tensor, factor: int) -> Tensor:
    """Average-pool ``[C, H, W]`` by an integer ``factor`` (exact block means)."""
    if x.data.ndim != 3:
        raise ValueError(f"expected [C, H, W], got {x.shape}")
    factor = int(factor)
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    c, h, w = x.shape
    if h % factor or w % factor:
        raise ValueError(f"spatial dims {h}x{w} not divisible by factor {factor}")
    oh, ow = h // factor, w // factor
    blocks = x.data.reshape(c, oh, factor, ow, factor)
    out_data = blocks.mean(axis=(2, 4))

    def backward(g: Array) -> None:
        spread = np.broadcast_to(
            g[:, :, None, :, None] / (factor * factor), (c, oh, factor, ow, factor)
        )
        x._accumulate(spread.reshape(c, h, w))

    return Tensor._from_op(out_data, (x,), backward, "downsample_avg")


# -- attention ---------------------------------------------------------------


def attention_block(
    x: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    bq: Tensor | None = None,
    bk: Tensor | None = None,
    bv: Tensor | None = None,
    bo: Tensor | None = None,
) -> Tensor:
    """Single-head self-attention with residual: ``x + softmax(QK^T/sqrt(D)) V Wo``.

    ``x`` is ``[tokens, D]``; the four projections are ``[D, D]`` with
    optional ``[D]`` biases.  Built from the primitive ops above, so its
    gradient needs no dedicated backward rule.
    """
    if x.data.ndim != 2:
        raise ValueError(f"expected [tokens, D], got {x.shape}")
    tokens, dim = x.shape
    if tokens < 1 or dim < 1:
        raise ValueError("attention needs at least one token and one channel")
    for name, wmat in (("wq", wq), ("wk", wk), ("wv", wv), ("wo", wo)):
        if wmat.shape != (dim, dim):
            raise ValueError(f"{name} must be [{dim}, {dim}], got {wmat.shape}")

    def project(weight: Tensor, bias: Tensor | None) -> Tensor:
        out = matmul(x, weight)
        return out if bias is None else add(out, bias)

    q = project(wq, bq)
    k = project(wk, bk)
    v = project(wv, bv)
    scores = scale(matmul(q, transpose(k)), 1.0 / np.sqrt(dim))
    attn = softmax(scores, axis=-1)
    mixed = matmul(attn, v)
    out = matmul(mixed, wo)
    if bo is not None:
        out = add(out, bo)
    return add(x, out)


# -- gradient checking -------------------------------------------------------


def finite_diff_grad(f: Callable[[], float], params: Tensor, eps: float = 1e-5) -> Array:
    """Central finite differences of scalar ``f()`` w.r.t. every entry of ``params``.

    ``f`` must re-run the computation from ``params.data``; entries are
    perturbed in place and restored.  Reference oracle for ``backward``.
    """
    flat = params.data.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f())
        flat[i] = orig - eps
        lo = float(f())
        flat[i] = orig
        grad[i] = (hi - lo) / (2.0 * eps)
    return grad.reshape(params.data.shape)

