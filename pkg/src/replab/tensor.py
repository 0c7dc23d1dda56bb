"""Dense float tensors with reverse-mode autodiff.

Everything downstream (blocks, computing layers, the trainer) is built on the
primitives here. The graph is define-by-run: each op records its parents and a
backward closure on the output tensor, and ``backward`` replays the tape in
reverse topological order. Weight synthesis re-reads its anchors every forward
pass, so nothing is cached across calls.

Default precision is float64. Intermediate ops inherit the dtype of their
operands, so a network whose leaves were cast to float32 runs end to end in
float32 (used by the deploy equivalence checks).
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_GELU_C = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent; message names the dimension."""


class Tensor:
    """A dense n-dimensional float array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy() if g.base is not None or g is self.data else g
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar output; fills ``grad`` on leaves."""
        if self.data.size != 1:
            raise ValueError("backward: loss must be a scalar tensor")
        tape = build_tape(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(tape):
            if node._backward is not None:
                node._backward()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalar operands inherit this tensor's dtype so a
    # float32-cast network stays float32 end to end
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

    def __neg__(self):
        return mul(self, Tensor(np.asarray(-1.0, dtype=self.dtype)))

    def __matmul__(self, other):
        return matmul(self, _wrap(other, self.dtype))

    def __pow__(self, p):
        return powi(self, p)


class Parameter(Tensor):
    """A trainable leaf bound to an owner through its ``pid``."""

    __slots__ = ("pid", "decay_exempt")

    def __init__(self, data, pid: str, decay_exempt: bool = False):
        super().__init__(data, requires_grad=True)
        self.pid = pid
        self.decay_exempt = decay_exempt


def _wrap(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is not None and np.isscalar(x):
        return Tensor(np.asarray(x, dtype=dtype))
    return Tensor(x)


def build_tape(root: Tensor) -> list[Tensor]:
    """Topological order of the graph below ``root``: parents precede users.

    Parent tuples are ordered, so traversal (and therefore gradient
    accumulation order) is deterministic for a given graph.
    """
    tape: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    while stack:
        node, idx = stack.pop()
        if idx == 0:
            if id(node) in visited:
                continue
            visited.add(id(node))
        if idx < len(node._parents):
            stack.append((node, idx + 1))
            child = node._parents[idx]
            if id(child) not in visited:
                stack.append((child, 0))
        else:
            tape.append(node)
    return tape


def _make(out_data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(out_data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and structural primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def backward():
        g = out.grad
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    out = _make(out_data, (a, b), backward)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data - b.data

    def backward():
        g = out.grad
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    out = _make(out_data, (a, b), backward)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def backward():
        g = out.grad
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    out = _make(out_data, (a, b), backward)
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data / b.data

    def backward():
        g = out.grad
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    out = _make(out_data, (a, b), backward)
    return out


def powi(a: Tensor, p: float) -> Tensor:
    out_data = a.data**p

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad * p * a.data ** (p - 1))

    out = _make(out_data, (a,), backward)
    return out


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad * 0.5 / out.data)

    out = _make(out_data, (a,), backward)
    return out


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad * out.data)

    out = _make(out_data, (a,), backward)
    return out


def log(a: Tensor) -> Tensor:
    out_data = np.log(a.data)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad / a.data)

    out = _make(out_data, (a,), backward)
    return out


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad * (1.0 - out.data * out.data))

    out = _make(out_data, (a,), backward)
    return out


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out_data = a.data.reshape(shape)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad.reshape(a.shape))

    out = _make(out_data, (a,), backward)
    return out


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    out_data = np.transpose(a.data, axes)
    inverse = np.argsort(axes)

    def backward():
        if a.requires_grad:
            a._accumulate(np.transpose(out.grad, inverse))

    out = _make(out_data, (a,), backward)
    return out


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward():
        if a.requires_grad:
            g = out.grad
            if not keepdims and axis is not None:
                axes = (axis,) if isinstance(axis, int) else tuple(axis)
                g = np.expand_dims(g, axes)
            a._accumulate(np.broadcast_to(g, a.shape))

    out = _make(out_data, (a,), backward)
    return out


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul: inner dimensions disagree ({a.shape[-1]} vs {b.shape[-2]})"
        )
    out_data = a.data @ b.data

    def backward():
        g = out.grad
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.shape))

    out = _make(out_data, (a, b), backward)
    return out


def stop_gradient(a: Tensor) -> Tensor:
    """Value-transparent, gradient-opaque view of ``a``."""
    return Tensor(a.data)


def activation(a: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(a)
    if kind == "gelu":
        return gelu(a)
    raise ValueError(f"activation: unknown kind {kind!r}")


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0.0)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad * (a.data > 0.0))

    out = _make(out_data, (a,), backward)
    return out


def gelu(a: Tensor) -> Tensor:
    """GELU via the tanh approximation (closed form, deterministic)."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + t)

    def backward():
        if a.requires_grad:
            d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
            da = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
            a._accumulate(out.grad * da)

    out = _make(out_data, (a,), backward)
    return out


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _im2col(xp: np.ndarray, q: int, stride: int) -> np.ndarray:
    # xp: padded input [B, C, Hp, Wp] -> [B, C*q*q, L]
    view = np.lib.stride_tricks.sliding_window_view(xp, (q, q), axis=(2, 3))
    view = view[:, :, ::stride, ::stride, :, :]
    b, c, ho, wo, _, _ = view.shape
    cols = view.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * q * q, ho * wo)
    return np.ascontiguousarray(cols)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Bias-free 2-d convolution (cross-correlation), NCHW layout."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be 4-d [B,C,H,W], got {x.ndim}-d")
    if w.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be 4-d [Cout,Cin,q,q], got {w.ndim}-d")
    if w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: kernel must be square, got {w.shape[2]}x{w.shape[3]}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"conv2d: input has {x.shape[1]} channels but kernel expects {w.shape[1]}"
        )
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} pad={pad}")
    bsz, cin, h, wdim = x.shape
    cout, _, q, _ = w.shape
    ho = (h + 2 * pad - q) // stride + 1
    wo = (wdim + 2 * pad - q) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {q}x{q} exceeds padded input {h + 2 * pad}x{wdim + 2 * pad}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, q, stride)  # [B, Cin*q*q, L]
    wmat = w.data.reshape(cout, -1)
    out_data = (wmat @ cols).reshape(bsz, cout, ho, wo)

    def backward():
        g = out.grad.reshape(bsz, cout, ho * wo)
        if w.requires_grad:
            gw = np.einsum("bol,bkl->ok", g, cols)
            w._accumulate(gw.reshape(w.shape))
        if x.requires_grad:
            dcols = wmat.T @ g  # [B, Cin*q*q, L]
            dview = dcols.reshape(bsz, cin, q, q, ho, wo)
            dxp = np.zeros_like(xp)
            for u in range(q):
                for v in range(q):
                    dxp[:, :, u : u + stride * ho : stride, v : v + stride * wo : stride] += dview[
                        :, :, u, v
                    ]
            dx = dxp[:, :, pad : pad + h, pad : pad + wdim] if pad else dxp
            x._accumulate(dx)

    out = _make(out_data, (x, w), backward)
    return out


# ---------------------------------------------------------------------------
# composite layers
# ---------------------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Token-wise affine map y = x w^T + b over the trailing axis."""
    if x.shape[-1] != w.shape[-1]:
        raise ShapeError(
            f"linear: input feature size {x.shape[-1]} != weight input size {w.shape[-1]}"
        )
    y = matmul(x, swap_last(w))
    if b is not None:
        y = add(y, b)
    return y


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Channelwise batch normalization for NCHW tensors.

    Train mode normalizes by batch statistics and updates the running stats
    in place by exponential moving average (the same biased variance used for
    normalization). Eval mode normalizes by the running stats.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm: input must be 4-d [B,C,H,W], got {x.ndim}-d")
    c = x.shape[1]
    if gamma.shape != (c,):
        raise ShapeError(f"batch_norm: gamma has extent {gamma.shape} but input has {c} channels")
    shape = (1, c, 1, 1)
    if training:
        if x.shape[0] == 0:
            raise ValueError("batch_norm: batch of size 0 in train mode")
        mu = tmean(x, axis=(0, 2, 3), keepdims=True)
        var = tmean((x - mu) ** 2, axis=(0, 2, 3), keepdims=True)
        running_mean.data = (1.0 - momentum) * running_mean.data + momentum * mu.data.reshape(c)
        running_var.data = (1.0 - momentum) * running_var.data + momentum * var.data.reshape(c)
    else:
        mu = Tensor(running_mean.data.reshape(shape))
        var = Tensor(running_var.data.reshape(shape))
    xhat = (x - mu) / sqrt(var + eps)
    return xhat * reshape(gamma, shape) + reshape(beta, shape)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Last-axis normalization with learned affine."""
    if x.shape[-1] != gamma.shape[0]:
        raise ShapeError(
            f"layer_norm: last axis {x.shape[-1]} != affine extent {gamma.shape[0]}"
        )
    mu = tmean(x, axis=-1, keepdims=True)
    var = tmean((x - mu) ** 2, axis=-1, keepdims=True)
    xhat = (x - mu) / sqrt(var + eps)
    return xhat * gamma + beta


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    # the detached max shift changes nothing analytically, only stabilizes exp
    shift = Tensor(np.max(x.data, axis=axis, keepdims=True))
    e = exp(x - shift)
    return e / tsum(e, axis=axis, keepdims=True)


def msa(
    x: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    bq: Tensor,
    bk: Tensor,
    bv: Tensor,
    bo: Tensor,
    heads: int,
) -> Tensor:
    """Multi-head softmax self-attention with per-head scaling 1/sqrt(d/H)."""
    if x.ndim != 3:
        raise ShapeError(f"msa: input must be 3-d [B,T,d], got {x.ndim}-d")
    bsz, t, d = x.shape
    if d % heads != 0:
        raise ShapeError(f"msa: embedding dim {d} not divisible by {heads} heads")
    dh = d // heads

    def split(z: Tensor) -> Tensor:
        return transpose(reshape(z, (bsz, t, heads, dh)), (0, 2, 1, 3))

    q = split(linear(x, wq, bq))
    k = split(linear(x, wk, bk))
    v = split(linear(x, wv, bv))
    scores = matmul(q, swap_last(k)) * (1.0 / math.sqrt(dh))
    probs = softmax(scores, axis=-1)
    mixed = matmul(probs, v)  # [B,H,T,dh]
    merged = reshape(transpose(mixed, (0, 2, 1, 3)), (bsz, t, d))
    return linear(merged, wo, bo)


def cross_entropy_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy_loss: logits must be 2-d [B,C], got {logits.ndim}-d")
    labels = np.asarray(labels)
    bsz, c = logits.shape
    if labels.shape != (bsz,):
        raise ShapeError(f"cross_entropy_loss: {bsz} rows but {labels.shape} labels")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError(f"cross_entropy_loss: label out of range [0,{c})")
    shift = Tensor(np.max(logits.data, axis=1, keepdims=True))
    lse = log(tsum(exp(logits - shift), axis=1, keepdims=True)) + shift
    onehot = np.zeros((bsz, c), dtype=logits.dtype)
    onehot[np.arange(bsz), labels] = 1.0
    picked = tsum(logits * Tensor(onehot), axis=1, keepdims=True)
    return tmean(lse - picked)


# ---------------------------------------------------------------------------
# gradient plumbing
# ---------------------------------------------------------------------------

GradMap = dict


def backward(loss: Tensor, params: Mapping[str, Parameter] | Iterable[Parameter]) -> GradMap:
    """Run reverse mode from a scalar loss and collect per-parameter gradients.

    Parameters not reached by the sweep map to zeros.
    """
    items: list[tuple[str, Parameter]]
    if isinstance(params, Mapping):
        items = list(params.items())
    else:
        items = [(p.pid, p) for p in params]
    for _, p in items:
        p.grad = None
    loss.backward()
    grads: GradMap = {}
    for pid, p in items:
        grads[pid] = p.grad if p.grad is not None else np.zeros_like(p.data)
    return grads


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Central-difference check of autodiff gradients w.r.t. ``x``.

    Returns the max relative error with denominator max(|analytic|, |numeric|,
    1e-8); a constant f therefore yields exactly 0.
    """
    x.grad = None
    out = f(x)
    out.backward()
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    max_rel = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x).data)
        flat[i] = orig - h
        fm = float(f(x).data)
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * h)
        a = float(analytic.reshape(-1)[i])
        denom = max(abs(a), abs(numeric), 1e-8)
        max_rel = max(max_rel, abs(a - numeric) / denom)
    return max_rel
