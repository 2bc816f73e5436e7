"""Dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap contiguous row-major numpy arrays (float32 by default,
float64 when callers build verification graphs). Every differentiable op
records its inputs and a backward closure on the output tensor; calling
``backward()`` on a scalar loss walks the recorded graph once, in reverse
topological order, accumulating gradients into every ``requires_grad``
tensor it reaches.

Conventions:

* Convolutions are cross-correlations (no kernel flip), stride 1, zero
  "same" padding, matching the mainstream deep-learning convention.
  A flipped-kernel convolution is the same op with ``k[::-1, ::-1, ...]``.
* ``backward`` adds into ``grad``; callers zero grads between steps.
  Two backward passes without a reset therefore double the gradients.
* ``permute`` materializes a contiguous copy; ``reshape`` is a row-major
  view. Round-trips are exact.

Setting the environment variable ``SSMIX_CHECK_FINITE=1`` (or calling
``set_check_finite(True)``) asserts after every forward op that the
output contains no NaN/Inf.
"""

from __future__ import annotations

import os
from contextlib import contextmanager

import numpy as np

from .errors import DimensionError, InputError

DEFAULT_DTYPE = np.float32

_check_finite = os.environ.get("SSMIX_CHECK_FINITE", "0") == "1"
_grad_enabled = True
_active_mac_counter = None

_CONV_OFFSETS = [(a, b, c) for a in range(3) for b in range(3) for c in range(3)]
_DW_OFFSETS = [(a, b) for a in range(3) for b in range(3)]

# tanh-form GELU constants
_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def set_check_finite(on: bool) -> None:
    global _check_finite
    _check_finite = bool(on)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference/eval)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class MacCounter:
    """Tallies multiply-accumulates executed by dense/conv ops."""

    def __init__(self):
        self.macs = 0


@contextmanager
def mac_counting():
    """Count MACs of all dense/conv3d/depthwise ops run inside the block."""
    global _active_mac_counter
    prev = _active_mac_counter
    counter = MacCounter()
    _active_mac_counter = counter
    try:
        yield counter
    finally:
        _active_mac_counter = prev


def _add_macs(n: int) -> None:
    if _active_mac_counter is not None:
        _active_mac_counter.macs += int(n)


class Tensor:
    """Dense N-dimensional float array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward_fn = None
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, op={self._op})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Populate grads of every reachable requires_grad tensor.

        Only valid on a scalar produced by a recorded graph. Gradients of
        non-leaf intermediates are dropped once propagated to keep memory
        bounded; leaf (parameter) grads accumulate.
        """
        if self.data.size != 1:
            raise InputError(
                f"backward requires a scalar, got shape {self.shape}"
            )
        if not self.requires_grad:
            raise InputError("backward on a tensor that does not require grad")

        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)
                node.grad = None  # intermediate: free once propagated


def _finish(out_data, parents, backward_fn, op_name) -> Tensor:
    """Wrap an op result, attaching graph bookkeeping if grads are live."""
    if _check_finite and not np.all(np.isfinite(out_data)):
        raise FloatingPointError(f"non-finite values produced by op '{op_name}'")
    requires = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = requires
    out.grad = None
    out._op = op_name
    if requires:
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    else:
        out._parents = ()
        out._backward_fn = None
    return out


def _as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shape {a.shape} vs {b.shape}")
    y = a.data + b.data

    def _bwd(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _finish(y, (a, b), _bwd, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shape {a.shape} vs {b.shape}")
    y = a.data * b.data

    def _bwd(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _finish(y, (a, b), _bwd, "mul")


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    y = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def _bwd(g):
        if x.requires_grad:
            x._accumulate(np.broadcast_to(g, x.shape).astype(x.data.dtype))

    return _finish(y, (x,), _bwd, "sum")


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0)

    def _bwd(g):
        if x.requires_grad:
            x._accumulate(g * (x.data > 0))

    return _finish(y, (x,), _bwd, "relu")


def sigmoid(x: Tensor) -> Tensor:
    # tanh form avoids exp overflow for large negative inputs
    s = 0.5 * (np.tanh(0.5 * x.data) + 1.0)

    def _bwd(g):
        if x.requires_grad:
            x._accumulate(g * s * (1.0 - s))

    return _finish(s, (x,), _bwd, "sigmoid")


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh parameterization.

    gelu(x) = 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
    """
    d = x.data
    t = np.tanh(_GELU_C * (d + _GELU_A * d * d * d))
    y = 0.5 * d * (1.0 + t)

    def _bwd(g):
        if x.requires_grad:
            du = _GELU_C * (1.0 + 3.0 * _GELU_A * d * d)
            x._accumulate(g * (0.5 * (1.0 + t) + 0.5 * d * (1.0 - t * t) * du))

    return _finish(y, (x,), _bwd, "gelu")


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"permute: {axes} is not a permutation of rank {x.ndim}")
    y = np.ascontiguousarray(np.transpose(x.data, axes))
    inverse = tuple(np.argsort(axes))

    def _bwd(g):
        if x.requires_grad:
            x._accumulate(np.transpose(g, inverse))

    return _finish(y, (x,), _bwd, "permute")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise DimensionError(f"reshape: {x.shape} has {x.size} elements, target {shape}")
    y = x.data.reshape(shape)

    def _bwd(g):
        if x.requires_grad:
            x._accumulate(g.reshape(x.shape))

    return _finish(y, (x,), _bwd, "reshape")


def concat(xs, axis: int) -> Tensor:
    xs = list(xs)
    if not xs:
        raise InputError("concat: empty input list")
    axis = int(axis)
    rank = xs[0].ndim
    if axis < 0:
        axis += rank
    for t in xs[1:]:
        if t.ndim != rank:
            raise DimensionError(f"concat: rank {t.ndim} vs {rank}")
        for ax in range(rank):
            if ax != axis and t.shape[ax] != xs[0].shape[ax]:
                raise DimensionError(
                    f"concat: shapes {t.shape} vs {xs[0].shape} differ off axis {axis}"
                )
    y = np.concatenate([t.data for t in xs], axis=axis)
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum([0] + sizes)

    def _bwd(g):
        for t, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * rank
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _finish(y, tuple(xs), _bwd, "concat")


# ---------------------------------------------------------------------------
# linear / convolutional ops


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map along the last axis; weights shared over leading axes."""
    n_in, n_out = w.shape if w.ndim == 2 else (None, None)
    if w.ndim != 2 or x.shape[-1] != n_in:
        raise DimensionError(f"dense: input shape {x.shape} vs weight shape {w.shape}")
    if b.shape != (n_out,):
        raise DimensionError(f"dense: bias shape {b.shape} vs weight shape {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, n_in)
    y2 = x2 @ w.data
    y2 += b.data
    _add_macs(x2.shape[0] * n_in * n_out)

    def _bwd(g):
        g2 = g.reshape(-1, n_out)
        if x.requires_grad:
            x._accumulate((g2 @ w.data.T).reshape(x.shape))
        if w.requires_grad:
            w._accumulate(x2.T @ g2)
        if b.requires_grad:
            b._accumulate(g2.sum(axis=0))

    return _finish(y2.reshape(lead + (n_out,)), (x, w, b), _bwd, "dense")


def conv3d(x: Tensor, k: Tensor, b: Tensor) -> Tensor:
    """3x3x3 cross-correlation over the three leading spatial/spectral axes.

    Accepts (H, W, S, Cin) or batched (B, H, W, S, Cin); zero "same"
    padding of 1 on H/W/S, stride 1, so the output keeps the input shape
    with the channel axis replaced by Cout.
    """
    if k.ndim != 5 or k.shape[:3] != (3, 3, 3):
        raise DimensionError(f"conv3d: kernel must be (3,3,3,Cin,Cout), got {k.shape}")
    batched = x.ndim == 5
    if not batched and x.ndim != 4:
        raise DimensionError(f"conv3d: input must be rank 4 or 5, got {x.shape}")
    xd = x.data if batched else x.data[None]
    bsz, h, w_, s, cin = xd.shape
    if cin != k.shape[3]:
        raise DimensionError(
            f"conv3d: input channels {cin} (shape {x.shape}) vs kernel {k.shape}"
        )
    cout = k.shape[4]
    if b.shape != (cout,):
        raise DimensionError(f"conv3d: bias shape {b.shape} vs kernel {k.shape}")

    xp = np.zeros((bsz, h + 2, w_ + 2, s + 2, cin), dtype=xd.dtype)
    xp[:, 1:-1, 1:-1, 1:-1, :] = xd
    cols = np.empty((bsz, h, w_, s, 27, cin), dtype=xd.dtype)
    for i, (da, db_, dc) in enumerate(_CONV_OFFSETS):
        cols[:, :, :, :, i, :] = xp[:, da:da + h, db_:db_ + w_, dc:dc + s, :]
    cols2 = cols.reshape(-1, 27 * cin)
    kmat = k.data.reshape(27 * cin, cout)
    y2 = cols2 @ kmat
    y2 += b.data
    y = y2.reshape(bsz, h, w_, s, cout)
    _add_macs(bsz * h * w_ * s * 27 * cin * cout)

    def _bwd(g):
        g2 = g.reshape(-1, cout)
        if k.requires_grad:
            k._accumulate((cols2.T @ g2).reshape(k.shape))
        if b.requires_grad:
            b._accumulate(g2.sum(axis=0))
        if x.requires_grad:
            dcols = (g2 @ kmat.T).reshape(bsz, h, w_, s, 27, cin)
            dxp = np.zeros_like(xp)
            for i, (da, db_, dc) in enumerate(_CONV_OFFSETS):
                dxp[:, da:da + h, db_:db_ + w_, dc:dc + s, :] += dcols[:, :, :, :, i, :]
            dx = dxp[:, 1:-1, 1:-1, 1:-1, :]
            x._accumulate(dx if batched else dx[0])

    if not batched:
        y = y[0]

    def _bwd_unbatched(g):
        _bwd(g[None])

    return _finish(y, (x, k, b), _bwd if batched else _bwd_unbatched, "conv3d")


def depthwise_conv2d(x: Tensor, k: Tensor, b: Tensor) -> Tensor:
    """Per-channel 3x3 cross-correlation, zero "same" padding, stride 1.

    Accepts (H, W, C) or batched (B, H, W, C); one independent spatial
    kernel per channel, no cross-channel mixing.
    """
    if k.ndim != 3 or k.shape[:2] != (3, 3):
        raise DimensionError(f"depthwise_conv2d: kernel must be (3,3,C), got {k.shape}")
    batched = x.ndim == 4
    if not batched and x.ndim != 3:
        raise DimensionError(f"depthwise_conv2d: input must be rank 3 or 4, got {x.shape}")
    xd = x.data if batched else x.data[None]
    bsz, h, w_, c = xd.shape
    if c != k.shape[2]:
        raise DimensionError(
            f"depthwise_conv2d: input channels {c} (shape {x.shape}) vs kernel {k.shape}"
        )
    if b.shape != (c,):
        raise DimensionError(f"depthwise_conv2d: bias shape {b.shape} vs kernel {k.shape}")

    xp = np.zeros((bsz, h + 2, w_ + 2, c), dtype=xd.dtype)
    xp[:, 1:-1, 1:-1, :] = xd
    y = np.zeros((bsz, h, w_, c), dtype=xd.dtype)
    for da, db_ in _DW_OFFSETS:
        y += xp[:, da:da + h, db_:db_ + w_, :] * k.data[da, db_]
    y += b.data
    _add_macs(bsz * h * w_ * c * 9)

    def _bwd(g):
        if k.requires_grad:
            dk = np.empty_like(k.data)
            for da, db_ in _DW_OFFSETS:
                dk[da, db_] = (xp[:, da:da + h, db_:db_ + w_, :] * g).sum(axis=(0, 1, 2))
            k._accumulate(dk)
        if b.requires_grad:
            b._accumulate(g.sum(axis=(0, 1, 2)))
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for da, db_ in _DW_OFFSETS:
                dxp[:, da:da + h, db_:db_ + w_, :] += g * k.data[da, db_]
            dx = dxp[:, 1:-1, 1:-1, :]
            x._accumulate(dx if batched else dx[0])

    if not batched:
        y = y[0]

    def _bwd_unbatched(g):
        _bwd(g[None])

    return _finish(y, (x, k, b), _bwd if batched else _bwd_unbatched, "depthwise_conv2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel: (H, W, C) -> (C,) or (B, H, W, C) -> (B, C)."""
    batched = x.ndim == 4
    if not batched and x.ndim != 3:
        raise DimensionError(f"global_avg_pool: input must be rank 3 or 4, got {x.shape}")
    axes = (1, 2) if batched else (0, 1)
    h, w_ = (x.shape[1], x.shape[2]) if batched else (x.shape[0], x.shape[1])
    y = x.data.mean(axis=axes)

    def _bwd(g):
        if x.requires_grad:
            scale = x.data.dtype.type(1.0 / (h * w_))
            if batched:
                x._accumulate(np.broadcast_to(g[:, None, None, :] * scale, x.shape))
            else:
                x._accumulate(np.broadcast_to(g[None, None, :] * scale, x.shape))

    return _finish(y, (x,), _bwd, "global_avg_pool")


def softmax_cross_entropy(logits: Tensor, labels) -> tuple[Tensor, Tensor]:
    """Mean cross-entropy over the batch, plus row-stochastic probabilities.

    ``labels`` is an integer array of shape (B,) with values in [0, K).
    The probabilities tensor is detached; gradients flow only through the
    scalar loss, as (p - onehot) / B.
    """
    if logits.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: logits must be 2-D, got {logits.shape}")
    y = np.asarray(labels)
    bsz, k = logits.shape
    if y.shape != (bsz,):
        raise DimensionError(f"labels shape {y.shape} vs logits {logits.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        raise InputError("labels must be integers")
    if y.size and (y.min() < 0 or y.max() >= k):
        raise InputError(f"labels must lie in [0, {k}), got range [{y.min()}, {y.max()}]")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    probs = np.exp(logp)
    loss_val = np.asarray(-logp[np.arange(bsz), y].mean(), dtype=logits.data.dtype)

    def _bwd(g):
        if logits.requires_grad:
            d = probs.copy()
            d[np.arange(bsz), y] -= 1.0
            logits._accumulate(d * (g / bsz))

    loss = _finish(loss_val, (logits,), _bwd, "softmax_cross_entropy")
    return loss, Tensor(probs)


def backward(loss: Tensor) -> None:
    """Module-level alias for ``loss.backward()``."""
    loss.backward()
