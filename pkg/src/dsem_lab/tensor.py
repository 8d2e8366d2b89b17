"""Dense tensors with reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor`; when any input requires a
gradient the result records its parents and a closure mapping the upstream
gradient to one gradient per parent. :meth:`Tensor.backward` walks the graph
in reverse topological order and accumulates into leaf ``.grad`` slots.

Parameters and activations are stored as float32 by default. Convolutions
and reductions accumulate in float64 and cast back to the input dtype, which
keeps training bitwise reproducible and lets gradient checks run in float64
by simply feeding float64 inputs.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
LOG_EPS = 1e-7

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # arithmetic sugar, used mostly to add scalar losses
    def __add__(self, other) -> Tensor:
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other) -> Tensor:
        return add(self, scale(_as_tensor(other, self.dtype), -1.0))

    def __mul__(self, other) -> Tensor:
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() without a gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    out = (a.data * c).astype(a.dtype, copy=False)

    def backward(g):
        return ((g * c).astype(g.dtype, copy=False),)

    return _make(out, (a,), backward)


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"elementwise_mul shape mismatch: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g * bd, g * ad

    return _make(ad * bd, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Broadcasting product; :func:`elementwise_mul` is the strict-shape variant."""
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)

    return _make(ad * bd, (a, b), backward)


def grl(x: Tensor, coeff: float = 1.0) -> Tensor:
    """Gradient reversal: identity forward, ``-coeff`` times upstream backward."""
    if coeff < 0:
        raise ValueError(f"grl coeff must be >= 0, got {coeff}")
    c = float(coeff)

    def backward(g):
        if c == 0.0:
            return (np.zeros_like(g),)
        return ((g * -c).astype(g.dtype, copy=False),)

    return _make(x.data, (x,), backward)


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, np.zeros((), x.dtype))

    def backward(g):
        return (g * mask,)

    return _make(out, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data.astype(np.float64)
    out64 = np.empty_like(xd)
    pos = xd >= 0
    out64[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out64[~pos] = ex / (1.0 + ex)
    out = out64.astype(x.dtype)

    def backward(g):
        return ((g * out64 * (1.0 - out64)).astype(g.dtype),)

    return _make(out, (x,), backward)


def _softmax64(x: np.ndarray, axis: int) -> np.ndarray:
    x = x.astype(np.float64)
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_channels(x: Tensor, axis: int = 1) -> Tensor:
    """Softmax across ``axis`` (the channel axis for N×C×H×W inputs)."""
    p = _softmax64(x.data, axis)
    out = p.astype(x.dtype)

    def backward(g):
        g64 = g.astype(np.float64)
        dot = (g64 * p).sum(axis=axis, keepdims=True)
        return ((p * (g64 - dot)).astype(g.dtype),)

    return _make(out, (x,), backward)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape

    def backward(g):
        return (g.reshape(src),)

    return _make(x.data.reshape(shape), (x,), backward)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), backward)


def concat(inputs: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not inputs:
        raise ValueError("concat needs at least one input")
    ref = inputs[0].shape
    for t in inputs[1:]:
        if t.ndim != len(ref) or any(
            a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ValueError(f"concat shape mismatch on axis {axis}: {ref} vs {t.shape}")
    if len(inputs) == 1:
        return inputs[0]
    sizes = [t.shape[axis] for t in inputs]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.ascontiguousarray(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis))
            for i in range(len(inputs))
        )

    return _make(np.concatenate([t.data for t in inputs], axis=axis), tuple(inputs), backward)


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    """Concatenate N×C×U×V tensors along C, preserving order."""
    for t in inputs:
        if t.ndim != 4:
            raise ValueError(f"concat_channels expects 4-d tensors, got {t.shape}")
    return concat(inputs, axis=1)


def sum_all(x: Tensor) -> Tensor:
    src = x.shape
    out = np.asarray(x.data.astype(np.float64).sum(), dtype=x.dtype)

    def backward(g):
        return (np.broadcast_to(g, src).astype(g.dtype),)

    return _make(out, (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    src = x.shape
    out = np.asarray(x.data.astype(np.float64).mean(), dtype=x.dtype)

    def backward(g):
        return (np.full(src, float(g) / n, dtype=g.dtype),)

    return _make(out, (x,), backward)


# ---------------------------------------------------------------------------
# convolution and pooling


def _conv_out(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
) -> Tensor:
    """2-d cross-correlation of an N×Cin×H×W input with a Cout×Cin×k×k kernel."""
    if stride < 1 or dilation < 1:
        raise ValueError(f"stride and dilation must be >= 1, got stride={stride}, dilation={dilation}")
    if padding < 0:
        raise ValueError(f"padding must be >= 0, got {padding}")
    if x.ndim != 4 or weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ValueError(f"conv2d shape mismatch: input {x.shape}, weight {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, k, _ = weight.shape
    if cin != wcin:
        raise ValueError(f"conv2d shape mismatch: input {x.shape}, weight {weight.shape}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d bias shape {bias.shape} does not match weight {weight.shape}")
    ho = _conv_out(h, k, stride, padding, dilation)
    wo = _conv_out(w, k, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d output would be empty for input {x.shape}, weight {weight.shape}")

    dtype = x.dtype
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    hp, wp = h + 2 * padding, w + 2 * padding

    def reads_data(offset: int, span: int, size: int) -> bool:
        return any(padding <= offset + r < padding + size for r in range(0, span, stride))

    # taps that only ever read zero padding contribute exactly 0 to the output and
    # receive exactly 0 weight gradient; large dilations on small maps are mostly such taps
    taps = [
        (i * k + j, i * dilation, j * dilation)
        for i in range(k)
        for j in range(k)
        if reads_data(i * dilation, hspan, h) and reads_data(j * dilation, wspan, w)
    ]
    kept = [t for t, _, _ in taps]
    # channel-major padded copy: (Cin, N, H+2p, W+2p), filled in a single pass
    xt = np.zeros((cin, n, hp, wp), dtype=np.float64)
    xt[:, :, padding : padding + h, padding : padding + w] = x.data.transpose(1, 0, 2, 3)
    pointwise = k == 1 and stride == 1 and padding == 0
    # cols: (Cin·T) × (N·Ho·Wo) over the T kept taps, rows matching wmat's columns
    if pointwise:
        cols = xt.reshape(cin, n * ho * wo)
    else:
        cols = np.empty((cin, len(taps), n, ho, wo), dtype=np.float64)
        for slot, (_, di, dj) in enumerate(taps):
            cols[:, slot] = xt[:, :, di : di + hspan : stride, dj : dj + wspan : stride]
        cols = cols.reshape(cin * len(taps), n * ho * wo)
    wmat = weight.data.astype(np.float64).reshape(cout, cin, k * k)[:, :, kept].reshape(cout, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data.astype(np.float64)[:, None]
    out = out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3).astype(dtype)

    def backward(g):
        g2 = g.astype(np.float64).transpose(1, 0, 2, 3).reshape(cout, n * ho * wo)
        gw = np.zeros((cout, cin, k * k), dtype=np.float64)
        gw[:, :, kept] = (g2 @ cols.T).reshape(cout, cin, len(taps))
        gw = gw.reshape(weight.shape).astype(weight.dtype)
        gb = g2.sum(axis=1).astype(bias.dtype) if bias is not None else None
        gx = None
        if x.requires_grad:
            gcols = wmat.T @ g2
            if pointwise:
                gxp = gcols.reshape(cin, n, hp, wp)
            else:
                gcols = gcols.reshape(cin, len(taps), n, ho, wo)
                gxp = np.zeros((cin, n, hp, wp), dtype=np.float64)
                for slot, (_, di, dj) in enumerate(taps):
                    gxp[:, :, di : di + hspan : stride, dj : dj + wspan : stride] += gcols[:, slot]
                if padding:
                    gxp = gxp[:, :, padding:-padding, padding:-padding]
            gx = gxp.transpose(1, 0, 2, 3).astype(dtype)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    if bias is None:
        return _make(out, parents, lambda g: backward(g)[:2])
    return _make(out, parents, backward)


def _bin_edges(size: int, bins: int) -> list[tuple[int, int]]:
    # floor boundaries partition [0, size) exactly; every bin non-empty when bins <= size
    return [((i * size) // bins, ((i + 1) * size) // bins) for i in range(bins)]


def adaptive_avg_pool(x: Tensor, bins: int) -> Tensor:
    """Average over a bins×bins partition of the spatial plane."""
    n, c, h, w = x.shape
    if bins < 1 or bins > min(h, w):
        raise ValueError(f"adaptive_avg_pool bins={bins} invalid for spatial size {h}x{w}")
    rows, cols = _bin_edges(h, bins), _bin_edges(w, bins)
    x64 = x.data.astype(np.float64)
    out = np.empty((n, c, bins, bins), dtype=np.float64)
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            out[:, :, i, j] = x64[:, :, r0:r1, c0:c1].mean(axis=(2, 3))

    def backward(g):
        gx = np.zeros((n, c, h, w), dtype=np.float64)
        g64 = g.astype(np.float64)
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols):
                area = (r1 - r0) * (c1 - c0)
                gx[:, :, r0:r1, c0:c1] += (g64[:, :, i, j] / area)[:, :, None, None]
        return (gx.astype(g.dtype),)

    return _make(out.astype(x.dtype), (x,), backward)


def upsample_nearest(x: Tensor, out_h: int, out_w: int) -> Tensor:
    n, c, h, w = x.shape
    if out_h < h or out_w < w:
        raise ValueError(f"upsample_nearest target {out_h}x{out_w} smaller than input {h}x{w}")
    ri = (np.arange(out_h) * h) // out_h
    ci = (np.arange(out_w) * w) // out_w
    out = x.data[:, :, ri[:, None], ci[None, :]]

    def backward(g):
        g64 = g.astype(np.float64)
        gx = np.zeros((n, c, h, out_w), dtype=np.float64)
        np.add.at(gx, (slice(None), slice(None), ri, slice(None)), g64)
        gy = np.zeros((n, c, h, w), dtype=np.float64)
        np.add.at(gy, (slice(None), slice(None), slice(None), ci), gx)
        return (gy.astype(g.dtype),)

    return _make(out, (x,), backward)


# ---------------------------------------------------------------------------
# losses


def softmax_cross_entropy(
    logits: Tensor,
    targets: np.ndarray,
    weights: np.ndarray | None = None,
    normalizer: float | None = None,
) -> Tensor:
    """Cross-entropy of class logits along axis 1 against integer targets.

    ``targets`` has the logits' shape with axis 1 removed. With ``weights``
    the per-position losses are weighted before summation. The sum is divided
    by ``normalizer`` (default: number of positions).
    """
    nclass = logits.shape[1]
    targets = np.asarray(targets)
    expected = logits.shape[:1] + logits.shape[2:]
    if targets.shape != expected:
        raise ValueError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= nclass):
        raise ValueError(f"target label outside [0, {nclass}): min={targets.min()}, max={targets.max()}")
    p = _softmax64(logits.data, 1)
    onehot = np.moveaxis(np.eye(nclass, dtype=np.float64)[targets], -1, 1)
    picked = (p * onehot).sum(axis=1)
    nll = -np.log(np.clip(picked, LOG_EPS, 1.0))
    w = np.ones_like(nll) if weights is None else np.asarray(weights, dtype=np.float64)
    norm = float(nll.size if normalizer is None else normalizer)
    out = np.asarray((nll * w).sum() / norm, dtype=logits.dtype)

    def backward(g):
        coef = (float(g) / norm) * w
        return (((p - onehot) * np.expand_dims(coef, 1)).astype(g.dtype),)

    return _make(out, (logits,), backward)


def binary_cross_entropy(prob: Tensor, label, weights: np.ndarray | None = None, normalizer: float | None = None) -> Tensor:
    """Mean of ``-[y log p + (1-y) log(1-p)]`` with p clamped to [eps, 1-eps]."""
    p64 = prob.data.astype(np.float64)
    y = np.broadcast_to(np.asarray(label, dtype=np.float64), p64.shape)
    pc = np.clip(p64, LOG_EPS, 1.0 - LOG_EPS)
    inside = (p64 >= LOG_EPS) & (p64 <= 1.0 - LOG_EPS)
    loss = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
    w = np.ones_like(loss) if weights is None else np.broadcast_to(np.asarray(weights, dtype=np.float64), p64.shape)
    norm = float(loss.size if normalizer is None else normalizer)
    out = np.asarray((loss * w).sum() / norm, dtype=prob.dtype)

    def backward(g):
        d = (-y / pc + (1.0 - y) / (1.0 - pc)) * inside
        return ((d * w * (float(g) / norm)).astype(g.dtype),)

    return _make(out, (prob,), backward)


def binary_cross_entropy_with_logits(
    logits: Tensor, label, weights: np.ndarray | None = None, normalizer: float | None = None
) -> Tensor:
    """Same loss as :func:`binary_cross_entropy` on ``sigmoid(logits)``, computed without clamping.

    ``-log sigmoid(z) = softplus(-z)`` is evaluated stably, so the gradient
    ``sigmoid(z) - y`` never vanishes, even for a saturated classifier.
    """
    z = logits.data.astype(np.float64)
    y = np.broadcast_to(np.asarray(label, dtype=np.float64), z.shape)
    loss = np.logaddexp(0.0, z) - y * z
    w = np.ones_like(loss) if weights is None else np.broadcast_to(np.asarray(weights, dtype=np.float64), z.shape)
    norm = float(loss.size if normalizer is None else normalizer)
    out = np.asarray((loss * w).sum() / norm, dtype=logits.dtype)

    def backward(g):
        p = 0.5 * (1.0 + np.tanh(0.5 * z))
        return (((p - y) * w * (float(g) / norm)).astype(g.dtype),)

    return _make(out, (logits,), backward)


def smooth_l1(pred: Tensor, target: np.ndarray, mask: np.ndarray | None = None, normalizer: float | None = None) -> Tensor:
    """Huber-style loss: 0.5·r² for |r|<1 else |r|-0.5, summed over the last axis.

    ``mask`` selects positions (all leading axes); the sum is divided by
    ``normalizer`` (default: number of selected positions, at least 1).
    """
    r = pred.data.astype(np.float64) - np.asarray(target, dtype=np.float64)
    absr = np.abs(r)
    small = absr < 1.0
    elem = np.where(small, 0.5 * r * r, absr - 0.5)
    m = np.ones(pred.shape[:-1]) if mask is None else np.asarray(mask, dtype=np.float64)
    if normalizer is None:
        normalizer = max(1.0, float(m.sum()))
    norm = float(normalizer)
    out = np.asarray((elem.sum(axis=-1) * m).sum() / norm, dtype=pred.dtype)

    def backward(g):
        d = np.where(small, r, np.sign(r)) * m[..., None]
        return ((d * (float(g) / norm)).astype(g.dtype),)

    return _make(out, (pred,), backward)
