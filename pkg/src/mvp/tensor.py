"""Dense tensors with a recording tape for reverse-mode differentiation.

Values are plain numpy arrays. Operations record onto the active ``Tape``
only when at least one input requires a gradient, so code running outside
a ``with Tape():`` block is a pure forward pass with no bookkeeping.

Every matrix-class contraction (``matmul`` and ``conv2d``) adds the number
of scalar multiplications it performs to each active ``MultCounter`` and to
the recording tape. Backward passes are not counted.
"""
from __future__ import annotations

import itertools
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

_DTYPE = np.float64
_ids = itertools.count()
_tape: "Tape | None" = None
_counters: list["MultCounter"] = []

SQRT_HALF = 0.7071067811865476
INV_SQRT_2PI = 0.3989422804014327


class DimensionError(ValueError):
    pass


class ContractError(ValueError):
    pass


def set_default_dtype(dtype) -> None:
    """Select float64 (verification) or float32 (benchmarks) globally."""
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE = dtype


def get_default_dtype():
    return _DTYPE


@contextmanager
def default_dtype(dtype):
    prev = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


class Tensor:
    __slots__ = ("data", "requires_grad", "id", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self):
        return self.shape[0]

    __add__ = lambda a, b: add(a, b)
    __radd__ = lambda a, b: add(b, a)
    __sub__ = lambda a, b: sub(a, b)
    __rsub__ = lambda a, b: sub(b, a)
    __mul__ = lambda a, b: mul(a, b)
    __rmul__ = lambda a, b: mul(b, a)
    __truediv__ = lambda a, b: div(a, b)
    __rtruediv__ = lambda a, b: div(b, a)
    __matmul__ = lambda a, b: matmul(a, b)
    __rmatmul__ = lambda a, b: matmul(b, a)
    __neg__ = lambda a: neg(a)
    __getitem__ = lambda a, idx: getitem(a, idx)

    def __pow__(self, p):
        return power(self, p)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output_id: int
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class MultCounter:
    count: int = 0

    def add(self, n: int) -> None:
        self.count += int(n)


@contextmanager
def counting():
    """Count scalar multiplications of matmul-class ops inside the block."""
    c = MultCounter()
    _counters.append(c)
    try:
        yield c
    finally:
        _counters.remove(c)


def _count(n: int) -> None:
    for c in _counters:
        c.count += n
    if _tape is not None:
        _tape.mult_counter += n


@dataclass
class Tape:
    """Append-only record of primitive ops, in execution order."""

    nodes: list[Node] = field(default_factory=list)
    mult_counter: int = 0
    _prev: "Tape | None" = field(default=None, repr=False)

    def __enter__(self):
        global _tape
        self._prev = _tape
        _tape = self
        return self

    def __exit__(self, *exc):
        global _tape
        _tape = self._prev
        self._prev = None
        return False


@contextmanager
def no_record():
    """Suspend the active tape (forward-only evaluation)."""
    global _tape
    prev = _tape
    _tape = None
    try:
        yield
    finally:
        _tape = prev


def recording() -> bool:
    return _tape is not None


def record(op: str, inputs: Sequence, out: np.ndarray, vjp) -> Tensor:
    """Wrap ``out`` as a Tensor and register its vjp on the active tape.

    ``vjp(g)`` returns one gradient (or None) per entry in ``inputs``.
    Non-Tensor inputs are constants and receive no gradient.
    """
    t = Tensor(out)
    if _tape is None:
        return t
    ins = tuple(i for i in inputs)
    if not any(isinstance(i, Tensor) and i.requires_grad for i in ins):
        return t
    t.requires_grad = True
    _tape.nodes.append(Node(op, ins, t.id, vjp))
    return t


class GradMap(dict):
    """Gradients keyed by Tensor; lookups by tensor identity."""

    def __init__(self, by_id: dict[int, np.ndarray], leaves: dict[int, Tensor]):
        super().__init__()
        self._by_id = by_id
        for i, t in leaves.items():
            self[i] = by_id.get(i, np.zeros_like(t.data))
        self._leaves = leaves

    def __getitem__(self, key):
        if isinstance(key, Tensor):
            key = key.id
        return super().__getitem__(key)

    def get(self, key, default=None):
        if isinstance(key, Tensor):
            key = key.id
        return super().get(key, default)

    def __contains__(self, key):
        if isinstance(key, Tensor):
            key = key.id
        return super().__contains__(key)


def backward(tape: Tape, loss: Tensor) -> GradMap:
    """Reverse sweep over ``tape``; gradients of ``loss`` w.r.t. every leaf.

    Accumulation follows the fixed reverse node order, so repeated calls on
    the same tape give bit-identical results.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    produced = {n.output_id for n in tape.nodes}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(node.output_id, None)
        if g is None:
            continue
        in_grads = node.vjp(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                continue
            if t.id not in produced:
                leaves[t.id] = t
            prev = grads.get(t.id)
            grads[t.id] = gi if prev is None else prev + gi
    return GradMap(grads, leaves)


# ---------------------------------------------------------------- helpers


def _d(x):
    return x.data if isinstance(x, Tensor) else x


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _shape(x):
    return np.shape(_d(x))


# ------------------------------------------------------------ elementwise


def add(a, b) -> Tensor:
    sa, sb = _shape(a), _shape(b)
    return record("add", (a, b), _d(a) + _d(b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    sa, sb = _shape(a), _shape(b)
    return record("sub", (a, b), _d(a) - _d(b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    ad, bd = _d(a), _d(b)
    return record("mul", (a, b), ad * bd,
                  lambda g: (_unbroadcast(g * bd, np.shape(ad)), _unbroadcast(g * ad, np.shape(bd))))


def div(a, b) -> Tensor:
    ad, bd = _d(a), _d(b)
    out = ad / bd
    return record("div", (a, b), out,
                  lambda g: (_unbroadcast(g / bd, np.shape(ad)),
                             _unbroadcast(-g * out / bd, np.shape(bd))))


def neg(a) -> Tensor:
    return record("neg", (a,), -_d(a), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    ad = _d(a)
    if p == 2:
        return record("square", (a,), ad * ad, lambda g: (2.0 * g * ad,))
    return record("pow", (a,), ad ** p, lambda g: (g * p * ad ** (p - 1),))


def exp(a) -> Tensor:
    out = np.exp(_d(a))
    return record("exp", (a,), out, lambda g: (g * out,))


def log(a) -> Tensor:
    ad = _d(a)
    return record("log", (a,), np.log(ad), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    out = np.sqrt(_d(a))
    return record("sqrt", (a,), out, lambda g: (0.5 * g / out,))


def sigmoid(a) -> Tensor:
    ad = _d(a)
    out = np.exp(-np.logaddexp(0.0, -ad))
    return record("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    ad = _d(a)
    out = np.logaddexp(0.0, ad)
    return record("softplus", (a,), out,
                  lambda g: (g * np.exp(-np.logaddexp(0.0, -ad)),))


def tanh(a) -> Tensor:
    out = np.tanh(_d(a))
    return record("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def absolute(a) -> Tensor:
    ad = _d(a)
    return record("abs", (a,), np.abs(ad), lambda g: (g * np.sign(ad),))


def clip(a, lo: float, hi: float) -> Tensor:
    ad = _d(a)
    inside = (ad >= lo) & (ad <= hi)
    return record("clip", (a,), np.clip(ad, lo, hi), lambda g: (g * inside,))


def gelu(a) -> Tensor:
    """Exact GELU, x * Phi(x) with Phi from erf."""
    x = _d(a)
    cdf = 0.5 * (1.0 + erf(x * SQRT_HALF))
    out = x * cdf
    return record("gelu", (a,), out,
                  lambda g: (g * (cdf + x * INV_SQRT_2PI * np.exp(-0.5 * x * x)),))


# -------------------------------------------------------------- reductions


def tsum(a, axis=None, keepdims=False) -> Tensor:
    ad = _d(a)
    shape = ad.shape
    out = np.sum(ad, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return record("sum", (a,), out, vjp)


def mean(a, axis=None, keepdims=False) -> Tensor:
    ad = _d(a)
    n = ad.size if axis is None else int(np.prod([ad.shape[i] for i in np.atleast_1d(axis)]))
    return mul(tsum(a, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------- shaping


def reshape(a, shape) -> Tensor:
    ad = _d(a)
    src = ad.shape
    return record("reshape", (a,), ad.reshape(shape), lambda g: (g.reshape(src),))


def transpose(a, axes=None) -> Tensor:
    ad = _d(a)
    axes = tuple(range(ad.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return record("transpose", (a,), ad.transpose(axes), lambda g: (g.transpose(inv),))


def getitem(a, idx) -> Tensor:
    ad = _d(a)
    shape = ad.shape

    basic = _is_basic(idx)

    def vjp(g):
        out = np.zeros(shape, dtype=g.dtype)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return record("getitem", (a,), ad[idx], vjp)


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, np.integer)) or i is Ellipsis or i is None for i in items)


def permute_lastdim(a, perm) -> Tensor:
    perm = np.asarray(perm)
    inv = np.argsort(perm)
    return record("permute", (a,), _d(a)[..., perm], lambda g: (g[..., inv],))


def gather_rows(a, idx) -> Tensor:
    """a[idx] along axis 0 for unique integer ``idx``."""
    ad = _d(a)
    idx = np.asarray(idx)
    shape = ad.shape

    def vjp(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[idx] = g
        return (out,)

    return record("gather_rows", (a,), ad[idx], vjp)


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    arrs = [_d(x) for x in xs]
    sizes = [a.shape[axis] for a in arrs]
    cuts = np.cumsum(sizes)[:-1]
    return record("concat", tuple(xs), np.concatenate(arrs, axis=axis),
                  lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    arrs = [_d(x) for x in xs]
    n = len(arrs)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return record("stack", tuple(xs), np.stack(arrs, axis=axis), vjp)


def upsample_nearest(x, factor: int) -> Tensor:
    """[B, C, h, w] -> [B, C, h*f, w*f] by pixel replication."""
    xd = _d(x)
    if factor == 1:
        return as_tensor(x)
    out = xd.repeat(factor, axis=-2).repeat(factor, axis=-1)
    B, C, h, w = xd.shape

    def vjp(g):
        return (g.reshape(B, C, h, factor, w, factor).sum(axis=(3, 5)),)

    return record("upsample_nearest", (x,), out, vjp)


def _bilinear_matrix(n_in: int, factor: int, dtype) -> np.ndarray:
    # half-pixel centres, edge clamped
    n_out = n_in * factor
    A = np.zeros((n_out, n_in), dtype=dtype)
    for o in range(n_out):
        src = (o + 0.5) / factor - 0.5
        src = min(max(src, 0.0), n_in - 1)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        t = src - i0
        A[o, i0] += 1.0 - t
        A[o, i1] += t
    return A


def upsample_bilinear(x, factor: int) -> Tensor:
    """[B, C, h, w] -> [B, C, h*f, w*f], half-pixel bilinear interpolation.

    Interpolation is not a learned contraction and is not counted.
    """
    xd = _d(x)
    if factor == 1:
        return as_tensor(x)
    Ah = _bilinear_matrix(xd.shape[-2], factor, xd.dtype)
    Aw = _bilinear_matrix(xd.shape[-1], factor, xd.dtype)
    out = np.einsum("oh,bchw,pw->bcop", Ah, xd, Aw)
    return record("upsample_bilinear", (x,), out,
                  lambda g: (np.einsum("oh,bcop,pw->bchw", Ah, g, Aw),))


# ------------------------------------------------------------ contractions


def matmul(a, b) -> Tensor:
    ad, bd = _d(a), _d(b)
    if ad.ndim < 2 or bd.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {ad.shape} @ {bd.shape}")
    try:
        batch = np.broadcast_shapes(ad.shape[:-2], bd.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch extents incompatible: {ad.shape} @ {bd.shape}") from None
    m, k = ad.shape[-2:]
    n = bd.shape[-1]
    _count(int(np.prod(batch, dtype=np.int64)) * m * n * k)
    out = ad @ bd

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return record("matmul", (a, b), out, vjp)


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0, pad_mode: str = "zeros") -> Tensor:
    """Cross-correlation of [C_in,H,W] or [B,C_in,H,W] with [C_out,C_in,k,k].

    ``pad_mode`` is "zeros" or "edge" (replicate the border).

    Runs as im2col followed by one GEMM, so the counted multiplications are
    B * H_out * W_out * C_out * C_in * k * k.
    """
    xd, wd = _d(x), _d(kernel)
    squeeze = xd.ndim == 3
    if squeeze:
        xd = xd[None]
    if xd.ndim != 4 or wd.ndim != 4:
        raise DimensionError(f"conv2d expects [B,C,H,W] and [O,C,k,k], got {xd.shape}, {wd.shape}")
    B, C, H, W = xd.shape
    O, Ck, k, k2 = wd.shape
    if Ck != C or k != k2:
        raise DimensionError(f"conv2d channel/kernel mismatch: input {xd.shape}, kernel {wd.shape}")
    if padding == 0 and k == stride and (H % stride or W % stride):
        raise DimensionError(f"conv2d extents {H}x{W} not divisible by stride {stride}")
    if pad_mode not in ("zeros", "edge"):
        raise ValueError(f"unknown pad_mode {pad_mode!r}")
    if padding:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                    mode="constant" if pad_mode == "zeros" else "edge")
    else:
        xp = xd
    Hp, Wp = xp.shape[-2:]
    Ho = (Hp - k) // stride + 1
    Wo = (Wp - k) // stride + 1
    if Ho < 1 or Wo < 1:
        raise DimensionError(f"conv2d kernel {k} larger than padded input {Hp}x{Wp}")
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :Ho, :Wo]  # [B,C,Ho,Wo,k,k]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * k * k)
    wmat = wd.reshape(O, C * k * k)
    _count(B * Ho * Wo * O * C * k * k)
    out = cols @ wmat.T
    if bias is not None:
        out = out + _d(bias)
    out = out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    if squeeze:
        out = out[0]

    def vjp(g):
        g4 = g[None] if squeeze else g
        g2 = g4.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        gw = (g2.T @ cols).reshape(wd.shape)
        gcols = (g2 @ wmat).reshape(B, Ho, Wo, C, k, k)
        gxp = np.zeros((B, C, Hp, Wp), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        if padding and pad_mode == "edge":
            gxp = _fold_edges(gxp, padding)
        gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        if squeeze:
            gx = gx[0]
        gb = None if bias is None else g2.sum(axis=0)
        return gx, gw, gb

    return record("conv2d", (x, kernel, bias), out, vjp)


def _fold_edges(g: np.ndarray, pad: int) -> np.ndarray:
    """Adjoint of edge padding: add border gradients onto the replicated pixels."""
    g = g.copy()
    g[:, :, pad] += g[:, :, :pad].sum(axis=2)
    g[:, :, -pad - 1] += g[:, :, -pad:].sum(axis=2)
    g[:, :, :, pad] += g[:, :, :, :pad].sum(axis=3)
    g[:, :, :, -pad - 1] += g[:, :, :, -pad:].sum(axis=3)
    return g


# ---------------------------------------------------------- normalisation


def softmax_lastdim(x) -> Tensor:
    xd = _d(x)
    if xd.shape[-1] < 1:
        raise DimensionError("softmax over an empty axis")
    e = np.exp(xd - xd.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return record("softmax", (x,), out, vjp)


def layer_norm(x, gamma, beta, eps: float = 1e-6) -> Tensor:
    xd, gd = _d(x), _d(gamma)
    if np.shape(gd) != xd.shape[-1:] or np.shape(_d(beta)) != xd.shape[-1:]:
        raise DimensionError(f"layer_norm affine shape must be {xd.shape[-1:]}")
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gd + _d(beta)
    lead = tuple(range(xd.ndim - 1))

    def vjp(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return record("layer_norm", (x, gamma, beta), out, vjp)


def rms_norm(x, gamma, eps: float = 1e-6) -> Tensor:
    xd, gd = _d(x), _d(gamma)
    if np.shape(gd) != xd.shape[-1:]:
        raise DimensionError(f"rms_norm gain shape must be {xd.shape[-1:]}")
    inv = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    xn = xd * inv
    out = xn * gd
    lead = tuple(range(xd.ndim - 1))
    n = xd.shape[-1]

    def vjp(g):
        u = g * gd
        gx = inv * u - xd * (inv ** 3) * (u * xd).sum(axis=-1, keepdims=True) / n
        return gx, (g * xn).sum(axis=lead)

    return record("rms_norm", (x, gamma), out, vjp)
