"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the operations the fusion network needs are provided.  Image-like
tensors use channels-last layout ``(..., H, W, C)``; any leading axes are
treated as a batch.  Binary elementwise operations accept either identical
shapes or a right operand whose shape is a suffix of the left operand's
shape (bias-style broadcasting); nothing more general is supported.

Typical use::

    with Tape() as tape:
        y = sum_all(mul(x, x))
    backward(tape, y)
    x.grad
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, NumericError, ShapeError

__all__ = [
    "Tensor", "Tape", "backward", "grad_check",
    "add", "sub", "mul", "scale", "matmul", "transpose", "permute", "reshape",
    "softmax_rows", "conv1x1", "conv2d", "avg_pool_to", "bilinear_upsample",
    "gelu", "relu", "layer_norm", "mean", "sum_all", "concat", "getitem",
    "pool_windows", "upsample_indices",
]

_ACTIVE: list["Tape"] = []


class Tensor:
    """An n-dimensional float64 array that can take part in a tape."""

    __slots__ = ("data", "requires_grad", "grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Records differentiable operations while active as a context manager.

    Operations are appended in execution order, so the list is already a
    topological order of the computation.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: Sequence[Tensor], back: Callable) -> Tensor:
    """Wrap ``data`` and record ``back`` on the active tape if needed.

    ``back(g)`` must return one gradient (or None) per input.
    """
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs and _ACTIVE:
        _ACTIVE[-1].nodes.append(_Node(out, tuple(inputs), back))
    return out


def backward(tape: Tape, output: Tensor, inputs: Iterable[Tensor] | None = None):
    """Propagate d(output) back through ``tape``.

    Every leaf that requires grad and was used on the tape gets ``.grad``
    set.  When ``inputs`` is given, the gradients of exactly those tensors
    (leaf or intermediate) are returned, zero-filled when unreachable.
    """
    if output.data.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    produced = set()
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        produced.add(id(node.out))
        g = grads.get(id(node.out))
        if g is None:
            continue
        parts = node.backward(g)
        for t, gi in zip(node.inputs, parts):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.data.shape:
                raise ShapeError(f"gradient shape {gi.shape} does not match {t.data.shape}")
            k = id(t)
            if k in grads:
                grads[k] = grads[k] + gi
            else:
                grads[k] = gi
    for node in tape.nodes:
        for t in node.inputs:
            if t.requires_grad and id(t) not in produced:
                leaves[id(t)] = t
    for k, t in leaves.items():
        t.grad = grads.get(k, np.zeros_like(t.data))
    if inputs is None:
        return None
    return [grads.get(id(t), np.zeros_like(t.data)) for t in inputs]


# ---------------------------------------------------------------- elementwise


def _check_suffix(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not compatible")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_suffix(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (g, _reduce_to(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_suffix(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (g, -_reduce_to(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_suffix(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (g * bd, _reduce_to(g * ad, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * xd * xd) / math.sqrt(2.0 * math.pi)
    return _make(xd * cdf, (x,), lambda g: (g * (cdf + xd * pdf),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


# -------------------------------------------------------------- shape moves


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"cannot reshape {src} to {shape}") from e
    return _make(out, (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.ndim < 2:
        raise ShapeError(f"transpose needs at least 2 axes, got {x.shape}")
    return _make(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = list(xs)
    nd = xs[0].ndim
    ax = axis % nd
    for t in xs[1:]:
        if t.ndim != nd or any(t.shape[i] != xs[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in xs]}")
    sizes = [t.shape[ax] for t in xs]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in xs], axis=ax)
    return _make(out, xs, lambda g: tuple(np.split(g, cuts, axis=ax)))


def getitem(x: Tensor, index) -> Tensor:
    src = x.shape

    def back(g):
        full = np.zeros(src)
        if _is_fancy(index):
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return _make(np.array(x.data[index]), (x,), back)


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


# ----------------------------------------------------------------- algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either 2-D (a shared weight matrix) or has the same leading
    batch axes as ``a``.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    if bd.ndim == 2:
        # one GEMM over all leading axes instead of a broadcast loop
        a2 = ad.reshape(-1, ad.shape[-1])
        out = (a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))

        def back(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

        return _make(out, (a, b), back)

    def back(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _make(ad @ bd, (a, b), back)


def sum_all(x: Tensor) -> Tensor:
    src = x.shape
    return _make(np.array([x.data.sum()]), (x,), lambda g: (np.full(src, g[0]),))


def mean(x: Tensor, axis) -> Tensor:
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % x.ndim for a in axes)
    n = 1
    for a in axes:
        n *= x.shape[a]
    src = x.shape

    def back(g):
        return (np.broadcast_to(np.expand_dims(g, axes), src) / n,)

    return _make(x.data.mean(axis=axes), (x,), back)


def softmax_rows(t: Tensor, temperature: float = 1.0) -> Tensor:
    """Softmax over the last axis of ``t / temperature``."""
    if not temperature > 0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    if not np.all(np.isfinite(t.data)):
        raise NumericError("softmax_rows: non-finite input")
    z = t.data / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return ((g - (g * y).sum(axis=-1, keepdims=True)) * y / temperature,)

    return _make(y, (t,), back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply elementwise gain and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gain/shift must be ({d},), got {gamma.shape}, {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xh = xc * inv
    gd = gamma.data

    def back(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xh * (gx * xh).mean(axis=-1, keepdims=True))
        return dx, _reduce_to(g * xh, (d,)), _reduce_to(g, (d,))

    return _make(xh * gd + beta.data, (x, gamma, beta), back)


# ------------------------------------------------------------ convolution


def conv1x1(f: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-pixel linear map ``(..., H, W, C) -> (..., H, W, C')``."""
    if w.ndim != 2 or f.shape[-1] != w.shape[0]:
        raise ShapeError(f"conv1x1: feature shape {f.shape} does not match weight {w.shape}")
    lead = f.shape[:-1]
    y = reshape(matmul(reshape(f, (-1, f.shape[-1])), w), lead + (w.shape[1],))
    if bias is not None:
        y = add(y, bias)
    return y


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Square-kernel convolution with 'same'-style zero padding.

    ``x`` is ``(B, H, W, C)`` and ``w`` is ``(k, k, C, C')`` with odd ``k``;
    output size is ``ceil(H / stride)``.
    """
    if x.ndim != 4 or w.ndim != 4 or w.shape[0] != w.shape[1] or w.shape[0] % 2 == 0:
        raise ShapeError(f"conv2d: bad shapes {x.shape}, {w.shape}")
    if x.shape[-1] != w.shape[2]:
        raise ShapeError(f"conv2d: input channels {x.shape[-1]} vs weight {w.shape}")
    k = w.shape[0]
    p = k // 2
    b, h, wd, c = x.shape
    co = w.shape[3]
    ho, wo = -(-h // stride), -(-wd // stride)
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0)))
    cols = np.empty((b, ho, wo, k * k, c))
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i * k + j, :] = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
    cols2 = cols.reshape(-1, k * k * c)
    wm = w.data.reshape(k * k * c, co)
    out = (cols2 @ wm).reshape(b, ho, wo, co)

    def back(g):
        g2 = g.reshape(-1, co)
        gw = (cols2.T @ g2).reshape(w.shape)
        if not x.requires_grad:
            return None, gw
        gcols = (g2 @ wm.T).reshape(b, ho, wo, k * k, c)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gcols[:, :, :, i * k + j, :]
        return gxp[:, p:p + h, p:p + wd, :], gw

    y = _make(out, (x, w), back)
    if bias is not None:
        y = add(y, bias)
    return y


# ----------------------------------------------------------- resampling


def pool_windows(n_in: int, n_out: int) -> list[tuple[int, int]]:
    """Adaptive pooling windows ``[floor(i*n/m), ceil((i+1)*n/m))``."""
    return [((i * n_in) // n_out, -(-((i + 1) * n_in) // n_out)) for i in range(n_out)]


def _pool_axis(a: np.ndarray, axis: int, n_out: int) -> np.ndarray:
    wins = pool_windows(a.shape[axis], n_out)
    parts = []
    for lo, hi in wins:
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(lo, hi)
        # sum then divide keeps constant inputs exact
        parts.append(a[tuple(sl)].sum(axis=axis, keepdims=True) / (hi - lo))
    return np.concatenate(parts, axis=axis)


def _pool_axis_back(g: np.ndarray, axis: int, n_in: int) -> np.ndarray:
    wins = pool_windows(n_in, g.shape[axis])
    shape = list(g.shape)
    shape[axis] = n_in
    out = np.zeros(shape)
    for i, (lo, hi) in enumerate(wins):
        src = [slice(None)] * g.ndim
        src[axis] = slice(i, i + 1)
        dst = [slice(None)] * g.ndim
        dst[axis] = slice(lo, hi)
        out[tuple(dst)] += g[tuple(src)] / (hi - lo)
    return out


def avg_pool_to(f: Tensor, h: int, w: int) -> Tensor:
    """Adaptive average pooling of ``(..., H, W, C)`` down to ``(..., h, w, C)``."""
    if f.ndim < 3:
        raise ShapeError(f"avg_pool_to needs (..., H, W, C), got {f.shape}")
    H, W = f.shape[-3], f.shape[-2]
    if h > H or w > W or h < 1 or w < 1:
        raise ShapeError(f"avg_pool_to: target ({h}, {w}) invalid for source ({H}, {W})")
    ah, aw = f.ndim - 3, f.ndim - 2
    out = _pool_axis(_pool_axis(f.data, ah, h), aw, w)

    def back(g):
        return (_pool_axis_back(_pool_axis_back(g, aw, W), ah, H),)

    return _make(out, (f,), back)


def upsample_indices(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Align-corners linear interpolation taps: (lower index, upper index, fraction)."""
    if n_out == 1 or n_in == 1:
        pos = np.zeros(n_out)
    else:
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.minimum(np.floor(pos).astype(int), n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def _lerp_axis(a: np.ndarray, axis: int, n_out: int) -> np.ndarray:
    lo, hi, fr = upsample_indices(a.shape[axis], n_out)
    shape = [1] * a.ndim
    shape[axis] = n_out
    fr = fr.reshape(shape)
    a0 = np.take(a, lo, axis=axis)
    a1 = np.take(a, hi, axis=axis)
    # lerp form: equal neighbours reproduce the value exactly
    return a0 + fr * (a1 - a0)


def _lerp_axis_back(g: np.ndarray, axis: int, n_in: int) -> np.ndarray:
    n_out = g.shape[axis]
    lo, hi, fr = upsample_indices(n_in, n_out)
    shape = [1] * g.ndim
    shape[axis] = n_out
    fr = fr.reshape(shape)
    out_shape = list(g.shape)
    out_shape[axis] = n_in
    out = np.zeros(out_shape)
    gm = np.moveaxis(g * (1.0 - fr), axis, 0)
    gp = np.moveaxis(g * fr, axis, 0)
    om = np.moveaxis(out, axis, 0)
    np.add.at(om, lo, gm)
    np.add.at(om, hi, gp)
    return out


def bilinear_upsample(f: Tensor, h: int, w: int) -> Tensor:
    """Align-corners bilinear resize of ``(..., h0, w0, C)`` up to ``(..., h, w, C)``."""
    if f.ndim < 3:
        raise ShapeError(f"bilinear_upsample needs (..., H, W, C), got {f.shape}")
    H0, W0 = f.shape[-3], f.shape[-2]
    if h < H0 or w < W0:
        raise ShapeError(f"bilinear_upsample: target ({h}, {w}) smaller than source ({H0}, {W0})")
    ah, aw = f.ndim - 3, f.ndim - 2
    out = _lerp_axis(_lerp_axis(f.data, ah, h), aw, w)

    def back(g):
        return (_lerp_axis_back(_lerp_axis_back(g, aw, W0), ah, H0),)

    return _make(out, (f,), back)


# ---------------------------------------------------------------- checking


def grad_check(f: Callable[[list[Tensor]], Tensor], params: Sequence[np.ndarray],
               eps: float = 1e-5, max_coords: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Largest relative error between tape gradients and central differences.

    ``f`` maps a list of tensors (one per entry of ``params``) to a scalar
    tensor.  The relative error of a coordinate is ``|a - n| / max(|a|, |n|,
    1e-8)``.  With ``max_coords`` set, at most that many randomly chosen
    coordinates of each parameter are probed.  Kinks (e.g. ReLU at zero) are
    not special-cased: the raw error is reported.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    base = [np.array(p, dtype=np.float64) for p in params]
    leaves = [Tensor(p, requires_grad=True) for p in base]
    with Tape() as tape:
        out = f(leaves)
    if not np.all(np.isfinite(out.data)):
        raise NumericError("grad_check: non-finite objective")
    analytic = backward(tape, out, leaves)

    def evaluate(values):
        v = f([Tensor(p) for p in values]).item()
        if not math.isfinite(v):
            raise NumericError("grad_check: non-finite objective under perturbation")
        return v

    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for i, p in enumerate(base):
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        for j in idx:
            old = flat[j]
            flat[j] = old + eps
            fp = evaluate(base)
            flat[j] = old - eps
            fm = evaluate(base)
            flat[j] = old
            num = (fp - fm) / (2 * eps)
            a = analytic[i].reshape(-1)[j]
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
