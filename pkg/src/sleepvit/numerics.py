"""Differentiable numpy primitives with a reverse-mode gradient tape.

Every op takes and returns :class:`Tensor` objects.  When a :class:`GradTape`
is active and an input requires gradients, the op appends one entry to the
tape; ``GradTape.gradient`` walks the entries in reverse exactly once.
Without an active tape the ops are plain numpy calls.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

LAYER_NORM_EPS = 1e-5
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class Tensor:
    """An ndarray plus a flag saying whether gradients should flow into it."""

    __slots__ = ("data", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def precision(self) -> str:
        return "f64" if self.data.dtype == np.float64 else "f32"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    return Tensor(arr)


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

_ACTIVE_TAPES: list["GradTape"] = []


@dataclass
class _Entry:
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


@dataclass
class GradTape:
    """Records ops executed inside a ``with`` block.

    >>> w = Tensor(np.ones(3), requires_grad=True)
    >>> with GradTape() as tape:
    ...     y = sum_all(w * w)
    >>> tape.gradient(y, [w])[0]
    array([2., 2., 2.])
    """

    entries: list[_Entry] = field(default_factory=list)
    visits: int = 0

    def __enter__(self) -> "GradTape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.remove(self)

    def gradient(self, target: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of scalar ``target`` with respect to each of ``sources``.

        Sources that the target does not depend on get a zero array.
        """
        if target.data.size != 1:
            raise ValueError("gradient target must be a scalar")
        grads: dict[int, np.ndarray] = {id(target): np.ones_like(target.data)}
        self.visits = 0
        for entry in reversed(self.entries):
            g = grads.pop(id(entry.output), None)
            if g is None:
                continue
            self.visits += 1
            for inp, gi in zip(entry.inputs, entry.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return [
            grads.get(id(s), np.zeros_like(s.data)).astype(s.data.dtype, copy=False)
            for s in sources
        ]


def record(
    out_data: np.ndarray,
    inputs: Sequence[Tensor],
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    op: str = "",
) -> Tensor:
    """Wrap ``out_data`` as a Tensor and register it on the active tape.

    ``backward`` maps the output gradient to one gradient (or None) per input.
    Custom ops (losses, for instance) are built on this.
    """
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs and bool(_ACTIVE_TAPES))
    if out.requires_grad:
        _ACTIVE_TAPES[-1].entries.append(_Entry(out, tuple(inputs), backward, op))
    return out


def check_finite(t: Tensor, where: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NonFiniteError(f"non-finite values after {where}")
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, a.data.dtype if isinstance(a, Tensor) else None)
    sa, sb = a.shape, b.shape
    return record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        "add",
    )


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.data.dtype)
    ad, bd = a.data, b.data
    return record(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, ad.shape),
            None if gb is None else _unbroadcast(gb, bd.shape),
        )

    return record(ad @ bd, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis; weight is [in, out]."""
    xd, wd = x.data, weight.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd
    if bias is not None:
        out = out + bias.data
    out = out.reshape(*lead, wd.shape[1])

    def backward(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(xd.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record(out, inputs, backward, "linear")


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return record(
        np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose"
    )


def getitem(x: Tensor, key) -> Tensor:
    shape, dtype = x.shape, x.dtype

    basic = all(k is Ellipsis or isinstance(k, (slice, int, np.integer))
                for k in (key if isinstance(key, tuple) else (key,)))

    def backward(g):
        gx = np.zeros(shape, dtype=dtype)
        if basic:
            gx[key] = g
        else:
            np.add.at(gx, key, g)
        return (gx,)

    return record(x.data[key], (x,), backward, "getitem")


def broadcast_to(x: Tensor, shape) -> Tensor:
    old = x.shape
    return record(
        np.broadcast_to(x.data, shape).copy(),
        (x,),
        lambda g: (_unbroadcast(g, old),),
        "broadcast_to",
    )


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return record(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, splits, axis=axis)),
        "concat",
    )


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return record(
        np.asarray(x.data.sum()),
        (x,),
        lambda g: (np.broadcast_to(g, shape).copy(),),
        "sum",
    )


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the erf-based normal CDF."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return record((xd * cdf).astype(xd.dtype, copy=False), (x,), backward, "gelu")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record(y, (x,), backward, "softmax")


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis, then scale by ``gain`` and add ``shift``."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + shift.data

    def backward(g):
        gxhat = g * gain.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return record(out.astype(xd.dtype, copy=False), (x, gain, shift), backward, "layer_norm")


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None, stride: int) -> Tensor:
    """Valid (unpadded) 1D convolution.

    x is [batch, channels_in, length], kernel is [filters, channels_in, k];
    the result is [batch, filters, floor((length - k) / stride) + 1].
    """
    xd, kd = x.data, kernel.data
    if xd.ndim != 3 or kd.ndim != 3 or xd.shape[1] != kd.shape[1]:
        raise ValueError(f"conv1d shape mismatch: input {xd.shape}, kernel {kd.shape}")
    b, c, length = xd.shape
    f, _, k = kd.shape
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if length < k:
        raise ValueError(f"conv1d shape mismatch: length {length} < kernel {k}")
    t_out = (length - k) // stride + 1
    idx = np.arange(t_out)[:, None] * stride + np.arange(k)[None, :]
    # windows: [b, t, c*k]
    windows = xd[:, :, idx].transpose(0, 2, 1, 3).reshape(b, t_out, c * k)
    kflat = kd.reshape(f, c * k)
    out = windows @ kflat.T
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.transpose(0, 2, 1))

    def backward(g):
        gt = g.transpose(0, 2, 1)  # [b, t, f]
        gk = gb = gx = None
        if kernel.requires_grad:
            gk = (gt.reshape(-1, f).T @ windows.reshape(-1, c * k)).reshape(f, c, k)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2))
        if x.requires_grad:
            gw = (gt @ kflat).reshape(b, t_out, c, k).transpose(0, 2, 1, 3)
            gx = np.zeros_like(xd)
            stop = stride * (t_out - 1) + 1
            for tau in range(k):
                gx[:, :, tau:tau + stop:stride] += gw[..., tau]
        return (gx, gk) if bias is None else (gx, gk, gb)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return record(out, inputs, backward, "conv1d")


def apply_mask(x: Tensor, mask: np.ndarray | None) -> Tensor:
    """Multiply by a constant (non-differentiable) mask; ``None`` is identity."""
    if mask is None:
        return x
    m = mask.astype(x.dtype, copy=False)
    return record(x.data * m, (x,), lambda g: (g * m,), "mask")


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, t, d = x.shape
    nd = len(lead)
    y = reshape(x, (*lead, t, n_heads, d // n_heads))
    axes = tuple(range(nd)) + (nd + 1, nd, nd + 2)
    return transpose(y, axes)


def merge_heads(x: Tensor) -> Tensor:
    *lead, h, t, dh = x.shape
    nd = len(lead)
    axes = tuple(range(nd)) + (nd + 1, nd, nd + 2)
    return reshape(transpose(x, axes), (*lead, t, h * dh))


def multi_head_attention(
    x: Tensor,
    w_qkv: Tensor,
    b_qkv: Tensor,
    w_out: Tensor,
    b_out: Tensor,
    n_heads: int,
    attn_mask: np.ndarray | None = None,
) -> tuple[Tensor, np.ndarray]:
    """Scaled dot-product self-attention over ``x`` of shape [..., tokens, d_model].

    ``w_qkv`` is [d_model, 3*d_model] holding the query, key and value
    projections side by side.  Returns the projected output and the attention
    probabilities [..., heads, tokens, tokens] captured before ``attn_mask``
    (attention dropout) is applied.
    """
    d_model = x.shape[-1]
    if d_model % n_heads:
        raise ValueError(f"indivisible d_model: {d_model} by {n_heads} heads")
    d_head = d_model // n_heads
    qkv = linear(x, w_qkv, b_qkv)
    q = split_heads(getitem(qkv, (..., slice(0, d_model))), n_heads)
    k = split_heads(getitem(qkv, (..., slice(d_model, 2 * d_model))), n_heads)
    v = split_heads(getitem(qkv, (..., slice(2 * d_model, 3 * d_model))), n_heads)
    scores = mul(matmul(q, transpose(k, _swap_last(k.ndim))), 1.0 / math.sqrt(d_head))
    attn = softmax(scores, axis=-1)
    captured = attn.data
    heads = matmul(apply_mask(attn, attn_mask), v)
    return linear(merge_heads(heads), w_out, b_out), captured


def _swap_last(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


# ---------------------------------------------------------------------------
# stochastic regularizers
# ---------------------------------------------------------------------------


def dropout_mask(shape, rate: float, rng: np.random.Generator | None, training: bool = True,
                 dtype=np.float32) -> np.ndarray | None:
    """Inverted-dropout mask; ``None`` means identity (eval mode or rate 0)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return None
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) / np.dtype(dtype).type(1.0 - rate)


def stochastic_depth_gate(survival_p: float, rng: np.random.Generator | None,
                          size=None, training: bool = True):
    """Residual-branch gate: 0 with probability ``1 - survival_p``, else ``1/survival_p``.

    Returns ``None`` (identity) in eval mode or when ``survival_p == 1``.
    With ``size`` the gate is drawn independently per example.
    """
    if not 0.0 < survival_p <= 1.0:
        raise ValueError(f"survival probability must be in (0, 1], got {survival_p}")
    if not training or survival_p == 1.0:
        return None
    kept = rng.random(size) < survival_p
    return np.asarray(kept, dtype=np.float64) / survival_p


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_input: list[float]
    n_checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(
    op: Callable[..., Tensor],
    inputs: Sequence[np.ndarray | Tensor],
    tolerance: float = 1e-6,
    step: float = 1e-3,
    max_checks: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare tape gradients of ``op(*inputs)`` with five-point central differences.

    ``op`` must return a Tensor; non-scalar outputs are reduced with a fixed
    random projection so every output element contributes.  The relative
    error of one coordinate is ``|a - n| / max(|a|, |n|, floor)``.  With
    ``max_checks`` only that many randomly chosen coordinates per input are
    perturbed.
    """
    rng = rng or np.random.default_rng(0)
    leaves = [Tensor(np.array(as_tensor(x).data, dtype=np.float64), requires_grad=True)
              for x in inputs]
    probe = None

    def scalar(*ts):
        nonlocal probe
        out = op(*ts)
        if out.data.size == 1:
            return out
        if probe is None:
            probe = np.random.default_rng(1234).standard_normal(out.shape)
        return sum_all(mul(out, probe))

    with GradTape() as tape:
        y = scalar(*leaves)
    analytic = tape.gradient(y, leaves)

    per_input = []
    n_checked = 0
    for i, leaf in enumerate(leaves):
        flat = leaf.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_checks is not None and flat.size > max_checks:
            coords = np.sort(rng.choice(flat.size, size=max_checks, replace=False))
        worst = 0.0
        a_flat = analytic[i].reshape(-1)
        for j in coords:
            orig = flat[j]
            f = []
            for k in (2, 1, -1, -2):
                flat[j] = orig + k * step
                f.append(scalar(*[Tensor(t.data) for t in leaves]).item())
            flat[j] = orig
            # five-point stencil: truncation error O(step^4)
            num = (-f[0] + 8.0 * f[1] - 8.0 * f[2] + f[3]) / (12.0 * step)
            a = a_flat[j]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
        n_checked += len(coords)
        per_input.append(worst)
    return GradCheckReport(max(per_input, default=0.0), per_input, n_checked, tolerance)
