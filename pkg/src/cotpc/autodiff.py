"""Dense tensors with tape-based reverse-mode differentiation.

A deliberately small, closed op set backed by numpy: matmul (2-D and
batched 3-D), add, mul, affine, relu, gelu, masked softmax, layer norm,
gather, concat, narrow, reshape, transpose, masked_fill, weighted mse and
full mean/sum reductions.  Everything a transformer policy needs, nothing
more.  Ops executed under an active Tape record a backward rule; backward()
replays the tape once in reverse with a fixed accumulation order, so
gradients are bit-reproducible in single-threaded mode.

Scalars default to float32 for training throughput; the `precision`
context switches the whole library to float64 for gradient verification.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np


class ShapeMismatch(ValueError):
    """Operand shapes are incompatible for the requested op."""


class ContractError(ValueError):
    """An operation precondition was violated."""


class NumericsError(RuntimeError):
    """A NaN or degenerate value appeared where it must not."""


_DEFAULT_DTYPE = np.float32


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ContractError(f"unsupported scalar dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default scalar precision (e.g. np.float64)."""
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


class Tensor:
    """Immutable dense value; gradients live outside, in backward()'s map."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.ascontiguousarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out, inputs, backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Execution-ordered record of ops; single-owner, never shared."""

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.pop()

    def __len__(self) -> int:
        return len(self._nodes)


_TAPES: list[Tape] = []


def _track(out: Tensor, inputs, backward_fn) -> Tensor:
    if _TAPES and any(i.requires_grad for i in inputs):
        out.requires_grad = True
        _TAPES[-1]._nodes.append(_Node(out, inputs, backward_fn))
    return out


def backward(loss: Tensor, tape: Tape) -> dict[Tensor, np.ndarray]:
    """Gradient of a scalar loss w.r.t. every requires_grad tensor on the tape.

    Visits each recorded op exactly once, in reverse execution order;
    shared inputs accumulate (+=) in that fixed order.
    """
    if loss.data.shape != ():
        raise ContractError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.data.dtype)}
    leaves: dict[int, Tensor] = {}
    produced = {id(n.out) for n in tape._nodes}
    for node in reversed(tape._nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if key not in produced:
                leaves[key] = inp
    return {t: grads[k] for k, t in leaves.items()}


# ---------------------------------------------------------------------------
# ops


def _bias_axes(a_shape, b_shape):
    """Axes of the output over which a trailing-broadcast operand's grad sums."""
    if len(b_shape) > len(a_shape) or a_shape[len(a_shape) - len(b_shape):] != tuple(b_shape):
        raise ShapeMismatch(f"cannot broadcast {b_shape} onto trailing dims of {a_shape}")
    return tuple(range(len(a_shape) - len(b_shape)))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; b may match a's trailing dims (bias-style broadcast)."""
    axes = () if a.shape == b.shape else _bias_axes(a.shape, b.shape)
    out = Tensor(a.data + b.data)

    def bw(g):
        gb = g if not axes else g.sum(axis=axes)
        return g, gb

    return _track(out, (a, b), bw)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; b may be a Tensor, a constant array, or a scalar."""
    if isinstance(b, Tensor):
        axes = () if a.shape == b.shape else _bias_axes(a.shape, b.shape)
        out = Tensor(a.data * b.data)
        bd, ad = b.data, a.data

        def bw(g):
            gb = g * ad
            return g * bd, gb if not axes else gb.sum(axis=axes)

        return _track(out, (a, b), bw)
    if isinstance(b, np.ndarray):
        out = Tensor(a.data * b)
        return _track(out, (a,), lambda g: (g * b,))
    s = float(b)
    out = Tensor(a.data * s)
    return _track(out, (a,), lambda g: (g * s,))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch(f"sub shapes {a.shape} vs {b.shape}")
    out = Tensor(a.data - b.data)
    return _track(out, (a, b), lambda g: (g, -g))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product, 2-D x 2-D or batched 3-D x 3-D with equal leading dim."""
    if a.ndim == 2 and b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ShapeMismatch(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    elif a.ndim == 3 and b.ndim == 3:
        if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise ShapeMismatch(f"batched matmul dims disagree: {a.shape} @ {b.shape}")
    else:
        raise ShapeMismatch(f"matmul supports 2-D or 3-D pairs, got {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    ad, bd = a.data, b.data

    def bw(g):
        return g @ bd.swapaxes(-1, -2), ad.swapaxes(-1, -2) @ g

    return _track(out, (a, b), bw)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b over the last dim of x; the fused linear-layer op."""
    k = x.shape[-1]
    if w.ndim != 2 or w.shape[0] != k or b.shape != (w.shape[1],):
        raise ShapeMismatch(f"affine {x.shape} @ {w.shape} + {b.shape}")
    x2 = x.data.reshape(-1, k)
    out = Tensor((x2 @ w.data + b.data).reshape(x.shape[:-1] + (w.shape[1],)))
    wd = w.data

    def bw(g):
        g2 = g.reshape(-1, w.shape[1])
        return (g2 @ wd.T).reshape(x.shape), x2.T @ g2, g2.sum(axis=0)

    return _track(out, (x, w, b), bw)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))
    pos = x.data > 0
    return _track(out, (x,), lambda g: (g * pos,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """minGPT's tanh-approximated GELU."""
    xd = x.data
    u = _GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(u)
    out = Tensor(0.5 * xd * (1.0 + t))

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * xd**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t**2) * du),)

    return _track(out, (x,), bw)


def softmax_lastdim(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row softmax over the last dim; mask (True = visible) forces exact zeros.

    Raises on any fully-masked row: a degenerate attention row has no
    well-defined distribution.
    """
    if mask is None:
        z = x.data - x.data.max(axis=-1, keepdims=True)
        e = np.exp(z)
    else:
        if mask.shape != x.shape:
            raise ShapeMismatch(f"softmax mask {mask.shape} vs logits {x.shape}")
        if not mask.any(axis=-1).all():
            raise NumericsError("softmax_lastdim: fully-masked row")
        neg = np.where(mask, x.data, -np.inf)
        e = np.exp(neg - neg.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def bw(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _track(out, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization over the last dim, then affine (gain, bias)."""
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeMismatch(f"layer_norm gain/bias {gain.shape}/{bias.shape} vs last dim {n}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)
    gd = gain.data

    def bw(g):
        dxhat = g * gd
        dvar = (dxhat * xc).sum(axis=-1, keepdims=True) * (-0.5) * inv**3
        dmu = -(dxhat * inv).sum(axis=-1, keepdims=True) + dvar * (-2.0 / n) * xc.sum(
            axis=-1, keepdims=True
        )
        dx = dxhat * inv + dvar * (2.0 / n) * xc + dmu / n
        axes = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _track(out, (x, gain, bias), bw)


def gather(x: Tensor, indices: np.ndarray, axis: int = 0) -> Tensor:
    """Select rows/columns by integer index (embedding-style lookup)."""
    if axis not in (0, 1):
        raise ContractError("gather supports axis 0 or 1")
    idx = np.asarray(indices, dtype=np.intp)
    out = Tensor(np.take(x.data, idx, axis=axis))
    shape = x.shape

    def bw(g):
        dx = np.zeros(shape, dtype=g.dtype)
        if axis == 0:
            np.add.at(dx, idx, g)
        else:
            np.add.at(dx, (slice(None), idx), g)
        return (dx,)

    return _track(out, (x,), bw)


def concat(parts: list[Tensor], axis: int) -> Tensor:
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _track(out, tuple(parts), bw)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    if not (0 <= start and start + length <= x.shape[axis]):
        raise ShapeMismatch(f"narrow [{start}:{start + length}] out of range for {x.shape}")
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = Tensor(x.data[sl].copy())
    shape = x.shape

    def bw(g):
        dx = np.zeros(shape, dtype=g.dtype)
        dx[sl] = g
        return (dx,)

    return _track(out, (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    orig = x.shape
    return _track(out, (x,), lambda g: (g.reshape(orig),))


def transpose(x: Tensor, axes) -> Tensor:
    out = Tensor(np.ascontiguousarray(x.data.transpose(axes)))
    inv = np.argsort(axes)
    return _track(out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where mask is True with a constant."""
    if mask.shape != x.shape:
        raise ShapeMismatch(f"masked_fill mask {mask.shape} vs {x.shape}")
    out = Tensor(np.where(mask, value, x.data))
    keep = ~mask
    return _track(out, (x,), lambda g: (g * keep,))


def mse(pred: Tensor, target: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Mean squared error; with weights, sum(w * (p-t)^2) and w broadcasts
    over the last dim when one dim short (per-position weighting)."""
    target = np.asarray(target, dtype=pred.data.dtype)
    if target.shape != pred.shape:
        raise ShapeMismatch(f"mse target {target.shape} vs pred {pred.shape}")
    diff = pred.data - target
    if weights is None:
        n = pred.size
        out = Tensor((diff * diff).sum() / n)
        return _track(out, (pred,), lambda g: (g * 2.0 * diff / n,))
    w = np.asarray(weights, dtype=pred.data.dtype)
    if w.ndim == pred.ndim - 1:
        w = w[..., None]
    out = Tensor((w * diff * diff).sum())
    return _track(out, (pred,), lambda g: (g * 2.0 * w * diff,))


def mean(x: Tensor) -> Tensor:
    n = x.size
    out = Tensor(x.data.sum() / n)
    shape, dt = x.shape, x.data.dtype
    return _track(out, (x,), lambda g: (np.full(shape, g / n, dtype=dt),))


def sum_(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum())
    shape, dt = x.shape, x.data.dtype
    return _track(out, (x,), lambda g: (np.full(shape, g, dtype=dt),))


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout as a constant-mask multiply; identity when p == 0."""
    if p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return mul(x, keep)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """Adam moments plus hyperparameters; step counter strictly increases."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def init_adam(params: dict[str, Tensor], lr: float, **kwargs) -> AdamState:
    state = AdamState(lr=lr, **kwargs)
    for name, p in params.items():
        state.m[name] = np.zeros_like(p.data)
        state.v[name] = np.zeros_like(p.data)
    return state


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float | None = None,
) -> None:
    """One bias-corrected Adam step, in place, with decoupled weight decay.

    Parameters without a gradient this step are treated as zero-gradient.
    """
    state.step += 1
    t = state.step
    lr_t = state.lr if lr is None else lr
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif np.isnan(g).any():
            raise NumericsError(f"NaN gradient for parameter '{name}' at step {t}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay:
            update = update + state.weight_decay * p.data
        p.data -= (lr_t * update).astype(p.data.dtype, copy=False)


def finite_diff_grad(f, x: Tensor, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar function, coordinate by
    coordinate; the independent oracle for every backward rule."""
    if h <= 0:
        raise ContractError("finite_diff_grad needs h > 0")
    flat = x.data.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)
