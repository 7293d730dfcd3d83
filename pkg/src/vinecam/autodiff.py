"""Minimal reverse-mode autodiff over numpy arrays.

Operations executed inside an active :class:`Tape` whose inputs require
gradients are recorded; ``tape.backward(loss)`` replays them in reverse.
Only the primitives a dense-connectivity CNN needs are provided.

    with Tape() as tape:
        loss, probs = softmax_cross_entropy(linear(x, w, b), y)
    tape.backward(loss)
"""
from __future__ import annotations

import threading
import zlib
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

_state = threading.local()


def _tapes() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of differentiable operations.

    A tape can be replayed once; a second ``backward`` raises.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.consumed = False

    def __enter__(self):
        _tapes().append(self)
        return self

    def __exit__(self, *exc):
        _tapes().remove(self)

    def record(self, out: Tensor, parents: tuple[Tensor, ...], fn: Callable):
        if self.consumed:
            raise RuntimeError("cannot record onto a consumed tape")
        self.nodes.append((out, parents, fn))

    def backward(self, loss: Tensor, inputs: Sequence[Tensor] | None = None):
        """Accumulate d(loss)/d(t) into ``t.grad``.

        With ``inputs`` only those tensors receive ``.grad`` and their
        gradients are also returned as a list (``None`` where unreachable).
        Otherwise every tensor that requires grad is populated.
        """
        if self.consumed:
            raise RuntimeError("tape already consumed by a previous backward pass")
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not any(out is loss for out, _, _ in self.nodes):
            raise ValueError("loss was not produced on this tape")
        self.consumed = True
        wanted = None if inputs is None else {id(t) for t in inputs}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        seen: dict[int, Tensor] = {id(loss): loss}
        for out, parents, fn in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            if wanted is None or id(out) in wanted:
                _accumulate(out, g)
            for p, pg in zip(parents, fn(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                seen[key] = p
                grads[key] = grads[key] + pg if key in grads else pg
        # whatever is left belongs to leaves
        for key, g in grads.items():
            if wanted is None or key in wanted:
                _accumulate(seen[key], g)
        self.nodes = []
        if inputs is not None:
            return [t.grad for t in inputs]
        return None


def _accumulate(t: Tensor, g: np.ndarray):
    g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def backward(tape: Tape, loss: Tensor, inputs: Sequence[Tensor] | None = None):
    return tape.backward(loss, inputs)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], fn: Callable) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires)
    tapes = _tapes()
    if requires and tapes:
        tapes[-1].record(out, parents, fn)
    return out


# -- kink bookkeeping for gradient checks ---------------------------------

@contextmanager
def record_kinks():
    """Collect a fingerprint of every ReLU mask and max-pool argmax evaluated."""
    prev = getattr(_state, "kinks", None)
    _state.kinks = []
    try:
        yield _state.kinks
    finally:
        _state.kinks = prev


def _note_kink(arr: np.ndarray):
    log = getattr(_state, "kinks", None)
    if log is not None:
        log.append(zlib.crc32(np.ascontiguousarray(arr).tobytes()))


# -- elementwise helpers ---------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul needs equal shapes, got {a.shape} and {b.shape}")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, c: float) -> Tensor:
    return _make(x.data * c, (x,), lambda g: (g * c,))


def tsum(x: Tensor) -> Tensor:
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape),))


def select(x: Tensor, idx: tuple[int, ...]) -> Tensor:
    """Scalar element ``x[idx]``."""

    def fn(g):
        out = np.zeros_like(x.data)
        out[idx] = g
        return (out,)

    return _make(np.asarray(x.data[idx]), (x,), fn)


# -- layer primitives ------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _note_kink(np.packbits(mask))
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation on NCHW input with an (O, C, kh, kw) kernel."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError(f"conv2d expects NCHW input and OCkk kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ValueError(f"conv2d channel mismatch: input has {c}, kernel expects {ci}")
    if b is not None and b.shape != (o,):
        raise ValueError(f"conv2d bias must have shape ({o},), got {b.shape}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    hp, wp = h + 2 * padding, wd + 2 * padding
    if kh > hp or kw > wp:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1

    if kh == kw == 1 and stride == 1 and padding == 0:
        wm = w.data[:, :, 0, 0]
        out = np.einsum("nchw,oc->nohw", x.data, wm, optimize=True)
        if b is not None:
            out += b.data[None, :, None, None]

        def fn1(g):
            gx = np.einsum("nohw,oc->nchw", g, wm, optimize=True) if x.requires_grad else None
            gw = np.einsum("nohw,nchw->oc", g, x.data, optimize=True)[:, :, None, None]
            gb = g.sum(axis=(0, 2, 3)) if b is not None else None
            return gx, gw, gb

        parents = (x, w) if b is None else (x, w, b)
        return _make(out, parents, fn1)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]  # (N, C, Ho, Wo, kh, kw)
    out = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if b is not None:
        out += b.data[None, :, None, None]

    def fn(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        gx = None
        if x.requires_grad:
            cols = np.tensordot(g, w.data, axes=([1], [0]))  # (N, Ho, Wo, C, kh, kw)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += \
                        cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, fn)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, training: bool, momentum: float = 0.1,
                eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization.

    Training mode normalizes with biased batch statistics and updates the
    running buffers in place (the running variance uses the unbiased
    estimate). Eval mode uses the running buffers and changes nothing.
    """
    if x.data.ndim != 4:
        raise ValueError(f"batchnorm2d expects NCHW input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,) or running_mean.shape != (c,) or running_var.shape != (c,):
        raise ValueError(f"batchnorm2d parameters must have length {c}")
    bshape = (1, c, 1, 1)
    if training:
        m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mean, var = running_mean, running_var
    invstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mean.reshape(bshape).astype(x.dtype)) * invstd.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def fn(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(bshape)
            if training:
                mean_g = gxhat.mean(axis=(0, 2, 3), keepdims=True)
                mean_gx = (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
                gx = (gxhat - mean_g - xhat * mean_gx) * invstd.reshape(bshape)
            else:
                gx = gxhat * invstd.reshape(bshape)
        return gx, gg, gbeta

    return _make(out, (x, gamma, beta), fn)


def pool2d(x: Tensor, kind: str, k: int, stride: int | None = None, padding: int = 0) -> Tensor:
    """Windowed max or average pooling. Max-pool padding uses -inf.

    Max-pool ties route the gradient to the first maximum in row-major order.
    """
    if kind not in ("max", "avg"):
        raise ValueError(f"pool kind must be 'max' or 'avg', got {kind!r}")
    if padding and kind != "max":
        raise ValueError("padding is only supported for max pooling")
    stride = stride or k
    n, c, h, w = x.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    if k < 1 or k > hp or k > wp:
        raise ValueError(f"pool window {k} does not fit input {h}x{w}")
    ho, wo = (hp - k) // stride + 1, (wp - k) // stride + 1
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo].reshape(n, c, ho, wo, k * k)

    def scatter(per_tap):
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        for t in range(k * k):
            i, j = divmod(t, k)
            gxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += per_tap(t)
        return gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp

    if kind == "max":
        arg = win.argmax(axis=-1)
        _note_kink(arg.astype(np.int16))
        out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
        return _make(np.ascontiguousarray(out), (x,), lambda g: (scatter(lambda t: g * (arg == t)),))
    out = win.mean(axis=-1)
    area = float(k * k)
    return _make(out, (x,), lambda g: (scatter(lambda t: g / area),))


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise ValueError("global_avg_pool needs non-empty spatial dims")
    out = x.data.mean(axis=(2, 3))
    return _make(out, (x,), lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape),))


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ValueError("concat_channels needs at least one tensor")
    n, _, h, w = xs[0].shape
    for t in xs:
        if t.data.ndim != 4 or (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ValueError(f"concat_channels: shape {t.shape} incompatible with {xs[0].shape}")
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])
    out = np.concatenate([t.data for t in xs], axis=1)
    return _make(out, tuple(xs), lambda g: tuple(g[:, a:b] for a, b in zip(bounds[:-1], bounds[1:])))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ValueError(f"linear shape mismatch: x {x.shape}, w {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ValueError(f"linear bias must have shape ({w.shape[0]},), got {b.shape}")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    def fn(g):
        return g @ w.data, g.T @ x.data, (g.sum(axis=0) if b is not None else None)

    return _make(out, (x, w) if b is None else (x, w, b), fn)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, targets) -> tuple[Tensor, np.ndarray]:
    """Mean cross-entropy of a max-shifted softmax. Returns (loss, probs)."""
    if logits.data.ndim != 2:
        raise ValueError(f"logits must be (N, K), got {logits.shape}")
    n, k = logits.shape
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != n:
        raise ValueError(f"{t.shape[0]} targets for {n} rows of logits")
    if np.any(t < 0) or np.any(t >= k):
        raise ValueError(f"targets must lie in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    probs = np.exp(logp)
    loss = -logp[np.arange(n), t].mean()

    def fn(g):
        d = probs.copy()
        d[np.arange(n), t] -= 1
        return (g * d / n,)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), fn), probs


# -- finite differences ----------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    checked: int
    excluded: int
    tol: float
    worst_index: tuple | None = None

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def finite_diff_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-4, tol: float = 1e-4,
                      coords: Sequence[tuple] | None = None, exclude_kinks: bool = False,
                      atol: float = 1e-6) -> GradCheckReport:
    """Compare backward gradients of scalar ``f`` at ``x`` with central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, atol)``.
    ``coords`` restricts the check to a subset of indices. With
    ``exclude_kinks`` a coordinate is skipped when the +/-eps probes change
    any ReLU mask or max-pool argmax relative to the base point.
    """
    base = np.array(as_tensor(x).data, dtype=np.float64)
    xt = Tensor(base.copy(), requires_grad=True)
    with Tape() as tape, record_kinks() as base_kinks:
        out = f(xt)
    if out.size != 1:
        raise ValueError("finite_diff_check needs a scalar-valued function")
    if out.requires_grad:
        tape.backward(out, inputs=[xt])
    analytic = xt.grad if xt.grad is not None else np.zeros_like(base)
    base_pattern = list(base_kinks)

    def probe(arr):
        with record_kinks() as kinks:
            val = float(f(Tensor(arr)).data)
        return val, kinks

    if coords is None:
        coords = list(np.ndindex(base.shape))
    worst_rel, worst_abs, worst, checked, excluded = 0.0, 0.0, None, 0, 0
    for idx in coords:
        idx = tuple(int(i) for i in idx)
        plus = base.copy()
        plus[idx] += eps
        minus = base.copy()
        minus[idx] -= eps
        fp, kp = probe(plus)
        fm, km = probe(minus)
        if exclude_kinks and (kp != base_pattern or km != base_pattern):
            excluded += 1
            continue
        numeric = (fp - fm) / (2 * eps)
        a = float(analytic[idx])
        err = abs(a - numeric)
        rel = err / max(abs(a), abs(numeric), atol)
        checked += 1
        worst_abs = max(worst_abs, err)
        if rel > worst_rel:
            worst_rel, worst = rel, idx
    return GradCheckReport(worst_rel, worst_abs, checked, excluded, tol, worst)
