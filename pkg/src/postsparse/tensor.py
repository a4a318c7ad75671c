"""Dense float64 tensors with tape-based reverse-mode differentiation.

Arithmetic is delegated to numpy; this module owns the differentiation
rules. A :class:`GradTape` records primitive calls made while it is the
active tape and at least one input is tracked (watched directly, or produced
by an earlier recorded call). ``tape.backward(loss)`` replays the record in
reverse and returns gradients for the watched tensors only.

Example::

    w = Tensor(np.ones((2, 3)))
    with GradTape() as tape:
        tape.watch(w)
        loss = tsum(matmul(x, transpose(w)))
    grads = tape.backward(loss)
    grads[w]
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class TapeError(RuntimeError):
    """Backward was asked for a value the tape never recorded."""


class Tensor:
    """A dense n-dimensional array of float64 values.

    Identity (not value) equality: tensors are usable as dict keys, which is
    how gradients are returned from :meth:`GradTape.backward`.
    """

    __slots__ = ("data", "__weakref__")

    def __init__(self, data, dtype=np.float64):
        self.data = np.array(data, dtype=dtype, copy=None)
        if self.data.dtype == np.float64 and not self.data.flags.writeable:
            self.data = self.data.copy()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_Vjp = Callable[[np.ndarray, tuple[bool, ...]], Sequence[Optional[np.ndarray]]]


class _Entry:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: _Vjp):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional["GradTape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class GradTape:
    """Ordered record of differentiable primitive calls.

    Use as a context manager; tapes are thread-local and may nest (only the
    innermost one records).
    """

    def __init__(self):
        self._entries: list[_Entry] = []
        self._watched: dict[int, Tensor] = {}
        self._tracked: set[int] = set()

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().remove(self)

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            self._watched[id(t)] = t
            self._tracked.add(id(t))

    @property
    def watched(self) -> list[Tensor]:
        return list(self._watched.values())

    def __len__(self) -> int:
        return len(self._entries)

    def is_tracked(self, t: Tensor) -> bool:
        return id(t) in self._tracked

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: _Vjp) -> None:
        self._entries.append(_Entry(out, inputs, vjp))
        self._tracked.add(id(out))

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Reverse-accumulate d(loss)/d(watched) for every watched tensor.

        Watched tensors that do not influence ``loss`` get a zero gradient;
        tensors that were never watched get no entry at all.
        """
        if loss.size != 1:
            raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
        if id(loss) not in self._tracked:
            raise TapeError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for entry in reversed(self._entries):
            g = grads.pop(id(entry.out), None)
            if g is None:
                continue
            needs = tuple(id(t) in self._tracked for t in entry.inputs)
            for t, gi, need in zip(entry.inputs, entry.vjp(g, needs), needs):
                if not need or gi is None:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return {
            t: grads.get(key, np.zeros_like(t.data))
            for key, t in self._watched.items()
        }


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], vjp: _Vjp) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(tape.is_tracked(t) for t in inputs):
        tape.record(out, inputs, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------------------
# Elementwise and reductions
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _emit(
        a.data + b.data,
        (a, b),
        lambda g, needs: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _emit(
        a.data - b.data,
        (a, b),
        lambda g, needs: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit(
        ad * bd,
        (a, b),
        lambda g, needs: (
            _unbroadcast(g * bd, ad.shape) if needs[0] else None,
            _unbroadcast(g * ad, bd.shape) if needs[1] else None,
        ),
    )


def tsum(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit(
        np.asarray(x.data.sum()),
        (x,),
        lambda g, needs: (np.broadcast_to(g, shape).copy(),),
    )


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _emit(
        np.asarray(x.data.mean()),
        (x,),
        lambda g, needs: (np.full(shape, float(g) / n),),
    )


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _emit(np.where(pos, x.data, 0.0), (x,), lambda g, needs: (g * pos,))


def flatten(x: Tensor) -> Tensor:
    """Collapse all but the leading (batch) axis."""
    shape = x.shape
    if len(shape) < 1:
        raise ShapeError("flatten needs at least one axis")
    return _emit(
        x.data.reshape(shape[0], -1),
        (x,),
        lambda g, needs: (g.reshape(shape),),
    )


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {old} -> {shape}") from exc
    return _emit(data, (x,), lambda g, needs: (g.reshape(old),))


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got {x.shape}")
    return _emit(x.data.T.copy(), (x,), lambda g, needs: (g.T.copy(),))


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    return _emit(
        ad @ bd,
        (a, b),
        lambda g, needs: (
            g @ bd.T if needs[0] else None,
            ad.T @ g if needs[1] else None,
        ),
    )


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w.T + b`` with ``w`` laid out as (out_features, in_features)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} vs weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"linear: bias {b.shape} vs weight {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is not None:
        out += b.data

    def vjp(g, needs):
        return (
            g @ wd if needs[0] else None,
            g.T @ xd if needs[1] else None,
            g.sum(axis=0) if len(needs) > 2 and needs[2] else None,
        )

    inputs = (x, w) if b is None else (x, w, b)
    return _emit(out, inputs, vjp)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, ho: int, wo: int, s: int = 1) -> np.ndarray:
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def _conv_input_grad(g: np.ndarray, w: np.ndarray, xshape, s: int, p: int) -> np.ndarray:
    """d(out)/d(x) as a stride-1 correlation of the dilated, padded output
    gradient with the spatially flipped, channel-swapped kernel."""
    n, cout, ho, wo = g.shape
    _, cin, kh, kw = w.shape
    h, wd = xshape[2], xshape[3]
    if s > 1:
        gd = np.zeros((n, cout, (ho - 1) * s + 1, (wo - 1) * s + 1))
        gd[:, :, ::s, ::s] = g
    else:
        gd = g
    rh = h - ((ho - 1) * s + kh - 2 * p)
    rw = wd - ((wo - 1) * s + kw - 2 * p)
    gp = np.pad(gd, ((0, 0), (0, 0), (kh - 1 - p, kh - 1 - p + rh), (kw - 1 - p, kw - 1 - p + rw)))
    wflip = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, -1)
    cols = _im2col(gp, kh, kw, h, wd)
    return (cols @ wflip.T).reshape(n, h, wd, cin).transpose(0, 3, 1, 2)


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D cross-correlation (no kernel flip) over an NCHW batch."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: input {x.shape}, weight {w.shape}")
    n, cin, h, wd_ = x.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, weight expects {wcin}")
    if kh > h + 2 * padding or kw > wd_ + 2 * padding:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd_} (pad {padding})"
        )
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d: bias {b.shape} vs {cout} output channels")
    s, p = stride, padding
    ho = conv_output_size(h, kh, s, p)
    wo = conv_output_size(wd_, kw, s, p)
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    # im2col: rows are (n, i, j) output positions, columns (cin, di, dj)
    cols = _im2col(xp, kh, kw, ho, wo, s)
    wmat = w.data.reshape(cout, -1)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    def vjp(g, needs):
        gx = gw = gb = None
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        if needs[1]:
            gw = (g2.T @ cols).reshape(w.shape)
        if needs[0]:
            gx = _conv_input_grad(g, w.data, x.shape, s, p) if p < min(kh, kw) else None
            if gx is None:
                gcols = (g2 @ wmat).reshape(n, ho, wo, cin, kh, kw)
                gxp = np.zeros(xp.shape)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += gcols[
                            :, :, :, :, i, j
                        ].transpose(0, 3, 1, 2)
                gx = gxp[:, :, p : p + h, p : p + wd_] if p else gxp
        if len(needs) > 2 and needs[2]:
            gb = g2.sum(axis=0)
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return _emit(out, inputs, vjp)


def avgpool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k average pooling (stride k)."""
    if x.data.ndim != 4:
        raise ShapeError(f"avgpool2d expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if k < 1 or h % k or w % k:
        raise ShapeError(f"avgpool2d: window {k} does not tile {h}x{w}")
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))
    scale = 1.0 / (k * k)

    def vjp(g, needs):
        gx = np.broadcast_to(
            (g * scale)[:, :, :, None, :, None], (n, c, h // k, k, w // k, k)
        )
        return (gx.reshape(n, c, h, w),)

    return _emit(out, (x,), vjp)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    training: bool = False,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel batch normalization over NCHW.

    In training mode batch statistics are used and the running statistics are
    updated in place (unbiased variance, as is conventional); in eval mode the
    running statistics are used and nothing is mutated.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batchnorm2d expects NCHW, got {x.shape}")
    c = x.shape[1]
    for name, t in (("gamma", gamma), ("beta", beta), ("running_mean", running_mean),
                    ("running_var", running_var)):
        if t.shape != (c,):
            raise ShapeError(f"batchnorm2d: {name} has shape {t.shape}, expected ({c},)")
    bcast = (None, slice(None), None, None)
    xd = x.data
    if training:
        m = xd.shape[0] * xd.shape[2] * xd.shape[3]
        if m == 0:
            raise ShapeError("batchnorm2d: empty batch in training mode")
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        unbiased = var * m / (m - 1) if m > 1 else var
        running_mean.data[...] = (1 - momentum) * running_mean.data + momentum * mu
        running_var.data[...] = (1 - momentum) * running_var.data + momentum * unbiased
    else:
        mu = running_mean.data
        var = running_var.data
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu[bcast]) * inv_std[bcast]
    gd = gamma.data
    out = xhat * gd[bcast] + beta.data[bcast]

    def vjp(g, needs):
        gx = None
        if needs[0]:
            gxhat = g * gd[bcast]
            if training:
                m_ = g.shape[0] * g.shape[2] * g.shape[3]
                s1 = gxhat.sum(axis=(0, 2, 3))
                s2 = (gxhat * xhat).sum(axis=(0, 2, 3))
                gx = (inv_std / m_)[bcast] * (
                    m_ * gxhat - s1[bcast] - xhat * s2[bcast]
                )
            else:
                gx = gxhat * inv_std[bcast]
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if needs[1] else None
        gbeta = g.sum(axis=(0, 2, 3)) if needs[2] else None
        return gx, ggamma, gbeta, None, None

    return _emit(out, (x, gamma, beta, running_mean, running_var), vjp)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def softmax_xent(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under softmax(``logits``)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_xent: logits {logits.shape}, labels {labels.shape}")
    n = logits.shape[0]
    if n == 0:
        raise ShapeError("softmax_xent: empty batch")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(logsum - z[rows, labels])

    def vjp(g, needs):
        prob = np.exp(z - logsum[:, None])
        prob[rows, labels] -= 1.0
        return (prob * (float(g) / n),)

    return _emit(np.asarray(loss), (logits,), vjp)


def mse(pred: Tensor, target) -> Tensor:
    """Squared error summed per sample, averaged over the leading axis."""
    t = target if isinstance(target, Tensor) else Tensor(target)
    if pred.shape != t.shape:
        raise ShapeError(f"mse: prediction {pred.shape} vs target {t.shape}")
    n = pred.shape[0]
    if n == 0:
        raise ShapeError("mse: empty batch")
    diff = pred.data - t.data
    loss = np.asarray(np.sum(diff * diff) / n)

    def vjp(g, needs):
        gd = diff * (2.0 * float(g) / n)
        return gd, (-gd if needs[1] else None)

    return _emit(loss, (pred, t), vjp)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


def sgd_step(
    param: np.ndarray,
    grad: np.ndarray,
    velocity: np.ndarray,
    lr: float,
    momentum: float,
    mask: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """One heavy-ball SGD update, in place.

    ``v <- momentum * v + grad``; ``param <- param - lr * v``. Positions where
    ``mask`` is false keep a zero velocity and are never written, so pruned
    weights stay exactly zero.
    """
    if param.shape != grad.shape or param.shape != velocity.shape:
        raise ShapeError(
            f"sgd_step: param {param.shape}, grad {grad.shape}, velocity {velocity.shape}"
        )
    velocity *= momentum
    velocity += grad
    if mask is not None:
        if mask.shape != param.shape:
            raise ShapeError(f"sgd_step: mask {mask.shape} vs param {param.shape}")
        velocity *= mask
    param -= lr * velocity
    return param, velocity


class SGD:
    """Momentum SGD over a fixed list of tensors with optional keep-masks."""

    def __init__(
        self,
        params: Iterable[Tensor],
        lr: float,
        momentum: float = 0.0,
        masks: Optional[dict[Tensor, np.ndarray]] = None,
    ):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.masks = masks or {}
        self.velocity = {p: np.zeros_like(p.data) for p in self.params}

    def step(self, grads: dict[Tensor, np.ndarray]) -> None:
        for p in self.params:
            sgd_step(p.data, grads[p], self.velocity[p], self.lr, self.momentum,
                     self.masks.get(p))
