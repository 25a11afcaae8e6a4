"""Differentiable primitives over Tensor.

Forward rules compute plain numpy; when a tape is active and any input
requires grad, a backward closure is recorded. Gradients for broadcast
operands are reduced back to the operand shape.
"""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError, NumericError, ShapeError
from .tensor import Tensor, accumulate_grad, active_tape


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data, inputs, backward_builder) -> Tensor:
    """Wrap `data`; record a node when recording is on and useful.

    `backward_builder` is a zero-arg callable returning the backward
    closure, so closures are only built when actually recording.
    """
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(i.requires_grad for i in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward_builder())
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` over axes that were broadcast up from `shape`."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_finite(data: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{what} produced a non-finite value")
    return data


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)

    def bwd():
        def fn(g):
            ga = _unbroadcast(g, a.shape)
            accumulate_grad(a, ga, fresh=ga is not g)
            gb = _unbroadcast(g, b.shape)
            accumulate_grad(b, gb, fresh=gb is not g)

        return fn

    return _make(a.data + b.data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)

    def bwd():
        def fn(g):
            ga = _unbroadcast(g, a.shape)
            accumulate_grad(a, ga, fresh=ga is not g)
            accumulate_grad(b, _unbroadcast(-g, b.shape), fresh=True)

        return fn

    return _make(a.data - b.data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)

    def bwd():
        ad, bd = a.data, b.data

        def fn(g):
            accumulate_grad(a, _unbroadcast(g * bd, a.shape), fresh=True)
            accumulate_grad(b, _unbroadcast(g * ad, b.shape), fresh=True)

        return fn

    return _make(a.data * b.data, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if np.any(b.data == 0.0):
        raise NumericError("division by zero")
    out = a.data / b.data

    def bwd():
        ad, bd = a.data, b.data

        def fn(g):
            accumulate_grad(a, _unbroadcast(g / bd, a.shape), fresh=True)
            accumulate_grad(b, _unbroadcast(-g * ad / (bd * bd), b.shape), fresh=True)

        return fn

    return _make(out, (a, b), bwd)


def neg(a) -> Tensor:
    a = _coerce(a)

    def bwd():
        def fn(g):
            accumulate_grad(a, -g, fresh=True)

        return fn

    return _make(-a.data, (a,), bwd)


def exp(a) -> Tensor:
    a = _coerce(a)
    with np.errstate(over="ignore"):
        out = _check_finite(np.exp(a.data), "exp")

    def bwd():
        def fn(g):
            accumulate_grad(a, g * out, fresh=True)

        return fn

    return _make(out, (a,), bwd)


def expm1(a) -> Tensor:
    """exp(a) - 1 without cancellation near zero."""
    a = _coerce(a)
    with np.errstate(over="ignore"):
        out = _check_finite(np.expm1(a.data), "expm1")

    def bwd():
        ex = out + 1.0

        def fn(g):
            accumulate_grad(a, g * ex, fresh=True)

        return fn

    return _make(out, (a,), bwd)


def log(a) -> Tensor:
    a = _coerce(a)
    if np.any(a.data <= 0.0):
        raise NumericError("log of a non-positive value")

    def bwd():
        ad = a.data

        def fn(g):
            accumulate_grad(a, g / ad, fresh=True)

        return fn

    return _make(np.log(a.data), (a,), bwd)


def sqrt(a) -> Tensor:
    a = _coerce(a)
    if np.any(a.data < 0.0):
        raise NumericError("sqrt of a negative value")
    out = np.sqrt(a.data)

    def bwd():
        def fn(g):
            accumulate_grad(a, g * 0.5 / out, fresh=True)

        return fn

    return _make(out, (a,), bwd)


def square(a) -> Tensor:
    a = _coerce(a)

    def bwd():
        ad = a.data

        def fn(g):
            accumulate_grad(a, g * (2.0 * ad), fresh=True)

        return fn

    return _make(a.data * a.data, (a,), bwd)


# ---------------------------------------------------------------------------
# activations


def _flat(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x).reshape(-1)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # stable in both tails: only ever exponentiates -|x|
    from .kernels import sigmoid_forward

    out = np.empty(x.size)
    sigmoid_forward(_flat(x), out)
    return out.reshape(x.shape)


def sigmoid(a) -> Tensor:
    a = _coerce(a)
    out = _sigmoid_np(a.data)

    def bwd():
        def fn(g):
            accumulate_grad(a, g * out * (1.0 - out), fresh=True)

        return fn

    return _make(out, (a,), bwd)


def relu(a) -> Tensor:
    a = _coerce(a)

    def bwd():
        mask = a.data > 0

        def fn(g):
            accumulate_grad(a, g * mask, fresh=True)

        return fn

    return _make(np.maximum(a.data, 0.0), (a,), bwd)


def silu(a) -> Tensor:
    from .kernels import silu_backward, silu_forward

    a = _coerce(a)
    ad = _flat(a.data)
    out = np.empty(ad.size)
    silu_forward(ad, out)

    def bwd():
        def fn(g):
            gx = np.empty(ad.size)
            silu_backward(ad, _flat(g), gx)
            accumulate_grad(a, gx.reshape(a.shape), fresh=True)

        return fn

    return _make(out.reshape(a.shape), (a,), bwd)


def softplus(a) -> Tensor:
    from .kernels import sigmoid_scale, softplus_forward

    a = _coerce(a)
    ad = _flat(a.data)
    out = np.empty(ad.size)
    softplus_forward(ad, out)

    def bwd():
        def fn(g):
            gx = np.empty(ad.size)
            sigmoid_scale(ad, _flat(g), gx)
            accumulate_grad(a, gx.reshape(a.shape), fresh=True)

        return fn

    return _make(out.reshape(a.shape), (a,), bwd)


_UNARY = {
    "silu": silu,
    "relu": relu,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "exp": exp,
    "neg": neg,
}


def apply_unary(x, kind: str) -> Tensor:
    """Element-wise activation dispatch; unknown kind is a config error."""
    try:
        fn = _UNARY[kind]
    except KeyError:
        raise ConfigError(f"unknown unary kind {kind!r}; expected one of {sorted(_UNARY)}") from None
    return fn(x)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape) -> Tensor:
    a = _coerce(a)
    old = a.shape

    def bwd():
        def fn(g):
            accumulate_grad(a, g.reshape(old))

        return fn

    return _make(a.data.reshape(shape), (a,), bwd)


def permute(a, axes) -> Tensor:
    a = _coerce(a)
    inv = np.argsort(axes)

    def bwd():
        def fn(g):
            accumulate_grad(a, g.transpose(inv))

        return fn

    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), bwd)


def select(a, index: int, axis: int = 1) -> Tensor:
    """Take one index along `axis`, dropping the axis."""
    a = _coerce(a)
    sl = [slice(None)] * a.ndim
    sl[axis] = index
    sl = tuple(sl)

    def bwd():
        def fn(g):
            if not a.requires_grad:
                return
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            a.grad[sl] += g

        return fn

    return _make(np.ascontiguousarray(a.data[sl]), (a,), bwd)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = _coerce(a)
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)

    def bwd():
        def fn(g):
            if not a.requires_grad:
                return
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            a.grad[sl] += g

        return fn

    return _make(np.ascontiguousarray(a.data[sl]), (a,), bwd)


def pad_axis(a, axis: int, after: int) -> Tensor:
    """Append `after` zeros along `axis`."""
    a = _coerce(a)
    if after == 0:
        return a
    widths = [(0, 0)] * a.ndim
    widths[axis] = (0, after)
    n = a.shape[axis]
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(0, n)
    sl = tuple(sl)

    def bwd():
        def fn(g):
            accumulate_grad(a, g[sl])

        return fn

    return _make(np.pad(a.data, widths), (a,), bwd)


def concat(tensors, axis: int) -> Tensor:
    tensors = [_coerce(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd():
        def fn(g):
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                accumulate_grad(t, g[tuple(sl)])

        return fn

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bwd)


def stack(tensors, axis: int = 1) -> Tensor:
    tensors = [_coerce(t) for t in tensors]

    def bwd():
        def fn(g):
            for i, t in enumerate(tensors):
                accumulate_grad(t, np.take(g, i, axis=axis), fresh=True)

        return fn

    return _make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), bwd)


def where_mask(mask: np.ndarray, a, b) -> Tensor:
    """Select `a` where the constant boolean mask holds, else `b`."""
    a, b = _coerce(a), _coerce(b)

    def bwd():
        def fn(g):
            accumulate_grad(a, _unbroadcast(np.where(mask, g, 0.0), a.shape), fresh=True)
            accumulate_grad(b, _unbroadcast(np.where(mask, 0.0, g), b.shape), fresh=True)

        return fn

    return _make(np.where(mask, a.data, b.data), (a, b), bwd)


# ---------------------------------------------------------------------------
# reductions


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd():
        shape = a.shape

        def fn(g):
            if axis is None:
                accumulate_grad(a, np.broadcast_to(g, shape))
                return
            if not keepdims:
                g = np.expand_dims(g, axis)
            accumulate_grad(a, np.broadcast_to(g, shape))

        return fn

    return _make(out, (a,), bwd)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    n = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Batched matrix product; leading dims broadcast."""
    a, b = _coerce(a), _coerce(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bwd():
        ad, bd = a.data, b.data

        def fn(g):
            accumulate_grad(a, _unbroadcast(np.matmul(g, bd.swapaxes(-1, -2)), a.shape), fresh=True)
            accumulate_grad(b, _unbroadcast(np.matmul(ad.swapaxes(-1, -2), g), b.shape), fresh=True)

        return fn

    return _make(out, (a, b), bwd)


def linear(x, w, b=None) -> Tensor:
    """Affine map over the last axis: x @ w + b."""
    x, w = _coerce(x), _coerce(w)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input last dim {x.shape} does not match weight {w.shape}")
    d_in, d_out = w.shape
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, d_in)
    out = x2 @ w.data
    if b is not None:
        b = _coerce(b)
        if b.shape != (d_out,):
            raise ShapeError(f"linear: bias shape {b.shape} does not match weight {w.shape}")
        out = out + b.data
    out = out.reshape(*lead, d_out)
    inputs = (x, w) if b is None else (x, w, b)

    def bwd():
        wd = w.data

        def fn(g):
            g2 = g.reshape(-1, d_out)
            accumulate_grad(x, (g2 @ wd.T).reshape(x.shape), fresh=True)
            accumulate_grad(w, x2.T @ g2, fresh=True)
            if b is not None:
                accumulate_grad(b, g2.sum(axis=0), fresh=True)

        return fn

    return _make(out, inputs, bwd)


# ---------------------------------------------------------------------------
# neural-network layers


def conv2d_3x3(x, kernels, bias) -> Tensor:
    """3x3 cross-correlation with zero padding 1 (spatial size preserved).

    x: [b, c_in, h, w], kernels: [c_out, c_in, 3, 3], bias: [c_out].
    """
    x, kernels, bias = _coerce(x), _coerce(kernels), _coerce(bias)
    if x.ndim != 4 or kernels.ndim != 4 or kernels.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d_3x3: got x {x.shape}, kernels {kernels.shape}")
    b_, cin, h, w = x.shape
    cout = kernels.shape[0]
    if kernels.shape[1] != cin:
        raise ShapeError(
            f"conv2d_3x3: kernel expects {kernels.shape[1]} input channels, input has {cin}"
        )
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d_3x3: bias shape {bias.shape}, expected ({cout},)")

    # im2col: one [b*h*w, cin*9] patch matrix and a single GEMM each way
    from .kernels import im2col_3x3

    xp = np.zeros((b_, cin, h + 2, w + 2))
    xp[:, :, 1 : h + 1, 1 : w + 1] = x.data
    cols = np.empty((b_ * h * w, cin * 9))
    im2col_3x3(xp, cols)
    kmat = kernels.data.reshape(cout, cin * 9)
    out = (cols @ kmat.T).reshape(b_, h, w, cout).transpose(0, 3, 1, 2) + bias.data[None, :, None, None]

    def bwd():
        def fn(g):
            g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(b_ * h * w, cout)
            accumulate_grad(bias, g2.sum(axis=0), fresh=True)
            accumulate_grad(kernels, (g2.T @ cols).reshape(cout, cin, 3, 3), fresh=True)
            # dx is the correlation of the padded upstream grad with the
            # spatially flipped kernels (transposed convolution)
            gp = np.zeros((b_, cout, h + 2, w + 2))
            gp[:, :, 1 : h + 1, 1 : w + 1] = g
            gcols = np.empty((b_ * h * w, cout * 9))
            im2col_3x3(gp, gcols)
            kflip = np.ascontiguousarray(
                kernels.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            ).reshape(cin, cout * 9)
            gx = (gcols @ kflip.T).reshape(b_, h, w, cin).transpose(0, 3, 1, 2)
            accumulate_grad(x, np.ascontiguousarray(gx), fresh=True)

        return fn

    return _make(np.ascontiguousarray(out), (x, kernels, bias), bwd)


def causal_conv1d(x, kernels) -> Tensor:
    """Depthwise causal convolution along the time axis.

    x: [b, len, ch], kernels: [ch, d_conv]; the input is left-padded with
    d_conv - 1 zeros so y[t] sees x[t - d_conv + 1 .. t] only.
    """
    x, kernels = _coerce(x), _coerce(kernels)
    if x.ndim != 3 or kernels.ndim != 2:
        raise ShapeError(f"causal_conv1d: got x {x.shape}, kernels {kernels.shape}")
    b_, n, ch = x.shape
    if kernels.shape[0] != ch:
        raise ShapeError(f"causal_conv1d: {ch} channels in x, kernels for {kernels.shape[0]}")
    d_conv = kernels.shape[1]
    if d_conv < 1:
        raise ConfigError(f"causal_conv1d: d_conv must be >= 1, got {d_conv}")

    xp = np.zeros((b_, n + d_conv - 1, ch))
    xp[:, d_conv - 1 :, :] = x.data
    kd = kernels.data
    out = np.zeros((b_, n, ch))
    for j in range(d_conv):
        out += xp[:, j : j + n, :] * kd[:, j]

    def bwd():
        def fn(g):
            gk = np.empty_like(kd)
            gxp = np.zeros_like(xp)
            for j in range(d_conv):
                gk[:, j] = np.einsum("btc,btc->c", xp[:, j : j + n, :], g)
                gxp[:, j : j + n, :] += g * kd[:, j]
            accumulate_grad(kernels, gk)
            accumulate_grad(x, gxp[:, d_conv - 1 :, :])

        return fn

    return _make(out, (x, kernels), bwd)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """LayerNorm over the last axis: gamma * (x - mu) / sqrt(var + eps) + beta."""
    x, gamma, beta = _coerce(x), _coerce(gamma), _coerce(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma/beta must be ({d},), got {gamma.shape}/{beta.shape}")
    mu = mean(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = mean(square(xc), axis=-1, keepdims=True)
    xhat = div(xc, sqrt(add(var, eps)))
    return add(mul(xhat, gamma), beta)


def pool_global(x, kind: str) -> Tensor:
    """Global spatial pooling of [b, c, h, w] down to [b, c, 1, 1].

    Max pooling routes the gradient to the first argmax in row-major scan
    order (deterministic tie break).
    """
    x = _coerce(x)
    if x.ndim != 4:
        raise ShapeError(f"pool_global expects [b,c,h,w], got {x.shape}")
    b_, c, h, w = x.shape
    flat = x.data.reshape(b_, c, h * w)
    if kind == "avg":
        out = flat.mean(axis=-1)[:, :, None, None]

        def bwd():
            def fn(g):
                gx = np.broadcast_to(g / (h * w), (b_, c, h, w))
                accumulate_grad(x, gx)

            return fn

    elif kind == "max":
        idx = flat.argmax(axis=-1)  # first occurrence on ties
        out = np.take_along_axis(flat, idx[:, :, None], axis=-1)[:, :, :, None]

        def bwd():
            def fn(g):
                gx = np.zeros((b_, c, h * w))
                np.put_along_axis(gx, idx[:, :, None], g.reshape(b_, c, 1), axis=-1)
                accumulate_grad(x, gx.reshape(b_, c, h, w), fresh=True)

            return fn

    else:
        raise ConfigError(f"pool_global: kind must be 'avg' or 'max', got {kind!r}")
    return _make(out, (x,), bwd)


def dropout(x, p: float, training: bool, rng) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p)."""
    x = _coerce(x)
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = (rng.uniform(size=x.shape) >= p) / (1.0 - p)

    def bwd():
        def fn(g):
            accumulate_grad(x, g * keep, fresh=True)

        return fn

    return _make(x.data * keep, (x,), bwd)


def softmax_last(x) -> Tensor:
    """Softmax over the last axis, max-shifted for stability."""
    x = _coerce(x)
    shift = x.data.max(axis=-1, keepdims=True)  # constant shift, value-invariant
    z = exp(sub(x, shift))
    return div(z, sum_(z, axis=-1, keepdims=True))


def custom(data, inputs, backward_builder) -> Tensor:
    """Record a domain-specific fused primitive on the active tape.

    `backward_builder` is a zero-arg callable returning the backward
    closure; the closure must accumulate into each input itself.
    """
    return _make(data, inputs, backward_builder)
