"""Differentiable kernels over :class:`~cdn.tensor.Tensor`.

Each function computes its forward result with numpy and registers a closure
that maps the output gradient to input gradients. Kernels never broadcast
implicitly: binary ops require equal shapes.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from .tensor import ShapeError, Tensor, make_output

_branches = threading.local()


@contextmanager
def record_branches():
    """Collect the branch masks taken by relu, prelu and abs inside the block.

    Two evaluations with equal masks lie on the same linear piece of every
    kink, which lets gradient checks tell kink crossings from real errors.
    """
    prev = getattr(_branches, "masks", None)
    _branches.masks = masks = []
    try:
        yield masks
    finally:
        _branches.masks = prev


def _note_branch(mask: np.ndarray) -> None:
    masks = getattr(_branches, "masks", None)
    if masks is not None:
        masks.append(mask)

# --- pointwise algebra -------------------------------------------------------


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return make_output(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return make_output(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return make_output(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return make_output(a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return make_output(a.data + a.dtype.type(c), (a,), lambda g: (g,))


def abs_(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    _note_branch(sign)
    return make_output(np.abs(a.data), (a,), lambda g: (g * sign,))


def sum_(a: Tensor) -> Tensor:
    shape = a.shape
    return make_output(np.asarray(a.data.sum(dtype=np.float64), dtype=a.dtype), (a,),
                       lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return make_output(np.asarray(a.data.mean(dtype=np.float64), dtype=a.dtype), (a,),
                       lambda g: (np.full(shape, g / n, dtype=a.dtype),))


def sum_scalars(terms: list[Tensor]) -> Tensor:
    """Sum of 0-d tensors as a single node (keeps the tape short)."""
    total = np.asarray(sum(t.item() for t in terms), dtype=terms[0].dtype)
    return make_output(total, tuple(terms), lambda g: tuple(g for _ in terms))


# --- activations -------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _note_branch(mask)
    return make_output(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def prelu(x: Tensor, a: Tensor) -> Tensor:
    """Per-channel parametric ReLU: ``x`` if ``x >= 0`` else ``a[c] * x``."""
    if x.data.ndim != 4 or a.shape != (x.shape[1],):
        raise ShapeError(f"prelu: slope shape {a.shape} does not match channels of {x.shape}")
    xd = x.data
    neg = xd < 0
    _note_branch(neg)
    mult = np.where(neg, a.data.reshape(1, -1, 1, 1), xd.dtype.type(1))
    out = xd * mult

    def backward(g):
        ga = (g * xd * neg).sum(axis=(0, 2, 3))
        return g * mult, ga

    return make_output(out, (x, a), backward)


# --- convolution -------------------------------------------------------------


# Rows of the padded grid handled per GEMM batch; keeps the accumulator in L2.
CONV_CHUNK = 2048


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 convolution with 'same' zero padding (k // 2).

    The padded input is stored channels-last and flattened over (n, h+2p, w+2p),
    so each of the k*k taps is a constant row offset into one buffer. The layer
    is then a sum of k*k GEMMs on contiguous row slices, computed over the whole
    padded grid; border rows are discarded. No im2col matrix is materialized.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError("conv2d expects NCHW input and (co, ci, k, k) weight")
    n, ci, h, w = x.shape
    co, wci, k, k2 = weight.shape
    if wci != ci:
        raise ShapeError(f"conv2d: input has {ci} channels, weight expects {wci}")
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square and odd, got {k}x{k2}")
    if bias is not None and bias.shape != (co,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({co},)")
    dt = x.dtype
    p = k // 2
    hp, wp = h + 2 * p, w + 2 * p
    span = n * hp * wp
    offsets = [di * wp + dj for di in range(k) for dj in range(k)]
    buf = np.zeros((span + offsets[-1], ci), dtype=dt)
    buf[:span].reshape(n, hp, wp, ci)[:, p:p + h, p:p + w] = x.data.transpose(0, 2, 3, 1)
    wtaps = np.ascontiguousarray(weight.data.transpose(2, 3, 1, 0)).reshape(k * k, ci, co)

    full = np.empty((span, co), dtype=dt)
    for lo in range(0, span, CONV_CHUNK):
        hi = min(span, lo + CONV_CHUNK)
        acc = full[lo:hi]
        np.matmul(buf[lo:hi], wtaps[0], out=acc)
        for t in range(1, k * k):
            acc += buf[lo + offsets[t]:hi + offsets[t]] @ wtaps[t]
    full = full.reshape(n, hp, wp, co)
    if bias is not None:
        full += bias.data
    out = np.ascontiguousarray(full[:, :h, :w].transpose(0, 3, 1, 2))

    def backward(g):
        gfull = np.zeros((n, hp, wp, co), dtype=g.dtype)
        gfull[:, :h, :w] = g.transpose(0, 2, 3, 1)
        g2 = gfull.reshape(span, co)
        gw = gb = gx = None
        want_w, want_x = weight.requires_grad, x.requires_grad
        gtaps = np.zeros((k * k, ci, co), dtype=g.dtype) if want_w else None
        gbuf = np.zeros_like(buf) if want_x else None
        wt_t = wtaps.transpose(0, 2, 1)
        for lo in range(0, span, CONV_CHUNK):
            hi = min(span, lo + CONV_CHUNK)
            gc = g2[lo:hi]
            for t, off in enumerate(offsets):
                if want_w:
                    gtaps[t] += buf[lo + off:hi + off].T @ gc
                if want_x:
                    gbuf[lo + off:hi + off] += gc @ wt_t[t]
        if want_w:
            gw = gtaps.reshape(k, k, ci, co).transpose(3, 2, 0, 1)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if want_x:
            gx = np.ascontiguousarray(gbuf[:span].reshape(n, hp, wp, ci)[:, p:p + h, p:p + w].transpose(0, 3, 1, 2))
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_output(out, inputs, backward)


# --- normalization -----------------------------------------------------------


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    eps: float = 1e-5,
    momentum: float = 0.1,
    groups: int = 1,
) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    In training mode the batch statistics are used and the running buffers are
    updated in place (unbiased variance, exponential average with ``momentum``).
    ``groups`` splits the batch into equal contiguous chunks that are
    normalized independently, exactly as if each chunk were its own forward
    pass; running stats are updated once per chunk, in order.
    """
    if eps <= 0:
        raise ValueError("batch_norm2d: eps must be positive")
    if x.data.ndim != 4:
        raise ShapeError("batch_norm2d expects NCHW input")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm2d: affine params must have shape ({c},)")
    if n % groups:
        raise ShapeError(f"batch_norm2d: batch {n} not divisible into {groups} groups")
    dt = x.dtype
    xg = x.data.reshape(groups, n // groups, c, h, w)
    axes = (1, 3, 4)
    if training:
        m = (n // groups) * h * w
        if m < 2:
            raise ValueError("batch_norm2d: training mode needs at least 2 values per channel")
        mu = xg.mean(axis=axes, dtype=np.float64)  # (groups, c)
        centered = xg - mu.astype(dt).reshape(groups, 1, c, 1, 1)
        var = (centered * centered).mean(axis=axes, dtype=np.float64)
        for gi in range(groups):
            running_mean *= 1 - momentum
            running_mean += momentum * mu[gi]
            running_var *= 1 - momentum
            running_var += momentum * var[gi] * m / (m - 1)
    else:
        mu = np.broadcast_to(running_mean.astype(np.float64), (groups, c))
        var = np.broadcast_to(running_var.astype(np.float64), (groups, c))
        centered = xg - mu.astype(dt).reshape(groups, 1, c, 1, 1)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(dt).reshape(groups, 1, c, 1, 1)
    xhat = centered * inv_std
    g5 = gamma.data.reshape(1, 1, c, 1, 1)
    out = (xhat * g5 + beta.data.reshape(1, 1, c, 1, 1)).reshape(n, c, h, w)

    def backward(g):
        gg = g.reshape(groups, n // groups, c, h, w)
        gbeta = gg.sum(axis=(0,) + axes)
        ggamma = (gg * xhat).sum(axis=(0,) + axes)
        gxhat = gg * g5
        if training:
            gx = inv_std * (
                gxhat
                - gxhat.mean(axis=axes, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True)
            )
        else:
            gx = gxhat * inv_std
        return gx.reshape(n, c, h, w), ggamma, gbeta

    return make_output(out.astype(dt, copy=False), (x, gamma, beta), backward)


# --- resampling and layout ---------------------------------------------------


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """(n, c*r*r, h, w) -> (n, c, h*r, w*r) with out[k, i*r+di, j*r+dj] = in[k*r*r + di*r + dj, i, j]."""
    n, crr, h, w = x.shape
    if crr % (r * r):
        raise ShapeError(f"pixel_shuffle: {crr} channels not divisible by r^2={r * r}")
    c = crr // (r * r)
    out = x.data.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * r, w * r)

    def backward(g):
        return (g.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, crr, h, w),)

    return make_output(np.ascontiguousarray(out), (x,), backward)


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Inverse of :func:`pixel_shuffle`."""
    n, c, hr, wr = x.shape
    if hr % r or wr % r:
        raise ShapeError(f"pixel_unshuffle: spatial dims {hr}x{wr} not divisible by {r}")
    h, w = hr // r, wr // r
    out = x.data.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, h, w)

    def backward(g):
        return (g.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, hr, wr),)

    return make_output(np.ascontiguousarray(out), (x,), backward)


def avg_pool2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2: spatial dims {h}x{w} must be even")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(g):
        q = g * x.dtype.type(0.25)
        return (np.repeat(np.repeat(q, 2, axis=2), 2, axis=3),)

    return make_output(out.astype(x.dtype, copy=False), (x,), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat: incompatible shapes {a.shape} and {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return make_output(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def crop(x: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    n, c, h, w = x.shape
    if top < 0 or left < 0 or top + height > h or left + width > w:
        raise ShapeError(f"crop window out of bounds for {x.shape}")
    out = x.data[:, :, top:top + height, left:left + width].copy()

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, :, top:top + height, left:left + width] = g
        return (gx,)

    return make_output(out, (x,), backward)


def concat_batch(parts: list[Tensor]) -> Tensor:
    shape = parts[0].shape[1:]
    if any(p.shape[1:] != shape for p in parts):
        raise ShapeError("concat_batch: trailing shapes differ")
    sizes = np.cumsum([p.shape[0] for p in parts])[:-1]
    out = np.concatenate([p.data for p in parts], axis=0)
    return make_output(out, tuple(parts), lambda g: tuple(np.split(g, sizes, axis=0)))


def batch_slice(x: Tensor, start: int, stop: int) -> Tensor:
    out = x.data[start:stop].copy()

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[start:stop] = g
        return (gx,)

    return make_output(out, (x,), backward)


def channel_mean(x: Tensor) -> Tensor:
    """Fixed (non-learned) 1x1 reduction to a single channel."""
    c = x.shape[1]
    out = x.data.mean(axis=1, keepdims=True).astype(x.dtype, copy=False)
    return make_output(out, (x,), lambda g: (np.repeat(g / x.dtype.type(c), c, axis=1),))


def zeros_like(x: Tensor) -> Tensor:
    return Tensor(np.zeros_like(x.data))


# --- distributions -----------------------------------------------------------


def softmax_flat(x: Tensor) -> Tensor:
    """Softmax over all non-batch elements; returns shape (n, k)."""
    n = x.shape[0]
    flat = x.data.reshape(n, -1)
    z = flat - flat.max(axis=1, keepdims=True)
    e = np.exp(z.astype(np.float64))
    p = (e / e.sum(axis=1, keepdims=True)).astype(x.dtype)

    def backward(g):
        gf = g.reshape(n, -1)
        gx = p * (gf - (gf * p).sum(axis=1, keepdims=True))
        return (gx.reshape(x.shape),)

    return make_output(p, (x,), backward)


KL_CLAMP = 1e-12


def kl_divergence(p: Tensor, q: Tensor, normalization_tol: float = 1e-5) -> Tensor:
    """Batch-mean of sum_x P ln(P/Q) in nats, rows of (n, k) inputs.

    ``0 ln(0/q)`` is taken as 0 and Q is clamped to ``KL_CLAMP`` inside the log.
    """
    if p.shape != q.shape:
        raise ShapeError(f"kl_divergence: length mismatch {p.shape} vs {q.shape}")
    pd = p.data.reshape(p.shape[0], -1).astype(np.float64) if p.data.ndim > 1 else p.data[None].astype(np.float64)
    qd = q.data.reshape(pd.shape).astype(np.float64)
    for name, arr in (("P", pd), ("Q", qd)):
        if (arr < 0).any() or np.abs(arr.sum(axis=1) - 1.0).max() > normalization_tol:
            raise ValueError(f"kl_divergence: {name} is not a probability distribution")
    rows = pd.shape[0]
    qc = np.maximum(qd, KL_CLAMP)
    pos = pd > 0
    log_ratio = np.where(pos, np.log(np.where(pos, pd, 1.0)) - np.log(qc), 0.0)
    value = (pd * log_ratio).sum() / rows
    dt = p.dtype

    def backward(g):
        gp = np.where(pos, log_ratio + 1.0, 0.0) * (g / rows)
        gq = np.where(qd >= KL_CLAMP, -pd / qc, 0.0) * (g / rows)
        return gp.astype(dt).reshape(p.shape), gq.astype(dt).reshape(q.shape)

    return make_output(np.asarray(value, dtype=dt), (p, q), backward)


# --- structural similarity ---------------------------------------------------


def ssim_global(a: Tensor, b: Tensor, c1: float, c2: float) -> Tensor:
    """Image-wide SSIM per sample (single mean/variance/covariance), averaged over the batch."""
    if a.shape != b.shape:
        raise ShapeError(f"ssim_global: shape mismatch {a.shape} vs {b.shape}")
    n = a.shape[0]
    ad = a.data.reshape(n, -1).astype(np.float64)
    bd = b.data.reshape(n, -1).astype(np.float64)
    count = ad.shape[1]
    mu_a = ad.mean(axis=1, keepdims=True)
    mu_b = bd.mean(axis=1, keepdims=True)
    da, db = ad - mu_a, bd - mu_b
    var_a = (da * da).mean(axis=1, keepdims=True)
    var_b = (db * db).mean(axis=1, keepdims=True)
    cov = (da * db).mean(axis=1, keepdims=True)
    l_num = 2 * mu_a * mu_b + c1
    l_den = mu_a ** 2 + mu_b ** 2 + c1
    s_num = 2 * cov + c2
    s_den = var_a + var_b + c2
    lum, cs = l_num / l_den, s_num / s_den
    value = (lum * cs).mean()
    dt = a.dtype

    def backward(g):
        w = g / n
        dl_dmu_a = (2 * mu_b * l_den - l_num * 2 * mu_a) / l_den ** 2
        dl_dmu_b = (2 * mu_a * l_den - l_num * 2 * mu_b) / l_den ** 2
        ds_dvar = -s_num / s_den ** 2
        ds_dcov = 2 / s_den
        ga = cs * dl_dmu_a / count + lum * (ds_dvar * 2 * da + ds_dcov * db) / count
        gb = cs * dl_dmu_b / count + lum * (ds_dvar * 2 * db + ds_dcov * da) / count
        return (ga * w).astype(dt).reshape(a.shape), (gb * w).astype(dt).reshape(b.shape)

    return make_output(np.asarray(value, dtype=dt), (a, b), backward)
