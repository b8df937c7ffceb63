"""Differentiable network operators on ``[batch, channel, depth, height, width]`` tensors."""

import threading

import numpy as np

from .. import interp
from ..errors import DegenerateInputError, DomainError, ShapeError
from ..tensor import Tensor, add, as_tensor, make_result, matmul, reduce_mean, reduce_sum, transpose

_scratch = threading.local()


def _buffer(name, shape, dtype):
    """Per-thread reusable work array; avoids page-faulting a fresh im2col every call."""
    pool = getattr(_scratch, "pool", None)
    if pool is None:
        pool = _scratch.pool = {}
    size = int(np.prod(shape))
    key = (name, np.dtype(dtype).str)
    buf = pool.get(key)
    if buf is None or buf.size < size:
        buf = pool[key] = np.empty(size, dtype=dtype)
    return buf[:size].reshape(shape)


def conv_output_size(n, kernel, stride, padding):
    return (n + 2 * padding - kernel) // stride + 1


def _pad_channel_major(x, p):
    b, c, d, h, w = x.shape
    xp = np.zeros((c, b, d + 2 * p, h + 2 * p, w + 2 * p), dtype=x.dtype)
    xp[:, :, p : p + d, p : p + h, p : p + w] = x.transpose(1, 0, 2, 3, 4)
    return xp


# Column blocks of about this many bytes stay cache-resident between im2col, GEMM and col2im.
_TILE_BYTES = 1 << 23


def _tiles(b, do, plane, rows, itemsize, halo=0):
    """Yield ``(sample, z0, z1)`` slabs of output depth slices whose columns fit ``_TILE_BYTES``."""
    nz = max(1, min(do, _TILE_BYTES // max(1, rows * plane * itemsize) - halo))
    for n in range(b):
        for z0 in range(0, do, nz):
            yield n, z0, min(do, z0 + nz)


def _im2col(xp, n, z0, z1, k, s, out_hw, out):
    """Fill ``out`` (rows ordered kd, kh, kw, channel) with the windows of output slices ``z0:z1``."""
    ci = xp.shape[0]
    ho, wo = out_hw
    cols = out.reshape(k, k, k, ci, z1 - z0, ho, wo)
    for a in range(k):
        src = xp[:, n, a + s * z0 : a + s * (z1 - 1) + 1 : s]
        for bb in range(k):
            for c in range(k):
                cols[a, bb, c] = src[:, :, bb : bb + s * ho : s, c : c + s * wo : s]
    return out


def _col2im(gcols, gxp, n, z0, z1, k, s, out_hw):
    ci = gxp.shape[0]
    ho, wo = out_hw
    g8 = gcols.reshape(k, k, k, ci, z1 - z0, ho, wo)
    for a in range(k):
        dst = gxp[:, n, a + s * z0 : a + s * (z1 - 1) + 1 : s]
        for bb in range(k):
            for c in range(k):
                dst[:, :, bb : bb + s * ho : s, c : c + s * wo : s] += g8[a, bb, c]


def _im2col_plane(xp, n, z0, z1, k, out_hw, out):
    """In-plane windows only (rows ordered kh, kw, channel) for input slices ``z0:z1``.

    With unit stride, the depth tap ``a`` of output slice ``z`` reads input slice ``z + a``,
    which is a contiguous run of columns of this matrix, so depth needs no copies.
    """
    ci = xp.shape[0]
    ho, wo = out_hw
    cols = out.reshape(k, k, ci, z1 - z0, ho, wo)
    src = xp[:, n, z0:z1]
    for bb in range(k):
        for c in range(k):
            cols[bb, c] = src[:, :, bb : bb + ho, c : c + wo]
    return out


def _col2im_plane(gcols, gxp, n, z0, z1, k, out_hw):
    ci = gxp.shape[0]
    ho, wo = out_hw
    g6 = gcols.reshape(k, k, ci, z1 - z0, ho, wo)
    dst = gxp[:, n, z0:z1]
    for bb in range(k):
        for c in range(k):
            dst[:, :, bb : bb + ho, c : c + wo] += g6[bb, c]


def _check_conv(x, weight, bias, stride, padding):
    if x.ndim != 5 or weight.ndim != 5:
        raise ShapeError(f"conv3d expects 5-D input and weight, got {x.shape} and {weight.shape}")
    ci = x.shape[1]
    co, wci, k, k2, k3 = weight.shape
    if wci != ci:
        raise ShapeError(f"conv3d: input has {ci} channels but weight {weight.shape} expects {wci}")
    if not k == k2 == k3:
        raise ShapeError(f"conv3d: only cubic kernels are supported, got {weight.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv3d: invalid stride {stride} / padding {padding}")
    out_sp = tuple(conv_output_size(n, k, stride, padding) for n in x.shape[2:])
    if min(out_sp) < 1:
        raise ShapeError(f"conv3d: kernel {k} with padding {padding} does not fit input {x.shape}")
    if bias is not None and bias.shape != (co,):
        raise ShapeError(f"conv3d: bias shape {bias.shape} != ({co},)")
    return out_sp


def conv3d(x, weight, bias=None, stride=1, padding=0):
    """3D cross-correlation (no kernel flip) via channel-major im2col and GEMM.

    weight is ``[out, in, k, k, k]``; stride and padding apply equally to all axes.
    Columns are built one slab of output depth slices at a time. Unit-stride kernels
    unroll only the in-plane taps and apply each depth tap as a shifted GEMM.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    bias = None if bias is None else as_tensor(bias)
    s, p = int(stride), int(padding)
    out_sp = _check_conv(x, weight, bias, s, p)
    b, ci, d, h, w = x.shape
    co, k = weight.shape[0], weight.shape[2]
    dtype = x.dtype
    itemsize = np.dtype(dtype).itemsize
    do, ho, wo = out_sp
    plane = ho * wo

    if k == 1 and s == 1 and p == 0:
        mode, rows, taps, halo = "pointwise", ci, 1, 0
        xp = x.data.transpose(1, 0, 2, 3, 4)
    elif s == 1:
        mode, rows, taps, halo = "shift", k * k * ci, k, k - 1
        xp = _pad_channel_major(x.data, p)
    else:
        mode, rows, taps, halo = "full", k * k * k * ci, 1, 0
        xp = _pad_channel_major(x.data, p)
    # one [co, rows] matrix per depth tap
    wt = weight.data.transpose(2, 0, 3, 4, 1).reshape(k, co, k * k * ci).astype(dtype, copy=False)
    wmats = np.ascontiguousarray(wt if taps > 1 else wt.transpose(1, 0, 2).reshape(1, co, rows))
    tiles = list(_tiles(b, do, plane, rows, itemsize, halo))

    def columns(n, z0, z1):
        ncols = (z1 - z0 + halo) * plane
        if mode == "pointwise":
            return np.ascontiguousarray(xp[:, n, z0:z1]).reshape(ci, ncols)
        buf = _buffer("cols", (rows, ncols), dtype)
        if mode == "shift":
            return _im2col_plane(xp, n, z0, z1 + halo, k, (ho, wo), buf)
        return _im2col(xp, n, z0, z1, k, s, (ho, wo), buf)

    y = np.empty((b, co) + out_sp, dtype=dtype)
    for n, z0, z1 in tiles:
        cols = columns(n, z0, z1)
        span = (z1 - z0) * plane
        acc = wmats[0] @ cols[:, :span]
        for a in range(1, taps):
            acc += wmats[a] @ cols[:, a * plane : a * plane + span]
        y[n, :, z0:z1] = acc.reshape(co, z1 - z0, ho, wo)
    if bias is not None:
        y += bias.data.astype(dtype, copy=False).reshape(1, co, 1, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gw = np.zeros(wmats.shape, dtype=dtype) if weight.requires_grad else None
        gxp = np.zeros(xp.shape, dtype=dtype) if x.requires_grad else None
        for n, z0, z1 in tiles:
            span = (z1 - z0) * plane
            gm = np.ascontiguousarray(g[n, :, z0:z1]).reshape(co, span)
            if gw is not None:
                cols = columns(n, z0, z1)
                for a in range(taps):
                    gw[a] += gm @ cols[:, a * plane : a * plane + span].T
            if gxp is None:
                continue
            if mode == "pointwise":
                gxp[:, n, z0:z1] = (wmats[0].T @ gm).reshape(ci, z1 - z0, ho, wo)
            elif mode == "full":
                _col2im(np.matmul(wmats[0].T, gm, out=_buffer("gcols", (rows, span), dtype)), gxp, n, z0, z1, k, s,
                        (ho, wo))
            else:
                gcols = _buffer("gcols", (rows, span + halo * plane), dtype)
                gcols[:, span:] = 0
                np.matmul(wmats[0].T, gm, out=gcols[:, :span])
                for a in range(1, taps):
                    gcols[:, a * plane : a * plane + span] += wmats[a].T @ gm
                _col2im_plane(gcols, gxp, n, z0, z1 + halo, k, (ho, wo))
        gx = None
        if gxp is not None:
            if mode != "pointwise":
                gxp = gxp[:, :, p : p + d, p : p + h, p : p + w]
            gx = np.ascontiguousarray(gxp.transpose(1, 0, 2, 3, 4))
        if gw is not None:
            if taps == 1:
                gw = gw.reshape(co, k, k, k, ci).transpose(0, 4, 1, 2, 3)
            else:
                gw = gw.reshape(k, co, k, k, ci).transpose(1, 4, 0, 2, 3)
            gw = np.ascontiguousarray(gw, dtype=weight.dtype)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3, 4)).astype(bias.dtype)

    return make_result(y, parents, backward, "conv3d")


def downsample_stride2(x, weight, bias=None):
    """Halve each spatial axis with a stride-2 convolution (padding ``k // 2``)."""
    x = as_tensor(x)
    if x.ndim != 5 or min(x.shape[2:]) < 2:
        raise ShapeError(f"downsample needs spatial dims >= 2, got {x.shape}")
    return conv3d(x, weight, bias, stride=2, padding=as_tensor(weight).shape[2] // 2)


def upsample_trilinear2x(x):
    """Double each spatial axis with align-corners trilinear weights."""
    x = as_tensor(x)
    if x.ndim != 5 or min(x.shape[2:]) < 2:
        raise ShapeError(f"upsample needs spatial dims >= 2, got {x.shape}")
    mats = [interp.interp_matrix(n, 2 * n, x.dtype) for n in x.shape[2:]]
    data = x.data
    for axis, mat in zip((2, 3, 4), mats):
        data = interp.apply_along(data, mat, axis)
    data = np.ascontiguousarray(data)

    def backward(g):
        for axis, mat in zip((2, 3, 4), mats):
            g = interp.apply_along(g, mat.T, axis)
        return (np.ascontiguousarray(g),)

    return make_result(data, (x,), backward, "upsample_trilinear2x")


def instance_norm(x, gamma, beta, eps=1e-5):
    """Per-(sample, channel) standardisation over spatial axes, then ``gamma * xhat + beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim < 3:
        raise ShapeError(f"instance_norm expects [b, c, ...spatial], got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"instance_norm: gamma/beta {gamma.shape}/{beta.shape} for {c} channels")
    axes = tuple(range(2, x.ndim))
    count = int(np.prod(x.shape[2:]))
    if count < 2:
        raise DegenerateInputError(f"instance_norm needs >= 2 spatial voxels, got {x.shape}")
    bshape = (1, c) + (1,) * len(axes)
    mean = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - mean
    # corrected two-pass: removes the rounding error of a large float32 mean
    centered -= centered.mean(axis=axes, keepdims=True)
    var = np.mean(centered * centered, axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    g_ = gamma.data.reshape(bshape).astype(x.dtype, copy=False)
    y = xhat * g_ + beta.data.reshape(bshape).astype(x.dtype, copy=False)

    def backward(g):
        gx = None
        if x.requires_grad:
            gxhat = g * g_
            m1 = gxhat.mean(axis=axes, keepdims=True)
            m2 = np.mean(gxhat * xhat, axis=axes, keepdims=True)
            gx = inv * (gxhat - m1 - xhat * m2)
        red = (0,) + axes
        ggamma = (g * xhat).sum(axis=red).astype(gamma.dtype) if gamma.requires_grad else None
        gbeta = g.sum(axis=red).astype(beta.dtype) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return make_result(y, (x, gamma, beta), backward, "instance_norm")


def leaky_relu(x, slope=0.01):
    x = as_tensor(x)
    pos = x.data > 0
    scale = np.where(pos, 1.0, slope).astype(x.dtype)
    return make_result(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def relu(x):
    x = as_tensor(x)
    pos = x.data > 0
    return make_result(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,), "relu")


def sigmoid(x):
    x = as_tensor(x)
    y = (0.5 * (np.tanh(0.5 * x.data) + 1.0)).astype(x.dtype)
    return make_result(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def global_avg_pool(x):
    """``[b, c, d, h, w] -> [b, c]``."""
    return reduce_mean(x, axis=tuple(range(2, as_tensor(x).ndim)))


def linear(x, weight, bias=None):
    y = matmul(x, transpose(weight))
    return y if bias is None else add(y, bias)


def soft_dice_loss(pred, target, smooth=1e-5):
    """``1 - (2 sum(p g) + smooth) / (sum(p) + sum(g) + smooth)`` per sample, batch-averaged."""
    pred, target = as_tensor(pred), as_tensor(target, pred)
    if pred.shape != target.shape:
        raise ShapeError(f"soft_dice_loss: pred {pred.shape} vs target {target.shape}")
    p = pred.data
    if p.size and (p.min() < 0 or p.max() > 1 or not np.all(np.isfinite(p))):
        raise DomainError("soft_dice_loss: predictions must lie in [0, 1]")
    t = target.data
    if t.size and not np.all((t == 0) | (t == 1)):
        raise DomainError("soft_dice_loss: target must be binary {0, 1}")
    axes = tuple(range(1, pred.ndim))
    inter = reduce_sum(pred * target, axis=axes)
    denom = reduce_sum(pred, axis=axes) + reduce_sum(target, axis=axes) + smooth
    per_sample = 1.0 - (2.0 * inter + smooth) / denom
    return reduce_mean(per_sample)


def softmax(logits):
    """Row-wise softmax of a plain array (no graph)."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits, labels):
    """Mean of ``-log softmax(logits)[label]`` with max-subtraction."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [batch, classes] logits, got {logits.shape}")
    b, n_cls = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (b,):
        raise ShapeError(f"cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for batch {b}")
    if not np.all(np.equal(np.mod(labels, 1), 0)) or labels.min() < 0 or labels.max() >= n_cls:
        raise DomainError(f"cross_entropy: labels must be class indices in [0, {n_cls})")
    labels = labels.astype(np.int64)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(b)
    loss = np.asarray(np.mean(lse - z[rows, labels]), dtype=logits.dtype)

    def backward(g):
        probs = np.exp(z - lse[:, None])
        probs[rows, labels] -= 1.0
        return ((g / b) * probs).astype(logits.dtype),

    return make_result(loss, (logits,), backward, "cross_entropy")
