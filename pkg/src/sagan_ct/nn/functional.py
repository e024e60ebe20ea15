"""Differentiable ops on NCHW tensors.

Convolutions go through an im2col view (``sliding_window_view``) followed by a
single ``tensordot`` so the heavy lifting stays in BLAS; stride-1 layers with
few output channels instead contract channels first and shift-add the k*k
partial maps, whichever intermediate is smaller. The scatter-add used for the
input gradient of a convolution is the forward pass of the transposed
convolution and vice versa, which keeps the two exact adjoints of each other.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor

# -- convolution helpers -------------------------------------------------------


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _im2col(xp, k, stride):
    """Strided view of shape (N, C, Ho, Wo, k, k) over a padded input."""
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _col2im(cols, out_hw, stride):
    """Scatter-add (N, C, k, k, H, W) patches back into an (N, C, *out_hw) canvas."""
    n, c, k, _, h, w = cols.shape
    out = np.zeros((n, c) + tuple(out_hw), dtype=cols.dtype)
    span_h = stride * (h - 1) + 1
    span_w = stride * (w - 1) + 1
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + span_h:stride, j:j + span_w:stride] += cols[:, :, i, j]
    return out


def conv_output_size(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


def _check_conv(x, w, stride, padding):
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv expects 4-D input and weights, got {x.shape} and {w.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"invalid stride/padding {stride}/{padding}")


def _correlate(xp, w, stride):
    """Cross-correlate a padded input (no further padding) with ``w``."""
    n, c, hp, wp = xp.shape
    o, _, k, _ = w.shape
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    if stride == 1 and o * hp * wp < c * ho * wo:
        # one GEMM over channels on the whole canvas, then k*k shifted adds;
        # cheaper than a patch matrix when there are few output channels
        z = np.tensordot(w, xp, axes=([1], [1]))  # (O, k, k, N, Hp, Wp)
        out = np.zeros((o, n, ho, wo), dtype=np.result_type(xp, w))
        for i in range(k):
            for j in range(k):
                out += z[:, i, j, :, i:i + ho, j:j + wo]
        return np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    cols = _im2col(xp, k, stride)
    # (N, C, Ho, Wo, k, k) x (O, C, k, k) -> (N, Ho, Wo, O)
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _scatter(g, w, padded_hw, stride):
    """Adjoint of ``_correlate`` with respect to its input."""
    k = w.shape[2]
    if stride == 1:
        # full correlation with the flipped, channel-swapped kernel
        flipped = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        out = _correlate(_pad(g, k - 1), flipped, 1)
        hp, wp = padded_hw
        if out.shape[2:] != (hp, wp):
            canvas = np.zeros(out.shape[:2] + (hp, wp), dtype=out.dtype)
            canvas[:, :, :out.shape[2], :out.shape[3]] = out
            out = canvas
        return out
    # (O, C, k, k) x (N, O, Ho, Wo) -> (C, k, k, N, Ho, Wo)
    cols = np.tensordot(w, g, axes=([0], [1]))
    return _col2im(cols.transpose(3, 0, 1, 2, 4, 5), padded_hw, stride)


def _weight_grad(g, xp, k, stride):
    """Gradient of a correlation with respect to its (O, C, k, k) kernel."""
    n, o, ho, wo = g.shape
    c = xp.shape[1]
    gf = g.transpose(1, 0, 2, 3).reshape(o, -1)
    gw = np.empty((o, c, k, k), dtype=np.result_type(g, xp))
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
            gw[:, :, i, j] = gf @ patch.transpose(1, 0, 2, 3).reshape(c, -1).T
    return gw


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation with zero padding; weights are (out, in, k, k)."""
    _check_conv(x, weight, stride, padding)
    n, c, h, w_in = x.shape
    o, ci, k, k2 = weight.shape
    if ci != c or k != k2:
        raise ValueError(f"weights {weight.shape} do not match input channels {c}")
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w_in, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"input {x.shape} too small for kernel {k} stride {stride}")

    xp = _pad(x.data, padding)
    out = _correlate(xp, weight.data, stride)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1)
    padded_hw = xp.shape[2:]

    def backward(g):
        gx = gw = gb = None
        if x.requires_grad:
            gxp = _scatter(g, weight.data, padded_hw, stride)
            gx = gxp[:, :, padding:padding + h, padding:padding + w_in]
        if weight.requires_grad:
            gw = _weight_grad(g, xp, k, stride)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, backward)


def conv_transpose2d(x, weight, bias=None, stride=1, padding=0, output_padding=0):
    """Transposed convolution; weights are (in, out, k, k) as in the adjoint conv.

    Output size is ``stride*(in-1) + k - 2*padding + output_padding``.
    """
    _check_conv(x, weight, stride, padding)
    n, c, h, w_in = x.shape
    ci, o, k, k2 = weight.shape
    if ci != c or k != k2:
        raise ValueError(f"weights {weight.shape} do not match input channels {c}")
    if not 0 <= output_padding < stride and output_padding != 0:
        raise ValueError("output_padding must be smaller than stride")
    ho = stride * (h - 1) + k - 2 * padding + output_padding
    wo = stride * (w_in - 1) + k - 2 * padding + output_padding
    if ho < 1 or wo < 1:
        raise ValueError(f"transposed conv output would be empty for input {x.shape}")

    padded_hw = (ho + 2 * padding, wo + 2 * padding)
    full = _scatter(x.data, weight.data, padded_hw, stride)
    out = np.ascontiguousarray(full[:, :, padding:padding + ho, padding:padding + wo])
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1)

    def backward(g):
        gx = gw = gb = None
        gp = _pad(g, padding)
        if x.requires_grad:
            gx = _correlate(gp, weight.data, stride)[:, :, :h, :w_in]
        if weight.requires_grad:
            # roles swap: x acts as the output gradient of the adjoint conv
            gw = _weight_grad(x.data, gp, k, stride)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, backward)


# -- normalization -------------------------------------------------------------


def batch_norm2d(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Per-channel batch normalization.

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` (plain arrays) are updated in place; the running variance
    tracks the unbiased estimate.
    """
    n, c, h, w = x.shape
    count = n * h * w
    xd = x.data
    if training:
        if count < 2:
            raise ValueError("batch norm in training mode needs more than one value per channel")
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * count / (count - 1)
    else:
        mean = running_mean
        var = running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mean.reshape(1, c, 1, 1).astype(xd.dtype)) * inv_std.reshape(1, c, 1, 1)
    out = xhat * gamma.data.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1)

    def backward(g):
        gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(1, c, 1, 1)
            if training:
                m1 = gxhat.mean(axis=(0, 2, 3), keepdims=True)
                m2 = (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
                gx = (gxhat - m1 - xhat * m2) * inv_std.reshape(1, c, 1, 1)
            else:
                gx = gxhat * inv_std.reshape(1, c, 1, 1)
        return gx, gg, gb

    return Tensor._make(out, (x, gamma, beta), backward)


# -- activations ---------------------------------------------------------------


def relu(x):
    mask = x.data > 0
    return Tensor._make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def leaky_relu(x, slope=0.2):
    scale = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return Tensor._make(x.data * scale, (x,), lambda g: (g * scale,))


def tanh(x):
    y = np.tanh(x.data)
    return Tensor._make(y, (x,), lambda g: (g * (1 - y * y),))


def sigmoid(x):
    y = 0.5 * (1 + np.tanh(0.5 * x.data))
    return Tensor._make(y, (x,), lambda g: (g * y * (1 - y),))


# -- structure -----------------------------------------------------------------


def concat_channels(a, b):
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return Tensor._make(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def residual_add(a, b):
    if a.shape != b.shape:
        raise ValueError(f"residual shapes differ: {a.shape} vs {b.shape}")
    return a + b


# -- losses --------------------------------------------------------------------


def _check_same(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def l1_loss(a, b):
    _check_same(a, b, "l1_loss")
    return (a - b).abs().mean()


def mse_loss(a, b):
    _check_same(a, b, "mse_loss")
    return ((a - b) ** 2).mean()


def lsgan_loss(d_out, target):
    """Least-squares adversarial term mean((D - target)^2) for target 0 or 1."""
    if target not in (0, 1):
        raise ValueError("lsgan target must be 0 or 1")
    return ((d_out - float(target)) ** 2).mean()
