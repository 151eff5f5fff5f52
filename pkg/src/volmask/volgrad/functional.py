"""Differentiable layer ops for 5-D volumetric batches (N, C, D, H, W).

Every op computes its forward with numpy and, when a tape is recording one of
its inputs, registers a closure mapping the output gradient to input gradients.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, recording_tape

_SPATIAL = (2, 3, 4)
_BN_AXES = (0, 2, 3, 4)


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


def _needs(tape, *inputs):
    return [tape.is_tracked(t) for t in inputs]


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """3-D cross-correlation with a cubic or box kernel."""
    xd, wd = x.data, weight.data
    if xd.ndim != 5 or wd.ndim != 5:
        raise DimensionError(f"conv3d expects 5-D input and weight, got {xd.shape} and {wd.shape}")
    if xd.shape[1] != wd.shape[1]:
        raise DimensionError(f"input has {xd.shape[1]} channels but weight expects {wd.shape[1]}")
    if bias is not None and bias.shape != (wd.shape[0],):
        raise DimensionError(f"bias shape {bias.shape} does not match {wd.shape[0]} output channels")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be positive and padding non-negative")
    p, s = padding, stride
    ksize = wd.shape[2:]
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else xd
    if any(k > e for k, e in zip(ksize, xp.shape[2:])):
        raise DimensionError(f"kernel {ksize} larger than padded extent {xp.shape[2:]}")
    win = sliding_window_view(xp, ksize, axis=_SPATIAL)[:, :, ::s, ::s, ::s]
    out = np.tensordot(win, wd, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    out = np.moveaxis(out, -1, 1)
    if bias is not None:
        out = out + bias.data[None, :, None, None, None]
    result = Tensor(out, dtype=xd.dtype)

    tape = recording_tape(x, weight, bias)
    if tape is not None:
        need_x, need_w, need_b = _needs(tape, x, weight, bias)
        out_sp = result.shape[2:]

        def backward(g):
            gx = gw = gb = None
            if need_x:
                cols = np.tensordot(g, wd, axes=([1], [0]))  # N, D', H', W', Cin, kd, kh, kw
                gxp = np.zeros(xp.shape, dtype=g.dtype)
                for i in range(ksize[0]):
                    si = slice(i, i + s * (out_sp[0] - 1) + 1, s)
                    for j in range(ksize[1]):
                        sj = slice(j, j + s * (out_sp[1] - 1) + 1, s)
                        for k in range(ksize[2]):
                            sk = slice(k, k + s * (out_sp[2] - 1) + 1, s)
                            gxp[:, :, si, sj, sk] += np.moveaxis(cols[..., i, j, k], -1, 1)
                gx = gxp[:, :, p:p + xd.shape[2], p:p + xd.shape[3], p:p + xd.shape[4]] if p else gxp
            if need_w:
                gw = np.tensordot(g, win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
            if need_b:
                gb = g.sum(axis=_BN_AXES)
            return gx, gw, gb

        tape.record(result, (x, weight, bias), backward)
    return result


def batchnorm3d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization.

    In training mode the batch statistics normalize the input and the running
    estimates are updated in place (unbiased variance, as is conventional).
    In eval mode only the running estimates are used.
    """
    xd = x.data
    C = xd.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,) or running_mean.shape != (C,) or running_var.shape != (C,):
        raise DimensionError(f"batchnorm parameters must have length {C}")
    bshape = (1, C, 1, 1, 1)
    if training:
        count = xd.size // C if C else 0
        if count == 0:
            raise ValueError("batchnorm3d in train mode needs a non-empty batch")
        mean = xd.mean(axis=_BN_AXES)
        var = xd.var(axis=_BN_AXES)
        unbiased = var * count / (count - 1) if count > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mean, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mean.reshape(bshape).astype(xd.dtype)) * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    result = Tensor(out, dtype=xd.dtype)

    tape = recording_tape(x, gamma, beta)
    if tape is not None:
        need_x, need_g, need_b = _needs(tape, x, gamma, beta)
        gam = gamma.data.reshape(bshape)

        def backward(g):
            gx = gg = gb = None
            if need_x:
                dxhat = g * gam
                if training:
                    m = xd.size // C
                    gx = (inv_std.reshape(bshape) / m) * (
                        m * dxhat
                        - dxhat.sum(axis=_BN_AXES, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=_BN_AXES, keepdims=True)
                    )
                else:
                    gx = dxhat * inv_std.reshape(bshape)
            if need_g:
                gg = (g * xhat).sum(axis=_BN_AXES)
            if need_b:
                gb = g.sum(axis=_BN_AXES)
            return gx, gg, gb

        tape.record(result, (x, gamma, beta), backward)
    return result


def leaky_relu(x: Tensor, negative_slope: float = 0.01) -> Tensor:
    # derivative at exactly 0 is taken as 1
    xd = x.data
    pos = xd >= 0
    result = Tensor(np.where(pos, xd, negative_slope * xd), dtype=xd.dtype)
    tape = recording_tape(x)
    if tape is not None:
        def backward(g):
            return (np.where(pos, g, negative_slope * g),)

        tape.record(result, (x,), backward)
    return result


def maxpool3d(x: Tensor, kernel: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping max pooling; trailing voxels that do not fill a window are dropped.

    Ties go to the first element of the window in row-major order, for both
    the value and the gradient routing.
    """
    if kernel != stride:
        raise ValueError("only non-overlapping pooling (kernel == stride) is supported")
    xd = x.data
    N, C, D, H, W = xd.shape
    k = kernel
    Do, Ho, Wo = D // k, H // k, W // k
    if min(Do, Ho, Wo) < 1:
        raise DimensionError(f"spatial extent {(D, H, W)} smaller than pooling kernel {k}")
    xc = xd[:, :, : Do * k, : Ho * k, : Wo * k]
    win = xc.reshape(N, C, Do, k, Ho, k, Wo, k).transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(N, C, Do, Ho, Wo, k**3)
    idx = win.argmax(axis=-1)[..., None]
    out = np.take_along_axis(win, idx, axis=-1)[..., 0]
    result = Tensor(out, dtype=xd.dtype)

    tape = recording_tape(x)
    if tape is not None:
        def backward(g):
            gwin = np.zeros(win.shape, dtype=g.dtype)
            np.put_along_axis(gwin, idx, g[..., None], axis=-1)
            gc = gwin.reshape(N, C, Do, Ho, Wo, k, k, k).transpose(0, 1, 2, 5, 3, 6, 4, 7).reshape(N, C, Do * k, Ho * k, Wo * k)
            if gc.shape == xd.shape:
                return (gc,)
            gx = np.zeros(xd.shape, dtype=g.dtype)
            gx[:, :, : Do * k, : Ho * k, : Wo * k] = gc
            return (gx,)

        tape.record(result, (x,), backward)
    return result


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    xd, wd = x.data, weight.data
    if xd.ndim != 2 or wd.ndim != 2 or xd.shape[1] != wd.shape[1]:
        raise DimensionError(f"linear: input {xd.shape} incompatible with weight {wd.shape}")
    out = xd @ wd.T
    if bias is not None:
        if bias.shape != (wd.shape[0],):
            raise DimensionError(f"bias shape {bias.shape} does not match {wd.shape[0]} outputs")
        out = out + bias.data
    result = Tensor(out, dtype=xd.dtype)
    tape = recording_tape(x, weight, bias)
    if tape is not None:
        need_x, need_w, need_b = _needs(tape, x, weight, bias)

        def backward(g):
            return (
                g @ wd if need_x else None,
                g.T @ xd if need_w else None,
                g.sum(axis=0) if need_b else None,
            )

        tape.record(result, (x, weight, bias), backward)
    return result


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate) so eval mode is the identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an explicit rng")
    scale = 1.0 / (1.0 - rate)
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) * x.dtype.type(scale)
    result = Tensor(x.data * keep, dtype=x.dtype)
    tape = recording_tape(x)
    if tape is not None:
        tape.record(result, (x,), lambda g: (g * keep,))
    return result


def flatten(x: Tensor) -> Tensor:
    """Row-major flatten of all non-batch axes."""
    shape = x.shape
    result = Tensor(x.data.reshape(shape[0], -1))
    tape = recording_tape(x)
    if tape is not None:
        tape.record(result, (x,), lambda g: (g.reshape(shape),))
    return result


def crop_spatial(x: Tensor, extents: tuple[int, int, int]) -> Tensor:
    """Keep the leading ``extents`` voxels of each spatial axis."""
    shape = x.shape
    D, H, W = extents
    if (D, H, W) == tuple(shape[2:]):
        return x
    result = Tensor(x.data[:, :, :D, :H, :W])
    tape = recording_tape(x)
    if tape is not None:
        def backward(g):
            gx = np.zeros(shape, dtype=g.dtype)
            gx[:, :, :D, :H, :W] = g
            return (gx,)

        tape.record(result, (x,), backward)
    return result


def pad_spatial_end(x: Tensor, extents: tuple[int, int, int]) -> Tensor:
    """Zero-pad the far end of each spatial axis up to ``extents``."""
    shape = x.shape
    pads = [e - s for e, s in zip(extents, shape[2:])]
    if any(p < 0 for p in pads):
        raise DimensionError(f"cannot pad {shape[2:]} down to {extents}")
    if not any(pads):
        return x
    out = np.pad(x.data, ((0, 0), (0, 0), (0, pads[0]), (0, pads[1]), (0, pads[2])))
    result = Tensor(out, dtype=x.dtype)
    tape = recording_tape(x)
    if tape is not None:
        D, H, W = shape[2:]
        tape.record(result, (x,), lambda g: (g[:, :, :D, :H, :W],))
    return result


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: Tensor) -> Tensor:
    z = logits.data
    if z.ndim != 2:
        raise DimensionError(f"softmax expects (N, K) logits, got {z.shape}")
    p = np.exp(_log_softmax(z))
    result = Tensor(p, dtype=z.dtype)
    tape = recording_tape(logits)
    if tape is not None:
        def backward(g):
            return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

        tape.record(result, (logits,), backward)
    return result


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    z = logits.data
    labels = np.asarray(labels, dtype=np.int64)
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise DimensionError(f"logits {z.shape} and labels {labels.shape} disagree")
    if labels.size and (labels.min() < 0 or labels.max() >= z.shape[1]):
        raise ValueError("labels out of range")
    n = z.shape[0]
    logp = _log_softmax(z)
    loss = -logp[np.arange(n), labels].mean()
    result = Tensor(np.asarray(loss, dtype=z.dtype))
    tape = recording_tape(logits)
    if tape is not None:
        def backward(g):
            d = np.exp(logp)
            d[np.arange(n), labels] -= 1.0
            return (d * (g / n),)

        tape.record(result, (logits,), backward)
    return result
