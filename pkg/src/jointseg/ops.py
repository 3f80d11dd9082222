"""Differentiable operations over :class:`~jointseg.tensor.Tensor`.

Every function takes an optional ``g`` (the recording graph). With
``g=None`` only the forward value is computed, which is what evaluation
paths use. Shapes must match exactly; there is no broadcasting. All
operations preserve the input dtype so the same code runs in float32
for training and float64 for verification.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Graph, Tensor

LOG_FLOOR = 1e-12  # keeps -y*log(p) finite when softmax underflows in float32


def _result(tag: str, g: Optional[Graph], inputs: Sequence[Tensor],
            out_data: np.ndarray, backward_fn) -> Tensor:
    out = Tensor(out_data, requires_grad=any(t.requires_grad for t in inputs))
    if g is not None and out.requires_grad:
        g.record(tag, inputs, out, backward_fn(out))
    return out


def _require_same_shape(tag: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{tag}: shape mismatch {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise ValueError(f"{tag}: dtype mismatch {a.dtype} vs {b.dtype}")


def _scalar(x: Tensor, value: float):
    return x.data.dtype.type(value)


def ew_add(a: Tensor, b: Tensor, g: Optional[Graph] = None) -> Tensor:
    _require_same_shape("ew_add", a, b)

    def bwd(out):
        def fn(go):
            a.accumulate_grad(go)
            b.accumulate_grad(go)
        return fn

    return _result("ew_add", g, (a, b), a.data + b.data, bwd)


def ew_mul(a: Tensor, b: Tensor, g: Optional[Graph] = None) -> Tensor:
    """Elementwise product; the masking primitive."""
    _require_same_shape("ew_mul", a, b)

    def bwd(out):
        def fn(go):
            a.accumulate_grad(go * b.data)
            b.accumulate_grad(go * a.data)
        return fn

    return _result("ew_mul", g, (a, b), a.data * b.data, bwd)


def ew_div(a: Tensor, b: Tensor, g: Optional[Graph] = None) -> Tensor:
    """Elementwise quotient. Caller guarantees the denominator is nonzero."""
    _require_same_shape("ew_div", a, b)
    out_data = a.data / b.data

    def bwd(out):
        def fn(go):
            a.accumulate_grad(go / b.data)
            b.accumulate_grad(-go * out.data / b.data)
        return fn

    return _result("ew_div", g, (a, b), out_data, bwd)


def scale(x: Tensor, s: float, g: Optional[Graph] = None) -> Tensor:
    sv = _scalar(x, s)

    def bwd(out):
        def fn(go):
            x.accumulate_grad(go * sv)
        return fn

    return _result("scale", g, (x,), x.data * sv, bwd)


def shift(x: Tensor, s: float, g: Optional[Graph] = None) -> Tensor:
    """Add a scalar constant."""

    def bwd(out):
        def fn(go):
            x.accumulate_grad(go)
        return fn

    return _result("shift", g, (x,), x.data + _scalar(x, s), bwd)


def relu(x: Tensor, g: Optional[Graph] = None) -> Tensor:
    out_data = np.maximum(x.data, 0)

    def bwd(out):
        mask = x.data > 0

        def fn(go):
            x.accumulate_grad(go * mask)
        return fn

    return _result("relu", g, (x,), out_data, bwd)


def sigmoid(x: Tensor, g: Optional[Graph] = None) -> Tensor:
    d = x.data
    out_data = np.empty_like(d)
    pos = d >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def bwd(out):
        def fn(go):
            x.accumulate_grad(go * out.data * (1 - out.data))
        return fn

    return _result("sigmoid", g, (x,), out_data, bwd)


def log(x: Tensor, g: Optional[Graph] = None) -> Tensor:
    """Natural log with the argument clamped to >= LOG_FLOOR.

    Below the floor the output is constant, so the gradient there is zero.
    """
    floor = _scalar(x, LOG_FLOOR)
    clamped = np.maximum(x.data, floor)
    out_data = np.log(clamped)

    def bwd(out):
        def fn(go):
            dx = go / clamped
            dx[x.data < floor] = 0
            x.accumulate_grad(dx)
        return fn

    return _result("log", g, (x,), out_data, bwd)


def reduce_sum(x: Tensor, g: Optional[Graph] = None) -> Tensor:
    out_data = np.array(x.data.sum(), dtype=x.data.dtype)

    def bwd(out):
        def fn(go):
            x.accumulate_grad(np.full_like(x.data, go))
        return fn

    return _result("reduce_sum", g, (x,), out_data, bwd)


def reshape(x: Tensor, shape: tuple[int, ...], g: Optional[Graph] = None) -> Tensor:
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise ValueError(f"reshape: cannot view {x.shape} as {shape}")

    def bwd(out):
        def fn(go):
            x.accumulate_grad(go.reshape(x.shape))
        return fn

    return _result("reshape", g, (x,), x.data.reshape(shape), bwd)


def channel_slice(x: Tensor, c: int, g: Optional[Graph] = None) -> Tensor:
    """Select channel ``c`` of a CxHxW tensor, keeping a 1xHxW shape."""
    if x.data.ndim != 3:
        raise ValueError(f"channel_slice expects CxHxW, got shape {x.shape}")
    if not 0 <= c < x.shape[0]:
        raise ValueError(f"channel_slice: channel {c} out of range for {x.shape}")

    def bwd(out):
        def fn(go):
            dx = np.zeros_like(x.data)
            dx[c:c + 1] = go
            x.accumulate_grad(dx)
        return fn

    return _result("channel_slice", g, (x,), x.data[c:c + 1].copy(), bwd)


def concat_channels(parts: Sequence[Tensor], g: Optional[Graph] = None) -> Tensor:
    """Concatenate CxHxW tensors along the channel axis."""
    if not parts:
        raise ValueError("concat_channels: need at least one tensor")
    hw = parts[0].shape[1:]
    for t in parts:
        if t.data.ndim != 3 or t.shape[1:] != hw:
            raise ValueError(
                f"concat_channels: spatial mismatch {[p.shape for p in parts]}")
        if t.dtype != parts[0].dtype:
            raise ValueError("concat_channels: mixed dtypes")
    out_data = np.concatenate([t.data for t in parts], axis=0)

    def bwd(out):
        def fn(go):
            off = 0
            for t in parts:
                c = t.shape[0]
                t.accumulate_grad(go[off:off + c])
                off += c
        return fn

    return _result("concat_channels", g, tuple(parts), out_data, bwd)


def softmax_channel(logits: Tensor, g: Optional[Graph] = None) -> Tensor:
    """Per-pixel softmax over the channel axis of a CxHxW tensor."""
    if logits.data.ndim != 3 or logits.shape[0] < 2:
        raise ValueError(f"softmax_channel expects CxHxW with C >= 2, got {logits.shape}")
    shifted = logits.data - logits.data.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=0, keepdims=True)

    def bwd(out):
        def fn(go):
            s = out.data
            inner = (go * s).sum(axis=0, keepdims=True)
            logits.accumulate_grad(s * (go - inner))
        return fn

    return _result("softmax_channel", g, (logits,), out_data, bwd)


def dropout(x: Tensor, p: float, train: bool, rng: Optional[np.random.Generator] = None,
            g: Optional[Graph] = None) -> Tensor:
    """Inverted dropout: scales kept units by 1/(1-p) at train time.

    Eval mode is the identity. Train mode draws one mask from ``rng``,
    so a fixed seed fixes the mask.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if not train:
        def bwd_eval(out):
            def fn(go):
                x.accumulate_grad(go)
            return fn
        return _result("dropout", g, (x,), x.data.copy(), bwd_eval)

    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype)
    mask = keep / _scalar(x, 1.0 - p)

    def bwd(out):
        def fn(go):
            x.accumulate_grad(go * mask)
        return fn

    return _result("dropout", g, (x,), x.data * mask, bwd)


def max_pool2(x: Tensor, g: Optional[Graph] = None) -> Tensor:
    """2x2 max pooling with stride 2 on a CxHxW tensor (H, W even)."""
    if x.data.ndim != 3:
        raise ValueError(f"max_pool2 expects CxHxW, got {x.shape}")
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"max_pool2 needs even H and W, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    windows = np.ascontiguousarray(
        x.data.reshape(c, h2, 2, w2, 2).transpose(0, 1, 3, 2, 4)).reshape(c, h2, w2, 4)
    idx = windows.argmax(axis=3)
    out_data = np.take_along_axis(windows, idx[..., None], axis=3)[..., 0]

    def bwd(out):
        def fn(go):
            scat = np.zeros((c, h2, w2, 4), dtype=go.dtype)
            np.put_along_axis(scat, idx[..., None], go[..., None], axis=3)
            dx = scat.reshape(c, h2, w2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, w)
            x.accumulate_grad(dx)
        return fn

    return _result("max_pool2", g, (x,), out_data, bwd)


def upsample2(x: Tensor, g: Optional[Graph] = None) -> Tensor:
    """Nearest-neighbor 2x upsampling of a CxHxW tensor."""
    if x.data.ndim != 3:
        raise ValueError(f"upsample2 expects CxHxW, got {x.shape}")
    c, h, w = x.shape
    out_data = x.data.repeat(2, axis=1).repeat(2, axis=2)

    def bwd(out):
        def fn(go):
            x.accumulate_grad(go.reshape(c, h, 2, w, 2).sum(axis=(2, 4)))
        return fn

    return _result("upsample2", g, (x,), out_data, bwd)


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, padding: int,
           g: Optional[Graph] = None) -> Tensor:
    """2-D cross-correlation of CxHxW input with FxCxkxk kernels.

    Zero padding; stride 1. ``padding=(k-1)//2`` keeps the spatial size.
    Implemented as im2col plus one matmul per pass so float32 training
    stays fast.
    """
    if x.data.ndim != 3:
        raise ValueError(f"conv2d expects CxHxW input, got {x.shape}")
    if kernels.data.ndim != 4 or kernels.shape[2] != kernels.shape[3]:
        raise ValueError(f"conv2d expects FxCxkxk kernels, got {kernels.shape}")
    c, h, w = x.shape
    f, ck, k, _ = kernels.shape
    if ck != c:
        raise ValueError(f"conv2d: input has {c} channels but kernels expect {ck}")
    if k % 2 == 0:
        raise ValueError(f"conv2d: kernel size must be odd, got {k}")
    if bias.shape != (f,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({f},)")
    if not (x.dtype == kernels.dtype == bias.dtype):
        raise ValueError(
            f"conv2d: dtype mismatch {x.dtype}/{kernels.dtype}/{bias.dtype}")
    if padding < 0:
        raise ValueError(f"conv2d: padding must be >= 0, got {padding}")
    ho, wo = h + 2 * padding - k + 1, w + 2 * padding - k + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d: kernel {k} too large for padded {h}x{w} input")

    if padding:
        xp = np.zeros((c, h + 2 * padding, w + 2 * padding), dtype=x.data.dtype)
        xp[:, padding:padding + h, padding:padding + w] = x.data
    else:
        xp = x.data
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # (C, Ho, Wo, k, k)
    col = np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4)).reshape(ho * wo, c * k * k)
    wmat = kernels.data.reshape(f, c * k * k)
    out_data = (wmat @ col.T).reshape(f, ho, wo)  # contiguous, no copy after
    out_data += bias.data[:, None, None]

    def bwd(out):
        def fn(go):
            go_mat = go.reshape(f, ho * wo)
            bias.accumulate_grad(go.sum(axis=(1, 2)))
            kernels.accumulate_grad((go_mat @ col).reshape(kernels.shape))
            if x.requires_grad:
                # (c, k, k, Ho*Wo) keeps each shifted block contiguous
                dcol = (wmat.T @ go_mat).reshape(c, k, k, ho, wo)
                dxp = np.zeros((c, h + 2 * padding, w + 2 * padding), dtype=go.dtype)
                for i in range(k):
                    for j in range(k):
                        dxp[:, i:i + ho, j:j + wo] += dcol[:, i, j]
                if padding:
                    dxp = dxp[:, padding:padding + h, padding:padding + w]
                x.accumulate_grad(dxp)
        return fn

    return _result("conv2d", g, (x, kernels, bias), out_data, bwd)
