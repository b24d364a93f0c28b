"""Differentiable operators over :class:`~mga.tensor.Tensor`.

Only the operator set the saliency network needs is provided. Each function
computes its forward value with numpy and registers a backward closure that
returns one gradient per input (``None`` for non-differentiable inputs).
"""

from __future__ import annotations

from typing import Optional, Sequence, Union

import numpy as np
from scipy.special import expit

from .errors import DimensionError, NonFiniteError, ValidationError
from .tensor import Tensor

Scalar = Union[int, float]

BCE_EPS = 1e-7


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# --------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    """Elementwise sum with numpy broadcasting; gradients are reduce-summed."""
    if np.ndim(b) == 0 and not isinstance(b, Tensor):
        a = as_tensor(a)
        c = float(b)
        return Tensor._from_op(a.data + c, (a,), lambda g: (g,), "add_scalar")
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "elem_add")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._from_op(a.data + b.data, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    if np.ndim(b) == 0 and not isinstance(b, Tensor):
        return scale(as_tensor(a), float(b))
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "elem_mul")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(ad * bd, (a, b), backward, "mul")


elem_add = add
elem_mul = mul


def scale(x: Tensor, c: Scalar) -> Tensor:
    c = float(c)
    return Tensor._from_op(x.data * c, (x,), lambda g: (g * c,), "scale")


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(g.reshape(()), shape).copy(),)

    return Tensor._from_op(np.array(x.data.sum()), (x,), backward, "sum")


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size

    def backward(g):
        return (np.full(shape, float(g.reshape(())) / n),)

    return Tensor._from_op(np.array(x.data.mean()), (x,), backward, "mean")


# --------------------------------------------------------------------------
# activations


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)
    return Tensor._from_op(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ValidationError(f"softmax axis {axis} out of range for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(y, (x,), backward, "softmax")


# --------------------------------------------------------------------------
# convolution


def _conv_out(n: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """2-D cross-correlation, NCHW layout, lowered to one matrix product.

    Output extent is ``floor((H + 2p - d(k-1) - 1) / s) + 1`` per axis.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if cin != wcin:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs weight {weight.shape}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValidationError(f"conv2d needs stride>=1, dilation>=1, padding>=0 (got {stride}, {dilation}, {padding})")
    if dilation * (kh - 1) + 1 > h + 2 * padding or dilation * (kw - 1) + 1 > w + 2 * padding:
        raise DimensionError(f"conv2d kernel extent exceeds padded input: input {x.shape}, weight {weight.shape}, "
                             f"padding {padding}, dilation {dilation}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d bias shape {bias.shape} does not match {cout} output channels")

    ho = _conv_out(h, kh, stride, padding, dilation)
    wo = _conv_out(w, kw, stride, padding, dilation)
    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0

    if pointwise:
        cols = x.data.transpose(1, 0, 2, 3).reshape(cin, n * h * w)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
        cols6 = np.empty((cin, kh, kw, n, ho, wo))
        for i in range(kh):
            for j in range(kw):
                hs, ws = i * dilation, j * dilation
                patch = xp[:, :, hs:hs + stride * (ho - 1) + 1:stride, ws:ws + stride * (wo - 1) + 1:stride]
                cols6[:, i, j] = patch.transpose(1, 0, 2, 3)
        cols = cols6.reshape(cin * kh * kw, n * ho * wo)

    w2 = weight.data.reshape(cout, -1)
    out = w2 @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        gw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = w2.T @ g2
            if pointwise:
                gx = gcols.reshape(cin, n, h, w).transpose(1, 0, 2, 3)
            else:
                gcols6 = gcols.reshape(cin, kh, kw, n, ho, wo)
                gxp = np.zeros((n, cin, h + 2 * padding, w + 2 * padding))
                for i in range(kh):
                    for j in range(kw):
                        hs, ws = i * dilation, j * dilation
                        gxp[:, :, hs:hs + stride * (ho - 1) + 1:stride, ws:ws + stride * (wo - 1) + 1:stride] += \
                            gcols6[:, i, j].transpose(1, 0, 2, 3)
                gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return (gx, gw) if bias is None else (gx, gw, gb)

    return Tensor._from_op(out, parents, backward, "conv2d")


# --------------------------------------------------------------------------
# pooling, resampling, concatenation


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes, keeping them as unit dims: [N,C,H,W] -> [N,C,1,1]."""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    if h * w < 1:
        raise DimensionError("global_avg_pool on empty spatial extent")

    def backward(g):
        return (np.broadcast_to(g / (h * w), x.shape).copy(),)

    return Tensor._from_op(x.data.mean(axis=(2, 3), keepdims=True), (x,), backward, "gap")


def avg_pool(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping ``factor`` x ``factor`` mean pooling."""
    n, c, h, w = x.shape
    if factor == 1:
        return x
    if h % factor or w % factor:
        raise DimensionError(f"avg_pool factor {factor} does not divide spatial shape {x.shape[2:]}")
    ho, wo = h // factor, w // factor
    y = x.data.reshape(n, c, ho, factor, wo, factor).mean(axis=(3, 5))

    def backward(g):
        gg = np.repeat(np.repeat(g, factor, axis=2), factor, axis=3)
        return (gg / (factor * factor),)

    return Tensor._from_op(y, (x,), backward, "avg_pool")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat of an empty sequence")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for k, (a, b) in enumerate(zip(t.shape, ref)) if k != axis % len(ref)):
            raise DimensionError(f"concat along axis {axis}: shapes {ref} and {t.shape} disagree")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row i holds the weights producing output i from inputs (align_corners=False)."""
    m = np.zeros((n_out, n_in))
    ratio = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * ratio - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[i, i0] += 1.0 - lam
        m[i, i1] += lam
    return m


def bilinear_upsample(x: Tensor, factor: Optional[int] = None, size: Optional[tuple[int, int]] = None) -> Tensor:
    """Bilinear resize with half-pixel centres (``align_corners=False``).

    Give either an integer ``factor`` or an explicit output ``size``.
    """
    n, c, h, w = x.shape
    if size is None:
        if factor is None or int(factor) != factor or factor < 1:
            raise ValidationError(f"upsample factor must be a positive integer, got {factor}")
        size = (h * int(factor), w * int(factor))
    ho, wo = size
    if (ho, wo) == (h, w):
        return x
    ah = _interp_matrix(h, ho)
    aw = _interp_matrix(w, wo)
    y = np.einsum("ij,ncjk,lk->ncil", ah, x.data, aw, optimize=True)

    def backward(g):
        return (np.einsum("ij,ncil,lk->ncjk", ah, g, aw, optimize=True),)

    return Tensor._from_op(y, (x,), backward, "upsample")


# --------------------------------------------------------------------------
# normalization


class RunningStats:
    """Per-channel moving mean/variance used by :func:`channel_norm` in frozen mode."""

    def __init__(self, channels: int, momentum: float = 0.1):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)
        self.momentum = momentum


def channel_norm(x: Tensor, scale: Tensor, shift: Tensor, *, eps: float = 1e-5,
                 stats: Optional[RunningStats] = None, training: bool = True) -> Tensor:
    """Normalize each channel over (N, H, W) then apply a per-channel affine map.

    In training mode the batch statistics are used and, when ``stats`` is
    given, folded into its moving averages. With ``training=False`` the stored
    statistics are used instead.
    """
    n, c, h, w = x.shape
    if scale.shape != (c,) or shift.shape != (c,):
        raise DimensionError(f"channel_norm affine shapes {scale.shape}/{shift.shape} do not match {c} channels")
    gamma = scale.data.reshape(1, c, 1, 1)
    beta = shift.data.reshape(1, c, 1, 1)
    m = n * h * w

    if training:
        mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        if stats is not None:
            k = stats.momentum
            unbiased = var.reshape(c) * (m / (m - 1)) if m > 1 else var.reshape(c)
            stats.mean = (1 - k) * stats.mean + k * mu.reshape(c)
            stats.var = (1 - k) * stats.var + k * unbiased
    else:
        if stats is None:
            raise ValidationError("frozen channel_norm needs running statistics")
        mu = stats.mean.reshape(1, c, 1, 1)
        var = stats.var.reshape(1, c, 1, 1)
        xc = x.data - mu

    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma + beta

    def backward(g):
        gg = g * gamma
        if training:
            gx = inv * (gg - gg.mean(axis=(0, 2, 3), keepdims=True)
                        - xhat * (gg * xhat).mean(axis=(0, 2, 3), keepdims=True))
        else:
            gx = gg * inv
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return Tensor._from_op(y, (x, scale, shift), backward, "channel_norm")


# --------------------------------------------------------------------------
# loss


def bce_loss(pred: Tensor, target, eps: float = BCE_EPS, weight=None) -> Tensor:
    """Mean binary cross-entropy; ``pred`` is clamped to ``[eps, 1-eps]``.

    ``weight`` (broadcastable to ``pred``, e.g. one value per sample as [N,1,1,1])
    turns the mean into a weighted mean; an all-zero weight gives a zero loss.
    """
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=float)
    if t.shape != pred.shape:
        raise DimensionError(f"bce_loss shape mismatch: pred {pred.shape} vs target {t.shape}")
    if not np.all(np.isfinite(pred.data)):
        raise NonFiniteError("non-finite prediction reached bce_loss")
    if np.any(t < 0) or np.any(t > 1):
        raise ValidationError("bce_loss target values must lie in [0, 1]")
    if weight is None:
        w = np.ones(pred.shape)
    else:
        try:
            w = np.broadcast_to(np.asarray(weight, dtype=float), pred.shape)
        except ValueError:
            raise DimensionError(f"bce_loss weight {np.shape(weight)} does not broadcast to {pred.shape}") from None
        if np.any(w < 0):
            raise ValidationError("bce_loss weights must be non-negative")
    total = w.sum()
    p = np.clip(pred.data, eps, 1.0 - eps)
    inside = (pred.data >= eps) & (pred.data <= 1.0 - eps)
    per = -(t * np.log(p) + (1.0 - t) * np.log1p(-p))
    loss = (w * per).sum() / total if total > 0 else 0.0

    def backward(g):
        if total == 0:
            return (np.zeros(pred.shape),)
        dp = w * (p - t) / (p * (1.0 - p)) / total
        return (float(g.reshape(())) * dp * inside,)

    return Tensor._from_op(np.array(loss), (pred,), backward, "bce")
