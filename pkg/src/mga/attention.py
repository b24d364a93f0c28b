"""Motion guided attention blocks and the naive fusion baselines.

Every block takes an appearance feature ``f_a`` of shape [N,C,H,W] and a
motion input that is either a feature tensor [N,C',H,W] or a saliency map
[N,1,H,W], and returns a tensor shaped like ``f_a``.

    MGA_M    f_a * P + f_a
    MGA_T    f_a * g(f_m) + f_a
    MGA_TM   f_a * sigmoid(h(f_m)) + f_a
    MGA_TMC  s = f_a * sigmoid(h(f_m));  s * (C * softmax(h'(gap(s)))) + f_a
    CONCAT   conv1x1([f_a, m])
    MUL      f_a * align(m)
    ADD      f_a + align(m)

``g``, ``h``, ``h'`` and ``align`` are 1x1 convolutions with bias.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, fields
from typing import Iterator, Optional

import numpy as np

from . import ops
from .errors import DimensionError, ValidationError
from .tensor import Parameter, Tensor


class AttentionKind(str, enum.Enum):
    MGA_M = "mga_m"
    MGA_T = "mga_t"
    MGA_TM = "mga_tm"
    MGA_TMC = "mga_tmc"
    CONCAT = "concat"
    MUL = "mul"
    ADD = "add"
    # Identity wiring: the appearance feature passes through untouched.
    NONE = "none"

    @classmethod
    def parse(cls, value) -> "AttentionKind":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        for kind in cls:
            if kind.value == key or kind.name.lower() == key:
                return kind
        raise ValidationError(f"unknown attention kind {value!r}; expected one of {[k.value for k in cls]}")


# Encoder sites 0-4 see motion feature tensors; site 5 sees the motion map.
TENSOR_KINDS = frozenset({AttentionKind.MGA_T, AttentionKind.MGA_TM, AttentionKind.MGA_TMC,
                          AttentionKind.CONCAT, AttentionKind.MUL, AttentionKind.ADD, AttentionKind.NONE})
MAP_KINDS = frozenset({AttentionKind.MGA_M, AttentionKind.CONCAT, AttentionKind.MUL, AttentionKind.ADD,
                       AttentionKind.NONE})


# Rounding slack when checking that a resampled sigmoid map lies in [0, 1].
MAP_TOLERANCE = 1e-12


@dataclass
class AttentionParams:
    """Learnable 1x1 convolutions of one attention site; unused slots stay ``None``."""

    g_weight: Optional[Parameter] = None
    g_bias: Optional[Parameter] = None
    h_weight: Optional[Parameter] = None
    h_bias: Optional[Parameter] = None
    hp_weight: Optional[Parameter] = None
    hp_bias: Optional[Parameter] = None
    fuse_weight: Optional[Parameter] = None
    fuse_bias: Optional[Parameter] = None

    def named_parameters(self) -> Iterator[tuple[str, Parameter]]:
        for f in fields(self):
            p = getattr(self, f.name)
            if p is not None:
                yield f.name, p


def attention_param_shapes(kind: AttentionKind, channels: int, motion_channels: int) -> dict[str, tuple[int, ...]]:
    """Slot name -> shape for a site with appearance width C and motion width C'.

    A motion map is ``motion_channels == 1``; Mul/Add then need no alignment conv.
    """
    kind = AttentionKind.parse(kind)
    c, cp = channels, motion_channels
    convs: dict[str, tuple[int, int]] = {}
    if kind is AttentionKind.MGA_T:
        convs["g"] = (c, cp)
    elif kind is AttentionKind.MGA_TM:
        convs["h"] = (1, cp)
    elif kind is AttentionKind.MGA_TMC:
        convs["h"] = (1, cp)
        convs["hp"] = (c, c)
    elif kind is AttentionKind.CONCAT:
        convs["fuse"] = (c, c + cp)
    elif kind in (AttentionKind.MUL, AttentionKind.ADD) and cp != 1:
        convs["g"] = (c, cp)
    shapes = {}
    for slot, (cout, cin) in convs.items():
        shapes[f"{slot}_weight"] = (cout, cin, 1, 1)
        shapes[f"{slot}_bias"] = (cout,)
    return shapes


def init_attention_params(kind: AttentionKind, channels: int, motion_channels: int,
                          rng: np.random.Generator) -> AttentionParams:
    """Allocate the parameters ``kind`` needs.

    Weights are drawn from ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``; biases start at 0,
    so at initialization MGA-m with a zero map and MGA-tm with zero weights act as
    the identity and 1.5x respectively.
    """
    p = AttentionParams()
    for name, shape in attention_param_shapes(kind, channels, motion_channels).items():
        if name.endswith("_weight"):
            bound = 1.0 / np.sqrt(shape[1])
            setattr(p, name, Parameter(rng.uniform(-bound, bound, shape), name))
        else:
            setattr(p, name, Parameter(np.zeros(shape), name))
    return p


def _check_spatial(f_a: Tensor, m: Tensor, name: str) -> None:
    if f_a.ndim != 4 or m.ndim != 4:
        raise DimensionError(f"{name}: expected 4-D inputs, got {f_a.shape} and {m.shape}")
    if f_a.shape[0] != m.shape[0] or f_a.shape[2:] != m.shape[2:]:
        raise DimensionError(f"{name}: batch/spatial mismatch between appearance {f_a.shape} and motion {m.shape}")


def _pointwise(x: Tensor, w: Optional[Parameter], b: Optional[Parameter], name: str) -> Tensor:
    if w is None:
        raise ValidationError(f"{name}: missing 1x1 convolution parameters")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"{name}: motion input has {x.shape[1]} channels but the 1x1 conv expects "
                             f"{w.shape[1]} (input {x.shape}, weight {w.shape})")
    return ops.conv2d(x, w, b)


def mga_m(f_a: Tensor, p_m: Tensor) -> Tensor:
    """Residual map attention: ``f_a * P_m + f_a`` with ``P_m`` broadcast over channels."""
    _check_spatial(f_a, p_m, "mga_m")
    if p_m.shape[1] != 1:
        raise DimensionError(f"mga_m: motion map must have one channel, got {p_m.shape}")
    if np.any(p_m.data < -MAP_TOLERANCE) or np.any(p_m.data > 1.0 + MAP_TOLERANCE):
        raise ValidationError("mga_m: motion saliency map has values outside [0, 1]")
    return ops.add(ops.mul(f_a, p_m), f_a)


def mga_t(f_a: Tensor, f_m: Tensor, params: AttentionParams) -> Tensor:
    _check_spatial(f_a, f_m, "mga_t")
    att = _pointwise(f_m, params.g_weight, params.g_bias, "mga_t.g")
    if att.shape != f_a.shape:
        raise DimensionError(f"mga_t: g maps to {att.shape[1]} channels, appearance has {f_a.shape[1]}")
    return ops.add(ops.mul(f_a, att), f_a)


def spatial_map(f_m: Tensor, params: AttentionParams) -> Tensor:
    """``sigmoid(h(f_m))``: the [N,1,H,W] spatial attention map of MGA-tm/tmc."""
    return ops.sigmoid(_pointwise(f_m, params.h_weight, params.h_bias, "h"))


def mga_tm(f_a: Tensor, f_m: Tensor, params: AttentionParams) -> Tensor:
    _check_spatial(f_a, f_m, "mga_tm")
    return ops.add(ops.mul(f_a, spatial_map(f_m, params)), f_a)


def channel_weights(f_sp: Tensor, params: AttentionParams) -> Tensor:
    """``C * softmax(h'(gap(f_sp)))`` over channels, shape [N,C,1,1], mean 1 per sample."""
    c = f_sp.shape[1]
    logits = _pointwise(ops.global_avg_pool(f_sp), params.hp_weight, params.hp_bias, "h'")
    return ops.scale(ops.softmax(logits, axis=1), c)


def mga_tmc(f_a: Tensor, f_m: Tensor, params: AttentionParams) -> Tensor:
    _check_spatial(f_a, f_m, "mga_tmc")
    f_sp = ops.mul(f_a, spatial_map(f_m, params))
    return ops.add(ops.mul(f_sp, channel_weights(f_sp, params)), f_a)


def _align(f_a: Tensor, m: Tensor, params: AttentionParams, name: str) -> Tensor:
    _check_spatial(f_a, m, name)
    if params.g_weight is None:
        if m.shape[1] != 1:
            raise DimensionError(f"{name}: {m.shape[1]}-channel motion input needs an alignment conv")
        return m
    return _pointwise(m, params.g_weight, params.g_bias, name + ".align")


def fuse_concat(f_a: Tensor, motion: Tensor, params: AttentionParams) -> Tensor:
    _check_spatial(f_a, motion, "fuse_concat")
    w = params.fuse_weight
    if w is None:
        raise ValidationError("fuse_concat: missing fusion conv")
    if w.shape[1] != f_a.shape[1] + motion.shape[1]:
        raise DimensionError(f"fuse_concat: fusion conv expects {w.shape[1]} channels, "
                             f"got {f_a.shape[1]} + {motion.shape[1]}")
    return ops.conv2d(ops.concat([f_a, motion], axis=1), w, params.fuse_bias)


def fuse_mul(f_a: Tensor, motion: Tensor, params: AttentionParams) -> Tensor:
    return ops.mul(f_a, _align(f_a, motion, params, "fuse_mul"))


def fuse_add(f_a: Tensor, motion: Tensor, params: AttentionParams) -> Tensor:
    return ops.add(f_a, _align(f_a, motion, params, "fuse_add"))


def apply_attention(kind: AttentionKind, f_a: Tensor, motion: Tensor, params: AttentionParams) -> Tensor:
    """Dispatch to the block selected by ``kind``."""
    if kind is AttentionKind.NONE:
        return f_a
    if kind is AttentionKind.MGA_M:
        return mga_m(f_a, motion)
    if kind is AttentionKind.MGA_T:
        return mga_t(f_a, motion, params)
    if kind is AttentionKind.MGA_TM:
        return mga_tm(f_a, motion, params)
    if kind is AttentionKind.MGA_TMC:
        return mga_tmc(f_a, motion, params)
    if kind is AttentionKind.CONCAT:
        return fuse_concat(f_a, motion, params)
    if kind is AttentionKind.MUL:
        return fuse_mul(f_a, motion, params)
    if kind is AttentionKind.ADD:
        return fuse_add(f_a, motion, params)
    raise ValidationError(f"unsupported attention kind {kind!r}")
