"""Dual-branch saliency network with motion guided attention sites.

Both branches share one topology: a stride-2 7x7 head convolution, four
residual stages with strides (2, 2, 1, 1), an ASPP block and a decoder. The
appearance branch uses bottleneck blocks and a two-input decoder (conv-1 ...
conv-5); the motion branch uses basic blocks and a three-layer decoder.

In the joint path the appearance encoder is rewired through six attention
sites: site 0 sees both head outputs, site ``i`` (1-4) sees both stage-``i``
outputs and feeds appearance stage ``i+1`` (site 4 feeds ASPP), and site 5
attends the decoder's fused low/high feature with the motion saliency map
before conv-3.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, asdict
from typing import Iterator, Optional, Sequence, Union

import numpy as np

from . import ops
from .attention import (AttentionKind, AttentionParams, MAP_KINDS, TENSOR_KINDS, apply_attention,
                        attention_param_shapes, init_attention_params)
from .errors import DimensionError, ValidationError
from .ops import RunningStats
from .tensor import Parameter, Tensor

BOTTLENECK_EXPANSION = 4
FIXED_STRIDES = (2, 2, 1, 1)


@dataclass
class NetworkSpec:
    """Widths, depths and attention choices for both branches.

    The defaults are the toy configuration; :meth:`reference` returns the
    full-scale plan (ResNet-101 / ResNet-34 encoders, 256-wide ASPP).
    """

    appearance_blocks: list[int] = field(default_factory=lambda: [1, 1, 2, 1])
    appearance_channels: list[int] = field(default_factory=lambda: [16, 32, 64, 64])
    motion_blocks: list[int] = field(default_factory=lambda: [1, 1, 1, 1])
    motion_channels: list[int] = field(default_factory=lambda: [8, 16, 32, 32])
    stage_strides: list[int] = field(default_factory=lambda: list(FIXED_STRIDES))
    aspp_dilations: list[int] = field(default_factory=lambda: [2, 4, 6])
    encoder_attention: AttentionKind = AttentionKind.MGA_TMC
    decoder_attention: AttentionKind = AttentionKind.MGA_M
    decoder_low_channels: int = 8
    decoder_mid_channels: int = 32
    appearance_head_channels: int = 16
    motion_head_channels: int = 8
    appearance_aspp_width: int = 16
    motion_aspp_width: int = 8
    motion_decoder_channels: int = 16

    @classmethod
    def reference(cls, **overrides) -> "NetworkSpec":
        base = cls(
            appearance_blocks=[3, 4, 23, 3],
            appearance_channels=[256, 512, 1024, 2048],
            motion_blocks=[3, 4, 6, 3],
            motion_channels=[64, 128, 256, 512],
            aspp_dilations=[12, 24, 36],
            decoder_low_channels=48,
            decoder_mid_channels=256,
            appearance_head_channels=64,
            motion_head_channels=64,
            appearance_aspp_width=256,
            motion_aspp_width=256,
            motion_decoder_channels=256,
        )
        for k, v in overrides.items():
            setattr(base, k, v)
        return base

    def __post_init__(self):
        self.encoder_attention = AttentionKind.parse(self.encoder_attention)
        self.decoder_attention = AttentionKind.parse(self.decoder_attention)

    def validate(self) -> None:
        problems = []
        for name in ("appearance_blocks", "appearance_channels", "motion_blocks", "motion_channels"):
            v = getattr(self, name)
            if len(v) != 4 or any(int(x) < 1 for x in v):
                problems.append(f"{name} must list four positive integers, got {v}")
        if list(self.stage_strides) != list(FIXED_STRIDES):
            problems.append(f"stage_strides must be {list(FIXED_STRIDES)}, got {self.stage_strides}")
        if len(self.aspp_dilations) != 3 or any(d < 1 for d in self.aspp_dilations):
            problems.append(f"aspp_dilations must be three positive rates, got {self.aspp_dilations}")
        if any(c % BOTTLENECK_EXPANSION for c in self.appearance_channels):
            problems.append(f"appearance_channels must be multiples of {BOTTLENECK_EXPANSION} (bottleneck width)")
        if self.encoder_attention not in TENSOR_KINDS:
            problems.append(f"encoder_attention {self.encoder_attention.value} needs a map input; "
                            f"sites 0-4 receive motion feature tensors")
        if self.decoder_attention not in MAP_KINDS:
            problems.append(f"decoder_attention {self.decoder_attention.value} needs a feature tensor; "
                            f"site 5 receives the single-channel motion map")
        for name in ("decoder_low_channels", "decoder_mid_channels", "appearance_head_channels",
                     "motion_head_channels", "appearance_aspp_width", "motion_aspp_width",
                     "motion_decoder_channels"):
            if int(getattr(self, name)) < 1:
                problems.append(f"{name} must be positive")
        if problems:
            raise ValidationError("invalid NetworkSpec: " + "; ".join(problems))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_attention"] = self.encoder_attention.value
        d["decoder_attention"] = self.decoder_attention.value
        return d


# --------------------------------------------------------------------------
# module plumbing


class ParamSlot:
    """Shape-only stand-in for a parameter when building without allocation."""

    def __init__(self, shape):
        self.shape = tuple(shape)
        self.name = ""

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


class Builder:
    """Allocates parameters for module constructors; ``meta=True`` records shapes only."""

    def __init__(self, rng: Optional[np.random.Generator] = None, meta: bool = False):
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.meta = meta

    def conv_weight(self, cout: int, cin: int, k: int, gain: float = 6.0):
        shape = (cout, cin, k, k)
        if self.meta:
            return ParamSlot(shape)
        bound = math.sqrt(gain / (cin * k * k))
        return Parameter(self.rng.uniform(-bound, bound, shape))

    def const(self, shape, value: float):
        if self.meta:
            return ParamSlot(shape)
        return Parameter(np.full(shape, float(value)))

    def attention(self, kind: AttentionKind, c: int, cp: int) -> AttentionParams:
        if self.meta:
            out = AttentionParams()
            for name, shape in attention_param_shapes(kind, c, cp).items():
                setattr(out, name, ParamSlot(shape))
            return out
        return init_attention_params(kind, c, cp, self.rng)


class Module:
    """Tree node; parameters and buffers are discovered from public attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, (Parameter, ParamSlot)):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, AttentionParams):
                for sub, p in val.named_parameters():
                    yield f"{name}.{sub}", p

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, RunningStats]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, RunningStats):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_buffers(name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]


class ConvNorm(Module):
    """conv (no bias) -> channel_norm -> optional ReLU."""

    def __init__(self, b: Builder, cin: int, cout: int, k: int, stride: int = 1, dilation: int = 1,
                 relu: bool = True, padding: Optional[int] = None):
        self.weight = b.conv_weight(cout, cin, k)
        self.norm_scale = b.const((cout,), 1.0)
        self.norm_shift = b.const((cout,), 0.0)
        self.stats = None if b.meta else RunningStats(cout)
        self._stride = stride
        self._dilation = dilation
        self._padding = dilation * (k // 2) if padding is None else padding
        self._relu = relu

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        y = ops.conv2d(x, self.weight, None, stride=self._stride, padding=self._padding, dilation=self._dilation)
        y = ops.channel_norm(y, self.norm_scale, self.norm_shift, stats=self.stats, training=training)
        return ops.relu(y) if self._relu else y


class Conv(Module):
    """Plain convolution with bias."""

    def __init__(self, b: Builder, cin: int, cout: int, k: int = 1, gain: float = 1.0):
        self.weight = b.conv_weight(cout, cin, k, gain=gain)
        self.bias = b.const((cout,), 0.0)
        self._padding = k // 2

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, padding=self._padding)


class Bottleneck(Module):
    def __init__(self, b: Builder, cin: int, cout: int, stride: int):
        mid = cout // BOTTLENECK_EXPANSION
        self.conv1 = ConvNorm(b, cin, mid, 1)
        self.conv2 = ConvNorm(b, mid, mid, 3, stride=stride)
        self.conv3 = ConvNorm(b, mid, cout, 1, relu=False)
        if stride != 1 or cin != cout:
            self.downsample = ConvNorm(b, cin, cout, 1, stride=stride, relu=False, padding=0)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        y = self.conv3(self.conv2(self.conv1(x, training), training), training)
        sc = self.downsample(x, training) if hasattr(self, "downsample") else x
        return ops.relu(ops.add(y, sc))


class BasicBlock(Module):
    def __init__(self, b: Builder, cin: int, cout: int, stride: int):
        self.conv1 = ConvNorm(b, cin, cout, 3, stride=stride)
        self.conv2 = ConvNorm(b, cout, cout, 3, relu=False)
        if stride != 1 or cin != cout:
            self.downsample = ConvNorm(b, cin, cout, 1, stride=stride, relu=False, padding=0)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        y = self.conv2(self.conv1(x, training), training)
        sc = self.downsample(x, training) if hasattr(self, "downsample") else x
        return ops.relu(ops.add(y, sc))


class Stage(Module):
    def __init__(self, b: Builder, block, cin: int, cout: int, count: int, stride: int):
        self._blocks = []
        for i in range(count):
            blk = block(b, cin if i == 0 else cout, cout, stride if i == 0 else 1)
            setattr(self, f"block{i}", blk)
            self._blocks.append(blk)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        for blk in self._blocks:
            x = blk(x, training)
        return x


class Encoder(Module):
    def __init__(self, b: Builder, block, head_channels: int, blocks: Sequence[int], channels: Sequence[int],
                 strides: Sequence[int]):
        self.head = ConvNorm(b, 3, head_channels, 7, stride=2)
        cin = head_channels
        self._stages = []
        for i, (n, c, s) in enumerate(zip(blocks, channels, strides), start=1):
            st = Stage(b, block, cin, c, n, s)
            setattr(self, f"res{i}", st)
            self._stages.append(st)
            cin = c

    def stage(self, i: int) -> Stage:
        return self._stages[i - 1]


class ASPP(Module):
    """1x1 conv, three dilated 3x3 convs and an image-pooling branch, concatenated."""

    def __init__(self, b: Builder, cin: int, width: int, dilations: Sequence[int]):
        self.conv1x1 = ConvNorm(b, cin, width, 1)
        self._atrous = []
        for i, d in enumerate(dilations, start=1):
            layer = ConvNorm(b, cin, width, 3, dilation=d)
            setattr(self, f"atrous{i}", layer)
            self._atrous.append(layer)
        # Pooled branch has a 1x1 extent; batch-level normalization would zero it at N=1.
        self.pool = Conv(b, cin, width, 1, gain=6.0)
        self.out_channels = 5 * width

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        h, w = x.shape[2:]
        parts = [self.conv1x1(x, training)]
        parts += [layer(x, training) for layer in self._atrous]
        pooled = ops.relu(self.pool(ops.global_avg_pool(x)))
        parts.append(ops.bilinear_upsample(pooled, size=(h, w)))
        return ops.concat(parts, axis=1)


class AppearanceDecoder(Module):
    def __init__(self, b: Builder, high_in: int, low_in: int, mid: int, low: int):
        self.conv1 = ConvNorm(b, high_in, mid, 1)
        self.conv2 = ConvNorm(b, low_in, low, 1)
        self.conv3 = ConvNorm(b, mid + low, mid, 3)
        self.conv4 = ConvNorm(b, mid, mid, 3)
        self.conv5 = Conv(b, mid, 1, 1)
        self.fused_channels = mid + low

    def fuse(self, low: Tensor, high: Tensor, training: bool) -> Tensor:
        hi = self.conv1(high, training)
        lo = self.conv2(low, training)
        hi = ops.bilinear_upsample(hi, size=lo.shape[2:])
        if hi.shape[2:] != lo.shape[2:]:
            raise AssertionError(f"decoder resolution mismatch {hi.shape} vs {lo.shape}")
        return ops.concat([hi, lo], axis=1)

    def predict(self, fused: Tensor, target_hw: tuple[int, int], training: bool) -> Tensor:
        y = self.conv4(self.conv3(fused, training), training)
        return ops.bilinear_upsample(ops.sigmoid(self.conv5(y)), size=target_hw)


class MotionDecoder(Module):
    def __init__(self, b: Builder, cin: int, mid: int):
        self.conv3 = ConvNorm(b, cin, mid, 3)
        self.conv4 = ConvNorm(b, mid, mid, 3)
        self.conv5 = Conv(b, mid, 1, 1)

    def predict(self, x: Tensor, target_hw: tuple[int, int], training: bool) -> Tensor:
        y = self.conv4(self.conv3(x, training), training)
        return ops.bilinear_upsample(ops.sigmoid(self.conv5(y)), size=target_hw)


class Branch(Module):
    def __init__(self, b: Builder, kind: str, spec: NetworkSpec):
        if kind == "appearance":
            self.encoder = Encoder(b, Bottleneck, spec.appearance_head_channels, spec.appearance_blocks,
                                   spec.appearance_channels, spec.stage_strides)
            self.aspp = ASPP(b, spec.appearance_channels[-1], spec.appearance_aspp_width, spec.aspp_dilations)
            self.decoder = AppearanceDecoder(b, self.aspp.out_channels, spec.appearance_channels[0],
                                             spec.decoder_mid_channels, spec.decoder_low_channels)
        else:
            self.encoder = Encoder(b, BasicBlock, spec.motion_head_channels, spec.motion_blocks,
                                   spec.motion_channels, spec.stage_strides)
            self.aspp = ASPP(b, spec.motion_channels[-1], spec.motion_aspp_width, spec.aspp_dilations)
            self.decoder = MotionDecoder(b, self.aspp.out_channels, spec.motion_decoder_channels)


class AttentionSite(Module):
    def __init__(self, b: Builder, index: int, kind: AttentionKind, channels: int, motion_channels: int):
        self._index = index
        self._kind = kind
        self._channels = channels
        self._motion_channels = motion_channels
        self.params = b.attention(kind, channels, motion_channels)

    @property
    def kind(self) -> AttentionKind:
        return self._kind

    @property
    def channels(self) -> tuple[int, int]:
        return self._channels, self._motion_channels

    def __call__(self, f_a: Tensor, motion: Tensor) -> Tensor:
        return apply_attention(self._kind, f_a, motion, self.params)


@dataclass
class BranchOutputs:
    head: Tensor
    stages: list[Tensor]
    aspp: Tensor
    saliency: Tensor
    low_feature: Optional[Tensor] = None
    fused: Optional[Tensor] = None


@dataclass
class JointOutputs:
    """Joint prediction plus the intermediate tensors used to audit site wiring."""

    saliency: Tensor
    motion: Optional[BranchOutputs]
    motion_map: Tensor
    site_outputs: list[Tensor]
    stage_inputs: list[Tensor]
    aspp_input: Tensor
    fused: Tensor
    conv3_input: Tensor


class Network(Module):
    """Appearance branch, motion branch and six attention sites.

    Inputs are raw images in [0, 1], shape [N,3,H,W] with H and W divisible
    by 8; they are standardized per channel with the stored statistics.
    """

    def __init__(self, spec: NetworkSpec, b: Builder):
        self._spec = spec
        self.appearance = Branch(b, "appearance", spec)
        self.motion = Branch(b, "motion", spec)
        enc = spec.encoder_attention
        cs = [spec.appearance_head_channels] + list(spec.appearance_channels)
        ms = [spec.motion_head_channels] + list(spec.motion_channels)
        self._sites = []
        for i in range(5):
            site = AttentionSite(b, i, enc, cs[i], ms[i])
            setattr(self, f"mga{i}", site)
            self._sites.append(site)
        site5 = AttentionSite(b, 5, spec.decoder_attention, self.appearance.decoder.fused_channels, 1)
        self.mga5 = site5
        self._sites.append(site5)
        self.input_stats = _InputStats()
        if not b.meta:
            for name, p in self.named_parameters():
                p.name = name

    @property
    def spec(self) -> NetworkSpec:
        return self._spec

    @property
    def sites(self) -> list[AttentionSite]:
        return list(self._sites)

    def parameter_count(self) -> int:
        return int(sum(np.prod(p.shape) for p in self.parameters()))

    def attention_parameters(self) -> list[Parameter]:
        return [p for site in self._sites for p in site.parameters()]

    # ---- inputs

    def _prepare(self, images, mean: np.ndarray, std: np.ndarray) -> Tensor:
        x = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or x.shape[1] != 3:
            raise DimensionError(f"expected [N,3,H,W] images, got {x.shape}")
        h, w = x.shape[2:]
        if h % 8 or w % 8:
            raise ValidationError(f"input resolution {h}x{w} must be divisible by 8")
        return Tensor((x - mean.reshape(1, 3, 1, 1)) / std.reshape(1, 3, 1, 1))

    # ---- per-branch paths

    def forward_appearance(self, frame, training: bool = False) -> BranchOutputs:
        x = self._prepare(frame, self.input_stats.appearance_mean, self.input_stats.appearance_std)
        br = self.appearance
        head = br.encoder.head(x, training)
        stages = []
        h = head
        for i in range(1, 5):
            h = br.encoder.stage(i)(h, training)
            stages.append(h)
        aspp = br.aspp(h, training)
        fused = br.decoder.fuse(stages[0], aspp, training)
        sal = br.decoder.predict(fused, x.shape[2:], training)
        return BranchOutputs(head, stages, aspp, sal, low_feature=stages[0], fused=fused)

    def forward_motion(self, flow_image, training: bool = False) -> BranchOutputs:
        x = self._prepare(flow_image, self.input_stats.motion_mean, self.input_stats.motion_std)
        br = self.motion
        head = br.encoder.head(x, training)
        stages = []
        h = head
        for i in range(1, 5):
            h = br.encoder.stage(i)(h, training)
            stages.append(h)
        aspp = br.aspp(h, training)
        sal = br.decoder.predict(aspp, x.shape[2:], training)
        return BranchOutputs(head, stages, aspp, sal)

    # ---- joint path

    def forward_joint(self, frame, flow_image=None, training: bool = False, motion_mask=None,
                      bypass_attention: bool = False) -> JointOutputs:
        """Appearance prediction attended by the motion branch.

        ``flow_image=None`` means no motion input for any sample: every site
        receives zeros. ``motion_mask`` (length N, 0/1) zeroes the motion
        inputs of individual samples in a mixed batch. ``bypass_attention``
        turns every site into the identity.
        """
        x = self._prepare(frame, self.input_stats.appearance_mean, self.input_stats.appearance_std)
        n, _, hh, ww = x.shape
        mot = None
        if flow_image is not None:
            fl = flow_image.data if isinstance(flow_image, Tensor) else np.asarray(flow_image, dtype=np.float64)
            if fl.ndim == 3:
                fl = fl[None]
            if fl.shape != x.shape:
                raise ValidationError(f"flow image shape {fl.shape} does not match frame shape {x.shape}")
            mot = self.forward_motion(fl, training)

        br = self.appearance
        gate = None
        if mot is not None and motion_mask is not None:
            gate = Tensor(np.asarray(motion_mask, dtype=np.float64).reshape(n, 1, 1, 1))

        def motion_input(t: Optional[Tensor], shape) -> Tensor:
            if t is None:
                return Tensor(np.zeros(shape))
            return ops.mul(t, gate) if gate is not None else t

        def site(i: int, f_a: Tensor, m: Tensor) -> Tensor:
            return f_a if bypass_attention else self._sites[i](f_a, m)

        spec = self._spec
        head = br.encoder.head(x, training)
        m_shape = (n, spec.motion_head_channels) + head.shape[2:]
        site_out = [site(0, head, motion_input(mot.head if mot else None, m_shape))]
        stage_inputs = []
        low = None
        for i in range(1, 5):
            stage_inputs.append(site_out[-1])
            a = br.encoder.stage(i)(site_out[-1], training)
            m_shape = (n, spec.motion_channels[i - 1]) + a.shape[2:]
            site_out.append(site(i, a, motion_input(mot.stages[i - 1] if mot else None, m_shape)))
            if i == 1:
                low = site_out[-1]
        aspp_in = site_out[4]
        aspp = br.aspp(aspp_in, training)
        fused = br.decoder.fuse(low, aspp, training)

        fh, fw = fused.shape[2:]
        if mot is not None:
            p_m = ops.avg_pool(mot.saliency, hh // fh)
            p_m = ops.mul(p_m, gate) if gate is not None else p_m
        else:
            p_m = Tensor(np.zeros((n, 1, fh, fw)))
        conv3_in = site(5, fused, p_m)
        site_out.append(conv3_in)
        sal = br.decoder.predict(conv3_in, (hh, ww), training)
        return JointOutputs(sal, mot, p_m, site_out, stage_inputs, aspp_in, fused, conv3_in)

    # ---- state

    def state_items(self) -> list[tuple[str, np.ndarray]]:
        """Every parameter and buffer array, in a fixed order, by dotted name."""
        items = [(name, p.data) for name, p in self.named_parameters()]
        for name, st in self.named_buffers():
            items.append((f"{name}.running_mean", st.mean))
            items.append((f"{name}.running_var", st.var))
        for key in ("appearance_mean", "appearance_std", "motion_mean", "motion_std"):
            items.append((f"input.{key}", getattr(self.input_stats, key)))
        return items

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        own = dict(self.state_items())
        missing = sorted(set(own) - set(arrays))
        unknown = sorted(set(arrays) - set(own))
        if missing or unknown:
            raise ValidationError(f"state mismatch: missing {missing[:5]}, unexpected {unknown[:5]}")
        for name, arr in own.items():
            src = np.asarray(arrays[name], dtype=np.float64)
            if src.shape != arr.shape:
                raise DimensionError(f"state entry {name}: shape {src.shape} != {arr.shape}")
            np.copyto(arr, src)


class _InputStats:
    def __init__(self):
        self.appearance_mean = np.full(3, 0.5)
        self.appearance_std = np.full(3, 0.25)
        self.motion_mean = np.full(3, 0.5)
        self.motion_std = np.full(3, 0.25)

    def set(self, appearance: tuple[np.ndarray, np.ndarray], motion: tuple[np.ndarray, np.ndarray]) -> None:
        np.copyto(self.appearance_mean, appearance[0])
        np.copyto(self.appearance_std, np.maximum(appearance[1], 1e-3))
        np.copyto(self.motion_mean, motion[0])
        np.copyto(self.motion_std, np.maximum(motion[1], 1e-3))


def build_network(spec: Optional[NetworkSpec] = None, seed: int = 0) -> Network:
    """Validate ``spec`` and build a network with parameters drawn from ``seed``."""
    spec = spec or NetworkSpec()
    spec.validate()
    return Network(spec, Builder(np.random.default_rng(seed)))


def parameter_shapes(spec: NetworkSpec) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes of ``spec`` without allocating any arrays."""
    spec.validate()
    net = Network(spec, Builder(meta=True))
    return {name: p.shape for name, p in net.named_parameters()}


def count_parameters(spec: NetworkSpec, prefix: str = "") -> int:
    return int(sum(np.prod(s) for n, s in parameter_shapes(spec).items() if n.startswith(prefix)))
