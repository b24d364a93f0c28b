"""Flat ``key = value`` run configuration shared by every subcommand.

Precedence: built-in defaults, then the config file, then command-line
flags. A resolved snapshot in the same format is written next to every
run's outputs and can be fed back with ``--config`` to repeat the run.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Optional, Union

from .attention import AttentionKind
from .errors import ValidationError
from .network import NetworkSpec
from .synth import ClipParams
from .training import TrainingScheme


def _int_list(text: str) -> list[int]:
    return [int(x) for x in str(text).replace(" ", "").split(",") if x]


def _int_pair(text: str) -> tuple[int, int]:
    vals = _int_list(text)
    if len(vals) != 2:
        raise ValueError(f"expected two integers, got {text!r}")
    return vals[0], vals[1]


def _str_tuple(text: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in str(text).split(",") if x.strip())


def _path(text: str) -> Optional[str]:
    return str(text) if str(text) not in ("", "none", "None") else None


def _fmt(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, AttentionKind):
        return value.value
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


_spec = NetworkSpec()
_clip = ClipParams()
_sch = TrainingScheme()


@dataclass
class Key:
    parse: Callable[[str], Any]
    default: Any
    help: str


KEYS: dict[str, Key] = {
    # run plumbing
    "seed": Key(int, 0, "master seed for data, initialization and shuffling"),
    "threads": Key(int, 1, "BLAS worker cap; 1 keeps results bit-reproducible"),
    "out": Key(_path, None, "output directory"),
    "data": Key(_path, None, "dataset root with train/, eval/ and still/ splits"),
    "split": Key(str, "eval", "dataset split scored by eval/export-pred"),
    "checkpoint": Key(_path, None, "network checkpoint to evaluate or export"),
    "init": Key(_path, None, "checkpoint to start training from"),
    "pred": Key(_path, None, "prediction directory for tool-mode eval"),
    "gt": Key(_path, None, "ground-truth directory for tool-mode eval"),
    "mode": Key(str, "joint", "prediction head: joint, appearance or motion"),
    "suite": Key(str, "branches", "ablation suite name(s) or comma-separated variant names"),
    "seeds": Key(_int_list, [0, 1, 2], "ablation seeds"),
    "trials": Key(int, 100, "random trials per op for gradcheck"),
    # dataset
    "train_clips": Key(int, 200, "video clips in the training split"),
    "eval_clips": Key(int, 50, "video clips in the evaluation split"),
    "still_count": Key(int, 400, "static images in the still split"),
    "height": Key(int, _clip.height, "frame height (multiple of 8)"),
    "width": Key(int, _clip.width, "frame width (multiple of 8)"),
    "frames": Key(int, _clip.frames, "frames per clip"),
    "min_shapes": Key(int, _clip.min_shapes, "fewest foreground shapes per clip"),
    "max_shapes": Key(int, _clip.max_shapes, "most foreground shapes per clip"),
    "shape_kinds": Key(_str_tuple, _clip.shape_kinds, "allowed shapes: disc, rectangle, lshape"),
    "min_size": Key(float, _clip.min_size, "smallest shape half-extent, fraction of frame side"),
    "max_size": Key(float, _clip.max_size, "largest shape half-extent, fraction of frame side"),
    "fg_speed": Key(_int_pair, _clip.fg_speed, "foreground speed range, px/frame"),
    "bg_speed": Key(int, _clip.bg_speed, "largest background drift, px/frame"),
    "still_prob": Key(float, _clip.still_prob, "per-frame chance a shape moves with the background"),
    "texture_noise": Key(float, _clip.texture_noise, "pixel noise amplitude"),
    "distractor_prob": Key(float, _clip.distractor_prob, "chance a clip contains a static distractor"),
    # network
    "appearance_blocks": Key(_int_list, _spec.appearance_blocks, "blocks per appearance stage"),
    "appearance_channels": Key(_int_list, _spec.appearance_channels, "appearance stage widths"),
    "motion_blocks": Key(_int_list, _spec.motion_blocks, "blocks per motion stage"),
    "motion_channels": Key(_int_list, _spec.motion_channels, "motion stage widths"),
    "stage_strides": Key(_int_list, _spec.stage_strides, "stage strides (fixed at 2,2,1,1)"),
    "aspp_dilations": Key(_int_list, _spec.aspp_dilations, "ASPP dilation rates"),
    "encoder_attention": Key(AttentionKind.parse, _spec.encoder_attention, "attention at sites 0-4"),
    "decoder_attention": Key(AttentionKind.parse, _spec.decoder_attention, "attention at site 5"),
    "decoder_low_channels": Key(int, _spec.decoder_low_channels, "conv-2 width"),
    "decoder_mid_channels": Key(int, _spec.decoder_mid_channels, "conv-1/3/4 width"),
    "appearance_head_channels": Key(int, _spec.appearance_head_channels, "appearance head width"),
    "motion_head_channels": Key(int, _spec.motion_head_channels, "motion head width"),
    "appearance_aspp_width": Key(int, _spec.appearance_aspp_width, "appearance ASPP branch width"),
    "motion_aspp_width": Key(int, _spec.motion_aspp_width, "motion ASPP branch width"),
    "motion_decoder_channels": Key(int, _spec.motion_decoder_channels, "motion decoder width"),
    # training
    "variant": Key(str, _sch.variant, "training scheme: T0, Tm, Ta or Tma"),
    "pretrain_epochs": Key(int, _sch.pretrain_epochs, "epochs per branch pretraining"),
    "joint_epochs": Key(int, _sch.joint_epochs, "epochs of joint training"),
    "lr": Key(float, _sch.lr, "SGD learning rate"),
    "momentum": Key(float, _sch.momentum, "SGD momentum"),
    "weight_decay": Key(float, _sch.weight_decay, "L2 weight decay"),
    "batch_size": Key(int, _sch.batch_size, "samples per step"),
    "still_ratio": Key(float, _sch.still_ratio, "fraction of each joint batch taken from stills"),
}

_SPEC_KEYS = [f.name for f in fields(NetworkSpec)]
_CLIP_KEYS = [f.name for f in fields(ClipParams) if f.name != "seed"]
_SCHEME_KEYS = [f.name for f in fields(TrainingScheme) if f.name != "seed"]


class RunConfig:
    """Resolved configuration; attribute access by key name."""

    def __init__(self, values: Optional[dict[str, Any]] = None):
        self._values = {k: v.default for k, v in KEYS.items()}
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key: str, value: Any) -> None:
        if key not in KEYS:
            raise ValidationError(f"unknown config key {key!r}")
        if isinstance(value, str):
            try:
                value = KEYS[key].parse(value)
            except (ValueError, ValidationError) as e:
                raise ValidationError(f"bad value for {key}: {e}") from None
        self._values[key] = value

    def __getattr__(self, key: str) -> Any:
        try:
            return self.__dict__["_values"][key]
        except KeyError:
            raise AttributeError(key) from None

    def as_dict(self) -> dict[str, Any]:
        return dict(self._values)

    # ---- derived objects

    def network_spec(self) -> NetworkSpec:
        return NetworkSpec(**{k: (list(self._values[k]) if isinstance(self._values[k], (list, tuple))
                                  else self._values[k]) for k in _SPEC_KEYS})

    def clip_params(self) -> ClipParams:
        return ClipParams(seed=self.seed, **{k: self._values[k] for k in _CLIP_KEYS})

    def scheme(self) -> TrainingScheme:
        return TrainingScheme(seed=self.seed, **{k: self._values[k] for k in _SCHEME_KEYS})

    # ---- files

    def dumps(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self._values.items())

    def write_snapshot(self, directory: Union[str, Path], name: str = "config.txt") -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        path = d / name
        path.write_text(self.dumps())
        return path


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; blank lines are ignored."""
    out = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{source}:{n}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in KEYS:
            raise ValidationError(f"{source}:{n}: unknown config key {key!r}")
        out[key] = value
    return out


def load(path: Union[str, Path, None], overrides: Optional[dict[str, Any]] = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        for k, v in parse_text(p.read_text(), str(p)).items():
            cfg.set(k, v)
    for k, v in (overrides or {}).items():
        if v is not None:
            cfg.set(k, v)
    return cfg
