"""Branch pretraining, joint training, inference, evaluation and ablation runs."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import checkpoint, ops
from .attention import AttentionKind
from .errors import NonFiniteError, ValidationError
from .metrics import MetricReport, report_from_maps
from .network import Network, NetworkSpec, build_network
from .optim import sgd_step, zero_grad
from .synth import VideoSample, channel_stats, read_pgm
from .tensor import Parameter, Tensor, backward, no_grad

log = logging.getLogger(__name__)

VARIANTS = ("T0", "Tm", "Ta", "Tma")


@dataclass
class TrainingScheme:
    variant: str = "Tma"
    pretrain_epochs: int = 6
    joint_epochs: int = 6
    lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 8
    seed: int = 0
    # Fraction of each joint-training batch drawn from the still-image set.
    still_ratio: float = 0.25

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown training variant {self.variant!r}; expected one of {VARIANTS}")
        if self.pretrain_epochs < 0 or self.joint_epochs < 0:
            raise ValidationError("epoch counts must be non-negative")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be at least 1")
        if not 0.0 <= self.still_ratio <= 1.0:
            raise ValidationError("still_ratio must lie in [0, 1]")
        if not (self.lr > 0 and math.isfinite(self.lr)):
            raise ValidationError("lr must be a positive finite number")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ValidationError("momentum and weight_decay must be non-negative")

    @property
    def pretrains_appearance(self) -> bool:
        return self.variant in ("Ta", "Tma")

    @property
    def pretrains_motion(self) -> bool:
        return self.variant in ("Tm", "Tma")


@dataclass
class EpochLog:
    stage: str
    epoch: int
    train_loss: float
    val_loss: Optional[float] = None


# --------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    frames: np.ndarray
    flow_images: np.ndarray
    masks: np.ndarray
    has_motion: np.ndarray

    @classmethod
    def of(cls, samples: Sequence[VideoSample]) -> "Batch":
        return cls(np.stack([s.frame for s in samples]),
                   np.stack([s.flow_image for s in samples]),
                   np.stack([s.mask for s in samples]).astype(np.float64),
                   np.array([1.0 if s.has_motion else 0.0 for s in samples]))


def _rng(seed: int, stage: str) -> np.random.Generator:
    tag = sum(ord(c) * 31 ** i for i, c in enumerate(stage)) % (2 ** 31)
    return np.random.default_rng([seed, tag])


def _batches(samples: Sequence[VideoSample], batch_size: int, rng: Optional[np.random.Generator]):
    order = np.arange(len(samples)) if rng is None else rng.permutation(len(samples))
    for start in range(0, len(order), batch_size):
        yield [samples[i] for i in order[start:start + batch_size]]


def set_input_stats(net: Network, videos: Sequence[VideoSample], stills: Sequence[VideoSample] = ()) -> None:
    """Per-channel standardization from the training frames and flow images."""
    frames = [s.frame for s in list(videos) + list(stills)]
    flows = [s.flow_image for s in videos] or [np.ones_like(frames[0])]
    net.input_stats.set(channel_stats(frames), channel_stats(flows))


def branch_parameters(net: Network, branch: str) -> list[Parameter]:
    return [p for name, p in net.named_parameters() if name.startswith(branch + ".")]


def _check_finite(loss: Tensor, stage: str, epoch: int, step: int, lr: float) -> float:
    value = float(loss.data)
    if not math.isfinite(value):
        raise NonFiniteError(f"{stage}: non-finite loss at epoch {epoch}, step {step} "
                             f"(lr={lr}); lower the learning rate")
    return value


def _mean(values: Sequence[float]) -> float:
    return math.fsum(values) / len(values) if values else float("nan")


# --------------------------------------------------------------------------
# losses


def appearance_loss(net: Network, batch: Batch, training: bool) -> Tensor:
    out = net.forward_appearance(batch.frames, training=training)
    return ops.bce_loss(out.saliency, batch.masks)


def motion_loss(net: Network, batch: Batch, training: bool) -> Tensor:
    out = net.forward_motion(batch.flow_images, training=training)
    return ops.bce_loss(out.saliency, batch.masks, weight=batch.has_motion.reshape(-1, 1, 1, 1))


def joint_loss(net: Network, batch: Batch, training: bool) -> Tensor:
    """Summed BCE of the attended appearance head and the motion head.

    Samples without motion (still images, first frames) get zeroed motion
    inputs at every site and do not contribute to the motion-head loss.
    """
    out = net.forward_joint(batch.frames, batch.flow_images, training=training, motion_mask=batch.has_motion)
    app = ops.bce_loss(out.saliency, batch.masks)
    mot = ops.bce_loss(out.motion.saliency, batch.masks, weight=batch.has_motion.reshape(-1, 1, 1, 1))
    return ops.add(app, mot)


def _evaluate_loss(net: Network, samples, loss_fn, batch_size: int) -> Optional[float]:
    if not samples:
        return None
    with no_grad():
        vals = [float(loss_fn(net, Batch.of(chunk), False).data) * len(chunk)
                for chunk in _batches(samples, batch_size, None)]
    return math.fsum(vals) / len(samples)


def _fit(net: Network, params: list[Parameter], samples, loss_fn, scheme: TrainingScheme, epochs: int,
         stage: str, val=None, on_epoch: Optional[Callable[[int], None]] = None,
         batch_source=None) -> list[EpochLog]:
    history = []
    rng = _rng(scheme.seed, stage)
    all_params = list(net.parameters())
    for epoch in range(1, epochs + 1):
        losses = []
        batches = batch_source(rng) if batch_source else _batches(samples, scheme.batch_size, rng)
        for step, chunk in enumerate(batches):
            zero_grad(all_params)
            loss = loss_fn(net, Batch.of(chunk), True)
            losses.append(_check_finite(loss, stage, epoch, step, scheme.lr))
            backward(loss)
            sgd_step(params, scheme.lr, scheme.momentum, scheme.weight_decay)
        entry = EpochLog(stage, epoch, _mean(losses), _evaluate_loss(net, val, loss_fn, scheme.batch_size))
        log.info("%s epoch %d: train %.5f val %s", stage, epoch, entry.train_loss, entry.val_loss)
        history.append(entry)
        if on_epoch:
            on_epoch(epoch)
    zero_grad(all_params)
    return history


def pretrain_appearance(net: Network, stills: Sequence[VideoSample], scheme: TrainingScheme,
                        epochs: Optional[int] = None, val: Sequence[VideoSample] = ()) -> list[EpochLog]:
    """Train only the appearance branch and its own head on static images."""
    scheme.validate()
    epochs = scheme.pretrain_epochs if epochs is None else epochs
    return _fit(net, branch_parameters(net, "appearance"), list(stills), appearance_loss, scheme, epochs,
                "pretrain-appearance", list(val))


def pretrain_motion(net: Network, videos: Sequence[VideoSample], scheme: TrainingScheme,
                    epochs: Optional[int] = None, val: Sequence[VideoSample] = ()) -> list[EpochLog]:
    """Train only the motion branch on rendered flow images.

    First frames carry no flow; they are skipped.
    """
    scheme.validate()
    epochs = scheme.pretrain_epochs if epochs is None else epochs
    moving = [s for s in videos if s.has_motion]
    return _fit(net, branch_parameters(net, "motion"), moving, motion_loss, scheme, epochs,
                "pretrain-motion", [s for s in val if s.has_motion])


def _mixed_batches(videos, stills, scheme: TrainingScheme):
    n_still = int(round(scheme.still_ratio * scheme.batch_size))
    if not stills:
        n_still = 0
    if not videos:
        n_still = scheme.batch_size
    n_video = scheme.batch_size - n_still
    if n_video == 0 and not stills:
        raise ValidationError("joint training needs video or still samples")

    def source(rng):
        if n_video:
            steps = math.ceil(len(videos) / n_video)
        else:
            steps = math.ceil(len(stills) / n_still)
        v_order = rng.permutation(len(videos)) if videos else np.array([], int)
        s_order = rng.permutation(len(stills)) if stills else np.array([], int)
        for k in range(steps):
            chunk = [videos[i] for i in v_order[k * n_video:(k + 1) * n_video]] if n_video else []
            if n_still:
                idx = [(k * n_still + j) % len(s_order) for j in range(n_still)]
                chunk += [stills[s_order[i]] for i in idx]
            if chunk:
                yield chunk

    return source


def train_joint(net: Network, videos: Sequence[VideoSample], stills: Sequence[VideoSample],
                scheme: TrainingScheme, checkpoint_dir: Union[str, Path, None] = None,
                epochs: Optional[int] = None, val: Sequence[VideoSample] = ()) -> list[EpochLog]:
    """End-to-end training of both branches and all attention sites on mixed batches.

    A checkpoint ``epoch_XXX.mgac`` is written after every epoch when
    ``checkpoint_dir`` is given.
    """
    scheme.validate()
    epochs = scheme.joint_epochs if epochs is None else epochs
    videos, stills = list(videos), list(stills)
    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt is not None:
        ckpt.mkdir(parents=True, exist_ok=True)

    def save(epoch):
        if ckpt is not None:
            checkpoint.save_network(ckpt / f"epoch_{epoch:03d}.mgac", net)

    return _fit(net, list(net.parameters()), None, joint_loss, scheme, epochs, "joint", list(val),
                on_epoch=save, batch_source=_mixed_batches(videos, stills, scheme))


def train_scheme(net: Network, videos, stills, scheme: TrainingScheme,
                 checkpoint_dir=None, val=()) -> list[EpochLog]:
    """Pretrain the branches the variant asks for, then train jointly."""
    scheme.validate()
    history = []
    if scheme.pretrains_appearance:
        history += pretrain_appearance(net, stills, scheme)
    if scheme.pretrains_motion:
        history += pretrain_motion(net, videos, scheme)
    history += train_joint(net, videos, stills, scheme, checkpoint_dir, val=val)
    return history


# --------------------------------------------------------------------------
# inference and evaluation

MODES = ("joint", "appearance", "motion")


def predict(net: Network, samples: Sequence[VideoSample], mode: str = "joint",
            batch_size: int = 16) -> dict[tuple[str, int], np.ndarray]:
    """Saliency maps [H,W] keyed by ``(clip_id, index)``.

    In joint mode samples without motion get zeroed motion inputs.
    """
    if mode not in MODES:
        raise ValidationError(f"unknown prediction mode {mode!r}; expected one of {MODES}")
    out = {}
    with no_grad():
        for chunk in _batches(list(samples), batch_size, None):
            b = Batch.of(chunk)
            if mode == "joint":
                sal = net.forward_joint(b.frames, b.flow_images, motion_mask=b.has_motion).saliency
            elif mode == "appearance":
                sal = net.forward_appearance(b.frames).saliency
            else:
                sal = net.forward_motion(b.flow_images).saliency
            for s, m in zip(chunk, sal.data):
                out[(s.clip_id, s.index)] = m[0]
    return out


def read_prediction_dir(root: Union[str, Path]) -> dict[tuple[str, int], np.ndarray]:
    """Load ``root/<clip>/{pred,mask}_NNNNN.pgm`` maps keyed by ``(clip, index)``."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(2, "prediction directory not found", str(root))
    out = {}
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        for f in sorted(d.glob("*.pgm")):
            prefix, _, num = f.stem.rpartition("_")
            if prefix in ("pred", "mask") and num.isdigit():
                key = (d.name, int(num))
                if key in out and prefix == "mask":
                    continue
                out[key] = read_pgm(f)[0]
    return out


def evaluate(source, samples: Union[Sequence[VideoSample], dict], mode: str = "joint",
             batch_size: int = 16) -> MetricReport:
    """Score a network (runs inference) or a prediction directory / mapping (tool mode).

    ``samples`` is a list of :class:`VideoSample` or a ``(clip, index) -> mask`` mapping.
    """
    if isinstance(samples, dict):
        gts = {k: np.asarray(v, dtype=np.float64).reshape(np.shape(v)[-2:]) for k, v in samples.items()}
    else:
        gts = {(s.clip_id, s.index): s.mask[0] for s in samples}
    if isinstance(source, Network):
        if isinstance(samples, dict):
            raise ValidationError("network evaluation needs VideoSample inputs")
        preds = predict(source, samples, mode, batch_size)
    elif isinstance(source, (str, Path)):
        preds = read_prediction_dir(source)
    else:
        preds = dict(source)
    return report_from_maps(preds, gts)


# --------------------------------------------------------------------------
# ablations


@dataclass(frozen=True)
class Variant:
    """One ablation row: attention kinds at the encoder/decoder and which head is scored."""

    name: str
    encoder: AttentionKind = AttentionKind.MGA_TMC
    decoder: AttentionKind = AttentionKind.MGA_M
    mode: str = "joint"
    # Training scheme override (T0/Tm/Ta/Tma); None means the suite's scheme.
    scheme: Optional[str] = None

    def key(self, default_scheme: str) -> tuple:
        if self.mode != "joint":
            return (self.mode,)
        return (self.mode, self.encoder, self.decoder, self.scheme or default_scheme)


_K = AttentionKind
VARIANT_TABLE = {
    # Branch comparison.
    "appearance-only": Variant("appearance-only", _K.NONE, _K.NONE, "appearance"),
    "motion-only": Variant("motion-only", _K.NONE, _K.NONE, "motion"),
    "MGA-D": Variant("MGA-D", _K.NONE, _K.MGA_M),
    "MGA-E": Variant("MGA-E", _K.MGA_TMC, _K.NONE),
    "full": Variant("full", _K.MGA_TMC, _K.MGA_M),
    # Encoder-side modules, decoder fixed to the map block.
    "E-Concat": Variant("E-Concat", _K.CONCAT, _K.MGA_M),
    "E-Mul": Variant("E-Mul", _K.MUL, _K.MGA_M),
    "E-Add": Variant("E-Add", _K.ADD, _K.MGA_M),
    "E-MGA-t": Variant("E-MGA-t", _K.MGA_T, _K.MGA_M),
    "E-MGA-tm": Variant("E-MGA-tm", _K.MGA_TM, _K.MGA_M),
    "E-MGA-tmc": Variant("E-MGA-tmc", _K.MGA_TMC, _K.MGA_M),
    # Decoder-side modules, encoder fixed to the full spatial+channel block.
    "D-Concat": Variant("D-Concat", _K.MGA_TMC, _K.CONCAT),
    "D-Mul": Variant("D-Mul", _K.MGA_TMC, _K.MUL),
    "D-Add": Variant("D-Add", _K.MGA_TMC, _K.ADD),
    "D-MGA-m": Variant("D-MGA-m", _K.MGA_TMC, _K.MGA_M),
    # Training schemes for the full network.
    "T0": Variant("T0", scheme="T0"),
    "Tm": Variant("Tm", scheme="Tm"),
    "Ta": Variant("Ta", scheme="Ta"),
    "Tma": Variant("Tma", scheme="Tma"),
}

SUITES = {
    "branches": ["appearance-only", "motion-only", "MGA-D", "MGA-E", "full"],
    "encoder": ["E-Concat", "E-Mul", "E-Add", "E-MGA-t", "E-MGA-tm", "E-MGA-tmc"],
    "decoder": ["D-Concat", "D-Mul", "D-Add", "D-MGA-m"],
    "schemes": ["T0", "Tm", "Ta", "Tma"],
}


def resolve_suite(suite: Union[str, Sequence[str]]) -> list[Variant]:
    if isinstance(suite, str):
        names = []
        for part in suite.split(","):
            part = part.strip()
            names.extend(SUITES.get(part, [part]) if part != "all" else
                         [n for s in SUITES.values() for n in s])
    else:
        names = list(suite)
    unknown = [n for n in names if n not in VARIANT_TABLE]
    if unknown:
        raise ValidationError(f"unknown ablation variants {unknown}; known: {list(VARIANT_TABLE)}")
    if not names:
        raise ValidationError("empty ablation suite")
    return [VARIANT_TABLE[n] for n in names]


@dataclass
class AblationData:
    train: list[VideoSample]
    eval: list[VideoSample]
    stills: list[VideoSample]


@dataclass
class AblationRow:
    variant: str
    seed: int
    mae: float
    s_measure: float
    max_f: float
    j_mean: float


def _copy_branch_state(dst: Network, src: Network, branches: Sequence[str] = ("appearance", "motion")) -> None:
    own = dict(src.state_items())
    prefixes = tuple(f"{b}." for b in branches) + ("input.",)
    for name, arr in dst.state_items():
        if name.startswith(prefixes) and name in own:
            np.copyto(arr, own[name])


def run_ablation(suite, data: AblationData, spec: Optional[NetworkSpec] = None,
                 scheme: Optional[TrainingScheme] = None, seeds: Sequence[int] = (0,),
                 progress: Optional[Callable[[str], None]] = None) -> list[AblationRow]:
    """Train and score every variant of ``suite`` for every seed under one budget.

    All rows of a seed share one initialization and one round of branch
    pretraining; a row whose scheme skips a branch's pretraining starts that
    branch from the shared random initialization instead. Identical
    configurations are trained once. Branch-only rows keep training their
    branch for the joint epochs so every row sees the same number of joint
    updates.
    """
    variants = resolve_suite(suite)
    spec = spec or NetworkSpec()
    scheme = scheme or TrainingScheme()
    scheme.validate()
    rows = []
    for seed in seeds:
        sch = replace(scheme, seed=seed)
        base = build_network(spec, seed)
        set_input_stats(base, data.train, data.stills)
        need = {v.scheme or sch.variant for v in variants if v.mode == "joint"}
        need |= {sch.variant} if any(v.mode != "joint" for v in variants) else set()
        if any(replace(sch, variant=n).pretrains_appearance for n in need):
            pretrain_appearance(base, data.stills, sch)
        if any(replace(sch, variant=n).pretrains_motion for n in need):
            pretrain_motion(base, data.train, sch)
        cache: dict[tuple, MetricReport] = {}
        for v in variants:
            key = v.key(sch.variant)
            if key not in cache:
                if progress:
                    progress(f"seed {seed}: training {v.name}")
                vs = replace(sch, variant=v.scheme or sch.variant)
                net = build_network(replace(spec, encoder_attention=v.encoder, decoder_attention=v.decoder), seed)
                pretrained = [b for b, flag in (("appearance", vs.pretrains_appearance),
                                                ("motion", vs.pretrains_motion)) if flag]
                _copy_branch_state(net, base, pretrained)
                if v.mode == "appearance":
                    pretrain_appearance(net, data.train + data.stills, vs, epochs=vs.joint_epochs)
                elif v.mode == "motion":
                    pretrain_motion(net, data.train, vs, epochs=vs.joint_epochs)
                else:
                    train_joint(net, data.train, data.stills, vs)
                cache[key] = evaluate(net, data.eval, mode=v.mode)
            r = cache[key]
            rows.append(AblationRow(v.name, seed, r.mae, r.s_measure, r.max_f, r.j_mean))
    return rows


def median_by_variant(rows: Sequence[AblationRow]) -> dict[str, dict[str, float]]:
    out: dict[str, dict[str, float]] = {}
    for name in dict.fromkeys(r.variant for r in rows):
        sel = [r for r in rows if r.variant == name]
        out[name] = {k: float(np.median([getattr(r, k) for r in sel])) for k in ("mae", "s_measure", "max_f", "j_mean")}
    return out


def write_ablation_csv(path: Union[str, Path], rows: Sequence[AblationRow]) -> None:
    """Per-seed rows plus a median row per variant; columns MAE, S-m, maxF, J."""
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "seed", "MAE", "S-m", "maxF", "J"])
        for r in rows:
            w.writerow([r.variant, r.seed, repr(r.mae), repr(r.s_measure), repr(r.max_f), repr(r.j_mean)])
        for name, m in median_by_variant(rows).items():
            w.writerow([name, "median", repr(m["mae"]), repr(m["s_measure"]), repr(m["max_f"]), repr(m["j_mean"])])
