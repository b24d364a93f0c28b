"""Command-line entry point: ``mga <subcommand> [--config FILE] [--key value ...]``.

Every config key is also a flag (``--joint-epochs 3``). Exit status is 0 on
success, 1 for invalid configuration or arguments, 2 for missing or
malformed files.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from threadpoolctl import threadpool_limits

from . import checkpoint
from . import config as cfgmod
from .errors import DimensionError, FormatError, NonFiniteError, ValidationError
from .gradcheck import network_gradcheck, run_suite
from .metrics import MetricReport
from .network import Network, build_network
from .synth import gen_dataset, gen_stills, read_dataset, write_dataset, write_pgm
from .training import (AblationData, MODES, evaluate, predict, pretrain_appearance, pretrain_motion,
                       read_prediction_dir, run_ablation, set_input_stats, train_joint, write_ablation_csv)

log = logging.getLogger("mga")

GRADCHECK_TOLERANCE = 1e-4

SUBCOMMANDS = {
    "synth": "generate train/eval/still splits",
    "pretrain-appearance": "train the appearance branch on still images",
    "pretrain-motion": "train the motion branch on flow images",
    "train": "joint training (with the scheme's pretraining unless --init is given)",
    "eval": "score a checkpoint, or a prediction directory against ground truth",
    "ablate": "train and score a suite of variants over several seeds",
    "gradcheck": "finite-difference check of every differentiable op",
    "export-pred": "write saliency maps of a checkpoint as PGM files",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits 2 by default; bad usage is a validation error here
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value file; flags override it")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    for key, k in cfgmod.KEYS.items():
        common.add_argument("--" + key.replace("_", "-"), dest=key, default=None, metavar="VALUE", help=k.help)
    parser = _Parser(prog="mga", description="Motion guided attention saliency toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, text in SUBCOMMANDS.items():
        sub.add_parser(name, parents=[common], help=text, description=text)
    return parser


# --------------------------------------------------------------------------
# helpers


def _need(cfg, *keys):
    missing = [k for k in keys if getattr(cfg, k) is None]
    if missing:
        raise ValidationError("missing required setting(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _split(cfg, name: str):
    return read_dataset(Path(cfg.data) / name)


def _network(cfg, path: Optional[str] = None) -> Network:
    net = build_network(cfg.network_spec(), cfg.seed)
    if path is not None:
        checkpoint.load_network(path, net)
    return net


def _print_report(report: MetricReport) -> None:
    for k, v in report.summary().items():
        print(f"{k} {v:.6f}" if isinstance(v, float) else f"{k} {v}")


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(cfg) -> None:
    _need(cfg, "out")
    base = cfg.clip_params()
    base.validate()
    out = Path(cfg.out)
    # Distinct derived seeds keep the three splits disjoint.
    splits = {"train": gen_dataset(cfg.seed * 3 + 1, cfg.train_clips, base, prefix="clip"),
              "eval": gen_dataset(cfg.seed * 3 + 2, cfg.eval_clips, base, prefix="eval"),
              "still": gen_stills(cfg.seed * 3 + 3, cfg.still_count, base)}
    for name, samples in splits.items():
        write_dataset(samples, out / name)
        print(f"{name} {len(samples)} samples")
    cfg.write_snapshot(out)


def _pretrain(cfg, which: str) -> None:
    _need(cfg, "data", "out")
    scheme = cfg.scheme()
    scheme.validate()
    out = Path(cfg.out)
    net = _network(cfg, cfg.init)
    if which == "appearance":
        samples = _split(cfg, "still")
        if cfg.init is None:
            set_input_stats(net, [], samples)
        history = pretrain_appearance(net, samples, scheme)
    else:
        samples = _split(cfg, "train")
        if cfg.init is None:
            set_input_stats(net, samples)
        history = pretrain_motion(net, samples, scheme)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint.save_network(out / "model.mgac", net)
    _write_history(out, history)
    cfg.write_snapshot(out)


def _write_history(out: Path, history) -> None:
    with open(out / "history.csv", "w") as fh:
        fh.write("stage,epoch,train_loss\n")
        for h in history:
            fh.write(f"{h.stage},{h.epoch},{h.train_loss!r}\n")
            print(f"{h.stage} epoch {h.epoch} loss {h.train_loss:.6f}")


def cmd_train(cfg) -> None:
    _need(cfg, "data", "out")
    scheme = cfg.scheme()
    scheme.validate()
    out = Path(cfg.out)
    videos, stills = _split(cfg, "train"), _split(cfg, "still")
    net = _network(cfg, cfg.init)
    history = []
    if cfg.init is None:
        set_input_stats(net, videos, stills)
        if scheme.pretrains_appearance:
            history += pretrain_appearance(net, stills, scheme)
        if scheme.pretrains_motion:
            history += pretrain_motion(net, videos, scheme)
    history += train_joint(net, videos, stills, scheme, checkpoint_dir=out / "checkpoints")
    out.mkdir(parents=True, exist_ok=True)
    checkpoint.save_network(out / "model.mgac", net)
    _write_history(out, history)
    cfg.write_snapshot(out)


def cmd_eval(cfg) -> None:
    if cfg.mode not in MODES:
        raise ValidationError(f"unknown mode {cfg.mode!r}; expected one of {MODES}")
    if cfg.pred is not None:
        # Tool mode: compare two directories of maps.
        _need(cfg, "gt")
        gts = read_prediction_dir(cfg.gt)
        if not gts:
            raise FileNotFoundError(2, "no ground-truth masks found", str(cfg.gt))
        report = evaluate(cfg.pred, gts)
    else:
        _need(cfg, "checkpoint", "data")
        report = evaluate(_network(cfg, cfg.checkpoint), _split(cfg, cfg.split), mode=cfg.mode)
    _print_report(report)
    if cfg.out is not None:
        report.write_csv(cfg.out)
        cfg.write_snapshot(cfg.out)


def cmd_ablate(cfg) -> None:
    _need(cfg, "data", "out")
    scheme = cfg.scheme()
    scheme.validate()
    data = AblationData(_split(cfg, "train"), _split(cfg, "eval"), _split(cfg, "still"))
    rows = run_ablation(cfg.suite, data, cfg.network_spec(), scheme, cfg.seeds, progress=log.info)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_ablation_csv(out / "ablation.csv", rows)
    for r in rows:
        print(f"{r.variant} seed {r.seed} MAE {r.mae:.4f} S-m {r.s_measure:.4f} maxF {r.max_f:.4f} J {r.j_mean:.4f}")
    cfg.write_snapshot(out)


def cmd_gradcheck(cfg) -> bool:
    if cfg.trials < 1:
        raise ValidationError("--trials must be at least 1")
    errors = run_suite(cfg.trials, seed=cfg.seed)
    errors["network"] = network_gradcheck(seed=cfg.seed)
    ok = True
    for name, err in errors.items():
        flag = "ok" if err <= GRADCHECK_TOLERANCE else "FAIL"
        ok &= flag == "ok"
        print(f"{name:24s} {err:.3e} {flag}")
    if cfg.out is not None:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck.csv").write_text("op,max_relative_error\n" + "".join(
            f"{k},{v!r}\n" for k, v in errors.items()))
        cfg.write_snapshot(out)
    return ok


def cmd_export_pred(cfg) -> None:
    _need(cfg, "checkpoint", "data", "out")
    if cfg.mode not in MODES:
        raise ValidationError(f"unknown mode {cfg.mode!r}; expected one of {MODES}")
    maps = predict(_network(cfg, cfg.checkpoint), _split(cfg, cfg.split), cfg.mode)
    out = Path(cfg.out)
    for (clip, idx), m in maps.items():
        (out / clip).mkdir(parents=True, exist_ok=True)
        write_pgm(out / clip / f"pred_{idx:05d}.pgm", m[None])
    print(f"wrote {len(maps)} maps to {out}")
    cfg.write_snapshot(out, "export_config.txt")


COMMANDS = {
    "synth": cmd_synth,
    "pretrain-appearance": lambda c: _pretrain(c, "appearance"),
    "pretrain-motion": lambda c: _pretrain(c, "motion"),
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "export-pred": cmd_export_pred,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    overrides = {k: getattr(args, k) for k in cfgmod.KEYS}
    try:
        cfg = cfgmod.load(args.config, overrides)
        if cfg.threads < 1:
            raise ValidationError("--threads must be at least 1")
        with threadpool_limits(limits=cfg.threads):
            result = COMMANDS[args.command](cfg)
    except (ValidationError, DimensionError, NonFiniteError) as e:
        print(f"mga {args.command}: error: {e}", file=sys.stderr)
        return 1
    except (OSError, FormatError) as e:
        print(f"mga {args.command}: error: {e}", file=sys.stderr)
        return 2
    return 1 if result is False else 0


if __name__ == "__main__":
    sys.exit(main())
