"""Command-line entry point: ``python -m ssvaerr <command> ...``.

Exit codes: 0 success, 2 usage error, 1 runtime failure (one-line cause plus
the path of the run log on stderr). ``SSVAERR_LOG=debug|info|warning`` sets
console verbosity; the run log always records at debug level.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from . import augment
from . import datagen
from . import model as M
from . import pretext
from . import trainer
from .losses import LOSS_PRESETS, CompositeLossConfig, loss_preset

logger = logging.getLogger("ssvaerr")


class UsageError(Exception):
    pass


def code_version() -> str:
    """Package version plus a digest of the package sources."""
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def setup_logging(out_dir: Path | None) -> Path | None:
    level = os.environ.get("SSVAERR_LOG", "info").upper()
    if level not in ("DEBUG", "INFO", "WARNING", "ERROR"):
        level = "INFO"
    root = logging.getLogger()
    for h in list(root.handlers):
        root.removeHandler(h)
        h.close()
    root.setLevel(logging.DEBUG)
    console = logging.StreamHandler(sys.stderr)
    console.setLevel(level)
    console.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    root.addHandler(console)
    if out_dir is None:
        return None
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "run.log"
    fh = logging.FileHandler(log_path, encoding="utf-8")
    fh.setLevel(logging.DEBUG)
    fh.setFormatter(logging.Formatter("%(asctime)s %(name)s %(levelname)s %(message)s"))
    root.addHandler(fh)
    return log_path


def write_record(out_dir: Path, command: str, argv: list, config: dict, seed) -> Path:
    record = {
        "command": command,
        "argv": argv,
        "config": {k: v for k, v in config.items() if not callable(v)},
        "seed": seed,
        "version": code_version(),
    }
    path = out_dir / "record.json"
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# config resolution


def resolve_loss(value: str, base: Path | None = None) -> CompositeLossConfig:
    if value in LOSS_PRESETS:
        return loss_preset(value)
    path = Path(value) if base is None or Path(value).is_absolute() else base / value
    if not path.is_file():
        raise UsageError(f"--loss: {value!r} is neither a preset ({', '.join(LOSS_PRESETS)}) nor a file")
    try:
        return CompositeLossConfig.from_file(path)
    except ValueError as exc:
        raise UsageError(f"--loss {path}: {exc}") from exc


def resolve_augmentation(value: str, base: Path | None = None, seed: int = 0) -> augment.AugmentationSpec:
    if value in augment.AUGMENTATION_PRESETS:
        return augment.augmentation_preset(value, seed)
    path = Path(value) if base is None or Path(value).is_absolute() else base / value
    if not path.is_file():
        raise UsageError(
            f"--augment: {value!r} is neither a preset ({', '.join(augment.AUGMENTATION_PRESETS)}) nor a file"
        )
    try:
        return augment.AugmentationSpec.from_file(path)
    except ValueError as exc:
        raise UsageError(f"--augment {path}: {exc}") from exc


def load_manifest(path: str) -> datagen.DatasetManifest:
    p = Path(path)
    if p.is_dir():
        p = p / "manifest"
    if not p.is_file():
        raise UsageError(f"--data: no manifest at {p}")
    return datagen.DatasetManifest.read(p)


def load_grid(path: str, base: trainer.RunConfig) -> trainer.GridSpec:
    """Grid file, flat key=value::

        init.scratch=scratch
        init.lira=pretext:ckpt/lira.ssvk
        loss.ccc=ccc                 # preset name or config file
        aug.none=none                # preset name or spec file
        freeze=none,frontend
        seeds=0,1

    Relative paths are resolved against the grid file's directory.
    """
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"--grid: no such file {p}")
    inits, losses, augs = {}, {}, {}
    freezes, seeds = ("none",), (base.seed,)
    for lineno, raw in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{p}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        kind, _, name = key.partition(".")
        if kind == "init" and name:
            if value.startswith("pretext:"):
                ck = Path(value.split(":", 1)[1])
                value = "pretext:" + str(ck if ck.is_absolute() else p.parent / ck)
            inits[name] = value
        elif kind == "loss" and name:
            losses[name] = resolve_loss(value, p.parent)
        elif kind == "aug" and name:
            augs[name] = resolve_augmentation(value, p.parent)
        elif key == "freeze":
            freezes = tuple(v.strip() for v in value.split(","))
            bad = [f for f in freezes if f not in M.FREEZE_MODES]
            if bad:
                raise UsageError(f"{p}:{lineno}: freeze must be among {', '.join(M.FREEZE_MODES)}")
        elif key == "seeds":
            seeds = tuple(int(v) for v in value.split(","))
        else:
            raise UsageError(f"{p}:{lineno}: unknown key {key!r}")
    return trainer.GridSpec(
        inits or {"scratch": "scratch"},
        losses or {"ccc": loss_preset("ccc")},
        augs or {"none": augment.AugmentationSpec()},
        freezes,
        seeds,
        base,
    )


# ---------------------------------------------------------------------------
# commands


def _model_config(args) -> M.ModelConfig:
    return M.ModelConfig(widths=args.widths, hidden=args.hidden, num_bins=args.bins, bidirectional=args.bidirectional)


def _run_config(args) -> trainer.RunConfig:
    loss = resolve_loss(args.loss)
    aug = resolve_augmentation(args.augment, seed=args.augment_seed)
    try:
        return trainer.RunConfig(
            init=args.init,
            freeze=args.freeze,
            loss=loss,
            augmentation=aug,
            lr=args.lr,
            batch=args.batch,
            epochs=args.epochs,
            segment_length=args.segment_length,
            seed=args.seed,
            weight_decay=args.weight_decay,
            cosine=args.cosine,
            centroids=args.centroids,
            model=_model_config(args),
            eval_split=args.split,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_gen_data(args, argv):
    cfg = datagen.SyntheticConfig(
        num_clips=args.clips, T=args.frames, H=args.size, W=args.size, seed=args.seed, noise_std=args.noise
    )
    out = Path(args.out)
    datagen.generate(cfg, out)
    write_record(out, "gen-data", argv, vars(args) | {"synthetic": cfg.__dict__}, args.seed)
    print(out / "manifest")


def cmd_pretrain(args, argv):
    manifest = load_manifest(args.data)
    try:
        cfg = pretext.PretextConfig(
            model=_model_config(args),
            lr=args.lr,
            batch=args.batch,
            segment_length=args.segment_length,
            ema=args.ema,
            tau_student=args.tau_student,
            tau_teacher=args.tau_teacher,
            centering=not args.no_centering,
            per_frame=args.per_frame,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out)
    write_record(out, "pretrain", argv, vars(args), args.seed)
    result = pretext.pretrain(args.method, manifest, args.epochs, args.seed, cfg, out)
    print(out / f"{args.method}.ssvk", *(f"{v:.6f}" for v in result.losses))


def cmd_train(args, argv):
    manifest = load_manifest(args.data)
    run = _run_config(args)
    out = Path(args.out)
    write_record(out, "train", argv, run.describe(), run.seed)
    result = trainer.train(run, manifest, out)
    if result.metrics:
        last = result.metrics[-1]
        print(f"epoch {last['epoch']} arousal {last['val_ccc_arousal']:.4f} valence {last['val_ccc_valence']:.4f}")


def cmd_eval(args, argv):
    manifest = load_manifest(args.data)
    if not Path(args.checkpoint).is_file():
        raise UsageError(f"--checkpoint: no such file {args.checkpoint}")
    report = trainer.evaluate(args.checkpoint, manifest, args.split, input_size=args.input_size)
    out = Path(args.out)
    write_record(out, "eval", argv, vars(args), None)
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    flags = "".join(f" ({d} degenerate)" for d, v in report.degenerate.items() if v)
    print(f"{args.split} arousal {report.combined['arousal']:.4f} valence {report.combined['valence']:.4f}{flags}")


def ablation_grid(args) -> trainer.GridSpec:
    """Grid of an ``ablate`` invocation: the grid file over a base built from the shared flags."""
    args.init, args.freeze, args.loss, args.augment, args.augment_seed = "scratch", "none", "ccc", "none", 0
    return load_grid(args.grid, _run_config(args))


def cmd_ablate(args, argv):
    manifest = load_manifest(args.data)
    grid = ablation_grid(args)
    base = grid.base
    out = Path(args.out)
    write_record(out, "ablate", argv, {"base": base.describe(), "grid": Path(args.grid).read_text()}, args.seed)
    rows = trainer.ablate(grid, manifest, out / "ablation.csv", out / "cells")
    print(f"{len(rows)} rows in {out / 'ablation.csv'}")


def cmd_augment_preview(args, argv):
    spec = resolve_augmentation(args.augment, seed=args.augment_seed)
    if args.clip_file:
        frames = datagen.read_clip(args.clip_file)
    else:
        manifest = load_manifest(args.data)
        if not 0 <= args.clip < len(manifest.entries):
            raise UsageError(f"--clip must lie in [0, {len(manifest.entries) - 1}]")
        frames = manifest.load(args.clip).frames
    out = Path(args.out)
    write_record(out, "augment-preview", argv, vars(args) | {"spec": spec.to_text()}, spec.seed)
    for p in augment.preview(frames, spec, out, clip_id=args.clip, epoch=args.epoch):
        print(p)


def cmd_describe(args, argv):
    cfg = _model_config(args)
    params = M.init(0, cfg)
    info = {
        "model": cfg.__dict__,
        "parameters": M.count_parameters(params),
        "trunk_parameters": M.count_parameters(M.trunk_of(params)),
        "defaults": {
            "weight_decay": trainer.RunConfig.weight_decay,
            "epochs": trainer.RunConfig.epochs,
            "bins": cfg.num_bins,
            "lr_range": trainer.LR_RANGE,
            "batch_range": trainer.BATCH_RANGE,
        },
        "version": code_version(),
    }
    if args.verbose:
        info["tensors"] = {k: list(v.shape) for k, v in params.items()}
    print(json.dumps(info, indent=2))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_record(out, "describe", argv, info, None)


# ---------------------------------------------------------------------------
# parser


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Show defaults, except on required flags where there is none."""

    def _get_help_string(self, action):
        if action.required or action.default is None:
            return action.help
        return super()._get_help_string(action)


def _widths(value: str) -> tuple:
    try:
        widths = tuple(int(v) for v in value.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {value!r}") from None
    if not widths or min(widths) < 1:
        raise argparse.ArgumentTypeError("widths must be positive")
    return widths


def _add_model_flags(p):
    p.add_argument("--widths", type=_widths, default=(8, 16, 32, 64), help="trunk stage widths")
    p.add_argument("--bins", type=int, default=20, help="classification bins L per dimension")
    p.add_argument("--hidden", type=int, default=64, help="GRU hidden size")
    p.add_argument("--bidirectional", action="store_true", help="add a reverse-time GRU pass")


def _add_train_flags(p):
    p.add_argument("--data", required=True, help="dataset manifest (or its directory)")
    p.add_argument("--lr", type=float, default=3e-4, help="learning rate, within [7e-5, 3e-4]")
    p.add_argument("--batch", type=int, default=4, help="clips per batch, within [3, 20]")
    p.add_argument("--epochs", type=int, default=10, help="training epochs")
    p.add_argument("--segment-length", type=int, default=96, help="frames per training segment")
    p.add_argument("--weight-decay", type=float, default=1e-4, help="decoupled AdamW weight decay (lambda)")
    p.add_argument("--cosine", action="store_true", help="cosine learning-rate decay (default: constant)")
    p.add_argument("--centroids", choices=("kmeans", "uniform"), default="kmeans", help="cost-norm centroids")
    p.add_argument("--split", default="val", help="split used for per-epoch evaluation")
    p.add_argument("--seed", type=int, default=0, help="seed for initialization, shuffling and segment sampling")
    p.add_argument("--out", required=True, help="run directory")
    _add_model_flags(p)


def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    parser = argparse.ArgumentParser(prog="ssvaerr", description=__doc__.splitlines()[0], formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    parser.commands = sub.choices

    p = sub.add_parser("gen-data", help="write a synthetic labeled clip set", formatter_class=fmt)
    p.add_argument("--clips", type=int, default=56, help="number of clips")
    p.add_argument("--frames", type=int, default=120, help="frames per clip")
    p.add_argument("--size", type=int, default=64, help="frame height and width")
    p.add_argument("--noise", type=float, default=8.0, help="pixel noise std")
    p.add_argument("--seed", type=int, default=7, help="generator seed")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="self-supervised pre-training of the trunk", formatter_class=fmt)
    p.add_argument("--method", required=True, choices=pretext.METHODS, help="pretext objective")
    p.add_argument("--data", required=True, help="dataset manifest (or its directory)")
    p.add_argument("--epochs", type=int, default=10, help="pretext epochs")
    p.add_argument("--lr", type=float, default=1e-3, help="learning rate")
    p.add_argument("--batch", type=int, default=4, help="clips per batch")
    p.add_argument("--segment-length", type=int, default=32, help="frames per pretext segment")
    p.add_argument("--ema", type=float, default=0.996, help="target/teacher EMA momentum")
    p.add_argument("--tau-student", type=float, default=0.1, help="student softmax temperature (dino)")
    p.add_argument("--tau-teacher", type=float, default=0.04, help="teacher softmax temperature (dino)")
    p.add_argument("--no-centering", action="store_true", help="disable teacher centering (dino)")
    p.add_argument("--per-frame", action="store_true", help="per-frame rather than per-clip embeddings")
    p.add_argument("--seed", type=int, default=0, help="seed for initialization, views and shuffling")
    p.add_argument("--out", required=True, help="output directory")
    _add_model_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="downstream valence/arousal training", formatter_class=fmt)
    p.add_argument("--init", default="scratch", help="'scratch' or 'pretext:<checkpoint>'")
    p.add_argument("--freeze", choices=M.FREEZE_MODES, default="none", help="transferred weights kept fixed")
    p.add_argument("--loss", default="ccc", help=f"loss preset ({', '.join(LOSS_PRESETS)}) or key=value file")
    p.add_argument("--augment", default="none", help="augmentation preset or key=value spec file")
    p.add_argument("--augment-seed", type=int, default=0, help="seed for preset augmentation specs")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="combined and per-video CCC of a checkpoint", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True, help="checkpoint to evaluate")
    p.add_argument("--data", required=True, help="dataset manifest (or its directory)")
    p.add_argument("--split", default="test", help="split to evaluate")
    p.add_argument("--input-size", type=int, default=48, help="center-crop side fed to the model")
    p.add_argument("--out", required=True, help="output directory for report.json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run a resumable grid of training runs", formatter_class=fmt)
    p.add_argument("--grid", required=True, help="key=value grid file")
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("augment-preview", help="write PGM images after every augmentation step", formatter_class=fmt)
    p.add_argument("--augment", required=True, help="augmentation preset or key=value spec file")
    p.add_argument("--augment-seed", type=int, default=0, help="seed for preset augmentation specs")
    p.add_argument("--data", help="dataset manifest")
    p.add_argument("--clip-file", help="read a single .ssva clip instead of --data")
    p.add_argument("--clip", type=int, default=0, help="clip index in the manifest")
    p.add_argument("--epoch", type=int, default=0, help="epoch key for the augmentation draws")
    p.add_argument("--out", required=True, help="output directory for the images")
    p.set_defaults(func=cmd_augment_preview)

    p = sub.add_parser("describe", help="print model configuration and parameter count", formatter_class=fmt)
    _add_model_flags(p)
    p.add_argument("--verbose", action="store_true", help="list every parameter tensor")
    p.add_argument("--out", help="also write a record here")
    p.set_defaults(func=cmd_describe)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command == "augment-preview" and not (args.data or args.clip_file):
        print(parser.commands[args.command].format_usage(), end="", file=sys.stderr)
        print("ssvaerr augment-preview: error: one of --data or --clip-file is required", file=sys.stderr)
        return 2
    out = Path(args.out) if getattr(args, "out", None) else None
    try:
        log_path = setup_logging(out)
    except OSError as exc:
        print(f"error: cannot create output directory {out}: {exc}", file=sys.stderr)
        return 1
    try:
        args.func(args, argv)
    except UsageError as exc:
        print(parser.commands[args.command].format_usage(), end="", file=sys.stderr)
        print(f"ssvaerr {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure: one line on stderr, details in the log
        logger.debug("failure", exc_info=True)
        cause = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error: {type(exc).__name__}: {cause} (log: {log_path or 'none'})", file=sys.stderr)
        return 1
    finally:
        for h in list(logging.getLogger().handlers):
            if isinstance(h, logging.FileHandler):
                logging.getLogger().removeHandler(h)
                h.close()
    return 0
