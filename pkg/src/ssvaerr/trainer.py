"""Downstream training, evaluation and the ablation grid runner."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import itertools
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from filelock import FileLock

from . import augment
from . import diffcore as dc
from . import model as M
from .datagen import DatasetManifest, center_crop, normalize, sample_segment
from .labels import DIMENSIONS, Discretizer, kmeans_centroids
from .losses import CompositeLossConfig, DegenerateSignal, PredictionBatch, ccc, composite_loss, loss_preset

logger = logging.getLogger(__name__)

METRIC_HEADER = ["epoch", "train_loss", "val_ccc_arousal", "val_ccc_valence", "seconds"]
ABLATION_HEADER = [
    "config_hash",
    "pretext",
    "freeze",
    "loss_config",
    "augmentation",
    "seed",
    "ccc_arousal",
    "ccc_valence",
    "seconds",
]
LR_RANGE = (7e-5, 3e-4)
BATCH_RANGE = (3, 20)


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    lr: float
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict, trainable: dict, lr: float, weight_decay: float = 1e-4) -> "OptimizerState":
        names = [k for k in params if trainable.get(k, False)]
        return cls(
            lr=lr,
            weight_decay=weight_decay,
            m={k: np.zeros_like(params[k]) for k in names},
            v={k: np.zeros_like(params[k]) for k in names},
        )


def optimizer_step(params: dict, grads: dict, state: OptimizerState, lr: float | None = None):
    """One AdamW update, in place, for the parameters that have optimizer state.

    Weight decay is decoupled (``p -= lr * wd * p``) and, like the moment
    update, never touches frozen parameters.
    """
    lr = state.lr if lr is None else lr
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, m in state.m.items():
        p = params[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        v = state.v[name]
        if state.weight_decay:
            p *= 1.0 - lr * state.weight_decay
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    init: str = "scratch"  # "scratch" or "pretext:<checkpoint path>"
    freeze: str = "none"
    loss: CompositeLossConfig = field(default_factory=lambda: loss_preset("ccc"))
    augmentation: augment.AugmentationSpec = field(default_factory=augment.AugmentationSpec)
    lr: float = 3e-4
    batch: int = 4
    epochs: int = 10
    segment_length: int = 96
    seed: int = 0
    weight_decay: float = 1e-4
    cosine: bool = False
    centroids: str = "kmeans"  # cost-norm centroids: "kmeans" or "uniform"
    model: M.ModelConfig = field(default_factory=M.ModelConfig)
    eval_split: str = "val"
    log_seconds: bool = False

    def __post_init__(self):
        if self.freeze not in M.FREEZE_MODES:
            raise ValueError(f"freeze must be one of {', '.join(M.FREEZE_MODES)}; got {self.freeze!r}")
        if not (self.init == "scratch" or self.init.startswith("pretext:")):
            raise ValueError(f"init must be 'scratch' or 'pretext:<path>', got {self.init!r}")
        if not LR_RANGE[0] <= self.lr <= LR_RANGE[1]:
            raise ValueError(f"lr must lie in [{LR_RANGE[0]}, {LR_RANGE[1]}], got {self.lr}")
        if not BATCH_RANGE[0] <= self.batch <= BATCH_RANGE[1]:
            raise ValueError(f"batch must lie in [{BATCH_RANGE[0]}, {BATCH_RANGE[1]}], got {self.batch}")
        if self.epochs < 0 or self.segment_length < 1:
            raise ValueError("epochs must be >= 0 and segment_length >= 1")
        if self.centroids not in ("kmeans", "uniform"):
            raise ValueError(f"centroids must be 'kmeans' or 'uniform', got {self.centroids!r}")

    def describe(self) -> dict:
        """JSON-friendly view used for hashing and run records."""
        return {
            "init": self.init,
            "freeze": self.freeze,
            "loss": self.loss.to_text(),
            "augmentation": self.augmentation.to_text(),
            "lr": self.lr,
            "batch": self.batch,
            "epochs": self.epochs,
            "segment_length": self.segment_length,
            "seed": self.seed,
            "weight_decay": self.weight_decay,
            "cosine": self.cosine,
            "centroids": self.centroids,
            "model": dataclasses.asdict(self.model),
            "eval_split": self.eval_split,
        }


@dataclass
class TrainRun:
    params: dict
    best_params: dict
    metrics: list
    out_dir: Path | None = None
    best_epoch: int = 0


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1, dtype=np.uint64)[0])


def make_discretizers(run: RunConfig, train_targets: np.ndarray, num_bins: int) -> dict:
    base = Discretizer(num_bins)
    uses_ncce = any(run.loss.w(d, "ncce") > 0 for d in DIMENSIONS)
    if run.centroids == "uniform" or not uses_ncce:
        return {d: base for d in DIMENSIONS}
    out = {}
    for j, d in enumerate(DIMENSIONS):
        km = kmeans_centroids(train_targets[:, j], k=num_bins, seed=run.seed, low=base.low, high=base.high)
        out[d] = base if km.fallback else base.with_centroids(km.centroids)
    return out


def batch_loss(params_t: dict, x: np.ndarray, targets: np.ndarray, mask: np.ndarray, run: RunConfig, discs: dict):
    """Composite loss over all unmasked frames of a batch.

    ``x`` is ``[B, S, H, W]`` (already normalized), ``targets`` ``[B, S, 2]``,
    ``mask`` ``[B, S]``. A batch without valid frames gives an exact zero
    that is still connected to the graph, so every gradient is zero.
    """
    out = M.forward(params_t, x, run.model)
    B, S = x.shape[:2]
    L = run.model.num_bins
    valid = np.flatnonzero(mask.reshape(-1))
    reg = dc.reshape(out.reg, (B * S, 2))
    logits = dc.reshape(out.logits, (B * S, 2, L))
    if valid.size == 0:
        return dc.sum(reg) * 0.0 + dc.sum(logits) * 0.0, {}
    batch = PredictionBatch(dc.take(reg, valid), dc.take(logits, valid), targets.reshape(-1, 2)[valid])
    return composite_loss(batch, run.loss, discs)


def _initial_params(run: RunConfig) -> dict:
    params = M.init(run.seed, run.model)
    if run.init.startswith("pretext:"):
        pretext = M.load_checkpoint(run.init.split(":", 1)[1])
        params = M.transfer_weights(pretext, params)
    return params


def _prepare(frames: np.ndarray, manifest: DatasetManifest, size: int) -> np.ndarray:
    return normalize(center_crop(frames, size), manifest.mean, manifest.std)


def _write_metrics(path: Path, rows: list, log_seconds: bool) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_HEADER)
        for r in rows:
            w.writerow(
                [
                    r["epoch"],
                    repr(r["train_loss"]),
                    repr(r["val_ccc_arousal"]),
                    repr(r["val_ccc_valence"]),
                    f"{r['seconds']:.3f}" if log_seconds else "",
                ]
            )


def train(run: RunConfig, manifest: DatasetManifest, out_dir=None) -> TrainRun:
    """Train the downstream model; one random segment per training clip per epoch.

    Writes ``metrics.csv``, ``last.ssvk`` and ``best.ssvk`` (best mean
    validation CCC) under ``out_dir`` when given.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    params = _initial_params(run)
    trainable = M.freeze_mask(params, run.freeze)
    state = OptimizerState.for_params(params, trainable, run.lr, run.weight_decay)

    train_idx = manifest.indices("train")
    if not train_idx and run.epochs:
        raise ValueError("manifest has no training clips")
    clips = {i: manifest.load(i) for i in train_idx}
    train_targets = np.concatenate([clips[i].targets() for i in train_idx]) if train_idx else np.zeros((0, 2))
    discs = make_discretizers(run, train_targets, run.model.num_bins)
    aug_seed = derive_seed(run.seed, run.augmentation.seed)
    aug_spec = dataclasses.replace(run.augmentation, seed=aug_seed)
    eval_clips = [(i, manifest.load(i)) for i in manifest.indices(run.eval_split)]

    best = {k: v.copy() for k, v in params.items()}
    best_score = -math.inf
    best_epoch = 0
    rows = []
    steps_per_epoch = math.ceil(len(train_idx) / run.batch) if train_idx else 0
    total_steps = steps_per_epoch * run.epochs
    if out is not None:
        M.save_checkpoint(out / "last.ssvk", params)
        M.save_checkpoint(out / "best.ssvk", params)
        _write_metrics(out / "metrics.csv", rows, run.log_seconds)

    for epoch in range(1, run.epochs + 1):
        t0 = time.perf_counter()
        order = np.random.default_rng(derive_seed(run.seed, epoch, 1)).permutation(train_idx)
        losses = []
        for b in range(steps_per_epoch):
            ids = [int(i) for i in order[b * run.batch : (b + 1) * run.batch]]
            segs = []
            for cid in ids:
                seg = sample_segment(
                    clips[cid], run.segment_length, np.random.default_rng(derive_seed(run.seed, epoch, 2, cid))
                )
                frames = augment.apply(seg.frames, aug_spec, clip_id=cid, epoch=epoch)
                segs.append((_prepare(frames, manifest, run.model.input_size), seg))
            x = np.stack([s[0] for s in segs])
            targets = np.stack([s[1].targets() for s in segs])
            mask = np.stack([s[1].mask for s in segs])
            P = M.as_tensors(params, trainable)
            loss, _ = batch_loss(P, x, targets, mask, run, discs)
            if not np.isfinite(loss.item()):
                dump = None
                if out is not None:
                    dump = out / f"nan_batch_e{epoch}_b{b}.npz"
                    np.savez(dump, clip_ids=np.array(ids), x=x, targets=targets, mask=mask)
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b} (clips {ids}); dump: {dump}")
            grads = dc.backward(loss)
            named = {k: grads[t] for k, t in P.items() if t in grads}
            lr = run.lr
            if run.cosine and total_steps:
                lr = run.lr * 0.5 * (1.0 + math.cos(math.pi * state.step / total_steps))
            optimizer_step(params, named, state, lr=lr)
            losses.append(loss.item())

        report = evaluate_params(params, run.model, manifest, run.eval_split, clips=eval_clips)
        seconds = time.perf_counter() - t0
        row = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)) if losses else 0.0,
            "val_ccc_arousal": report.combined["arousal"],
            "val_ccc_valence": report.combined["valence"],
            "seconds": seconds,
        }
        rows.append(row)
        logger.info(
            "epoch %d loss %.4f val ccc arousal %.4f valence %.4f (%.1fs)",
            epoch,
            row["train_loss"],
            row["val_ccc_arousal"],
            row["val_ccc_valence"],
            seconds,
        )
        score = 0.5 * (row["val_ccc_arousal"] + row["val_ccc_valence"])
        if score > best_score:
            best_score = score
            best_epoch = epoch
            best = {k: v.copy() for k, v in params.items()}
        if out is not None:
            M.save_checkpoint(out / "last.ssvk", params)
            if best_epoch == epoch:
                M.save_checkpoint(out / "best.ssvk", params)
            _write_metrics(out / "metrics.csv", rows, run.log_seconds)
    return TrainRun(params, best, rows, out, best_epoch)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    combined: dict
    degenerate: dict
    per_video: list  # dicts: index, clip, valence, arousal, degenerate

    def to_dict(self) -> dict:
        return {"combined": self.combined, "degenerate": self.degenerate, "per_video": self.per_video}


def safe_ccc(y: np.ndarray, yhat: np.ndarray):
    """Metric CCC, reporting constant-signal cases as ``(0.0, True)``."""
    if np.ptp(y) == 0 or np.ptp(yhat) == 0:
        try:
            value = ccc(y, yhat)
        except DegenerateSignal:
            value = 0.0
        return value, True
    return ccc(y, yhat), False


def predict_clip(params: dict, cfg: M.ModelConfig, frames: np.ndarray, mean: float, std: float) -> np.ndarray:
    """Regression output ``[T, 2]`` for a whole clip of raw 0..255 frames."""
    x = normalize(center_crop(frames, cfg.input_size), mean, std)[None]
    out = M.forward(M.as_tensors(params, {}), x, cfg)
    return out.reg.data[0]


def evaluate_predictions(predictions: list, targets: list, names: list | None = None) -> EvalReport:
    per_video = []
    for k, (p, t) in enumerate(zip(predictions, targets)):
        row = {"index": k if names is None else names[k], "degenerate": False}
        for j, d in enumerate(DIMENSIONS):
            value, degen = safe_ccc(t[:, j], p[:, j]) if len(t) >= 2 else (0.0, True)
            row[d] = value
            row["degenerate"] = row["degenerate"] or degen
        per_video.append(row)
    pred = np.concatenate(predictions)
    targ = np.concatenate(targets)
    combined = {}
    degenerate = {}
    for j, d in enumerate(DIMENSIONS):
        combined[d], degenerate[d] = safe_ccc(targ[:, j], pred[:, j])
    return EvalReport(combined, degenerate, per_video)


def evaluate_params(params, cfg, manifest: DatasetManifest, split: str = "val", clips=None, predict=None) -> EvalReport:
    """Combined and per-video CCC over whole clips of ``split``, in manifest order.

    ``predict(clip: LabeledClip) -> [T, 2]`` replaces the model when given.
    """
    if clips is None:
        clips = [(i, manifest.load(i)) for i in manifest.indices(split)]
    if not clips:
        raise ValueError(f"manifest has no {split!r} clips")
    preds, targs, names = [], [], []
    for i, clip in clips:
        if predict is not None:
            p = np.asarray(predict(clip), dtype=np.float64)
        else:
            p = predict_clip(params, cfg, clip.frames, manifest.mean, manifest.std)
        preds.append(p)
        targs.append(clip.targets())
        names.append(str(manifest.entries[i].clip_path.name))
    return evaluate_predictions(preds, targs, names)


def evaluate(checkpoint, manifest: DatasetManifest, split: str = "val", input_size: int = 48, predict=None) -> EvalReport:
    params = M.load_checkpoint(checkpoint) if not isinstance(checkpoint, dict) else checkpoint
    cfg = M.infer_config(params, input_size)
    return evaluate_params(params, cfg, manifest, split, predict=predict)


# ---------------------------------------------------------------------------
# ablation grid


@dataclass
class GridSpec:
    """Cartesian product of run settings; each entry is a display name -> value mapping."""

    inits: dict = field(default_factory=lambda: {"scratch": "scratch"})
    losses: dict = field(default_factory=lambda: {"ccc": loss_preset("ccc")})
    augmentations: dict = field(default_factory=lambda: {"none": augment.AugmentationSpec()})
    freezes: tuple = ("none",)
    seeds: tuple = (0,)
    base: RunConfig = field(default_factory=RunConfig)

    def cells(self):
        for (init_name, init), (loss_name, loss), (aug_name, aug), freeze, seed in itertools.product(
            self.inits.items(), self.losses.items(), self.augmentations.items(), self.freezes, self.seeds
        ):
            run = dataclasses.replace(self.base, init=init, loss=loss, augmentation=aug, freeze=freeze, seed=seed)
            yield {"pretext": init_name, "loss_config": loss_name, "augmentation": aug_name, "freeze": freeze}, run


def config_hash(run: RunConfig) -> str:
    """Hash of everything but the seed, then ``-s<seed>``."""
    desc = run.describe()
    desc.pop("seed")
    if run.init.startswith("pretext:"):
        desc["init_digest"] = hashlib.sha256(Path(run.init.split(":", 1)[1]).read_bytes()).hexdigest()
    digest = hashlib.sha256(json.dumps(desc, sort_keys=True).encode()).hexdigest()[:16]
    return f"{digest}-s{run.seed}"


def read_ablation(path) -> list:
    """Complete rows of an ablation CSV; a torn final line is ignored."""
    path = Path(path)
    if not path.exists():
        return []
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        text = fh.read()
    lines = text.split("\n")
    if lines and lines[-1] != "":
        lines = lines[:-1]  # last line has no terminator: torn write
    reader = csv.DictReader([ln for ln in lines if ln])
    for r in reader:
        if None in r.values() or None in r:
            continue
        rows.append(r)
    return rows


def _append_row(path: Path, row: dict) -> None:
    with FileLock(str(path) + ".lock"):
        new = not path.exists() or path.stat().st_size == 0
        if not new:
            with open(path, "rb") as fh:
                fh.seek(-1, 2)
                if fh.read(1) != b"\n":
                    new_line = True
                else:
                    new_line = False
        with open(path, "a", encoding="utf-8", newline="") as fh:
            if new:
                fh.write(",".join(ABLATION_HEADER) + "\n")
            elif new_line:
                fh.write("\n")
            line = ",".join(str(row[k]) for k in ABLATION_HEADER) + "\n"
            fh.write(line)
            fh.flush()


def run_cell(run: RunConfig, manifest: DatasetManifest, out_dir=None):
    """Train with ``run`` then evaluate the final parameters on ``run.eval_split``."""
    result = train(run, manifest, out_dir)
    report = evaluate_params(result.params, run.model, manifest, run.eval_split)
    return result, report


def ablate(grid: GridSpec, manifest: DatasetManifest, out_csv, work_dir=None) -> list:
    """Run every grid cell not already present in ``out_csv`` and append its row.

    Rows are keyed by :func:`config_hash`; rerunning skips finished cells, so an
    interrupted grid resumes where it stopped.
    """
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    done = {r["config_hash"] for r in read_ablation(out_csv)}
    for names, run in grid.cells():
        h = config_hash(run)
        if h in done:
            logger.info("cell %s cached", h)
            continue
        t0 = time.perf_counter()
        cell_dir = Path(work_dir) / h if work_dir is not None else None
        _, report = run_cell(run, manifest, cell_dir)
        row = {
            "config_hash": h,
            **names,
            "seed": run.seed,
            "ccc_arousal": repr(report.combined["arousal"]),
            "ccc_valence": repr(report.combined["valence"]),
            "seconds": f"{time.perf_counter() - t0:.3f}",
        }
        _append_row(out_csv, row)
        done.add(h)
        logger.info("cell %s arousal %s valence %s", h, row["ccc_arousal"], row["ccc_valence"])
    return read_ablation(out_csv)
