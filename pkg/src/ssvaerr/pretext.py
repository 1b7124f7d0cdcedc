"""Self-supervised pre-training of the shared trunk.

Three objectives are available:

``lira``
    regress a per-frame audio-feature stream from the video through the
    trunk plus a small GRU head;
``byol``
    an online network (trunk, projector, predictor) predicts the projection
    a slowly moving target network gives for another view of the clip;
``dino``
    a student matches the centered, sharpened output distribution of an EMA
    teacher that only sees the global crops.

Only the trunk (``frontend.*``, ``stage*``) is written to the checkpoint.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import augment
from . import diffcore as dc
from . import model as M
from .datagen import DatasetManifest, center_crop, normalize, sample_segment
from .diffcore import ContractViolation, Tensor
from .trainer import OptimizerState, derive_seed, optimizer_step

logger = logging.getLogger(__name__)

METHODS = ("lira", "byol", "dino")


@dataclass(frozen=True)
class PretextConfig:
    model: M.ModelConfig = field(default_factory=M.ModelConfig)
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch: int = 4
    segment_length: int = 32
    proj_hidden: int = 128
    proj_out: int = 64
    dino_out: int = 64
    ema: float = 0.996
    tau_student: float = 0.1
    tau_teacher: float = 0.04
    center_momentum: float = 0.9
    centering: bool = True
    per_frame: bool = False
    global_area: float = 0.75
    local_area: float = 0.40
    n_global: int = 2
    n_local: int = 2
    lira_crop: int = 48
    lira_random_crop: bool = False

    def __post_init__(self):
        if not 0.0 <= self.ema <= 1.0:
            raise ValueError("ema momentum must lie in [0, 1]")
        if not self.tau_teacher < self.tau_student:
            raise ValueError("teacher temperature must be below the student temperature")
        if self.n_global < 1:
            raise ValueError("need at least one global view")


@dataclass
class PretextState:
    method: str
    online: dict
    target: dict
    center: np.ndarray | None = None
    ema: float = 0.996


# ---------------------------------------------------------------------------
# building blocks


def ema_update(target: dict, online: dict, tau: float) -> dict:
    """``p_t <- tau * p_t + (1 - tau) * p_o`` for every name in ``target``."""
    if not 0.0 <= tau <= 1.0:
        raise ContractViolation(f"EMA momentum must lie in [0, 1], got {tau}")
    out = {}
    for name, t in target.items():
        o = online.get(name)
        if o is None or o.shape != t.shape:
            raise ContractViolation(f"EMA: online parameter {name} missing or shaped differently")
        out[name] = tau * t + (1.0 - tau) * o
    return out


def init_mlp(prefix: str, n_in: int, n_hidden: int, n_out: int, rng) -> dict:
    p = M.init_linear(f"{prefix}.l1", n_in, n_hidden, rng)
    p.update(M.init_linear(f"{prefix}.l2", n_hidden, n_out, rng))
    return p


def mlp(P: dict, prefix: str, x: Tensor) -> Tensor:
    h = dc.affine(dc.matmul(x, P[f"{prefix}.l1.weight"]), shift=P[f"{prefix}.l1.bias"], axis=1)
    h = dc.relu(h)
    return dc.affine(dc.matmul(h, P[f"{prefix}.l2.weight"]), shift=P[f"{prefix}.l2.bias"], axis=1)


def embed(P: dict, x, per_frame: bool = False) -> Tensor:
    """Trunk features as ``[B, C]`` (time-averaged) or ``[B * T, C]`` per frame."""
    feats = M.trunk_forward(P, x)
    B, T, C = feats.shape
    if per_frame:
        return dc.reshape(feats, (B * T, C))
    return dc.mean(feats, axis=1)


def byol_loss(online_out, target_out) -> Tensor:
    """``2 - 2 cos(q, z')``, averaged over rows; the target side carries no gradient."""
    q = dc._as_tensor(online_out)
    z = np.asarray(target_out.data if isinstance(target_out, Tensor) else target_out, dtype=np.float64)
    if q.shape != z.shape:
        raise ContractViolation(f"byol_loss: shapes {q.shape} and {z.shape} differ")
    if q.ndim == 1:
        q = dc.reshape(q, (1, q.shape[0]))
        z = z.reshape(1, -1)
    zn = dc.l2_normalize(Tensor(z)).data
    cos = dc.sum(dc.l2_normalize(q) * Tensor(zn), axis=-1)
    return dc.mean(2.0 - 2.0 * cos)


def byol_symmetric_loss(q1, z2, q2, z1) -> Tensor:
    """Sum of the two orderings of a view pair."""
    return byol_loss(q1, z2) + byol_loss(q2, z1)


def teacher_probs(teacher_logits: np.ndarray, center: np.ndarray, tau_teacher: float) -> np.ndarray:
    z = (np.asarray(teacher_logits) - center) / tau_teacher
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def dino_loss(student_logits: list, teacher_logits: list, center, tau_student: float, tau_teacher: float) -> Tensor:
    """Mean cross-entropy over (teacher view i, student view j != i) pairs.

    Teacher views are the global crops and share indices with the first
    student views.
    """
    if not teacher_logits:
        raise ContractViolation("DINO needs at least one global view")
    terms = []
    for i, t in enumerate(teacher_logits):
        p_t = Tensor(teacher_probs(t, center, tau_teacher))
        for j, s in enumerate(student_logits):
            if i == j:
                continue
            log_p_s = dc.log_softmax(s * (1.0 / tau_student))
            terms.append(dc.mean(-dc.sum(p_t * log_p_s, axis=-1)))
    if not terms:
        raise ContractViolation("DINO needs at least one (teacher, student) pair of different views")
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total * (1.0 / len(terms))


def update_center(center: np.ndarray, teacher_logits: list, momentum: float) -> np.ndarray:
    batch_mean = np.concatenate([np.asarray(t) for t in teacher_logits]).mean(axis=0)
    return momentum * center + (1.0 - momentum) * batch_mean


def dino_step(student_logits: list, teacher_logits: list, center: np.ndarray, cfg: PretextConfig):
    """Loss for one batch and the updated center (unchanged when centering is off)."""
    loss = dino_loss(student_logits, teacher_logits, center, cfg.tau_student, cfg.tau_teacher)
    new_center = update_center(center, teacher_logits, cfg.center_momentum) if cfg.centering else center
    return loss, new_center


def lira_head(P: dict, x) -> Tensor:
    feats = M.trunk_forward(P, x)
    h = M.gru_forward(P, "gru", feats)
    B, T, H = h.shape
    out = dc.affine(dc.matmul(dc.reshape(h, (B * T, H)), P["out.weight"]), shift=P["out.bias"], axis=1)
    return dc.reshape(out, (B, T, P["out.weight"].shape[1]))


def lira_step(P: dict, x, target_stream: np.ndarray) -> Tensor:
    """MSE between the predicted per-frame feature vectors and the target stream."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    target_stream = np.asarray(target_stream, dtype=np.float64)
    if target_stream.ndim == 2:
        target_stream = target_stream[None]
    if x.ndim == 3:
        x = dc.reshape(x, (1,) + x.shape)
    if target_stream.shape[:2] != x.shape[:2]:
        raise ContractViolation(f"feature stream {target_stream.shape[:2]} does not match clip frames {x.shape[:2]}")
    pred = lira_head(P, x)
    return dc.mean(dc.square(pred - Tensor(target_stream)))


# ---------------------------------------------------------------------------
# state construction


def init_state(method: str, cfg: PretextConfig, seed: int, feature_dim: int = 8) -> PretextState:
    if method not in METHODS:
        raise ValueError(f"unknown pretext method {method!r}; choose from {', '.join(METHODS)}")
    trunk = M.trunk_of(M.init(seed, cfg.model))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9E7E]))
    C = cfg.model.widths[-1]
    online = dict(trunk)
    target: dict = {}
    center = None
    if method == "lira":
        online.update(M.init_gru("gru", C, cfg.model.hidden, rng))
        online.update(M.init_linear("out", cfg.model.hidden, feature_dim, rng))
    elif method == "byol":
        online.update(init_mlp("proj", C, cfg.proj_hidden, cfg.proj_out, rng))
        online.update(init_mlp("pred", cfg.proj_out, cfg.proj_hidden, cfg.proj_out, rng))
        target = {k: v.copy() for k, v in online.items() if not k.startswith("pred.")}
    else:
        online.update(init_mlp("head", C, cfg.proj_hidden, cfg.dino_out, rng))
        target = {k: v.copy() for k, v in online.items()}
        center = np.zeros(cfg.dino_out)
    return PretextState(method, online, target, center, cfg.ema)


# ---------------------------------------------------------------------------
# views


def crop_side(size: int, area: float) -> int:
    return max(8, int(round(math.sqrt(area) * size)))


def make_views(frames: np.ndarray, method: str, cfg: PretextConfig, seed: int, clip_id: int, epoch: int) -> list:
    """Augmented copies of one raw clip; every view is coherent across its frames."""
    T, H, W = frames.shape
    if method == "lira":
        if not cfg.lira_random_crop:
            # same view the downstream model gets; a random offset would blur
            # the horizontal position that the target stream depends on
            return [center_crop(frames, cfg.lira_crop)]
        specs = [(augment.RandomCrop(cfg.lira_crop, cfg.lira_crop),)]
    else:
        g = crop_side(min(H, W), cfg.global_area)
        specs = [(augment.RandomCrop(g, g), augment.HorizontalFlip(0.5))] * (2 if method == "byol" else cfg.n_global)
        if method == "dino":
            s = crop_side(min(H, W), cfg.local_area)
            specs = specs + [(augment.RandomCrop(s, s), augment.HorizontalFlip(0.5))] * cfg.n_local
    views = []
    for v, steps in enumerate(specs):
        spec = augment.AugmentationSpec(steps, derive_seed(seed, v))
        views.append(augment.apply(frames, spec, clip_id=clip_id, epoch=epoch))
    return views


# ---------------------------------------------------------------------------
# training


def _objective(state: PretextState, P: dict, views: list, streams, cfg: PretextConfig):
    """Loss tensor for a batch; ``views[v]`` is ``[B, S, h, w]`` for view ``v``."""
    if state.method == "lira":
        return lira_step(P, views[0], streams), None
    T = M.as_tensors(state.target, {})
    if state.method == "byol":
        z = [mlp(P, "proj", embed(P, v, cfg.per_frame)) for v in views]
        q = [mlp(P, "pred", zi) for zi in z]
        zt = [mlp(T, "proj", embed(T, v, cfg.per_frame)).data for v in views]
        return byol_symmetric_loss(q[0], zt[1], q[1], zt[0]), None
    student = [mlp(P, "head", embed(P, v, cfg.per_frame)) for v in views]
    teacher = [mlp(T, "head", embed(T, v, cfg.per_frame)).data for v in views[: cfg.n_global]]
    return dino_step(student, teacher, state.center, cfg)


@dataclass
class PretrainResult:
    trunk: dict
    losses: list
    state: PretextState


def pretrain(
    method: str,
    manifest: DatasetManifest,
    epochs: int,
    seed: int,
    cfg: PretextConfig | None = None,
    out_dir=None,
    splits=("train",),
) -> PretrainResult:
    """Run one pretext objective over the (unlabeled) clips of ``splits``.

    Writes ``<method>.ssvk`` (trunk only) and ``<method>_loss.csv`` when
    ``out_dir`` is given.
    """
    if method not in METHODS:
        raise ValueError(f"unknown pretext method {method!r}; choose from {', '.join(METHODS)}")
    cfg = cfg or PretextConfig()
    ids = [i for s in splits for i in manifest.indices(s)]
    clips = {i: manifest.load(i, with_features=(method == "lira")) for i in ids}
    feature_dim = next(iter(clips.values())).features.shape[1] if method == "lira" and clips else 8
    state = init_state(method, cfg, seed, feature_dim)
    trainable = {k: True for k in state.online}
    opt = OptimizerState.for_params(state.online, trainable, cfg.lr, cfg.weight_decay)
    losses = []
    for epoch in range(1, epochs + 1):
        order = np.random.default_rng(derive_seed(seed, epoch, 11)).permutation(ids)
        epoch_losses = []
        for b in range(0, len(order), cfg.batch):
            batch_ids = [int(i) for i in order[b : b + cfg.batch]]
            per_clip_views = []
            streams = []
            for cid in batch_ids:
                seg = sample_segment(
                    clips[cid], cfg.segment_length, np.random.default_rng(derive_seed(seed, epoch, 12, cid))
                )
                views = make_views(seg.frames, method, cfg, seed, cid, epoch)
                per_clip_views.append([normalize(v, manifest.mean, manifest.std) for v in views])
                if method == "lira":
                    streams.append(seg.features)
            views = [np.stack([pc[v] for pc in per_clip_views]) for v in range(len(per_clip_views[0]))]
            P = M.as_tensors(state.online)
            loss, new_center = _objective(state, P, views, np.stack(streams) if streams else None, cfg)
            grads = dc.backward(loss)
            optimizer_step(state.online, {k: grads[t] for k, t in P.items() if t in grads}, opt)
            if state.target:
                state.target = ema_update(state.target, state.online, state.ema)
            if new_center is not None:
                state.center = new_center
            epoch_losses.append(loss.item())
        losses.append(float(np.mean(epoch_losses)))
        logger.info("%s epoch %d loss %.5f", method, epoch, losses[-1])
    trunk = M.trunk_of(state.online)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        M.save_checkpoint(out / f"{method}.ssvk", trunk)
        with open(out / f"{method}_loss.csv", "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "loss"])
            for e, value in enumerate(losses, 1):
                w.writerow([e, repr(value)])
    return PretrainResult(trunk, losses, state)


def teacher_spread(state: PretextState, frames_batch: np.ndarray, cfg: PretextConfig) -> float:
    """Mean over output units of the std of teacher probabilities across inputs.

    Near zero means the teacher gives every input the same distribution.
    """
    T = M.as_tensors(state.target, {})
    logits = mlp(T, "head", embed(T, frames_batch, cfg.per_frame)).data
    center = state.center if state.center is not None else np.zeros(logits.shape[1])
    return float(teacher_probs(logits, center, cfg.tau_teacher).std(axis=0).mean())
