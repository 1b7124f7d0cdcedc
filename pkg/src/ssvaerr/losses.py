"""Regression and classification losses for valence/arousal, and the CCC metric.

Column order of every ``[F, 2]`` array is :data:`ssvaerr.labels.DIMENSIONS`
(valence, arousal).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import ContractViolation, Tensor
from .labels import DIMENSIONS

TRAIN_EPS = 1e-8
TERMS = ("ccc", "mse", "ce", "ncce")


class DegenerateSignal(ArithmeticError):
    """CCC is undefined: both series are constant with equal means."""


# ---------------------------------------------------------------------------
# concordance correlation


def ccc(y, yhat) -> float:
    """Lin's concordance correlation coefficient with population moments."""
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape or y.ndim != 1:
        raise ContractViolation(f"ccc needs two 1-D series of equal length, got {y.shape} and {yhat.shape}")
    if y.size < 2:
        raise ContractViolation("ccc needs at least 2 frames")
    my, mh = y.mean(), yhat.mean()
    dy, dh = y - my, yhat - mh
    denom = (dy * dy).mean() + (dh * dh).mean() + (my - mh) ** 2
    if denom < 1e-12:
        raise DegenerateSignal("both series are constant and agree; CCC undefined")
    return float(2.0 * (dy * dh).mean() / denom)


def ccc_tensor(y, yhat, eps: float = TRAIN_EPS) -> Tensor:
    y, yhat = dc._as_tensor(y), dc._as_tensor(yhat)
    if y.shape != yhat.shape or y.ndim != 1:
        raise ContractViolation(f"ccc needs two 1-D series of equal length, got {y.shape} and {yhat.shape}")
    my, mh = dc.mean(y), dc.mean(yhat)
    dy, dh = y - my, yhat - mh
    cov = dc.mean(dy * dh)
    denom = dc.mean(dc.square(dy)) + dc.mean(dc.square(dh)) + dc.square(my - mh) + eps
    return 2.0 * cov / denom


def ccc_loss(y, yhat, eps: float = TRAIN_EPS) -> Tensor:
    """``1 - CCC`` with an epsilon-guarded denominator, differentiable everywhere."""
    return 1.0 - ccc_tensor(y, yhat, eps)


def mse(y, yhat) -> Tensor:
    y, yhat = dc._as_tensor(y), dc._as_tensor(yhat)
    if y.shape != yhat.shape:
        raise ContractViolation(f"mse: shapes {y.shape} and {yhat.shape} differ")
    return dc.mean(dc.square(yhat - y))


# ---------------------------------------------------------------------------
# classification


def _check_class_shapes(onehot: np.ndarray, logits: Tensor):
    if onehot.ndim != 2 or onehot.shape != logits.shape:
        raise ContractViolation(f"targets {onehot.shape} and logits {logits.shape} must both be [F, L]")


def ce_per_frame(onehot, logits) -> Tensor:
    onehot = np.asarray(onehot, dtype=np.float64)
    logits = dc._as_tensor(logits)
    _check_class_shapes(onehot, logits)
    logp = dc.log(dc.softmax(logits), floor=1e-12)
    return -dc.sum(logp * dc.tensor(onehot), axis=-1)


def ce(onehot, logits) -> Tensor:
    """Mean over frames of the cross-entropy between one-hot targets and softmax(logits)."""
    return dc.mean(ce_per_frame(onehot, logits))


def cost_norm(onehot, probs, centroids) -> np.ndarray:
    """``1 + |sum_l K_l (Y_l - P_l)|`` per frame (last axis is the class axis)."""
    onehot = np.asarray(onehot, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    k = np.asarray(centroids, dtype=np.float64)
    if onehot.shape != probs.shape or onehot.shape[-1] != k.shape[0]:
        raise ContractViolation("cost_norm: target, probability and centroid lengths differ")
    return 1.0 + np.abs(((onehot - probs) * k).sum(axis=-1))


def ncce(onehot, logits, centroids, cost_grad: bool = False) -> Tensor:
    """Cost-sensitive cross-entropy: per-frame CE weighted by the cost norm, averaged.

    By default the cost norm is a constant weight; ``cost_grad=True`` lets the
    gradient flow through it as well.
    """
    onehot = np.asarray(onehot, dtype=np.float64)
    logits = dc._as_tensor(logits)
    per_frame = ce_per_frame(onehot, logits)
    k = np.asarray(centroids, dtype=np.float64)
    if cost_grad:
        diff = dc.tensor(onehot) - dc.softmax(logits)
        proj = dc.reshape(dc.matmul(diff, dc.tensor(k.reshape(-1, 1))), (onehot.shape[0],))
        weight = 1.0 + dc.absolute(proj)
    else:
        probs = dc.softmax(dc.tensor(logits.data)).data
        weight = dc.tensor(cost_norm(onehot, probs, k))
    return dc.mean(per_frame * weight)


# ---------------------------------------------------------------------------
# composite loss


@dataclass
class CompositeLossConfig:
    """Non-negative weight per (dimension, term); unspecified entries are 0."""

    weights: dict = field(default_factory=dict)
    cost_grad: bool = False

    def __post_init__(self):
        full = {d: {t: 0.0 for t in TERMS} for d in DIMENSIONS}
        for d, terms in self.weights.items():
            if d not in full:
                raise ValueError(f"unknown dimension {d!r}")
            for t, w in terms.items():
                if t not in TERMS:
                    raise ValueError(f"unknown loss term {t!r}")
                w = float(w)
                if not w >= 0:
                    raise ValueError(f"weight {d}.{t} must be >= 0, got {w}")
                full[d][t] = w
        if not any(w > 0 for terms in full.values() for w in terms.values()):
            raise ValueError("at least one loss weight must be positive")
        self.weights = full

    def w(self, dim: str, term: str) -> float:
        return self.weights[dim][term]

    @classmethod
    def uniform(cls, **terms) -> "CompositeLossConfig":
        """Same weights on both dimensions, e.g. ``uniform(ccc=0.5, ce=0.5)``."""
        return cls({d: dict(terms) for d in DIMENSIONS})

    @classmethod
    def parse(cls, text: str) -> "CompositeLossConfig":
        weights: dict = {}
        cost_grad = False
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key == "cost_grad":
                if value.lower() not in ("true", "false", "1", "0"):
                    raise ValueError(f"line {lineno}: cost_grad must be true or false")
                cost_grad = value.lower() in ("true", "1")
                continue
            dim, _, term = key.partition(".")
            if dim not in DIMENSIONS or term not in TERMS:
                raise ValueError(f"line {lineno}: unknown key {key!r}")
            weights.setdefault(dim, {})[term] = float(value)
        return cls(weights, cost_grad)

    @classmethod
    def from_file(cls, path) -> "CompositeLossConfig":
        return cls.parse(Path(path).read_text(encoding="utf-8"))

    def to_text(self) -> str:
        lines = [f"{d}.{t}={self.weights[d][t]!r}" for d in ("arousal", "valence") for t in TERMS if self.weights[d][t]]
        if self.cost_grad:
            lines.append("cost_grad=true")
        return "\n".join(lines) + "\n"


# weight settings compared in the loss ablation
LOSS_PRESETS = {
    "ccc": "arousal.ccc=1\nvalence.ccc=1\n",
    "mse": "arousal.mse=1\nvalence.mse=1\n",
    "ccc_ce": "arousal.ccc=0.5\narousal.ce=0.5\nvalence.ccc=0.5\nvalence.ce=0.5\n",
    "ccc_ce_mse": (
        "arousal.ccc=0.5\narousal.ce=0.25\narousal.mse=0.25\n"
        "valence.ccc=0.5\nvalence.ce=0.25\nvalence.mse=0.25\n"
    ),
    "arousal_ce": "valence.ccc=1\narousal.ccc=0.66\narousal.ce=0.34\n",
    "arousal_ce_mse": "valence.ccc=1\narousal.ccc=0.66\narousal.ce=0.17\narousal.mse=0.17\n",
    "ccc_ncce": "arousal.ccc=0.5\narousal.ncce=0.5\nvalence.ccc=0.5\nvalence.ncce=0.5\n",
    "ccc_ncce_mse": (
        "arousal.ccc=0.5\narousal.ncce=0.25\narousal.mse=0.25\n"
        "valence.ccc=0.5\nvalence.ncce=0.25\nvalence.mse=0.25\n"
    ),
}


def loss_preset(name: str) -> CompositeLossConfig:
    return CompositeLossConfig.parse(LOSS_PRESETS[name])


@dataclass
class PredictionBatch:
    reg: Tensor  # [F, 2]
    logits: Tensor  # [F, 2, L]
    targets: np.ndarray  # [F, 2] continuous labels

    def __post_init__(self):
        F = self.targets.shape[0]
        if self.reg.shape != (F, 2) or self.logits.ndim != 3 or self.logits.shape[:2] != (F, 2):
            raise ContractViolation(
                f"inconsistent batch shapes reg={self.reg.shape} logits={self.logits.shape} targets={self.targets.shape}"
            )


def composite_loss(batch: PredictionBatch, cfg: CompositeLossConfig, disc):
    """Weighted sum of all active terms over both dimensions.

    ``disc`` is one :class:`Discretizer` or a mapping from dimension name to
    one. Returns the total as a :class:`Tensor` and a dict
    ``{"valence.ccc": ...}`` of the unweighted value of every active term.
    """
    discs = disc if isinstance(disc, Mapping) else {d: disc for d in DIMENSIONS}
    L = batch.logits.shape[2]
    total = None
    parts = {}
    for j, dim in enumerate(DIMENSIONS):
        disc = discs[dim]
        if L != disc.num_bins:
            raise ContractViolation(f"logits have {L} classes, discretizer has {disc.num_bins}")
        y = batch.targets[:, j]
        yhat = batch.reg[:, j]
        logits = batch.logits[:, j, :]
        onehot = None
        for term in TERMS:
            w = cfg.w(dim, term)
            if w == 0:
                continue
            if term == "ccc":
                value = ccc_loss(y, yhat)
            elif term == "mse":
                value = mse(y, yhat)
            else:
                if onehot is None:
                    onehot = disc.one_hot(y)
                if term == "ce":
                    value = ce(onehot, logits)
                else:
                    value = ncce(onehot, logits, disc.cost_centroids(), cost_grad=cfg.cost_grad)
            parts[f"{dim}.{term}"] = value.item()
            contrib = w * value
            total = contrib if total is None else total + contrib
    return total, parts


def combined_ccc(predictions: Sequence, targets: Sequence) -> dict:
    """Metric CCC per dimension over all videos concatenated in the given order."""
    if len(predictions) != len(targets) or not predictions:
        raise ContractViolation("need matching, non-empty prediction and target lists")
    pred = np.concatenate([np.asarray(p, dtype=np.float64).reshape(-1, 2) for p in predictions])
    targ = np.concatenate([np.asarray(t, dtype=np.float64).reshape(-1, 2) for t in targets])
    return {dim: ccc(targ[:, j], pred[:, j]) for j, dim in enumerate(DIMENSIONS)}


def per_dimension_ccc(pred, target) -> Mapping[str, float]:
    pred = np.asarray(pred).reshape(-1, 2)
    target = np.asarray(target).reshape(-1, 2)
    return {dim: ccc(target[:, j], pred[:, j]) for j, dim in enumerate(DIMENSIONS)}
