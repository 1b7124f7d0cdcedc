"""Continuous valence/arousal labels and their discretization into classes."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffcore import ContractViolation

logger = logging.getLogger(__name__)

DIMENSIONS = ("valence", "arousal")


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class AffectSeries:
    """Per-frame valence and arousal values."""

    valence: np.ndarray
    arousal: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.valence, dtype=np.float64)
        a = np.asarray(self.arousal, dtype=np.float64)
        if v.ndim != 1 or v.shape != a.shape:
            raise ValueError(f"valence/arousal must be 1-D of equal length, got {v.shape} and {a.shape}")
        object.__setattr__(self, "valence", v)
        object.__setattr__(self, "arousal", a)

    @property
    def frame_count(self) -> int:
        return self.valence.shape[0]

    def as_matrix(self) -> np.ndarray:
        """``[F, 2]`` with columns ordered as :data:`DIMENSIONS`."""
        return np.stack([self.valence, self.arousal], axis=1)

    def check_range(self, low: float = -1.0, high: float = 1.0) -> None:
        m = self.as_matrix()
        if m.size and (m.min() < low or m.max() > high):
            raise ValueError(f"labels outside [{low}, {high}]")


@dataclass(frozen=True)
class Discretizer:
    """Uniform bins over ``[low, high]`` plus optional per-bin centroids.

    Bins are half-open ``[edge_l, edge_{l+1})`` except the last, which also
    takes ``high``. ``centroids`` (k-means values sorted ascending) are used by
    the cost-sensitive loss; when absent the bin midpoints stand in.
    """

    num_bins: int = 20
    low: float = -1.0
    high: float = 1.0
    centroids: tuple | None = field(default=None)

    def __post_init__(self):
        if self.num_bins < 2:
            raise ConfigurationError(f"need at least 2 bins, got {self.num_bins}")
        if not self.low < self.high:
            raise ConfigurationError(f"label range must satisfy low < high, got [{self.low}, {self.high}]")
        if self.centroids is not None:
            c = tuple(float(x) for x in self.centroids)
            if len(c) != self.num_bins:
                raise ConfigurationError(f"{len(c)} centroids for {self.num_bins} bins")
            object.__setattr__(self, "centroids", c)

    @property
    def boundaries(self) -> np.ndarray:
        return np.linspace(self.low, self.high, self.num_bins + 1)

    @property
    def bin_width(self) -> float:
        return (self.high - self.low) / self.num_bins

    @property
    def midpoints(self) -> np.ndarray:
        return self.low + (np.arange(self.num_bins) + 0.5) * self.bin_width

    def cost_centroids(self) -> np.ndarray:
        if self.centroids is None:
            return self.midpoints
        return np.asarray(self.centroids)

    def with_centroids(self, centroids) -> "Discretizer":
        return Discretizer(self.num_bins, self.low, self.high, tuple(centroids))

    def discretize(self, values):
        """Bin index for each value; out-of-range values are clamped first."""
        v = np.clip(np.asarray(values, dtype=np.float64), self.low, self.high)
        # searching the edges rather than flooring keeps v == edge_l in bin l
        # exactly; the floor formula can round an edge down into the bin below
        idx = np.searchsorted(self.boundaries, v, side="right").astype(np.intp) - 1
        idx = np.minimum(idx, self.num_bins - 1)
        return int(idx) if idx.ndim == 0 else idx

    def one_hot(self, values) -> np.ndarray:
        return one_hot(self.discretize(values), self.num_bins)


def discretize(v, d: Discretizer):
    return d.discretize(v)


def one_hot(idx, num_classes: int) -> np.ndarray:
    """One-hot rows for an index or an array of indices."""
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= num_classes):
        raise ContractViolation(f"class index out of range [0, {num_classes})")
    out = np.zeros(idx.shape + (num_classes,))
    np.put_along_axis(out, idx[..., None].astype(np.intp), 1.0, axis=-1)
    return out


@dataclass(frozen=True)
class KMeansResult:
    centroids: np.ndarray
    objective_history: list
    iterations: int
    fallback: bool = False


def _kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(x.size)]]
    d2 = (x - centers[0]) ** 2
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # every point sits on a chosen center already
            remaining = np.setdiff1d(x, centers)
            centers.append(remaining[0])
        else:
            centers.append(x[rng.choice(x.size, p=d2 / total)])
        d2 = np.minimum(d2, (x - centers[-1]) ** 2)
    return np.array(centers, dtype=np.float64)


def kmeans_centroids(
    values,
    k: int = 20,
    seed: int = 0,
    low: float = -1.0,
    high: float = 1.0,
    max_iter: int = 100,
) -> KMeansResult:
    """1-D Lloyd's k-means with k-means++ seeding, centroids sorted ascending.

    Runs until the assignment stops changing or ``max_iter`` iterations.
    With fewer than ``k`` distinct values, returns the uniform bin midpoints
    of ``[low, high]`` and sets ``fallback``.
    """
    x = np.asarray(values, dtype=np.float64).ravel()
    if np.unique(x).size < k:
        logger.warning("only %d distinct values for k=%d; using uniform bin midpoints", np.unique(x).size, k)
        mids = low + (np.arange(k) + 0.5) * (high - low) / k
        return KMeansResult(mids, [], 0, fallback=True)

    rng = np.random.default_rng(seed)
    centers = _kmeans_pp_init(x, k, rng)
    assign = None
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        dist = (x[:, None] - centers[None, :]) ** 2
        new_assign = dist.argmin(axis=1)
        history.append(float(dist[np.arange(x.size), new_assign].sum()))
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            members = x[assign == j]
            if members.size:
                centers[j] = members.mean()
    dist = (x[:, None] - centers[None, :]) ** 2
    history.append(float(dist.min(axis=1).sum()))
    return KMeansResult(np.sort(centers), history, it)


# ---------------------------------------------------------------------------
# labels CSV: header frame,valence,arousal


def write_labels_csv(path, series: AffectSeries) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "valence", "arousal"])
        for i, (v, a) in enumerate(zip(series.valence, series.arousal)):
            w.writerow([i, repr(float(v)), repr(float(a))])


def read_labels_csv(path) -> AffectSeries:
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["frame", "valence", "arousal"]:
            raise ValueError(f"{path}: expected header frame,valence,arousal, got {header}")
        rows = [r for r in reader if r]
    frames = [int(r[0]) for r in rows]
    if frames != list(range(len(rows))):
        raise ValueError(f"{path}: frame column must count up from 0")
    return AffectSeries(
        np.array([float(r[1]) for r in rows]),
        np.array([float(r[2]) for r in rows]),
    )
