"""Synthetic labeled clips, binary clip/feature files, manifests and segment sampling.

Each synthetic clip shows a bright ellipse on a dark background. Arousal sets
the blob intensity (``128 + 100 * a``) and valence shifts it horizontally, so
both labels are visible to a convolutional network. A per-frame 8-d
"acoustic" stream, a fixed function of the labels, feeds the audio-target
pretext objective.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffcore import ContractViolation
from .labels import AffectSeries, read_labels_csv, write_labels_csv

logger = logging.getLogger(__name__)

CLIP_MAGIC = b"SSVA"
CLIP_VERSION = 1
FEATURE_MAGIC = b"SSVF"
FEATURE_DIM = 8
BACKGROUND = 20.0
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class SyntheticConfig:
    num_clips: int = 56
    T: int = 120
    H: int = 64
    W: int = 64
    seed: int = 7
    noise_std: float = 8.0
    walk_std: float = 0.12
    smooth_window: int = 9
    split_ratios: tuple = (0.70, 0.15, 0.15)

    def __post_init__(self):
        if self.num_clips < 1 or self.T < 1 or self.H < 8 or self.W < 8:
            raise ValueError("need at least one clip, one frame and 8x8 frames")
        if abs(sum(self.split_ratios) - 1.0) > 1e-9:
            raise ValueError("split ratios must sum to 1")


@dataclass
class LabeledClip:
    """Frames ``[T, H, W]`` (0..255 as float64) with aligned labels.

    ``mask`` marks real frames; padded frames are False and excluded from losses.
    """

    frames: np.ndarray
    valence: np.ndarray
    arousal: np.ndarray
    features: np.ndarray | None = None
    mask: np.ndarray | None = None
    clip_id: int = 0

    def __post_init__(self):
        T = self.frames.shape[0]
        if self.valence.shape != (T,) or self.arousal.shape != (T,):
            raise ContractViolation("labels must have one value per frame")
        if self.mask is None:
            self.mask = np.ones(T, dtype=bool)

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    def targets(self) -> np.ndarray:
        return np.stack([self.valence, self.arousal], axis=1)


@dataclass(frozen=True)
class ManifestEntry:
    split: str
    clip_path: Path
    label_path: Path
    feature_path: Path


@dataclass
class DatasetManifest:
    entries: list
    mean: float
    std: float
    path: Path | None = field(default=None, compare=False)

    def split(self, name: str) -> list:
        return [e for e in self.entries if e.split == name]

    def indices(self, name: str) -> list:
        return [i for i, e in enumerate(self.entries) if e.split == name]

    def load(self, index: int, with_features: bool = False) -> LabeledClip:
        e = self.entries[index]
        frames = read_clip(e.clip_path).astype(np.float64)
        labels = read_labels_csv(e.label_path)
        feats = read_features(e.feature_path) if with_features else None
        return LabeledClip(frames, labels.valence, labels.arousal, feats, clip_id=index)

    def with_entries(self, entries: list) -> "DatasetManifest":
        return DatasetManifest(list(entries), self.mean, self.std, self.path)

    def write(self, path) -> None:
        path = Path(path)
        base = path.parent.resolve()
        lines = [f"#stats mean={self.mean!r} std={self.std!r}"]
        for e in self.entries:
            cols = [e.split] + [_rel(p, base) for p in (e.clip_path, e.label_path, e.feature_path)]
            lines.append("\t".join(cols))
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        self.path = path

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        base = path.parent
        entries = []
        mean = std = None
        for raw in path.read_text(encoding="utf-8").splitlines():
            if not raw.strip():
                continue
            if raw.startswith("#stats"):
                kv = dict(tok.split("=", 1) for tok in raw.split()[1:])
                mean, std = float(kv["mean"]), float(kv["std"])
                continue
            if raw.startswith("#"):
                continue
            cols = raw.split("\t")
            if len(cols) != 4 or cols[0] not in SPLITS:
                raise ValueError(f"{path}: malformed manifest line {raw!r}")
            entries.append(ManifestEntry(cols[0], *(base / c for c in cols[1:])))
        if mean is None:
            raise ValueError(f"{path}: missing #stats line")
        return cls(entries, mean, std, path)


def _rel(p: Path, base: Path) -> str:
    try:
        return str(Path(p).resolve().relative_to(base))
    except ValueError:
        return str(Path(p).resolve())


# ---------------------------------------------------------------------------
# binary formats


def write_clip(path, frames: np.ndarray) -> None:
    frames = np.asarray(frames)
    if frames.ndim != 3:
        raise ContractViolation(f"clip must be [T, H, W], got {frames.shape}")
    data = np.clip(np.rint(frames), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(CLIP_MAGIC + struct.pack("<4I", CLIP_VERSION, *data.shape))
        fh.write(data.tobytes())


def read_clip(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != CLIP_MAGIC:
        raise ValueError(f"{path}: not a clip file")
    version, T, H, W = struct.unpack_from("<4I", buf, 4)
    if version != CLIP_VERSION:
        raise ValueError(f"{path}: unsupported clip version {version}")
    body = buf[20:]
    if len(body) != T * H * W:
        raise ValueError(f"{path}: expected {T * H * W} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(T, H, W).copy()


def write_features(path, feats: np.ndarray) -> None:
    feats = np.asarray(feats, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC + struct.pack("<2I", *feats.shape))
        fh.write(feats.tobytes())


def read_features(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != FEATURE_MAGIC:
        raise ValueError(f"{path}: not a feature file")
    T, D = struct.unpack_from("<2I", buf, 4)
    return np.frombuffer(buf, dtype="<f4", count=T * D, offset=12).reshape(T, D).astype(np.float64)


# ---------------------------------------------------------------------------
# generation


def smooth_walk(rng: np.random.Generator, T: int, step_std: float, window: int) -> np.ndarray:
    """Clipped, moving-average smoothed Gaussian random walk in [-1, 1]."""
    start = rng.uniform(-0.7, 0.7)
    walk = start + np.cumsum(rng.normal(0.0, step_std, size=T))
    if window > 1:
        padded = np.pad(walk, (window // 2, window - 1 - window // 2), mode="edge")
        walk = np.convolve(padded, np.ones(window) / window, mode="valid")
    return np.clip(walk, -1.0, 1.0)


def blob_geometry(H: int, W: int):
    """Semi-axes (rx, ry) and the horizontal shift per unit of valence."""
    return 0.16 * W, 0.22 * H, 0.25 * W


def render_frames(valence: np.ndarray, arousal: np.ndarray, H: int, W: int, noise_std: float, rng) -> np.ndarray:
    rx, ry, shift = blob_geometry(H, W)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    cy = (H - 1) / 2.0
    frames = np.empty((valence.size, H, W))
    for t, (v, a) in enumerate(zip(valence, arousal)):
        cx = (W - 1) / 2.0 + shift * v
        rho = np.sqrt(((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2)
        # one-pixel soft edge; the interior stays exactly at the blob intensity
        cover = np.clip((1.0 - rho) * min(rx, ry) + 0.5, 0.0, 1.0)
        intensity = 128.0 + 100.0 * a
        frames[t] = BACKGROUND + (intensity - BACKGROUND) * cover
    if noise_std > 0:
        frames = frames + rng.normal(0.0, noise_std, size=frames.shape)
    return np.clip(np.rint(frames), 0, 255)


_FEATURE_A = np.array([[0.9, -0.3], [0.2, 0.8], [-0.5, 0.5], [0.7, 0.7], [0.0, -0.9], [0.4, -0.2], [-0.8, 0.1], [0.3, 0.6]])
_FEATURE_FREQ = np.array([1.0, 1.5, 2.0, 2.5, 3.0, 0.5, 1.2, 0.8]) * np.pi
_FEATURE_PHASE = np.linspace(0.0, np.pi, FEATURE_DIM, endpoint=False)


def acoustic_features(valence: np.ndarray, arousal: np.ndarray) -> np.ndarray:
    """Fixed linear + sine map from (v, a) to an 8-d per-frame stream."""
    va = np.stack([valence, arousal], axis=1)
    lin = va @ _FEATURE_A.T
    return lin + 0.3 * np.sin(_FEATURE_FREQ * (valence + arousal)[:, None] + _FEATURE_PHASE)


def split_sizes(n: int, ratios) -> dict:
    """Floor allocation for val/test; the remainder goes to train."""
    n_val = int(np.floor(ratios[1] * n))
    n_test = int(np.floor(ratios[2] * n))
    return {"train": n - n_val - n_test, "val": n_val, "test": n_test}


def make_clip(cfg: SyntheticConfig, index: int):
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, index]))
    v = smooth_walk(rng, cfg.T, cfg.walk_std, cfg.smooth_window)
    a = smooth_walk(rng, cfg.T, cfg.walk_std, cfg.smooth_window)
    frames = render_frames(v, a, cfg.H, cfg.W, cfg.noise_std, rng)
    return frames, AffectSeries(v, a), acoustic_features(v, a)


def generate(cfg: SyntheticConfig, out_dir) -> DatasetManifest:
    """Write all clips, labels and feature streams plus ``manifest`` under ``out_dir``."""
    out = Path(out_dir)
    for sub in ("clips", "labels", "features"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    sizes = split_sizes(cfg.num_clips, cfg.split_ratios)
    split_of = ["train"] * sizes["train"] + ["val"] * sizes["val"] + ["test"] * sizes["test"]
    entries = []
    train_frames = []
    for i in range(cfg.num_clips):
        frames, labels, feats = make_clip(cfg, i)
        stem = f"clip_{i:04d}"
        e = ManifestEntry(
            split_of[i],
            out / "clips" / f"{stem}.ssva",
            out / "labels" / f"{stem}.csv",
            out / "features" / f"{stem}.ssvf",
        )
        write_clip(e.clip_path, frames)
        write_labels_csv(e.label_path, labels)
        write_features(e.feature_path, feats)
        entries.append(e)
        if e.split == "train":
            train_frames.append(frames)
    mean, std = compute_stats(train_frames)
    manifest = DatasetManifest(entries, mean, std)
    manifest.write(out / "manifest")
    logger.info("wrote %d clips to %s", cfg.num_clips, out)
    return manifest


def compute_stats(train_clips, std_floor: float = 1e-6):
    """Scalar pixel mean and population std over every training frame."""
    total = 0.0
    total_sq = 0.0
    count = 0
    for frames in train_clips:
        f = np.asarray(frames, dtype=np.float64)
        total += f.sum()
        total_sq += (f * f).sum()
        count += f.size
    if count == 0:
        raise ValueError("no training frames to compute statistics from")
    mean = total / count
    var = max(total_sq / count - mean * mean, 0.0)
    return float(mean), float(max(np.sqrt(var), std_floor))


def sample_segment(clip: LabeledClip, length: int, rng: np.random.Generator) -> LabeledClip:
    """Random contiguous window of ``length`` frames; shorter clips are zero-padded and masked."""
    if length <= 0:
        raise ContractViolation(f"segment length must be positive, got {length}")
    T = clip.T
    if T >= length:
        start = int(rng.integers(0, T - length + 1))
        sl = slice(start, start + length)
        return LabeledClip(
            clip.frames[sl],
            clip.valence[sl],
            clip.arousal[sl],
            None if clip.features is None else clip.features[sl],
            clip.mask[sl].copy(),
            clip.clip_id,
        )
    pad = length - T

    def padded(a):
        return np.concatenate([a, np.zeros((pad,) + a.shape[1:], dtype=a.dtype)])

    return LabeledClip(
        padded(clip.frames),
        padded(clip.valence),
        padded(clip.arousal),
        None if clip.features is None else padded(clip.features),
        np.concatenate([clip.mask, np.zeros(pad, dtype=bool)]),
        clip.clip_id,
    )


def center_crop(frames: np.ndarray, size: int) -> np.ndarray:
    """Central ``size x size`` window of ``[..., H, W]`` frames."""
    H, W = frames.shape[-2:]
    if size > H or size > W:
        raise ContractViolation(f"frames {H}x{W} smaller than model input {size}")
    top = (H - size) // 2
    left = (W - size) // 2
    return frames[..., top : top + size, left : left + size]


def normalize(frames: np.ndarray, mean: float, std: float) -> np.ndarray:
    return (np.asarray(frames, dtype=np.float64) - mean) / std
