"""Clip-level augmentations for grayscale video, deterministic under keyed seeding.

Every step draws from its own generator keyed by ``(seed, clip_id, epoch,
step_index)``, so a clip's result never depends on which other clips were
augmented before it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .diffcore import ContractViolation


def _frac(name, v):
    if not 0.0 <= v <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {v}")


@dataclass(frozen=True)
class HorizontalFlip:
    """Mirror every frame of the clip together, with probability ``p``."""

    p: float = 0.5
    kind = "hflip"

    def __post_init__(self):
        _frac("p", self.p)

    def __call__(self, frames, rng):
        if rng.random() < self.p:
            return frames[:, :, ::-1].copy()
        return frames


@dataclass(frozen=True)
class RandomCrop:
    """One random ``h x w`` window per clip, shared by all frames."""

    h: int = 48
    w: int = 48
    kind = "random_crop"

    def __call__(self, frames, rng):
        T, H, W = frames.shape
        if self.h > H or self.w > W:
            raise ContractViolation(f"crop {self.h}x{self.w} larger than frame {H}x{W}")
        top = int(rng.integers(0, H - self.h + 1))
        left = int(rng.integers(0, W - self.w + 1))
        return frames[:, top : top + self.h, left : left + self.w].copy()


@dataclass(frozen=True)
class CropOut:
    """Black square patches at random positions, identical across frames.

    ``patch_side`` defaults to a quarter of the frame height.
    """

    num_patches: int = 5
    patch_side: int | None = None
    kind = "crop_out"

    def __call__(self, frames, rng):
        T, H, W = frames.shape
        side = self.patch_side if self.patch_side is not None else max(1, H // 4)
        if side > H or side > W:
            raise ContractViolation(f"patch side {side} larger than frame {H}x{W}")
        out = frames.copy()
        for _ in range(self.num_patches):
            top = int(rng.integers(0, H - side + 1))
            left = int(rng.integers(0, W - side + 1))
            out[:, top : top + side, left : left + side] = 0.0
        return out


@dataclass(frozen=True)
class MissingFrames:
    """Replace ``floor(fraction * T)`` distinct random frames with black frames."""

    fraction: float = 0.2
    kind = "missing_frames"

    def __post_init__(self):
        _frac("fraction", self.fraction)

    def __call__(self, frames, rng):
        T = frames.shape[0]
        k = math.floor(self.fraction * T)
        out = frames.copy()
        if k:
            out[rng.choice(T, size=k, replace=False)] = 0.0
        return out


@dataclass(frozen=True)
class Solarization:
    """On ``floor(image_fraction * T)`` random frames, invert pixels brighter than the clip mean."""

    image_fraction: float = 0.2
    kind = "solarize"

    def __post_init__(self):
        _frac("image_fraction", self.image_fraction)

    def __call__(self, frames, rng):
        T = frames.shape[0]
        k = math.floor(self.image_fraction * T)
        out = frames.copy()
        if not k:
            return out
        threshold = frames.mean()
        for t in rng.choice(T, size=k, replace=False):
            f = out[t]
            above = f > threshold
            f[above] = 255.0 - f[above]
        return out


@dataclass(frozen=True)
class SaltPepper:
    """Set ``round(amount * T * H * W)`` distinct pixels to 255 (salt) or 0 (pepper)."""

    amount: float = 0.02
    salt_ratio: float = 0.5
    kind = "salt_pepper"

    def __post_init__(self):
        _frac("amount", self.amount)
        _frac("salt_ratio", self.salt_ratio)

    def __call__(self, frames, rng):
        n = int(round(self.amount * frames.size))
        out = frames.copy()
        if not n:
            return out
        flat = out.reshape(-1)
        pos = rng.choice(flat.size, size=n, replace=False)
        salt = rng.random(n) < self.salt_ratio
        flat[pos] = np.where(salt, 255.0, 0.0)
        return out


STEP_TYPES = {cls.kind: cls for cls in (HorizontalFlip, RandomCrop, CropOut, MissingFrames, Solarization, SaltPepper)}


@dataclass(frozen=True)
class AugmentationSpec:
    steps: tuple = ()
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))

    def validate(self, H: int, W: int) -> None:
        for step in self.steps:
            if isinstance(step, RandomCrop) and (step.h > H or step.w > W):
                raise ContractViolation(f"crop {step.h}x{step.w} larger than frame {H}x{W}")

    @property
    def name(self) -> str:
        return "+".join(s.kind for s in self.steps) or "none"

    # flat key=value text: seed=, stepN=<kind>, stepN.<param>=<value>
    @classmethod
    def parse(cls, text: str) -> "AugmentationSpec":
        seed = 0
        kinds: dict = {}
        params: dict = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key == "seed":
                seed = int(value)
                continue
            head, _, param = key.partition(".")
            if not head.startswith("step") or not head[4:].isdigit():
                raise ValueError(f"line {lineno}: unknown key {key!r}")
            n = int(head[4:])
            if param:
                params.setdefault(n, {})[param] = value
            else:
                if value not in STEP_TYPES:
                    raise ValueError(f"line {lineno}: unknown augmentation {value!r}; choose from {sorted(STEP_TYPES)}")
                kinds[n] = value
        steps = []
        for n in sorted(kinds):
            step_cls = STEP_TYPES[kinds[n]]
            types = {f.name: f.type for f in fields(step_cls)}
            kwargs = {}
            for k, v in params.get(n, {}).items():
                if k not in types:
                    raise ValueError(f"step{n}: {kinds[n]} has no parameter {k!r}")
                kwargs[k] = float(v) if "float" in str(types[k]) else int(v)
            steps.append(step_cls(**kwargs))
        extra = set(params) - set(kinds)
        if extra:
            raise ValueError(f"parameters given for undefined steps {sorted(extra)}")
        return cls(tuple(steps), seed)

    @classmethod
    def from_file(cls, path) -> "AugmentationSpec":
        return cls.parse(Path(path).read_text(encoding="utf-8"))

    def to_text(self) -> str:
        lines = [f"seed={self.seed}"]
        for i, step in enumerate(self.steps, 1):
            lines.append(f"step{i}={step.kind}")
            for f in fields(step):
                v = getattr(step, f.name)
                if v is not None:
                    lines.append(f"step{i}.{f.name}={v!r}")
        return "\n".join(lines) + "\n"


# single augmentations and pairs from the downstream augmentation ablation
AUGMENTATION_PRESETS = {
    "none": (),
    "hflip": (HorizontalFlip(0.5),),
    "random_crop": (RandomCrop(48, 48),),
    "crop_out": (CropOut(5),),
    "missing_frames": (MissingFrames(0.2),),
    "solarize": (Solarization(0.2),),
    "salt_pepper": (SaltPepper(0.02, 0.5),),
    "random_crop+hflip": (RandomCrop(48, 48), HorizontalFlip(0.5)),
    "random_crop+missing_frames": (RandomCrop(48, 48), MissingFrames(0.2)),
    "hflip+missing_frames": (HorizontalFlip(0.5), MissingFrames(0.2)),
    "hflip+solarize": (HorizontalFlip(0.5), Solarization(0.2)),
    "hflip+crop_out": (HorizontalFlip(0.5), CropOut(5)),
    "hflip+salt_pepper": (HorizontalFlip(0.5), SaltPepper(0.02, 0.5)),
}


def augmentation_preset(name: str, seed: int = 0) -> AugmentationSpec:
    return AugmentationSpec(AUGMENTATION_PRESETS[name], seed)


def step_rng(seed: int, clip_id: int, epoch: int, step_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, clip_id, epoch, step_index]))


def apply(frames, spec: AugmentationSpec, clip_id: int = 0, epoch: int = 0, upto: int | None = None) -> np.ndarray:
    """Run the steps of ``spec`` in order on a ``[T, H, W]`` clip of 0..255 values."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3 or frames.shape[0] < 1:
        raise ContractViolation(f"clip must be [T, H, W] with T >= 1, got {frames.shape}")
    spec.validate(frames.shape[1], frames.shape[2])
    out = frames
    for i, step in enumerate(spec.steps[:upto]):
        out = step(out, step_rng(spec.seed, clip_id, epoch, i))
    return out if out is not frames else frames.copy()


# ---------------------------------------------------------------------------
# previews (binary PGM)


def write_pgm(path, image: np.ndarray) -> None:
    img = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    parts = buf.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def montage(frames: np.ndarray, count: int = 4) -> np.ndarray:
    """Evenly spaced frames side by side, separated by a 2-px gutter."""
    T = frames.shape[0]
    picks = np.unique(np.linspace(0, T - 1, min(count, T)).round().astype(int))
    gutter = np.full((frames.shape[1], 2), 255.0)
    tiles = []
    for i, t in enumerate(picks):
        if i:
            tiles.append(gutter)
        tiles.append(frames[t])
    return np.concatenate(tiles, axis=1)


def preview(frames, spec: AugmentationSpec, out_dir, clip_id: int = 0, epoch: int = 0) -> list:
    """Write the original clip and the state after every step as PGM montages."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create preview directory {out}: {exc}") from exc
    frames = np.asarray(frames, dtype=np.float64)
    paths = []
    current = frames
    for i in range(len(spec.steps) + 1):
        if i:
            current = spec.steps[i - 1](current, step_rng(spec.seed, clip_id, epoch, i - 1))
        name = "orig" if i == 0 else spec.steps[i - 1].kind
        path = out / f"step{i:02d}_{name}.pgm"
        try:
            write_pgm(path, montage(current))
        except OSError as exc:
            raise OSError(f"cannot write preview {path}: {exc}") from exc
        paths.append(path)
    return paths
