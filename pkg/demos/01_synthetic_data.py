"""
Synthetic affect clips
======================

Each clip is a bright blob on a dark background. Its brightness follows
arousal, its horizontal position follows valence. This script builds a
small set, checks that the labels can be read back off the pixels and
writes one frame per clip as a PGM image.
"""
import sys
import tempfile
from pathlib import Path

import numpy as np

from ssvaerr import augment, datagen

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="ssvaerr_data_"))
cfg = datagen.SyntheticConfig(num_clips=12, T=60, seed=7)
manifest = datagen.generate(cfg, out)
print("wrote", manifest.path)
print("splits:", {s: len(manifest.split(s)) for s in datagen.SPLITS})
print(f"train pixel stats: mean {manifest.mean:.2f} std {manifest.std:.2f}")

# peak brightness against arousal, blob centroid against valence
clip = manifest.load(0, with_features=True)
frames = clip.frames
peak = frames.reshape(len(frames), -1).max(axis=1)
above = frames - datagen.BACKGROUND
cx = (above.sum(axis=1) * np.arange(cfg.W)).sum(axis=1) / above.sum(axis=(1, 2))
print("corr(peak, arousal)    %.3f" % np.corrcoef(peak, clip.arousal)[0, 1])
print("corr(centroid, valence) %.3f" % np.corrcoef(cx, clip.valence)[0, 1])
print("feature stream for the audio-style pretext:", clip.features.shape)

# a 40-frame window out of a 60-frame clip, then one longer than the clip
rng = np.random.default_rng(0)
seg = datagen.sample_segment(clip, 40, rng)
print("segment of 40:", seg.frames.shape, "valid frames", int(seg.mask.sum()))
seg = datagen.sample_segment(clip, 90, rng)
print("segment of 90:", seg.frames.shape, "valid frames", int(seg.mask.sum()))

# first frame of every clip as an image
for i in range(len(manifest.entries)):
    augment.write_pgm(out / f"preview_{i:02d}.pgm", manifest.load(i).frames[0])
print("previews in", out)
