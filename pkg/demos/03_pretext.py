"""
Three pretext objectives
========================

Audio-feature regression (LiRA-style), BYOL-style bootstrapping and
DINO-style self-distillation, each for a few epochs on a small unlabeled
set with a narrow trunk. The last part shows teacher centering keeping
DINO away from a collapsed teacher.
"""
import tempfile
from pathlib import Path

import numpy as np

from ssvaerr import datagen, model, pretext

tmp = tempfile.mkdtemp(prefix="ssvaerr_pretext_")
manifest = datagen.generate(datagen.SyntheticConfig(num_clips=12, T=24, seed=3), tmp)
small = model.ModelConfig(widths=(4, 8), hidden=8, num_bins=5)

for method in pretext.METHODS:
    cfg = pretext.PretextConfig(model=small, segment_length=8, proj_hidden=16, proj_out=16, dino_out=16)
    result = pretext.pretrain(method, manifest, 3, 0, cfg, out_dir=tmp)
    print(f"{method:5s} loss per epoch:", " ".join(f"{v:.4f}" for v in result.losses))
print("trunk checkpoints:", sorted(p.name for p in Path(tmp).glob("*.ssvk")))

# EMA targets move geometrically towards the online weights
target, online = {"w": np.zeros(1)}, {"w": np.ones(1)}
for k in range(1, 6):
    target = pretext.ema_update(target, online, 0.5)
    print(f"after {k} EMA steps at tau=0.5: {target['w'][0]}")

# centering against collapse: spread of teacher probabilities across inputs
frames = np.stack([
    datagen.normalize(datagen.center_crop(manifest.load(i).frames[:8], 48), manifest.mean, manifest.std)
    for i in manifest.indices("train")
])
for centering in (True, False):
    cfg = pretext.PretextConfig(model=small, segment_length=8, lr=1e-3, ema=0.9, dino_out=16, proj_hidden=16,
                                centering=centering)
    result = pretext.pretrain("dino", manifest, 2, 1, cfg)
    print(f"dino centering={centering!s:5s} teacher spread {pretext.teacher_spread(result.state, frames, cfg):.2e}")
