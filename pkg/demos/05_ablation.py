"""
A small ablation grid
=====================

Loss configuration x augmentation on a short schedule. Rows land in a CSV
keyed by a config hash, so running the script again skips every finished
cell. With a two-stage trunk and five short epochs only arousal gets
going; the full-width model needs about ten epochs for valence.
"""
import sys
import tempfile
from pathlib import Path

from ssvaerr import augment, datagen, model, trainer
from ssvaerr.losses import loss_preset

tmp = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="ssvaerr_ablate_"))
manifest_path = tmp / "data" / "manifest"
if manifest_path.exists():
    manifest = datagen.DatasetManifest.read(manifest_path)
else:
    manifest = datagen.generate(datagen.SyntheticConfig(num_clips=16, T=40, seed=7), tmp / "data")

grid = trainer.GridSpec(
    losses={name: loss_preset(name) for name in ("ccc", "ccc_ncce")},
    augmentations={name: augment.augmentation_preset(name) for name in ("none", "missing_frames")},
    base=trainer.RunConfig(model=model.ModelConfig(widths=(8, 16), hidden=16), segment_length=32, epochs=5),
)
rows = trainer.ablate(grid, manifest, tmp / "ablation.csv")
print(f"{'loss':10s} {'augmentation':15s} {'arousal':>8s} {'valence':>8s}")
for r in rows:
    print(f"{r['loss_config']:10s} {r['augmentation']:15s} {float(r['ccc_arousal']):8.3f} {float(r['ccc_valence']):8.3f}")
print("csv:", tmp / "ablation.csv", "(rerun with this directory as argument to hit the cache)")
