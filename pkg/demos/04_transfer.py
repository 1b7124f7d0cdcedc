"""
Pretext transfer with a frozen first layer
==========================================

Pre-train the trunk on the audio-feature regression task, copy it into
the downstream regressor and train on only 8 labeled clips, next to a
model trained from scratch. The frozen run keeps the first 3-D
convolution exactly as the pretext left it.

Narrow trunk and short clips keep this to a couple of minutes. At this
size arousal (brightness) is picked up long before valence (position);
the acceptance suite runs the full-size comparison.
"""
import dataclasses
import tempfile
from pathlib import Path

from ssvaerr import datagen, model, pretext, trainer

tmp = Path(tempfile.mkdtemp(prefix="ssvaerr_transfer_"))
manifest = datagen.generate(datagen.SyntheticConfig(num_clips=24, T=60, seed=7), tmp / "data")
small = model.ModelConfig(widths=(8, 16), hidden=16)

pre = pretext.pretrain("lira", manifest, 5, 0, pretext.PretextConfig(model=small), out_dir=tmp / "pt")
print("pretext loss:", " ".join(f"{v:.3f}" for v in pre.losses))

cut = manifest.with_entries(manifest.split("train")[:8] + manifest.split("val") + manifest.split("test"))
base = trainer.RunConfig(model=small, segment_length=48, epochs=6)
runs = {
    "scratch": base,
    "pretext": dataclasses.replace(base, init=f"pretext:{tmp / 'pt' / 'lira.ssvk'}"),
    "pretext, frozen frontend": dataclasses.replace(base, init=f"pretext:{tmp / 'pt' / 'lira.ssvk'}", freeze="frontend"),
}
for name, run in runs.items():
    result = trainer.train(run, cut, tmp / name.replace(", ", "_").replace(" ", "_"))
    last = result.metrics[-1]
    print(f"{name:26s} val CCC arousal {last['val_ccc_arousal']:.3f} valence {last['val_ccc_valence']:.3f}")

frozen = model.load_checkpoint(tmp / "pretext_frozen_frontend" / "last.ssvk")
trunk = model.load_checkpoint(tmp / "pt" / "lira.ssvk")
same = all(frozen[k].tobytes() == trunk[k].tobytes() for k in trunk if k.startswith("frontend."))
print("frozen frontend byte-identical to the pretext checkpoint:", same)
