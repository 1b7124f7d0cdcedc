"""
Loss family on a toy batch
==========================

CCC as a metric and as a loss, cross-entropy over 20 label bins, the
cost-normalized variant, and the composite presets used in the loss
ablation.
"""
import math

import numpy as np

from ssvaerr import diffcore as dc
from ssvaerr.labels import Discretizer, kmeans_centroids
from ssvaerr.losses import (
    LOSS_PRESETS,
    PredictionBatch,
    ccc,
    ce,
    composite_loss,
    cost_norm,
    loss_preset,
    ncce,
)

# CCC penalizes both decorrelation and bias
y = np.array([1.0, 2.0, 3.0, 4.0])
print("ccc(y, y)       ", ccc(y, y))
print("ccc(y, y + 1)   ", ccc(y, y + 1), "(= 5/7)")
print("ccc(y, 2y)      ", round(ccc(y, 2 * y), 4))

# labels in [-1, 1] go to 20 bins; cost-norm centroids can come from k-means
disc = Discretizer(20)
rng = np.random.default_rng(0)
targets = np.tanh(rng.normal(size=200))
km = kmeans_centroids(targets, k=20, seed=0)
print("uniform midpoints", np.round(disc.midpoints[:4], 3), "...")
print("k-means centroids", np.round(km.centroids[:4], 3), "...", "fallback" if km.fallback else "")

onehot = disc.one_hot(targets[:8])
print("CE at uniform logits %.6f  ln 20 = %.6f" % (ce(onehot, np.zeros((8, 20))).item(), math.log(20)))

# a confident but distant prediction costs more under nCCE than a near miss
near = np.full((1, 20), -5.0)
far = np.full((1, 20), -5.0)
t = disc.one_hot(np.array([0.0]))
hit = int(np.argmax(t))
near[0, hit + 1] = 5.0
far[0, 19] = 5.0
for name, z in (("near miss", near), ("far miss", far)):
    p = dc.softmax(dc.Tensor(z)).data
    print(f"{name:9s}  CE {ce(t, z).item():.3f}  cost norm {cost_norm(t, p, disc.midpoints)[0]:.3f}  nCCE {ncce(t, z, disc.midpoints).item():.3f}")

# the composite presets on one random batch
batch = PredictionBatch(
    dc.Tensor(np.tanh(rng.normal(size=(32, 2)))), dc.Tensor(rng.normal(size=(32, 2, 20))), np.tanh(rng.normal(size=(32, 2)))
)
for name in LOSS_PRESETS:
    total, parts = composite_loss(batch, loss_preset(name), disc)
    print(f"{name:16s} {total.item():8.4f}  ", "  ".join(f"{k}={v:.3f}" for k, v in sorted(parts.items())))
