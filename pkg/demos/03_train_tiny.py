# coding: utf-8

# # Training the tiny model
#
# Synthetic crops of 16, 24 and 32 voxels with 8^3 patches, so grids of
# 2, 3 and 4 patches per side. The two classes differ in tumor shape and
# texture. Takes well under a minute on one core.

import math

import numpy as np

from varivit.data import TINY_BINS, generate_dataset
from varivit.encoder import ModelConfig, VariViT
from varivit.train import TrainConfig, train_loop

train = generate_dataset(1, [34, 33, 33], TINY_BINS, patch_size=8)
test = generate_dataset(2, [17, 17, 16], TINY_BINS, patch_size=8, first_id=10_000)
print("train sizes:", {e: sum(v.edge == e for v in train) for e in TINY_BINS.edges})
print("labels:", np.bincount([v.label for v in train]))


# Before training the two logits are nearly equal, so the loss sits at ln 2.

model = VariViT(ModelConfig.tiny(), seed=0)
print("ln 2 =", round(math.log(2), 4))

cfg = TrainConfig(base_lr=1e-3, warmup_epochs=3, total_epochs=20, batch_size=8, seed=0)
recs = train_loop(model, train, cfg, "cbs", test)
for r in recs:
    if r.epoch % 5 == 0 or r.epoch == cfg.total_epochs - 1:
        print(f"epoch {r.epoch:2d} {r.split:5s} loss {r.loss:.3f} acc {r.accuracy:.3f} auc {r.auc:.3f}")


# Which patches does the CLS token look at? For a 32^3 crop the
# head-averaged attention of the last layer is a 4x4x4 grid.

from varivit.patchify import extract_patches, grid_shape

v = next(v for v in test if v.edge == 32)
_, cache = model.forward(extract_patches(v.voxels, 8)[None], grid_shape(v.spatial, 8))
att = model.cls_attention(cache, layer=-1)
print("CLS attention mass on patches:", round(float(att.sum()), 3))
print(np.round(att[1], 3))
