"""
Mirror averaging and surface distances
======================================

Test-time augmentation averages the 8 mirror images of a prediction, which
makes the result commute with every flip.  Then score two masks.
"""

import numpy as np

from vaeseg import ModelConfig, build_model
from vaeseg.data import flip_axes
from vaeseg.inference import tta_predict
from vaeseg.metrics import binary_dice, hausdorff
from vaeseg.model import HEAD_KERNEL

model = build_model(ModelConfig(base_filters=4, crop_shape=(16, 16, 16)), init_seed=3)
# give the untrained head some weights so the output is not a flat 0.5
model[HEAD_KERNEL].data[...] = np.random.default_rng(0).uniform(-1, 1, model[HEAD_KERNEL].shape)

vol = np.random.default_rng(1).standard_normal((4, 16, 16, 16)).astype(np.float32)
base = tta_predict(model, vol)
for axes in [(0,), (1, 2), (0, 1, 2)]:
    mirrored = tta_predict(model, np.ascontiguousarray(flip_axes(vol, axes)))
    gap = np.abs(flip_axes(mirrored, axes) - base).max()
    print("flip", axes, "max gap", gap)

# two boxes, one shifted by two voxels
a = np.zeros((16, 16, 16), bool)
a[4:10, 4:10, 4:10] = True
b = np.roll(a, 2, axis=2)
print("dice", binary_dice(a, b))
print("HD95", hausdorff(a, b, 95), "HDmax", hausdorff(a, b, 100))
