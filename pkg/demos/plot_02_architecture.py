"""
Shapes of the network
=====================

Propagate shapes through the full-size network without allocating a single
activation, then run the desk-sized model on a real volume.
"""

import numpy as np

from vaeseg import ModelConfig, build_model, forward, infer_shapes
from vaeseg.autodiff import Tensor

# full-size configuration: 32 base filters on a 160x192x128 crop
full = ModelConfig.full()
for name, shape in infer_shapes(full, (4, 160, 192, 128)):
    if name.startswith(("encoder.endpoint", "V", "decoder.head")):
        print(f"{name:18s} {'x'.join(map(str, shape))}")

# the desk model is 4x narrower and works on 32^3 crops
desk = ModelConfig()
model = build_model(desk, init_seed=0)
print("desk parameters:", model.num_parameters())

x = Tensor(np.random.default_rng(1).standard_normal((4, 32, 32, 32)))
out = forward(model, x, np.random.default_rng(2), training=True)
print("segmentation", out.seg_probs.shape, "reconstruction", out.recon.shape)
print("latent mean", out.mu.shape, "latent log-variance", out.logvar.shape)
