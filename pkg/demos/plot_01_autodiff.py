"""
Gradients from scratch
======================

Build a small graph by hand, back-propagate through it, and compare the
result with central differences.
"""

import numpy as np

from vaeseg import autodiff as ad
from vaeseg.autodiff import Tensor, backward, grad_check
from vaeseg.ops import conv3d, relu

# a leaf that wants gradients, and a constant
x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
w = Tensor([0.5, -1.0, 2.0])

# f(x) = sum(exp(0.1 x) * w)
f = ad.dot(ad.exp(ad.scale(x, 0.1)), w)
grads = backward(f)
print("f =", f.item())
print("df/dx =", grads[x])
print("by hand =", 0.1 * np.exp(0.1 * x.data) * w.data)

# the graph is spent after one backward pass
try:
    backward(f)
except ad.GraphError as exc:
    print("second backward:", exc)

# grad_check re-runs the closure in float64 with a central difference
rng = np.random.default_rng(0)
kernel = Tensor(rng.standard_normal((2, 3, 3, 3, 3)))
bias = Tensor(np.zeros(2))
probe = Tensor(rng.standard_normal((2, 6, 6, 6)))


def conv_then_relu(v):
    return ad.dot(relu(conv3d(v, kernel, bias)), probe)


vol = rng.standard_normal((3, 6, 6, 6))
print("conv + relu max relative error:", grad_check(conv_then_relu, vol, 1e-3))
