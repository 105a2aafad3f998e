import numpy as np
import pytest

from vaeseg import autodiff as ad
from vaeseg.autodiff import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def projected(op, weights):
    """Scalar closure x -> <op(x), weights> for gradient checks."""
    w = Tensor(weights)

    def fn(x):
        return ad.dot(op(x), w)

    return fn


def brute_conv3d(x, w, b, stride):
    """Direct nested-loop cross-correlation with zero padding k//2."""
    c_out, c_in, k = w.shape[:3]
    p = k // 2
    xp = np.pad(x.astype(np.float64), ((0, 0), (p, p), (p, p), (p, p)))
    dims = [(n + 2 * p - k) // stride + 1 for n in x.shape[1:]]
    out = np.zeros((c_out, *dims))
    for o in range(c_out):
        for i in range(dims[0]):
            for j in range(dims[1]):
                for l in range(dims[2]):
                    patch = xp[:, i * stride:i * stride + k, j * stride:j * stride + k,
                               l * stride:l * stride + k]
                    out[o, i, j, l] = np.sum(patch * w[o]) + b[o]
    return out


def brute_surface(mask):
    """Set voxels with an unset or out-of-grid 6-neighbour, by explicit loops."""
    mask = np.asarray(mask, bool)
    out = np.zeros_like(mask)
    steps = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
    for idx in np.argwhere(mask):
        for s in steps:
            n = idx + s
            if np.any(n < 0) or np.any(n >= mask.shape) or not mask[tuple(n)]:
                out[tuple(idx)] = True
                break
    return out


def brute_hausdorff(a, b, percentile):
    """All-pairs surface distances with a nearest-rank percentile per direction."""
    pa = np.argwhere(brute_surface(a)).astype(np.int64)
    pb = np.argwhere(brute_surface(b)).astype(np.int64)
    d2 = ((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1)
    ab = np.sqrt(d2.min(axis=1).astype(np.float64))
    ba = np.sqrt(d2.min(axis=0).astype(np.float64))

    def rank(v):
        v = np.sort(v)
        k = int(np.ceil(percentile / 100 * len(v)))
        return float(v[max(k, 1) - 1])

    return max(rank(ab), rank(ba))
