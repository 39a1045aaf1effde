"""Independent reference implementations used by several test modules."""

import numpy as np


def dependency_span(layers, axis, rng):
    """Input extent feeding output 0 of a random positive-weight linear conv stack.

    Runs the adjoint (transposed) convolutions from a unit impulse at output 0
    and measures where the resulting input gradient is nonzero. Positive
    weights rule out cancellation.
    """
    sizes = [1]
    for layer in reversed(layers):
        k, s, d = layer.kernel[axis], layer.stride[axis], layer.dilation[axis]
        sizes.append(s * (sizes[-1] - 1) + d * (k - 1) + 1 + s)  # spare input beyond the need
    grad = np.ones(1)
    for layer, n_in in zip(reversed(layers), sizes[1:]):
        k, s, d = layer.kernel[axis], layer.stride[axis], layer.dilation[axis]
        w = rng.uniform(0.5, 1.5, k)
        prev = np.zeros(n_in)
        n_out = len(grad)
        for t in range(k):
            prev[d * t:d * t + s * (n_out - 1) + 1:s] += w[t] * grad
        grad = prev
    nz = np.flatnonzero(grad)
    return int(nz[-1] - nz[0] + 1)


def random_layers(rng, max_depth=8, max_kernel=7, max_stride=3, max_dilation=3):
    from semheight.mapseg import make_layer

    return [make_layer((int(rng.integers(1, max_kernel + 1)), int(rng.integers(1, max_kernel + 1))),
                       (int(rng.integers(1, max_stride + 1)), int(rng.integers(1, max_stride + 1))),
                       (int(rng.integers(1, max_dilation + 1)), int(rng.integers(1, max_dilation + 1))))
            for _ in range(int(rng.integers(1, max_depth + 1)))]


class MapInput:
    """Minimal field stand-in: heights plus an observed mask."""

    def __init__(self, heights, observed):
        self.heights = heights
        self.observed = observed


def random_map(rng, ny, nx, holes=0.05):
    heights = np.cumsum(np.cumsum(rng.normal(0, 1e-3, (ny, nx)), 0), 1)
    return MapInput(heights, rng.random((ny, nx)) >= holes)


def blocky_labels(rng, ny, nx, classes=4, cell=6):
    coarse = rng.integers(0, classes, (ny // cell + 1, nx // cell + 1))
    return np.kron(coarse, np.ones((cell, cell), np.int64))[:ny, :nx]
