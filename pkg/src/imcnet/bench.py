"""Micro-benchmarks for the core kernels, reported in nanoseconds per output element."""
import time
from dataclasses import dataclass

import numpy as np

from imcnet.errors import ConfigError
from imcnet.mcm.deform import deformable_conv
from imcnet.tensor.ops import ConvParams, bilinear_sample_points, conv2d

CHANNELS = 32
MIN_REPEATS = 5


@dataclass
class BenchResult:
    kernel: str
    size: int
    elements: int
    median_s: float
    repeats: int

    @property
    def ns_per_element(self):
        return self.median_s * 1e9 / self.elements

    def line(self):
        return (f"{self.kernel:<16s} size={self.size:<4d} elements={self.elements:<9d} "
                f"median={self.median_s * 1e3:9.3f}ms ns/elem={self.ns_per_element:8.3f}")


def _setup(kernel, size, channels, rng):
    """Returns (callable, number of output elements)."""
    f = rng.standard_normal((1, channels, size, size)).astype(np.float32)
    w = (rng.standard_normal((channels, channels, 3, 3)) * 0.05).astype(np.float32)
    if kernel == "conv2d":
        params = ConvParams(w, None, 1, 1)
        return (lambda: conv2d(f, params)), channels * size * size
    if kernel == "deformable_conv":
        off = rng.uniform(-2, 2, (1, 18, size, size)).astype(np.float32)
        return (lambda: deformable_conv(f, off, w)), channels * size * size
    if kernel == "bilinear_sample":
        p = 9 * size * size
        xs = rng.uniform(-1, size, (1, p)).astype(np.float32)
        ys = rng.uniform(-1, size, (1, p)).astype(np.float32)
        return (lambda: bilinear_sample_points(f, xs, ys)), channels * p
    raise ConfigError(f"unknown kernel {kernel!r}; known: {', '.join(KERNELS)}")


KERNELS = ("conv2d", "deformable_conv", "bilinear_sample")


def run_bench(kernel, sizes, repeats=MIN_REPEATS, channels=CHANNELS, seed=0):
    if repeats < MIN_REPEATS:
        raise ConfigError(f"need at least {MIN_REPEATS} repeats, got {repeats}")
    rng = np.random.default_rng(seed)
    results = []
    for size in sizes:
        if size < 1:
            raise ConfigError(f"sizes must be positive, got {size}")
        fn, elements = _setup(kernel, size, channels, rng)
        fn()  # warm-up
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        results.append(BenchResult(kernel, size, elements, float(np.median(times)), repeats))
    return results
