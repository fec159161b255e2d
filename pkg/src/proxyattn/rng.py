"""Deterministic random streams and distribution sampling.

A single integer seed (or a sequence of integers, used to derive
independent child streams) fully determines every sample drawn, so runs
are reproducible bit for bit on the same platform.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor

DISTRIBUTIONS = ("gaussian", "laplacian", "uniform")


class Rng:
    """Seeded PCG64 stream with a restorable state."""

    def __init__(self, seed):
        self._bitgen = np.random.PCG64(seed)
        self._gen = np.random.Generator(self._bitgen)

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        rng = cls(0)
        rng.set_state(state)
        return rng

    def get_state(self) -> dict:
        return self._bitgen.state

    def set_state(self, state: dict) -> None:
        self._bitgen.state = state

    def normal(self, shape=(), sigma: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, sigma, size=shape)

    def laplace(self, shape=(), scale: float = 1.0) -> np.ndarray:
        return self._gen.laplace(0.0, scale, size=shape)

    def uniform(self, lo: float, hi: float, shape=()) -> np.ndarray:
        return self._gen.uniform(lo, hi, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def random(self) -> float:
        return float(self._gen.random())


def sample(rng: Rng, distribution: str, shape, **params) -> Tensor:
    """Draw an i.i.d. tensor from one of the supported distributions.

    gaussian:  zero-mean normal, parameter `sigma` > 0
    laplacian: zero-mean Laplace, parameter `scale` > 0
    uniform:   half-open interval, parameters `lo` < `hi`
    """
    if distribution == "gaussian":
        sigma = params.get("sigma", 1.0)
        if not sigma > 0:
            raise ValueError(f"gaussian sigma must be positive, got {sigma}")
        return Tensor(rng.normal(shape, sigma=sigma))
    if distribution == "laplacian":
        b = params.get("scale", 1.0)
        if not b > 0:
            raise ValueError(f"laplacian scale must be positive, got {b}")
        return Tensor(rng.laplace(shape, scale=b))
    if distribution == "uniform":
        lo = params.get("lo", 0.0)
        hi = params.get("hi", 1.0)
        if not lo < hi:
            raise ValueError(f"uniform bounds must satisfy lo < hi, got [{lo}, {hi})")
        return Tensor(rng.uniform(lo, hi, shape))
    raise ValueError(f"unknown distribution {distribution!r}; expected one of {DISTRIBUTIONS}")
