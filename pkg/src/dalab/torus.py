"""Points on the flat torus, lifts to the universal cover, and distances.

Arrays of shape (..., d) are used throughout; a single point is a 1-D array.
The fundamental domain is [0, 1)^d.
"""
from __future__ import annotations

import itertools

import numpy as np


class InvalidInput(ValueError):
    pass


def _as_points(p) -> np.ndarray:
    a = np.asarray(p, dtype=float)
    if not np.all(np.isfinite(a)):
        raise InvalidInput("non-finite coordinates")
    return a


def wrap(p) -> np.ndarray:
    """Reduce lifted coordinates mod 1 into [0, 1)."""
    a = _as_points(p)
    w = np.mod(a, 1.0)
    # np.mod can return 1.0 for tiny negative inputs
    w[w >= 1.0] = 0.0
    return w


def lift_near(p, anchor) -> np.ndarray:
    """Lift of the torus point ``p`` lying in the unit box centred at ``anchor``."""
    a = _as_points(p)
    c = _as_points(anchor)
    return c + (a - c - np.round(a - c))


def torus_delta(a, b) -> np.ndarray:
    """Shortest displacement from b to a, componentwise in [-1/2, 1/2]."""
    d = _as_points(a) - _as_points(b)
    return d - np.round(d)


def torus_distance(a, b) -> np.ndarray:
    """Euclidean distance minimised over deck translations."""
    return np.linalg.norm(torus_delta(a, b), axis=-1)


def torus_distance_bruteforce(a, b) -> float:
    """Distance by enumerating the 3^d nearest deck translates (test oracle)."""
    a = wrap(a)
    b = wrap(b)
    d = a.shape[-1]
    best = np.inf
    for k in itertools.product((-1, 0, 1), repeat=d):
        best = min(best, float(np.linalg.norm(a - b - np.array(k))))
    return best


class AdaptedMetric:
    """Inner product in which the columns of ``basis`` are orthonormal.

    Coordinates in the adapted frame are y = basis^{-1} x.
    """

    def __init__(self, basis: np.ndarray):
        self.basis = np.asarray(basis, dtype=float)
        self.inverse = np.linalg.inv(self.basis)

    def coords(self, v) -> np.ndarray:
        return np.asarray(v, dtype=float) @ self.inverse.T

    def vectors(self, y) -> np.ndarray:
        return np.asarray(y, dtype=float) @ self.basis.T

    def norm(self, v) -> np.ndarray:
        return np.linalg.norm(self.coords(v), axis=-1)

    def conjugate(self, M) -> np.ndarray:
        """Matrix (or stack of matrices) written in adapted coordinates."""
        return self.inverse @ np.asarray(M, dtype=float) @ self.basis

    def opnorm(self, M) -> np.ndarray:
        return np.linalg.norm(self.conjugate(M), ord=2, axis=(-2, -1))
