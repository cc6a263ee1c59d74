"""Tensor Gauss-Legendre quadrature on the unit cube."""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.special import roots_legendre

from .errors import ConfigError, NumericalError


@lru_cache(maxsize=64)
def _nodes_weights_01(n: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = roots_legendre(n)
    # map from [-1, 1] to [0, 1]
    return (x + 1.0) / 2.0, w / 2.0


def gauss_legendre_01(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights integrating exactly polynomials of degree < 2n on [0, 1]."""
    if n < 1:
        raise ConfigError(f"quad_points must be >= 1, got {n}")
    x, w = _nodes_weights_01(int(n))
    return x.copy(), w.copy()


def tensor_grid(n: int, d: int) -> tuple[np.ndarray, np.ndarray]:
    """Product Gauss-Legendre grid on [0,1]^d: points (n^d, d) and weights (n^d,)."""
    x, w = gauss_legendre_01(n)
    if d == 1:
        return x[:, None], w
    axes = np.meshgrid(*([x] * d), indexing="ij")
    pts = np.stack([a.ravel() for a in axes], axis=1)
    wts = np.ones(len(pts))
    for a in np.meshgrid(*([w] * d), indexing="ij"):
        wts *= a.ravel()
    return pts, wts


class ProductDensity:
    """Product density on [0,1]^d given by one callable per axis.

    Each marginal must integrate to 1 on [0, 1]; validated by quadrature at
    construction.
    """

    def __init__(self, marginals, quad_points: int = 200, tol: float = 1e-8):
        self.marginals = list(marginals)
        x, w = gauss_legendre_01(quad_points)
        for i, f in enumerate(self.marginals):
            total = float(np.dot(w, np.asarray(f(x), dtype=float)))
            if not np.isfinite(total):
                raise NumericalError(f"marginal density {i} is non-finite on [0,1]")
            if abs(total - 1.0) > tol:
                raise ConfigError(
                    f"marginal density {i} integrates to {total:.6g}, not 1"
                )

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        out = np.ones(len(pts))
        for axis, f in enumerate(self.marginals):
            out *= np.asarray(f(pts[:, axis]), dtype=float)
        return out


def density_values(density, pts: np.ndarray) -> np.ndarray:
    """Evaluate a density spec ("uniform" or a callable/ProductDensity) at points."""
    if density is None or (isinstance(density, str) and density == "uniform"):
        return np.ones(len(pts))
    if isinstance(density, str):
        raise ConfigError(f"unknown density spec {density!r}")
    return np.asarray(density(pts), dtype=float)


def integrate(f, d: int, quad_points: int, density="uniform") -> float:
    """Integrate f over [0,1]^d against the density by tensor Gauss-Legendre.

    ``f`` maps an (m, d) array of points to an (m,) array of values.
    """
    pts, wts = tensor_grid(quad_points, d)
    vals = np.asarray(f(pts), dtype=float)
    g = density_values(density, pts)
    out = float(np.dot(wts, vals * g))
    if not np.isfinite(out):
        raise NumericalError("quadrature produced a non-finite value")
    return out
