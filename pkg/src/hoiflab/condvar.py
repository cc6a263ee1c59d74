"""Random-design sub-cube pairing estimator of a homoscedastic noise variance.

The unit cube is split into m^d identical sub-cubes.  Every cube holding two
or more points contributes (Y_i - Y_j)^2 / 2 for one uniformly drawn pair
without replacement; the estimate averages these contributions.  Boundary
points belong to the cube on their left (x = 0 stays in the first cube), so
the last cube is right-closed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, DomainError, EmptyDesignError


@dataclass(frozen=True)
class SubcubePlan:
    k_bins: int
    m_per_axis: int
    d: int
    gamma: Optional[float]
    edge: float
    occupancy: dict  # histogram: points-per-cube count -> number of cubes

    def to_dict(self) -> dict:
        return {
            "k_bins": self.k_bins,
            "m_per_axis": self.m_per_axis,
            "d": self.d,
            "gamma": self.gamma,
            "edge": self.edge,
            "occupancy": {str(c): int(v) for c, v in sorted(self.occupancy.items())},
        }


def optimal_k_bins(n: int, s: float, d: int) -> float:
    """Bias-variance balancing cube count: solves k/n^2 = k^{-4s/d}."""
    if not 0.0 < s:
        raise ConfigError(f"smoothness s must be positive, got {s}")
    return float(n) ** (2.0 / (1.0 + 4.0 * s / d))


def _bin_ids(X: np.ndarray, m: int) -> np.ndarray:
    # left-bin rule: index = ceil(x*m) - 1, clamped so 0 stays in the first bin
    idx = np.ceil(X * m).astype(np.int64) - 1
    np.clip(idx, 0, m - 1, out=idx)
    if X.shape[1] == 1:
        return idx[:, 0]
    flat = idx[:, 0]
    for axis in range(1, X.shape[1]):
        flat = flat * m + idx[:, axis]
    return flat


def subcube_variance(
    X: np.ndarray,
    Y: np.ndarray,
    gamma: Optional[float] = None,
    k_bins: Optional[int] = None,
    s: Optional[float] = None,
    rng=None,
    all_pairs: bool = False,
) -> dict:
    """Sub-cube pairing estimate of sigma^2 from (X, Y) on the unit cube.

    Exactly one of ``gamma`` (> 1; cube count n^gamma), ``k_bins`` (explicit),
    or ``s`` (optimal-k oracle mode, k = n^{2/(1+4s/d)}) selects the cube
    count, realized as m^d with m the ceiling of the per-axis root.
    ``all_pairs=True`` averages over all within-cube pairs instead of one
    random pair per cube; this variant is for variance-reduction comparisons
    and is not the pairing procedure the rate analysis assumes.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, d = X.shape
    if len(Y) != n:
        raise ConfigError("X and Y length mismatch")
    if n < 2:
        raise ConfigError("need at least two observations")
    if np.any((X < 0.0) | (X > 1.0)):
        raise DomainError("points must lie in the unit cube")

    chosen = [v is not None for v in (gamma, k_bins, s)]
    if sum(chosen) != 1:
        raise ConfigError("specify exactly one of gamma, k_bins, s")
    if gamma is not None:
        if gamma <= 1.0:
            raise ConfigError(f"gamma must exceed 1, got {gamma}")
        k_target = float(n) ** gamma
    elif s is not None:
        k_target = optimal_k_bins(n, s, d)
    else:
        if k_bins < 1:
            raise ConfigError("k_bins must be >= 1")
        k_target = float(k_bins)
    m = max(1, int(np.ceil(k_target ** (1.0 / d) - 1e-12)))
    total_bins = m**d

    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)

    ids = _bin_ids(X, m)
    # uniform pair per cube: permute, then stable-sort by cube id
    perm = rng.permutation(n)
    order = perm[np.argsort(ids[perm], kind="stable")]
    sorted_ids = ids[order]
    starts = np.flatnonzero(np.r_[True, sorted_ids[1:] != sorted_ids[:-1]])
    counts = np.diff(np.r_[starts, n])

    occupied = dict(zip(*np.unique(counts, return_counts=True)))
    occupancy = {int(c): int(v) for c, v in occupied.items()}
    empty = total_bins - int(sum(occupancy.values()))
    if empty > 0:
        occupancy[0] = empty

    multi = counts >= 2
    bins_used = int(np.sum(multi))
    if bins_used == 0:
        raise EmptyDesignError("no sub-cube contains two or more observations")

    if all_pairs:
        contribs = np.empty(bins_used)
        pos = 0
        for start, count in zip(starts[multi], counts[multi]):
            ys = Y[order[start : start + count]]
            diffs = ys[:, None] - ys[None, :]
            iu = np.triu_indices(count, k=1)
            contribs[pos] = float(np.mean(diffs[iu] ** 2 / 2.0))
            pos += 1
    else:
        first = order[starts[multi]]
        second = order[starts[multi] + 1]
        contribs = (Y[first] - Y[second]) ** 2 / 2.0

    plan = SubcubePlan(
        k_bins=total_bins,
        m_per_axis=m,
        d=d,
        gamma=gamma,
        edge=1.0 / m,
        occupancy=occupancy,
    )
    return {
        "sigma2_hat": float(np.mean(contribs)),
        "bins_used": bins_used,
        "plan": plan,
    }
