"""Basis dictionaries on the unit cube.

Index ordering is part of the stable interface.  In one dimension the
families are the nested sequences

* ``fourier``:   1, sqrt(2)cos(2*pi*x), sqrt(2)sin(2*pi*x), sqrt(2)cos(4*pi*x), ...
  (every prefix is orthonormal under the uniform density)
* ``legendre``:  sqrt(2j+1) * P_j(2x - 1), j = 0, 1, ...
* ``haar``:      1, then the L2-normalised Haar wavelets in level-major,
  translate-minor order
* ``monomial``:  1, x, x^2, ...
* ``bspline``:   the k B-splines of the given order on a uniform open knot
  vector (one dimension only; not a nested sequence)

For d > 1 the dictionary consists of the k tensor products with lowest total
per-axis index, ties broken lexicographically by the index tuple.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.interpolate import BSpline

from .errors import ConfigError, DomainError

FAMILIES = ("fourier", "legendre", "bspline", "haar", "monomial")

# families whose exact Gram under the uniform density is the identity
ORTHONORMAL_FAMILIES = ("fourier", "legendre", "haar")


def _total_degree_tuples(k: int, d: int) -> tuple[tuple[int, ...], ...]:
    """First k index tuples sorted by (total index, lexicographic)."""
    out: list[tuple[int, ...]] = []
    total = 0
    while len(out) < k:
        out.extend(_compositions(total, d))
        total += 1
    return tuple(out[:k])


def _compositions(total: int, d: int) -> list[tuple[int, ...]]:
    if d == 1:
        return [(total,)]
    out = []
    for head in range(total + 1):
        out.extend((head,) + rest for rest in _compositions(total - head, d - 1))
    return out


@dataclass(frozen=True)
class BasisDict:
    """An immutable dictionary of k basis functions on [0,1]^d."""

    family: str
    k: int
    d: int
    order: Optional[int] = None
    tensor_rule: tuple[tuple[int, ...], ...] = field(default=(), repr=False)

    @property
    def is_nested(self) -> bool:
        """Whether prefixes of the dictionary coincide with smaller dictionaries."""
        return self.family != "bspline"

    @property
    def is_orthonormal_uniform(self) -> bool:
        return self.family in ORTHONORMAL_FAMILIES

    def squared_norm_sup(self, scan_points: int = 100_000) -> float:
        """Max of z(x)^T z(x) over a fixed deterministic scan grid."""
        if scan_points <= 0:
            return 0.0
        pts = _scan_grid(scan_points, self.d)
        Z = eval_basis(self, pts)
        return float(np.max(np.einsum("ij,ij->i", Z, Z)))


def _scan_grid(total_points: int, d: int) -> np.ndarray:
    if d == 1:
        # cell midpoints: stays away from dyadic breakpoints
        m = total_points
        return ((np.arange(m) + 0.5) / m)[:, None]
    m = max(2, int(round(total_points ** (1.0 / d))))
    axis = (np.arange(m) + 0.5) / m
    grids = np.meshgrid(*([axis] * d), indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


def make_basis(family: str, k: int, d: int = 1, order: Optional[int] = None) -> BasisDict:
    """Construct a basis dictionary; validates the (family, k, d) combination."""
    if family not in FAMILIES:
        raise ConfigError(f"unknown basis family {family!r}; choose from {FAMILIES}")
    if k < 1:
        raise ConfigError(f"dictionary size k must be >= 1, got {k}")
    if d < 1:
        raise ConfigError(f"dimension d must be >= 1, got {d}")
    if family == "bspline":
        if order is None or order < 1:
            raise ConfigError("bspline requires order >= 1")
        if k < order:
            raise ConfigError(f"bspline requires k >= order, got k={k} < order={order}")
        if d != 1:
            raise ConfigError("bspline dictionaries are supported for d=1 only")
    elif order is not None:
        raise ConfigError(f"family {family!r} does not take an order")
    rule = _total_degree_tuples(k, d)
    return BasisDict(family=family, k=k, d=d, order=order, tensor_rule=rule)


def _eval_axis_1d(family: str, indices: np.ndarray, x: np.ndarray,
                  order: Optional[int]) -> np.ndarray:
    """Values of the requested 1-d functions: shape (len(x), len(indices))."""
    n = len(x)
    m = len(indices)
    if family == "fourier":
        # one trig pass for the base rotation, then complex powers per
        # frequency: ~20x cheaper than per-column cos/sin at large k, with
        # drift bounded by ~max_freq * eps
        idx = np.asarray(indices)
        out = np.empty((n, m))
        root2 = np.sqrt(2.0)
        cols_by_freq: dict[int, list[tuple[int, bool]]] = {}
        for col, j in enumerate(idx):
            if j == 0:
                out[:, col] = 1.0
                continue
            is_cos = j % 2 == 1
            freq = (j + 1) // 2 if is_cos else j // 2
            cols_by_freq.setdefault(int(freq), []).append((col, is_cos))
        if cols_by_freq:
            base = np.exp(2j * np.pi * x)
            cur = np.ones(n, dtype=complex)
            for freq in range(1, max(cols_by_freq) + 1):
                np.multiply(cur, base, out=cur)
                for col, is_cos in cols_by_freq.get(freq, ()):
                    np.multiply(cur.real if is_cos else cur.imag, root2,
                                out=out[:, col])
        return out
    if family == "legendre":
        jmax = int(np.max(indices))
        # recurrence on [-1, 1]: (j+1) P_{j+1} = (2j+1) t P_j - j P_{j-1}
        t = 2.0 * x - 1.0
        P = np.empty((n, jmax + 1))
        P[:, 0] = 1.0
        if jmax >= 1:
            P[:, 1] = t
        for j in range(1, jmax):
            P[:, j + 1] = ((2 * j + 1) * t * P[:, j] - j * P[:, j - 1]) / (j + 1)
        scale = np.sqrt(2.0 * indices + 1.0)
        return P[:, indices] * scale[None, :]
    if family == "haar":
        out = np.empty((n, m))
        for col, j in enumerate(indices):
            if j == 0:
                out[:, col] = 1.0
                continue
            t = j - 1
            level = int(np.floor(np.log2(t + 1)))
            pos = t + 1 - 2**level
            y = (2.0**level) * x - pos
            last = pos == 2**level - 1
            if last:
                support = (y >= 0.0) & (y <= 1.0)
            else:
                support = (y >= 0.0) & (y < 1.0)
            vals = np.where(y < 0.5, 1.0, -1.0) * (2.0 ** (level / 2.0))
            out[:, col] = np.where(support, vals, 0.0)
        return out
    if family == "monomial":
        return x[:, None] ** np.asarray(indices)[None, :]
    if family == "bspline":
        k_total = int(np.max(indices)) + 1
        degree = order - 1
        n_internal = k_total - order
        internal = np.linspace(0.0, 1.0, n_internal + 2)[1:-1]
        knots = np.concatenate([np.zeros(order), internal, np.ones(order)])
        design = BSpline.design_matrix(x, knots, degree).toarray()
        return design[:, indices]
    raise ConfigError(f"unknown basis family {family!r}")


def eval_basis(basis: BasisDict, X: np.ndarray) -> np.ndarray:
    """Evaluate the dictionary at points X in [0,1]^d; returns an (n, k) matrix."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        if basis.d != 1:
            raise DomainError(f"points have 1 coordinate, basis expects d={basis.d}")
        X = X[:, None]
    if X.ndim != 2 or X.shape[1] != basis.d:
        raise DomainError(f"points must be (n, {basis.d}), got shape {X.shape}")
    bad = np.argwhere((X < 0.0) | (X > 1.0))
    if len(bad):
        i, j = bad[0]
        raise DomainError(
            f"coordinate X[{i},{j}]={X[i, j]!r} lies outside [0,1]"
        )

    if basis.d == 1:
        indices = np.array([t[0] for t in basis.tensor_rule])
        return _eval_axis_1d(basis.family, indices, X[:, 0], basis.order)

    rule = np.asarray(basis.tensor_rule)  # (k, d)
    Z = np.ones((len(X), basis.k))
    for axis in range(basis.d):
        axis_idx = rule[:, axis]
        uniq, inverse = np.unique(axis_idx, return_inverse=True)
        V = _eval_axis_1d(basis.family, uniq, X[:, axis], basis.order)
        Z *= V[:, inverse]
    return Z


@dataclass(frozen=True)
class RegularityReport:
    """Spectral and boundedness diagnostics for a (basis, gram) pair."""

    lambda_min: float
    lambda_max: float
    cond: float
    sup_squared_norm: float
    bound_constant: float  # sup_x z^T z / k
    nuisance_bound: Optional[float]
    lambda_min_threshold: float
    passed: bool
    warnings: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "lambda_min": self.lambda_min,
            "lambda_max": self.lambda_max,
            "cond": self.cond,
            "sup_squared_norm": self.sup_squared_norm,
            "bound_constant": self.bound_constant,
            "nuisance_bound": self.nuisance_bound,
            "lambda_min_threshold": self.lambda_min_threshold,
            "passed": self.passed,
            "warnings": list(self.warnings),
        }


def check_basis_regularity(
    basis: BasisDict,
    gram,
    nuisance_bound: Optional[float] = None,
    lambda_min_threshold: float = 1e-3,
    scan_points: int = 100_000,
) -> RegularityReport:
    """Report-only check: gram eigenvalue range, sup of z^T z, implied constant.

    Never raises; failures appear as ``passed=False`` plus warnings.
    """
    lam_min, lam_max, cond = gram.eig
    warnings = []
    if scan_points <= 0:
        sup_sq = 0.0
        warnings.append("empty scan grid; sup of squared norm not measured")
    else:
        sup_sq = basis.squared_norm_sup(scan_points)
    bound_constant = sup_sq / basis.k
    passed = lam_min >= lambda_min_threshold
    if not passed:
        warnings.append(
            f"lambda_min={lam_min:.3e} below threshold {lambda_min_threshold:.1e}"
        )
    if nuisance_bound is not None and not np.isfinite(nuisance_bound):
        passed = False
        warnings.append("nuisance bound is not finite")
    return RegularityReport(
        lambda_min=float(lam_min),
        lambda_max=float(lam_max),
        cond=float(cond),
        sup_squared_norm=float(sup_sq),
        bound_constant=float(bound_constant),
        nuisance_bound=nuisance_bound,
        lambda_min_threshold=lambda_min_threshold,
        passed=bool(passed),
        warnings=tuple(warnings),
    )
