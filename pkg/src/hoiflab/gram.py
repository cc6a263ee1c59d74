"""Gram operators: exact (quadrature) and empirical, with factorization."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla

from .basis import BasisDict, eval_basis
from .errors import ConfigError, NumericalError, SingularGramError
from .quadrature import density_values, tensor_grid

SYMMETRY_RTOL = 1e-12
INVERSE_RESIDUAL_TOL = 1e-8


@dataclass
class GramOperator:
    """Symmetric positive-definite k x k operator with lazy factorization.

    ``kind`` is "exact" (known density) or "empirical" (sample Gram); the
    ``meta`` dict records where the matrix came from (density spec or sample
    id and size) plus any explicit ridge.
    """

    matrix: np.ndarray
    kind: str
    meta: dict = field(default_factory=dict)
    is_identity: bool = False
    _chol: Optional[np.ndarray] = field(default=None, repr=False)
    _eig: Optional[tuple[float, float, float]] = field(default=None, repr=False)

    def __post_init__(self):
        M = np.asarray(self.matrix, dtype=float)
        scale = np.max(np.abs(M)) or 1.0
        if np.max(np.abs(M - M.T)) > SYMMETRY_RTOL * scale:
            raise NumericalError("gram matrix is not symmetric to tolerance")
        self.matrix = (M + M.T) / 2.0
        if not self.is_identity:
            k = self.k
            self.is_identity = bool(np.array_equal(self.matrix, np.eye(k)))

    @property
    def k(self) -> int:
        return self.matrix.shape[0]

    @property
    def chol(self) -> np.ndarray:
        """Lower-triangular Cholesky factor; raises SingularGramError on failure."""
        if self._chol is None:
            try:
                self._chol = sla.cholesky(self.matrix, lower=True)
            except sla.LinAlgError as exc:
                lam_min = float(sla.eigvalsh(self.matrix)[0])
                raise SingularGramError(
                    f"gram factorization failed (kind={self.kind}, k={self.k}): {exc}",
                    lambda_min=lam_min,
                ) from exc
        return self._chol

    @property
    def eig(self) -> tuple[float, float, float]:
        """(lambda_min, lambda_max, condition number)."""
        if self._eig is None:
            vals = sla.eigvalsh(self.matrix)
            lam_min, lam_max = float(vals[0]), float(vals[-1])
            cond = lam_max / lam_min if lam_min > 0 else np.inf
            self._eig = (lam_min, lam_max, cond)
        return self._eig

    def to_diag(self) -> dict:
        lam_min, lam_max, cond = self.eig
        return {
            "kind": self.kind,
            "k": self.k,
            "lambda_min": lam_min,
            "lambda_max": lam_max,
            "cond": cond,
            **({"ridge": self.meta["ridge"]} if self.meta.get("ridge") else {}),
        }

    # -- solves -------------------------------------------------------------

    def solve(self, V: np.ndarray) -> np.ndarray:
        """Omega^{-1} V without the residual guard (internal workhorse)."""
        if self.is_identity:
            return np.array(V, dtype=float, copy=True)
        L = self.chol
        return sla.cho_solve((L, True), np.asarray(V, dtype=float))

    def row_quadforms(self, Z: np.ndarray, block: int = 16384) -> np.ndarray:
        """diag(Z Omega^{-1} Z^T) computed in row blocks."""
        Z = np.asarray(Z, dtype=float)
        if self.is_identity:
            return np.einsum("ij,ij->i", Z, Z)
        L = self.chol
        out = np.empty(len(Z))
        for s in range(0, len(Z), block):
            W = sla.solve_triangular(L, Z[s:s + block].T, lower=True)
            out[s:s + block] = np.einsum("ij,ij->j", W, W)
        return out


def apply_inverse(gram: GramOperator, V: np.ndarray) -> np.ndarray:
    """Omega^{-1} V with one step of iterative refinement and a residual guard."""
    V = np.asarray(V, dtype=float)
    X = gram.solve(V)
    if not gram.is_identity:
        R = V - gram.matrix @ X
        X = X + gram.solve(R)
        resid = np.max(np.abs(gram.matrix @ X - V))
        vnorm = np.max(np.abs(V))
        if vnorm > 0 and resid > INVERSE_RESIDUAL_TOL * vnorm:
            raise NumericalError(
                f"inverse-apply residual {resid:.3e} exceeds "
                f"{INVERSE_RESIDUAL_TOL:.0e} * ||V||_inf"
            )
    return X


def _quadrature_gram(basis: BasisDict, density, quad_points: int) -> np.ndarray:
    pts, wts = tensor_grid(quad_points, basis.d)
    g = density_values(density, pts)
    Z = eval_basis(basis, pts)
    M = (Z * (wts * g)[:, None]).T @ Z
    if not np.all(np.isfinite(M)):
        i, j = np.argwhere(~np.isfinite(M))[0]
        raise NumericalError(f"non-finite quadrature value at gram entry ({i},{j})")
    return (M + M.T) / 2.0


def exact_gram(
    basis: BasisDict,
    density="uniform",
    quad_points: int = 200,
    ridge: float = 0.0,
    convergence_tol: float = 1e-8,
    method: str = "auto",
) -> GramOperator:
    """Exact Gram of the dictionary under the density, by tensor quadrature.

    Known orthonormal families under the uniform density short-circuit to the
    identity (method="auto"); pass method="quadrature" to force numerical
    integration, which then carries a convergence guard comparing two
    resolutions.
    """
    uniform = density is None or density == "uniform"
    meta = {"density": "uniform" if uniform else "custom", "ridge": ridge}
    if method not in ("auto", "quadrature"):
        raise ConfigError(f"unknown exact_gram method {method!r}")
    if method == "auto" and uniform and basis.is_orthonormal_uniform and ridge == 0.0:
        return GramOperator(np.eye(basis.k), kind="exact", meta=meta, is_identity=True)

    fine = _quadrature_gram(basis, density, quad_points)
    coarse_points = quad_points // 2 if quad_points >= 200 else max(200, quad_points)
    if coarse_points != quad_points:
        coarse = _quadrature_gram(basis, density, coarse_points)
        gap = float(np.max(np.abs(fine - coarse)))
        if gap > convergence_tol:
            i, j = np.unravel_index(np.argmax(np.abs(fine - coarse)), fine.shape)
            raise NumericalError(
                f"gram quadrature not converged: entry ({i},{j}) moved {gap:.3e} "
                f"between {coarse_points} and {quad_points} points/axis"
            )
    if ridge:
        fine = fine + ridge * np.eye(basis.k)
    return GramOperator(fine, kind="exact", meta=meta)


def empirical_gram(Z_tr: np.ndarray, sample_id: str = "tr", ridge: float = 0.0) -> GramOperator:
    """(1/n_tr) Z^T Z from a training-split design matrix.

    Requires n_tr > k; singularity is reported (with a lambda_min estimate),
    never silently regularized.  An explicit nonzero ridge is recorded in the
    operator metadata.
    """
    Z_tr = np.asarray(Z_tr, dtype=float)
    n_tr, k = Z_tr.shape
    if n_tr <= k:
        raise ConfigError(f"empirical gram needs n_tr > k, got n_tr={n_tr}, k={k}")
    M = (Z_tr.T @ Z_tr) / n_tr
    if ridge:
        M = M + ridge * np.eye(k)
    op = GramOperator(
        (M + M.T) / 2.0,
        kind="empirical",
        meta={"sample_id": sample_id, "n_tr": n_tr, "ridge": ridge},
    )
    op.chol  # factorize eagerly so singularity surfaces here
    return op
