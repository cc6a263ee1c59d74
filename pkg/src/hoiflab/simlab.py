"""Simulation truths, data generation, series nuisances, and bias oracles."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .basis import BasisDict, eval_basis, make_basis
from .data import Dataset, assign_splits
from .errors import ConfigError, SingularGramError
from .gram import GramOperator
from .hoif import NuisancePair
from .quadrature import density_values, gauss_legendre_01, tensor_grid

MODELS = ("gaussian", "bernoulli")
BERNOULLI_RANGE = (0.05, 0.95)


@dataclass(frozen=True)
class SeriesFunction:
    """x -> coef' z(x) for a basis dictionary; the simulation truth format."""

    basis: BasisDict
    coef: np.ndarray

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return eval_basis(self.basis, X) @ self.coef

    @property
    def k(self) -> int:
        return self.basis.k

    def sup_norm(self, scan_points: int = 4096) -> float:
        from .basis import _scan_grid

        return float(np.max(np.abs(self(_scan_grid(scan_points, self.basis.d)))))

    def max_frequency(self) -> int:
        if self.basis.family == "fourier":
            return (self.basis.k + 1) // 2
        return self.basis.k


@dataclass(frozen=True)
class TruthSpec:
    """Series truth offset + amplitude * sum_{j>=2} j^{-(s+1/2)} z_j(x).

    The coefficient decay makes the squared L2 tail beyond k scale as
    k^{-2s}, the quantitative hook for the rate experiments.
    """

    s: float
    J: int
    amplitude: float
    offset: float = 0.0
    family: str = "fourier"
    d: int = 1

    def coefficients(self) -> np.ndarray:
        if not 0.0 < self.s < 1.0:
            raise ConfigError(f"smoothness s must be in (0,1), got {self.s}")
        if self.J < 1:
            raise ConfigError("series length J must be >= 1")
        coef = np.zeros(self.J)
        coef[0] = self.offset
        j = np.arange(2, self.J + 1, dtype=float)
        coef[1:] = self.amplitude * j ** (-(self.s + 0.5))
        return coef

    def l2_tail(self, k: int) -> float:
        """sum_{j > k} of the squared coefficients."""
        coef = self.coefficients()
        return float(np.sum(coef[k:] ** 2))


def gen_truth(spec: TruthSpec, model: str = "gaussian", scan_points: int = 4096) -> SeriesFunction:
    """Materialize the truth; Bernoulli models must keep the range inside (0.05, 0.95)."""
    if model not in MODELS:
        raise ConfigError(f"unknown model {model!r}")
    basis = make_basis(spec.family, k=spec.J, d=spec.d)
    fn = SeriesFunction(basis=basis, coef=spec.coefficients())
    if model == "bernoulli":
        from .basis import _scan_grid

        vals = fn(_scan_grid(scan_points, spec.d))
        lo, hi = float(vals.min()), float(vals.max())
        if lo <= BERNOULLI_RANGE[0] or hi >= BERNOULLI_RANGE[1]:
            raise ConfigError(
                f"Bernoulli truth range [{lo:.3f}, {hi:.3f}] leaves "
                f"({BERNOULLI_RANGE[0]}, {BERNOULLI_RANGE[1]}); "
                "reduce amplitude or J, or adjust offset"
            )
    return fn


def gen_data(
    n: int,
    d: int,
    model: str,
    p,
    rng: np.random.Generator,
    split_fractions: Optional[dict] = None,
    b=None,
    variant: str = "cond_variance",
) -> Dataset:
    """X uniform on the cube; A from the model around p(X); Y per variant."""
    if model not in MODELS:
        raise ConfigError(f"unknown model {model!r}")
    X = rng.uniform(0.0, 1.0, size=(n, d))
    pX = np.asarray(p(X), dtype=float)
    if model == "gaussian":
        A = pX + rng.standard_normal(n)
    else:
        A = rng.binomial(1, np.clip(pX, 0.0, 1.0), size=n).astype(float)
    if variant == "cond_variance":
        Y = A.copy()
        bX = pX
    elif variant == "cond_covariance":
        if b is None:
            raise ConfigError("cond_covariance needs an outcome truth b")
        bX = np.asarray(b(X), dtype=float)
        if model == "gaussian":
            Y = bX + rng.standard_normal(n)
        else:
            Y = rng.binomial(1, np.clip(bX, 0.0, 1.0), size=n).astype(float)
    else:
        raise ConfigError(f"unknown variant {variant!r}")
    splits = assign_splits(n, split_fractions, rng) if split_fractions else {}
    return Dataset(A=A, Y=Y, X=X, splits=splits, p_values=pX, b_values=bX)


def fit_series(values: np.ndarray, X: np.ndarray, basis: BasisDict) -> SeriesFunction:
    """Least-squares series fit via the normal equations.

    Raises SingularGramError when the design is numerically rank deficient.
    """
    from .gram import apply_inverse, empirical_gram

    Z = eval_basis(basis, X)
    design = empirical_gram(Z, sample_id="series_fit")
    coef = apply_inverse(design, Z.T @ np.asarray(values, dtype=float) / len(Z))
    return SeriesFunction(basis=basis, coef=coef)


def fit_nuisance(D_tr, family: str, k_star: int, variant: str, d: int = 1) -> NuisancePair:
    """Series least-squares nuisances on the training split."""
    if D_tr.n <= k_star:
        raise ConfigError(f"training split n={D_tr.n} must exceed k*={k_star}")
    basis = make_basis(family, k=k_star, d=d)
    p_hat = fit_series(D_tr.A, D_tr.X, basis)
    if variant == "cond_variance":
        return NuisancePair(p_hat=p_hat, variant=variant)
    b_hat = fit_series(D_tr.Y, D_tr.X, basis)
    return NuisancePair(p_hat=p_hat, b_hat=b_hat, variant=variant)


def oracle_nuisance(p, b=None, variant: str = "cond_variance") -> NuisancePair:
    """The exact-null injection: nuisances set to the truth itself."""
    if variant == "cond_variance":
        return NuisancePair(p_hat=p, variant=variant)
    return NuisancePair(p_hat=p, b_hat=b, variant=variant)


@dataclass(frozen=True)
class OracleBias:
    """Quadrature/coefficient oracle for the truncated and full mixed bias.

    bias_k   -- E[ Pi[bhat-b|z_k] * Pi[phat-p|z_k] ]
    bias_inf -- E[ (bhat-b)(phat-p) ]
    tb_k     -- bias_inf - bias_k (the part no k-dimensional statistic sees)
    proj_*_sq -- second moments of the two projections (power bookkeeping)
    coef_p   -- coefficients of Pi[phat-p | z_k] in the dictionary
    """

    bias_k: float
    bias_inf: float
    tb_k: float
    proj_p_sq: float
    proj_b_sq: float
    coef_p: np.ndarray
    coef_b: np.ndarray
    basis: BasisDict

    def residual_projection_values(self, X: np.ndarray) -> np.ndarray:
        """Values of Pi[p - phat | z_k](X), the population fitted direction."""
        return -(eval_basis(self.basis, X) @ self.coef_p)

    def power_ratio(self, k: int, n_est: int, variant: str = "cond_covariance") -> float:
        """How far the configuration clears the rejection-power condition.

        cond_covariance: bias_k^2 over (k/n) times its Cauchy-Schwarz bound;
        cond_variance: the bound is attained, and the condition reduces to
        the projected second moment against k/n.
        """
        if variant == "cond_variance":
            denom = k / n_est
            return self.proj_p_sq / denom if denom > 0 else np.inf
        denom = (k / n_est) * self.proj_b_sq * self.proj_p_sq
        return self.bias_k**2 / denom if denom > 0 else np.inf

    def to_dict(self) -> dict:
        return {
            "bias_k": self.bias_k,
            "bias_inf": self.bias_inf,
            "tb_k": self.tb_k,
            "proj_p_sq": self.proj_p_sq,
            "proj_b_sq": self.proj_b_sq,
        }


def _series_coefficient_gap(fn_hat, fn_true, k: int) -> Optional[np.ndarray]:
    """Coefficients of (fn_hat - fn_true) when both are series in one
    orthonormal family under the uniform density; None when not applicable."""
    if not (isinstance(fn_hat, SeriesFunction) and isinstance(fn_true, SeriesFunction)):
        return None
    bh, bt = fn_hat.basis, fn_true.basis
    if bh.family != bt.family or bh.d != bt.d or not bh.is_orthonormal_uniform:
        return None
    size = max(bh.k, bt.k, k)
    gap = np.zeros(size)
    gap[: bh.k] += fn_hat.coef
    gap[: bt.k] -= fn_true.coef
    return gap


def oracle_bias(
    p,
    p_hat,
    b,
    b_hat,
    basis_k: BasisDict,
    gram: GramOperator,
    quad_points: Optional[int] = None,
) -> OracleBias:
    """Population bias decomposition, by coefficients when exact, else quadrature.

    When every function is a series in the same orthonormal family under the
    uniform density and the Gram is the identity, projections are coefficient
    truncations and all integrals are finite sums.  Otherwise tensor
    Gauss-Legendre quadrature against the Gram's density is used.
    """
    from .gram import apply_inverse

    k = basis_k.k
    gap_p = _series_coefficient_gap(p_hat, p, k)
    gap_b = _series_coefficient_gap(b_hat, b, k)
    same_family = (
        gap_p is not None
        and gap_b is not None
        and gram.is_identity
        and basis_k.family == p_hat.basis.family
    )
    if same_family:
        size = max(len(gap_p), len(gap_b))
        gp = np.zeros(size)
        gp[: len(gap_p)] = gap_p
        gb = np.zeros(size)
        gb[: len(gap_b)] = gap_b
        coef_p = gp[:k].copy()
        coef_b = gb[:k].copy()
        bias_k = float(coef_b @ coef_p)
        bias_inf = float(gb @ gp)
        proj_p_sq = float(coef_p @ coef_p)
        proj_b_sq = float(coef_b @ coef_b)
    else:
        if quad_points is None:
            freq = basis_k.k + 64
            for fn in (p, p_hat, b, b_hat):
                if isinstance(fn, SeriesFunction):
                    freq += 2 * fn.max_frequency()
            quad_points = max(200, 2 * freq)
        density = gram.meta.get("density", "uniform")
        pts, wts = tensor_grid(quad_points, basis_k.d)
        g = density_values("uniform" if density == "uniform" else density, pts)
        w = wts * g
        dp = np.asarray(p_hat(pts), dtype=float) - np.asarray(p(pts), dtype=float)
        db = np.asarray(b_hat(pts), dtype=float) - np.asarray(b(pts), dtype=float)
        Z = eval_basis(basis_k, pts)
        u = Z.T @ (w * dp)
        v = Z.T @ (w * db)
        coef_p = apply_inverse(gram, u)
        coef_b = apply_inverse(gram, v)
        bias_k = float(v @ coef_p)
        bias_inf = float(np.dot(w, dp * db))
        proj_p_sq = float(u @ coef_p)
        proj_b_sq = float(v @ coef_b)
    return OracleBias(
        bias_k=bias_k,
        bias_inf=bias_inf,
        tb_k=bias_inf - bias_k,
        proj_p_sq=proj_p_sq,
        proj_b_sq=proj_b_sq,
        coef_p=coef_p,
        coef_b=coef_b,
        basis=basis_k,
    )
