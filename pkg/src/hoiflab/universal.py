"""Split-sample universal confidence machinery for the squared-density-type
functional psi(theta) = integral of (p_hat(x) + theta' z(x))^2 dx.

The D2 sublevel set of the residual sum of squares is an explicit ellipsoid;
plug-in functional intervals extremize the quadratic psi over it exactly, and
profile intervals invert the profiled RSS through a level-set distance.  The
slack term divides by the size of D2 (the split the RSS is computed on).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .basis import BasisDict, eval_basis
from .bias_test import z_upper
from .errors import ConfigError, NumericalError
from .gram import GramOperator, empirical_gram
from .hoif import UStatResult
from .quadrature import density_values, tensor_grid
from .trs import EllipsoidQuadratic, LevelSetDistance

NOISE_MODELS = ("gaussian_unit_variance", "bernoulli")


class DegenerateSetError(ValueError):
    """The confidence set has negative squared radius (numerical error)."""


def default_quad_points(basis: BasisDict, extra_frequency: int = 0) -> int:
    """Enough Gauss-Legendre nodes per axis to resolve dictionary products.

    Fourier elements oscillate with up to ~k/2 cycles, so a product of two
    reaches k cycles; two nodes per cycle plus margin integrates that to
    ~1e-11.  ``extra_frequency`` adds the pilot or truth series' cycles.
    """
    if basis.family == "fourier":
        return max(200, 2 * basis.k + 4 * extra_frequency + 64)
    return max(200, basis.k + extra_frequency + 32)


@dataclass(frozen=True)
class SieveModel:
    """Gaussian (unit-variance) or Bernoulli sieve around a pilot estimate.

    Members are p_theta(x) = p_hat(x) + theta' z(x); the Gram is the exact
    second-moment operator of the dictionary under the known covariate
    density.
    """

    basis: BasisDict
    p_hat: Callable[[np.ndarray], np.ndarray]
    gram: GramOperator
    noise: str = "gaussian_unit_variance"
    density: object = "uniform"

    def __post_init__(self):
        if self.noise not in NOISE_MODELS:
            raise ConfigError(f"unknown noise model {self.noise!r}")

    def p_theta(self, theta: np.ndarray, X: np.ndarray) -> np.ndarray:
        return np.asarray(self.p_hat(X), dtype=float) + eval_basis(self.basis, X) @ theta

    def range_report(self, theta: np.ndarray, scan_points: int = 2001) -> dict:
        """Whether p_theta stays inside (0, 1) on a fixed scan grid."""
        from .basis import _scan_grid

        grid = _scan_grid(scan_points, self.basis.d)
        vals = self.p_theta(theta, grid)
        lo, hi = float(vals.min()), float(vals.max())
        return {"min": lo, "max": hi, "inside_unit": 0.0 < lo and hi < 1.0}


@dataclass(frozen=True)
class QuadraticFunctional:
    """psi(theta) = c0 + linear'theta + theta' quad theta."""

    c0: float
    linear: np.ndarray
    quad: np.ndarray

    def __call__(self, theta: np.ndarray) -> float:
        theta = np.asarray(theta, dtype=float)
        return float(self.c0 + self.linear @ theta + theta @ self.quad @ theta)


def psi_value(theta, qf: QuadraticFunctional) -> float:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != qf.linear.shape:
        raise ConfigError("theta dimension does not match the functional")
    return qf(theta)


def squared_functional(model: SieveModel, quad_points: Optional[int] = None) -> QuadraticFunctional:
    """Exact coefficients of theta -> integral (p_hat + theta'z)^2 under the density."""
    qp = quad_points or default_quad_points(model.basis)
    pts, wts = tensor_grid(qp, model.basis.d)
    g = density_values(model.density, pts)
    w = wts * g
    ph = np.asarray(model.p_hat(pts), dtype=float)
    Z = eval_basis(model.basis, pts)
    c0 = float(np.dot(w, ph**2))
    linear = 2.0 * (Z.T @ (w * ph))
    return QuadraticFunctional(c0=c0, linear=linear, quad=model.gram.matrix)


def kl_projection_oracle(
    true_p: Callable[[np.ndarray], np.ndarray],
    model: SieveModel,
    quad_points: Optional[int] = None,
) -> np.ndarray:
    """Population projection coefficient: -Gram^{-1} E[z (p_hat - p)].

    For Gaussian unit-variance noise this is the KL minimizer; under the
    Bernoulli model the same formula is the chi-square projection.
    """
    qp = quad_points or default_quad_points(model.basis)
    pts, wts = tensor_grid(qp, model.basis.d)
    g = density_values(model.density, pts)
    w = wts * g
    gap = np.asarray(model.p_hat(pts), dtype=float) - np.asarray(true_p(pts), dtype=float)
    Z = eval_basis(model.basis, pts)
    from .gram import apply_inverse

    return -apply_inverse(model.gram, Z.T @ (w * gap))


def split_mle(D1, model: SieveModel) -> np.ndarray:
    """Least-squares coefficient of A - p_hat(X) on the dictionary within D1."""
    Z1 = eval_basis(model.basis, D1.X)
    if D1.n <= model.basis.k:
        raise ConfigError(f"split of size {D1.n} cannot fit k={model.basis.k} coefficients")
    gram1 = empirical_gram(Z1, sample_id="d1")
    resid = np.asarray(D1.A, dtype=float) - np.asarray(model.p_hat(D1.X), dtype=float)
    from .gram import apply_inverse

    return apply_inverse(gram1, Z1.T @ resid / D1.n)


@dataclass
class Ellipsoid:
    """Sublevel set of the D2 mean residual sum of squares.

    membership(theta) iff (theta - center)' shape (theta - center) <= radius2.
    radius2 can only be negative through numerical error; flagged, not
    silently clipped.
    """

    center: np.ndarray
    shape: np.ndarray
    radius2: float
    n2: int
    rss_center: float  # mean RSS at the center
    degenerate: bool = field(init=False)

    def __post_init__(self):
        self.degenerate = bool(self.radius2 < 0.0)

    def membership(self, theta: np.ndarray, tol: float = 0.0) -> bool:
        d = np.asarray(theta, dtype=float) - self.center
        return bool(d @ self.shape @ d <= self.radius2 + tol)


def mean_rss(theta, resid, Z) -> float:
    e = resid - Z @ np.asarray(theta, dtype=float)
    return float(np.mean(e * e))


def confidence_set(D2, model: SieveModel, theta_hat_d1, alpha: float) -> Ellipsoid:
    """Universal confidence set from the D2 split.

    {theta: mean RSS(theta) <= mean RSS(theta_hat_d1) + (2/n2) log(1/alpha)},
    rewritten around the D2 least-squares center.  The split estimate itself
    is always a member.
    """
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must be in (0,1), got {alpha}")
    Z2 = eval_basis(model.basis, D2.X)
    n2 = D2.n
    gram2 = empirical_gram(Z2, sample_id="d2")  # raises if n2 <= k or singular
    resid = np.asarray(D2.A, dtype=float) - np.asarray(model.p_hat(D2.X), dtype=float)
    from .gram import apply_inverse

    center = apply_inverse(gram2, Z2.T @ resid / n2)
    theta_hat_d1 = np.asarray(theta_hat_d1, dtype=float)
    rss_c = mean_rss(center, resid, Z2)
    rss_1 = mean_rss(theta_hat_d1, resid, Z2)
    radius2 = (rss_1 - rss_c) + (2.0 / n2) * np.log(1.0 / alpha)
    return Ellipsoid(center=center, shape=gram2.matrix, radius2=float(radius2), n2=n2, rss_center=rss_c)


def plugin_interval(ell: Ellipsoid, qf: QuadraticFunctional) -> tuple[float, float]:
    """Exact range of the quadratic functional over the confidence set."""
    if ell.radius2 < 0.0:
        raise DegenerateSetError(f"negative squared radius {ell.radius2}")
    ext = EllipsoidQuadratic(qf.c0, qf.linear, qf.quad, ell.center, ell.shape)
    return ext.extremize(ell.radius2)


@dataclass(frozen=True)
class ProfileResult:
    lo: float
    hi: float
    connected: bool
    n_evals: int

    def interval(self) -> tuple[float, float]:
        return (self.lo, self.hi)


def profile_interval(
    D2,
    model: SieveModel,
    theta_hat_d1,
    qf: QuadraticFunctional,
    alpha: float,
    tol: float = 1e-12,
    scan_points: int = 257,
) -> ProfileResult:
    """Functional interval by profiling the D2 RSS over level sets of psi.

    {phi: min over psi(theta)=phi of mean RSS(theta) <= mean RSS(theta_hat_d1)
    + (2/n2) log(1/alpha)}.  The inner minimum is a secular-equation solve;
    the endpoints come from bisection, bracketed by the plug-in interval
    inflated fourfold.  A scan across the bracket checks that the sublevel
    region is a single interval; a disconnected pattern is reported through
    ``connected=False``.
    """
    ell = confidence_set(D2, model, theta_hat_d1, alpha)
    if ell.radius2 < 0.0:
        raise DegenerateSetError(f"negative squared radius {ell.radius2}")
    dist = LevelSetDistance(qf.c0, qf.linear, qf.quad, ell.center, ell.shape)
    r2 = ell.radius2
    n_evals = 0

    def inside(phi):
        nonlocal n_evals
        n_evals += 1
        return dist(phi) <= r2

    plo, phi_hi = plugin_interval(ell, qf)
    psi_center = qf(ell.center)
    width = max(phi_hi - plo, 1e-8 * max(1.0, abs(psi_center)))
    lo_bracket = max(dist.psi_min, psi_center - 4.0 * width)
    hi_bracket = psi_center + 4.0 * width

    # expand outward until the bracket ends are outside (or pinned at psi_min)
    for _ in range(60):
        if lo_bracket <= dist.psi_min or not inside(lo_bracket):
            break
        lo_bracket = max(dist.psi_min, psi_center - 2.0 * (psi_center - lo_bracket))
    for _ in range(60):
        if not inside(hi_bracket):
            break
        hi_bracket = psi_center + 2.0 * (hi_bracket - psi_center)

    scale = max(1.0, abs(psi_center))
    if lo_bracket <= dist.psi_min and inside(max(dist.psi_min, lo_bracket)):
        lo = dist.psi_min
    else:
        a, b = lo_bracket, psi_center
        for _ in range(200):
            mid = 0.5 * (a + b)
            if mid == a or mid == b or (b - a) < tol * scale:
                break
            if inside(mid):
                b = mid
            else:
                a = mid
        lo = b
    if inside(hi_bracket):
        raise NumericalError("profile upper bracket expansion failed")
    a, b = psi_center, hi_bracket
    for _ in range(200):
        mid = 0.5 * (a + b)
        if mid == a or mid == b or (b - a) < tol * scale:
            break
        if inside(mid):
            a = mid
        else:
            b = mid
    hi = a

    grid = np.linspace(max(dist.psi_min, lo - 0.5 * width), hi + 0.5 * width, scan_points)
    flags = np.array([inside(phi) for phi in grid])
    if flags.any():
        first, last = np.argmax(flags), len(flags) - 1 - np.argmax(flags[::-1])
        connected = bool(flags[first : last + 1].all())
    else:
        connected = True
    return ProfileResult(lo=float(lo), hi=float(hi), connected=connected, n_evals=n_evals)


def length_lower_bound(
    theta_hat_d1,
    theta_tilde,
    qf: QuadraticFunctional,
    alpha: float,
    include_linear: bool = True,
) -> float:
    """(1 - alpha) |psi(theta_hat_d1) - psi(theta_tilde)|, expanded as
    (d' Q (theta_hat + theta_tilde) + linear' d) with d the difference.

    ``include_linear=False`` drops the pilot-estimate cross term and leaves
    the pure quadratic form; the two coincide when p_hat vanishes.
    """
    th = np.asarray(theta_hat_d1, dtype=float)
    tt = np.asarray(theta_tilde, dtype=float)
    d = th - tt
    val = d @ qf.quad @ (th + tt)
    if include_linear:
        val += qf.linear @ d
    return float((1.0 - alpha) * abs(val))


def hoif_wald_interval(psi1: UStatResult, if22_result: UStatResult, alpha: float) -> tuple[float, float]:
    """Wald interval centered at the bias-corrected estimate psi1 - if22.

    The half-width combines the two standard errors additively in variance;
    their covariance is ignored.
    """
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must be in (0,1), got {alpha}")
    center = psi1.estimate - if22_result.estimate
    half = z_upper(alpha / 2.0) * float(np.hypot(psi1.se, if22_result.se))
    return (center - half, center + half)
