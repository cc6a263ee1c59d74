"""Exact extremization of quadratic forms over ellipsoids and spheres.

Both problems reduce, after whitening and diagonalization, to a secular
equation in the Lagrange multiplier, solved by safeguarded bisection to
relative tolerance ~1e-15 (monotone decreasing left-hand side).  The hard
case (gradient orthogonal to the extreme eigenspace) is handled by adding a
boundary component inside that eigenspace.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg as sla

from .errors import NumericalError

_BISECT_ITERS = 200


def _decreasing_root(f, lo: float, hi_guess: float) -> float:
    """Root of a continuous decreasing f on (lo, inf) with f(lo+) > 0."""
    hi = max(hi_guess, lo + 1.0)
    for _ in range(200):
        if f(hi) <= 0.0:
            break
        hi = lo + 2.0 * (hi - lo)
    else:
        raise NumericalError("secular bracket expansion failed")
    a, b = lo, hi
    for _ in range(_BISECT_ITERS):
        mid = 0.5 * (a + b)
        if mid == a or mid == b:
            break
        if f(mid) > 0.0:
            a = mid
        else:
            b = mid
    return 0.5 * (a + b)


def min_on_ball_eig(b: np.ndarray, lam: np.ndarray, r: float) -> tuple[float, np.ndarray]:
    """Minimize b.u + u.diag(lam).u over ||u|| <= r, in eigencoordinates."""
    b = np.asarray(b, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if r == 0.0:
        return 0.0, np.zeros_like(b)
    lam_min = float(lam.min())

    if lam_min > 0.0:
        u_int = -b / (2.0 * lam)
        if np.linalg.norm(u_int) <= r:
            return float(b @ u_int + u_int @ (lam * u_int)), u_int

    mu_lo = max(0.0, -lam_min)

    def norm_sq(mu):
        return float(np.sum((b / (2.0 * (lam + mu))) ** 2))

    # probe just right of the lower multiplier bound for the hard case
    scale = max(1.0, float(np.max(np.abs(lam))), float(np.max(np.abs(b))))
    eps = 1e-13 * scale
    if norm_sq(mu_lo + eps) < r * r:
        # hard case: fill the remaining radius inside the bottom eigenspace
        mu = mu_lo
        with np.errstate(divide="ignore", invalid="ignore"):
            u = np.where(np.abs(lam + mu) > eps, -b / (2.0 * (lam + mu)), 0.0)
        gap = r * r - float(u @ u)
        if gap > 0.0 and mu_lo > 0.0:
            idx = int(np.argmin(lam))
            u[idx] += np.sqrt(gap)
        return float(b @ u + u @ (lam * u)), u

    mu = _decreasing_root(lambda m: norm_sq(m) - r * r, mu_lo, mu_lo + scale)
    u = -b / (2.0 * (lam + mu))
    nrm = np.linalg.norm(u)
    if nrm > 0:
        u *= r / nrm  # land exactly on the boundary
    return float(b @ u + u @ (lam * u)), u


def min_on_sphere_eig(c: np.ndarray, lam: np.ndarray, rho: float) -> tuple[float, np.ndarray]:
    """Minimize (u - c).diag(lam).(u - c) over ||u|| = rho, lam > 0 elementwise."""
    c = np.asarray(c, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if np.any(lam <= 0.0):
        raise NumericalError("sphere-constrained distance requires a positive metric")
    if rho == 0.0:
        return float(c @ (lam * c)), np.zeros_like(c)
    lam_min = float(lam.min())
    mu_lo = -lam_min

    def norm_sq(mu):
        return float(np.sum((lam * c / (lam + mu)) ** 2))

    scale = max(1.0, float(np.max(np.abs(lam))), float(np.max(np.abs(c))))
    eps = 1e-13 * scale
    if norm_sq(mu_lo + eps) < rho * rho:
        # hard case: c orthogonal (numerically) to the bottom eigenspace
        with np.errstate(divide="ignore", invalid="ignore"):
            u = np.where(np.abs(lam + mu_lo) > eps, lam * c / (lam + mu_lo), 0.0)
        gap = rho * rho - float(u @ u)
        if gap > 0.0:
            idx = int(np.argmin(lam))
            u[idx] += np.sqrt(gap)
        d = u - c
        return float(d @ (lam * d)), u

    mu = _decreasing_root(lambda m: norm_sq(m) - rho * rho, mu_lo, mu_lo + scale)
    u = lam * c / (lam + mu)
    nrm = np.linalg.norm(u)
    if nrm > 0:
        u *= rho / nrm
    d = u - c
    return float(d @ (lam * d)), u


class EllipsoidQuadratic:
    """Prepared extremizer of psi(theta)=c0+lin.theta+theta.Q.theta over an ellipsoid.

    The ellipsoid is {theta: (theta-center).S.(theta-center) <= radius2} with S
    symmetric positive definite.  Whitening and the eigendecomposition are done
    once; extremization for a given radius2 is then a pair of secular solves.
    """

    def __init__(self, c0, lin, quad, center, shape):
        self.c0 = float(c0)
        self.lin = np.asarray(lin, dtype=float)
        self.quad = np.asarray(quad, dtype=float)
        self.center = np.asarray(center, dtype=float)
        try:
            L = sla.cholesky(np.asarray(shape, dtype=float), lower=True)
        except sla.LinAlgError as exc:
            raise NumericalError("ellipsoid shape matrix is not positive definite") from exc
        self._L = L
        Qw = sla.solve_triangular(L, sla.solve_triangular(L, self.quad, lower=True).T, lower=True)
        Qw = (Qw + Qw.T) / 2.0
        self._evals, self._evecs = sla.eigh(Qw)
        grad = self.lin + 2.0 * self.quad @ self.center
        g_w = sla.solve_triangular(L, grad, lower=True)
        self._b = self._evecs.T @ g_w
        self.psi_center = float(
            self.c0 + self.lin @ self.center + self.center @ self.quad @ self.center
        )

    def _to_theta(self, u: np.ndarray) -> np.ndarray:
        return self.center + sla.solve_triangular(self._L.T, self._evecs @ u, lower=False)

    def extremize(self, radius2: float) -> tuple[float, float]:
        """(min, max) of the quadratic over the ellipsoid of squared radius radius2."""
        if radius2 < 0.0:
            raise NumericalError("negative squared radius")
        r = float(np.sqrt(radius2))
        lo_val, _ = min_on_ball_eig(self._b, self._evals, r)
        neg_hi, _ = min_on_ball_eig(-self._b, -self._evals, r)
        lo = self.psi_center + lo_val
        hi = self.psi_center - neg_hi
        return min(lo, hi), max(lo, hi)

    def argext(self, radius2: float) -> tuple[np.ndarray, np.ndarray]:
        """Feasible points attaining the minimum and maximum."""
        r = float(np.sqrt(radius2))
        _, u_lo = min_on_ball_eig(self._b, self._evals, r)
        _, u_hi = min_on_ball_eig(-self._b, -self._evals, r)
        return self._to_theta(u_lo), self._to_theta(u_hi)


class LevelSetDistance:
    """min over {theta: psi(theta) = phi} of (theta-c).S.(theta-c), phi-reusable.

    psi must have symmetric positive-definite curvature Q so its level sets are
    ellipsoid shells: writing psi(theta) = psi_min + (theta-t*).Q.(theta-t*),
    the constraint becomes a sphere in Q^{1/2} coordinates and the objective a
    quadratic with metric H = Q^{-1/2} S Q^{-1/2}.
    """

    def __init__(self, c0, lin, quad, point, metric):
        quad = np.asarray(quad, dtype=float)
        lin = np.asarray(lin, dtype=float)
        try:
            M = sla.cholesky(quad, lower=True)
        except sla.LinAlgError as exc:
            raise NumericalError("level-set distance needs positive-definite curvature") from exc
        t_star = -0.5 * sla.cho_solve((M, True), lin)
        self.psi_min = float(c0 + 0.5 * lin @ t_star)
        H = sla.solve_triangular(M, sla.solve_triangular(M, np.asarray(metric, float), lower=True).T, lower=True)
        H = (H + H.T) / 2.0
        self._evals, self._evecs = sla.eigh(H)
        if self._evals[0] <= 0.0:
            raise NumericalError("level-set distance metric is not positive definite")
        w_c = M.T @ (np.asarray(point, dtype=float) - t_star)
        self._c = self._evecs.T @ w_c

    def __call__(self, phi: float) -> float:
        """Squared distance in the metric from the point to the level set psi=phi."""
        gap = phi - self.psi_min
        if gap < 0.0:
            return np.inf
        val, _ = min_on_sphere_eig(self._c, self._evals, float(np.sqrt(gap)))
        return val
