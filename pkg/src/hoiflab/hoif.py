"""First-order estimate and second/third-order U-statistic bias estimators.

All second-order statistics share the kernel

    K(O_i, O_j) = a_i * z(X_i)' G z(X_j) * y_j,

with a, y residual vectors, z the basis map and G an inverse Gram.  The
estimators are computed through factorized sums, never through the n x n
kernel matrix:

    sum_{i != j} K_ij = S_a' G S_y - sum_i a_i y_i q_i,
    S_a = Z'a,  S_y = Z'y,  q_i = z_i' G z_i,

at cost O(n k) for an identity Gram and O(n k^2) otherwise.

Variance estimates are Hoeffding-decomposition plug-ins.  For order 2,

    var_hat = (4/n) Var(h_i) + 2/(n(n-1)) mean_{i != j} Ksym_ij^2,

with h_i = mean_{j != i} Ksym_ij and Ksym the symmetrized kernel.  For order
3 the plug-in keeps all three projection levels with exact combinatorial
weights,

    var_hat = [3 C(n-3,2) s1 + 3 (n-3) s2 + s3] / C(n,3),

where s1 = Var(h1_i), s2 = Var over pairs of h2_ij, and s3 is the raw second
moment of the symmetrized kernel.  Above ``INCOMPLETE_THRESHOLD`` (or with
se_method="incomplete") the pair/triple levels are estimated from sampled
index tuples with a fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import comb
from typing import Callable, Optional

import numpy as np

from .errors import (
    ConfigError,
    DegenerateAggregateError,
    InsufficientDataError,
    OracleUnavailableError,
    SingularGramError,
)
from .gram import GramOperator, apply_inverse

VARIANTS = ("cond_covariance", "cond_variance")

INCOMPLETE_THRESHOLD = 20_000   # order-2 "auto" switches to sampling above this n
INCOMPLETE_THRESHOLD_3 = 4096   # order-3 "auto" threshold
N_SAMPLED_PAIRS = 200_000
N_SAMPLED_TRIPLES = 100_000
_SAMPLER_SEED = 1234


@dataclass(frozen=True)
class NuisancePair:
    """Nuisance estimates p_hat(x) ~ E[A|X=x] and b_hat(x) ~ E[Y|X=x].

    For the conditional-variance functional Y coincides with A and b_hat is
    forced to p_hat.
    """

    p_hat: Callable[[np.ndarray], np.ndarray]
    b_hat: Optional[Callable[[np.ndarray], np.ndarray]] = None
    variant: str = "cond_covariance"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown functional variant {self.variant!r}")
        if self.variant == "cond_variance":
            object.__setattr__(self, "b_hat", self.p_hat)
        elif self.b_hat is None:
            raise ConfigError("cond_covariance requires an explicit b_hat")


@dataclass
class UStatResult:
    estimate: float
    se: float
    order: int
    kernel_kind: str
    n_used: int
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.isfinite(self.estimate):
            raise InsufficientDataError("U-statistic estimate is not finite")
        if not np.isfinite(self.se) or self.se < 0:
            raise InsufficientDataError("U-statistic se is not finite")
        if self.n_used < self.order:
            raise InsufficientDataError(
                f"n_used={self.n_used} below U-statistic order {self.order}"
            )

    def to_dict(self) -> dict:
        return {
            "estimate": self.estimate,
            "se": self.se,
            "order": self.order,
            "kernel_kind": self.kernel_kind,
            "n_used": self.n_used,
            "diagnostics": self.diagnostics,
        }


def drml_psi1(data, nuis: NuisancePair) -> UStatResult:
    """First-order (doubly robust) estimate: mean of (A - p_hat)(Y - b_hat).

    ``data`` provides arrays A, Y and points X (an estimation split).
    """
    resid_a = np.asarray(data.A, dtype=float) - np.asarray(nuis.p_hat(data.X), dtype=float)
    resid_y = np.asarray(data.Y, dtype=float) - np.asarray(nuis.b_hat(data.X), dtype=float)
    return psi1_from_residuals(resid_a, resid_y)


def psi1_from_residuals(resid_a: np.ndarray, resid_y: np.ndarray) -> UStatResult:
    summands = np.asarray(resid_a, dtype=float) * np.asarray(resid_y, dtype=float)
    n = len(summands)
    if n < 2:
        raise InsufficientDataError("first-order estimate needs n >= 2 for a standard error")
    est = float(np.mean(summands))
    se = float(np.std(summands, ddof=1) / np.sqrt(n))
    return UStatResult(est, se, order=1, kernel_kind="sample_mean", n_used=n)


def _kernel_kind(gram: GramOperator) -> str:
    return "oracle_gram" if gram.kind == "exact" else "empirical_gram"


def _check_inputs(resid_a, resid_y, Z, gram, min_n):
    resid_a = np.asarray(resid_a, dtype=float)
    resid_y = np.asarray(resid_y, dtype=float)
    Z = np.asarray(Z, dtype=float)
    n = len(resid_a)
    if Z.ndim != 2 or Z.shape[0] != n or len(resid_y) != n:
        raise ConfigError(
            f"shape mismatch: resid_a {resid_a.shape}, resid_y {resid_y.shape}, Z {Z.shape}"
        )
    if gram.k != Z.shape[1]:
        raise ConfigError(f"gram is {gram.k}x{gram.k} but Z has {Z.shape[1]} columns")
    if n < min_n:
        raise InsufficientDataError(f"need n >= {min_n}, got {n}")
    return resid_a, resid_y, Z, n


_FULL_SE_FLOP_BUDGET = 2e9


def _resolve_method(se_method, n, threshold, k=0):
    if se_method not in ("auto", "full", "incomplete"):
        raise ConfigError(f"unknown se_method {se_method!r}")
    if se_method == "auto":
        too_big = n > threshold or n * k * k > _FULL_SE_FLOP_BUDGET
        return "incomplete" if too_big else "full"
    return se_method


def _half_whitened(Z, gram):
    """W with W_i . W_j = z_i' G z_j."""
    if gram.is_identity:
        return Z
    import scipy.linalg as sla

    return sla.solve_triangular(gram.chol, Z.T, lower=True).T


def _pair_core(resid_a, resid_y, Z, gram):
    """Shared factorized sums for the order-2 kernel."""
    S_a = Z.T @ resid_a
    S_y = Z.T @ resid_y
    GS_a = apply_inverse(gram, S_a)
    GS_y = apply_inverse(gram, S_y)
    q = gram.row_quadforms(Z)
    alpha = Z @ GS_y  # alpha_i = z_i' G S_y
    beta = Z @ GS_a
    # symmetric under (a, y) swap: the two dot products trade places
    cross = 0.5 * (S_a @ GS_y + S_y @ GS_a)
    diag = float(np.sum(resid_a * resid_y * q))
    return S_a, S_y, GS_a, GS_y, q, alpha, beta, cross, diag


def u_statistic_estimate(resid_a, resid_y, Z, gram: GramOperator) -> float:
    """The order-2 U-statistic value alone, without variance machinery."""
    resid_a, resid_y, Z, n = _check_inputs(resid_a, resid_y, Z, gram, min_n=2)
    S_a = Z.T @ resid_a
    S_y = Z.T @ resid_y
    GS_a = apply_inverse(gram, S_a)
    GS_y = apply_inverse(gram, S_y)
    q = gram.row_quadforms(Z)
    cross = 0.5 * (S_a @ GS_y + S_y @ GS_a)
    diag = float(np.sum(resid_a * resid_y * q))
    return float((cross - diag) / (n * (n - 1)))


def _row_ksym_sums(resid_a, resid_y, q, alpha, beta):
    """R_i = sum_{j != i} Ksym_ij, in closed form."""
    return (resid_a * (alpha - resid_y * q) + resid_y * (beta - resid_a * q)) / 2.0


def _order2_variance(resid_a, resid_y, Z, gram, q, alpha, beta, n, method, rng):
    row = _row_ksym_sums(resid_a, resid_y, q, alpha, beta)
    h = row / (n - 1)
    var1 = float(np.var(h, ddof=1))
    if method == "full":
        M_a = (resid_a[:, None] ** 2 * Z).T @ Z
        M_y = (resid_y[:, None] ** 2 * Z).T @ Z
        M_ay = ((resid_a * resid_y)[:, None] * Z).T @ Z
        GM_a = gram.solve(M_a)
        GM_y = gram.solve(M_y)
        GM_ay = gram.solve(M_ay)
        sum_sq = float(np.sum(GM_a * GM_y.T))       # sum_ij K_ij^2
        sum_cross = float(np.sum(GM_ay * GM_ay.T))  # sum_ij K_ij K_ji
        diag_sq = float(np.sum((resid_a * resid_y * q) ** 2))
        mean_ksym_sq = (0.5 * (sum_sq + sum_cross) - diag_sq) / (n * (n - 1))
    else:
        # exact all-pairs second moment on a uniform row subsample: an
        # unbiased estimate of the full-pair mean at bounded flops
        m = int(min(n, max(2000, _FULL_SE_FLOP_BUDGET // max(Z.shape[1] ** 2, 1))))
        rows = rng.choice(n, size=m, replace=False) if m < n else np.arange(n)
        a_s, y_s, Z_s = resid_a[rows], resid_y[rows], Z[rows]
        q_s = q[rows]
        M_a = (a_s[:, None] ** 2 * Z_s).T @ Z_s
        M_y = (y_s[:, None] ** 2 * Z_s).T @ Z_s
        M_ay = ((a_s * y_s)[:, None] * Z_s).T @ Z_s
        GM_a = gram.solve(M_a)
        GM_y = gram.solve(M_y)
        GM_ay = gram.solve(M_ay)
        sum_sq = float(np.sum(GM_a * GM_y.T))
        sum_cross = float(np.sum(GM_ay * GM_ay.T))
        diag_sq = float(np.sum((a_s * y_s * q_s) ** 2))
        mean_ksym_sq = (0.5 * (sum_sq + sum_cross) - diag_sq) / (m * (m - 1))
    var_hat = (4.0 / n) * var1 + (2.0 / (n * (n - 1))) * mean_ksym_sq
    return float(np.sqrt(max(var_hat, 0.0))), float(mean_ksym_sq)


def if22(
    resid_a,
    resid_y,
    Z,
    gram: GramOperator,
    se_method: str = "auto",
    rng: Optional[np.random.Generator] = None,
    kernel_kind: Optional[str] = None,
) -> UStatResult:
    """Second-order U-statistic 1/(n(n-1)) sum_{i!=j} a_i z_i' G z_j y_j.

    Its expectation over the estimation split (conditional on everything the
    residuals and Gram were built from) is the k-truncated bias of the
    first-order estimate.  ``se_method`` is "full", "incomplete", or "auto".
    """
    resid_a, resid_y, Z, n = _check_inputs(resid_a, resid_y, Z, gram, min_n=2)
    method = _resolve_method(se_method, n, INCOMPLETE_THRESHOLD, Z.shape[1])
    if rng is None:
        rng = np.random.default_rng(_SAMPLER_SEED)

    _, _, _, _, q, alpha, beta, cross, diag = _pair_core(resid_a, resid_y, Z, gram)
    estimate = (cross - diag) / (n * (n - 1))
    se, mean_ksym_sq = _order2_variance(
        resid_a, resid_y, Z, gram, q, alpha, beta, n, method, rng
    )
    return UStatResult(
        float(estimate),
        se,
        order=2,
        kernel_kind=kernel_kind or _kernel_kind(gram),
        n_used=n,
        diagnostics={"se_method": method, "mean_kernel_sq": mean_ksym_sq},
    )


# -- third-order statistic under an estimated Gram ---------------------------


def if33_empirical(
    resid_a,
    resid_y,
    Z,
    emp_gram: GramOperator,
    se_method: str = "auto",
    rng: Optional[np.random.Generator] = None,
) -> UStatResult:
    """Second- plus third-order statistic with a training-sample Gram inverse.

    The added triple sum

        T3 = 1/(n(n-1)(n-2)) sum_{i!=j!=l} a_i z_i' G (C - z_j z_j') G z_l y_l

    (C the Gram the inverse G came from) re-centers the order-2 statistic for
    the error in the plugged-in Gram; it vanishes identically when every
    z_j z_j' equals C.
    """
    resid_a, resid_y, Z, n = _check_inputs(resid_a, resid_y, Z, emp_gram, min_n=3)
    method = _resolve_method(se_method, n, INCOMPLETE_THRESHOLD_3, Z.shape[1])
    if rng is None:
        rng = np.random.default_rng(_SAMPLER_SEED)

    _, _, _, _, q, alpha, beta, cross, diag = _pair_core(resid_a, resid_y, Z, emp_gram)
    u2 = (cross - diag) / (n * (n - 1))

    # T3 by inclusion-exclusion over coincident indices, using G C G = G:
    # T(i,j,l) = a_i y_l (B_il - B_ij B_jl) with B_uv = z_u' G z_v
    S_a = Z.T @ resid_a
    S_y = Z.T @ resid_y
    t_a = emp_gram.solve(S_a)
    t_y = emp_gram.solve(S_y)
    P = Z.T @ Z
    N = emp_gram.solve(emp_gram.solve(P).T)        # N = G P G
    rowsq = np.einsum("ij,ij->i", Z @ N, Z)        # sum_j B_ij^2
    term1 = (n - 2) * (cross - diag)
    full = float(t_a @ P @ t_y)
    c_ij = float(np.sum(resid_a * q * alpha))      # j = i coincidence
    c_jl = float(np.sum(resid_y * q * beta))       # j = l coincidence
    c_il = float(np.sum(resid_a * resid_y * rowsq))
    c_all = float(np.sum(resid_a * resid_y * q * q))
    term2 = full - c_ij - c_jl - c_il + 2.0 * c_all
    t3 = (term1 - term2) / (n * (n - 1) * (n - 2))
    estimate = u2 + t3

    se, details = _order3_variance(
        resid_a, resid_y, Z, emp_gram, q, alpha, beta, rowsq, N, n, method, rng
    )
    diagnostics = {"if22_part": float(u2), "t3_part": float(t3), "se_method": method}
    diagnostics.update(details)
    return UStatResult(
        float(estimate),
        se,
        order=3,
        kernel_kind="empirical_gram",
        n_used=n,
        diagnostics=diagnostics,
    )


def _order3_slot_sums(a, y, dB, Ba, By, B_By, B_Ba, rowsq, bb_ay, sum_ay_offdiag, n):
    """Ordered slot sums S1_i, S2_i, S3_i of the centering kernel T over the
    distinct pairs of remaining indices."""
    s1 = a * (
        (n - 2) * (By - y * dB)
        - (B_By - dB * (By - y * dB) - y * (rowsq - dB**2))
    )
    s3 = y * (
        (n - 2) * (Ba - a * dB)
        - (B_Ba - dB * (Ba - a * dB) - a * (rowsq - dB**2))
    )
    s2 = (
        sum_ay_offdiag
        - (a * (By - y * dB) + y * (Ba - a * dB))
        - ((Ba - a * dB) * (By - y * dB) - (bb_ay - a * y * dB**2))
    )
    return s1, s2, s3


def _order3_variance(a, y, Z, gram, q, alpha, beta, rowsq, N, n, method, rng):
    dB = q
    Ba = Z @ gram.solve(Z.T @ a)
    By = Z @ gram.solve(Z.T @ y)
    B_By = Z @ gram.solve(Z.T @ (By - y * dB))
    B_Ba = Z @ gram.solve(Z.T @ (Ba - a * dB))
    M_ay = ((a * y)[:, None] * Z).T @ Z
    GMG = gram.solve(gram.solve(M_ay).T)
    bb_ay = np.einsum("ij,ij->i", Z @ GMG, Z)      # sum_j B_ij^2 a_j y_j
    sum_ay_offdiag = float(a @ By) - float(np.sum(a * y * dB))

    s1, s2, s3 = _order3_slot_sums(
        a, y, dB, Ba, By, B_By, B_Ba, rowsq, bb_ay, sum_ay_offdiag, n
    )

    row = _row_ksym_sums(a, y, q, alpha, beta)     # R_i = sum_{j!=i} Ksym_ij
    total_unordered = float(np.sum(row)) / 2.0
    # over pairs {j,l} not containing i: each neighbor appears in n-2 pairs
    k_sum = (n - 2) * row + (total_unordered - row)
    h1 = (k_sum / 3.0 + (s1 + s2 + s3) / 6.0) / comb(n - 1, 2)
    sigma1 = float(np.var(h1, ddof=1))

    if method == "full":
        sigma2, sigma3 = _order3_levels_full(a, y, Z, gram, N, n, rng)
    else:
        sigma2, sigma3 = _order3_levels_sampled(
            a, y, Z, gram, N, dB, Ba, By, row, n, rng
        )

    var_hat = (
        3.0 * comb(n - 3, 2) * sigma1 + 3.0 * (n - 3) * sigma2 + sigma3
    ) / comb(n, 3)
    se = float(np.sqrt(max(var_hat, 0.0)))
    return se, {"sigma1": sigma1, "sigma2": sigma2, "sigma3": sigma3}


def _pairwise_h2(a, y, B, BB, n):
    """h2_ij = mean over l not in {i,j} of the symmetrized order-3 kernel.

    Dense n x n path; B and BB are symmetric and only the strict upper
    triangle of the result is meaningful.
    """
    dB = np.diag(B).copy()
    Ba = B @ a
    By = B @ y
    Ksym = 0.5 * (np.outer(a, y) + np.outer(y, a)) * B
    rowK = Ksym.sum(axis=1) - np.diag(Ksym)
    k_part = (Ksym + (rowK[:, None] - Ksym + rowK[None, :] - Ksym) / (n - 2.0)) / 3.0

    # the six slot sums collapse to
    #   (r_i + r_j) + coefB o B + 2 (w_i + w_j) o B^2 - (a_i y_j + a_j y_i) o BB
    # with coefB a sum of six rank-one terms: one small GEMM instead of ~30
    # elementwise passes
    w = a * y
    r = a * By + y * Ba - 2.0 * w * dB
    F = np.column_stack([
        a,
        -By - y * (1.0 - dB),
        a * (n - 2.0 + dB),
        y * (n - 2.0 + dB),
        -Ba - a * (1.0 - dB),
        y,
    ])
    G = np.column_stack([
        -By - y + 2.0 * y * dB,
        a,
        y,
        a,
        y,
        -Ba - a + 2.0 * a * dB,
    ])
    t = F @ G.T
    t *= B
    t += r[:, None] + r[None, :]
    t += (2.0 * (w[:, None] + w[None, :])) * (B * B)
    t -= (np.outer(a, y) + np.outer(y, a)) * BB
    t /= 6.0 * (n - 2.0)
    return k_part + t


def _order3_levels_full(a, y, Z, gram, N, n, rng):
    W = _half_whitened(Z, gram)
    B = W @ W.T
    BB = Z @ N @ Z.T
    h2 = _pairwise_h2(a, y, B, BB, n)
    iu = np.triu_indices(n, k=1)
    sigma2 = float(np.var(h2[iu], ddof=1))
    if comb(n, 3) <= N_SAMPLED_TRIPLES:
        from itertools import combinations

        idx = np.array(list(combinations(range(n), 3)))
        i, j, l = idx[:, 0], idx[:, 1], idx[:, 2]
    else:
        i, j, l = _sample_distinct_triples(n, N_SAMPLED_TRIPLES, rng)
    B3 = {"ij": B[i, j], "il": B[i, l], "jl": B[j, l]}
    vals = _kernel3_from_entries(a, y, i, j, l, B3)
    sigma3 = float(np.mean(vals**2))
    return sigma2, sigma3


def _order3_levels_sampled(a, y, Z, gram, N, dB, Ba, By, row, n, rng):
    W = _half_whitened(Z, gram)
    ZN = Z @ N

    m_pairs = int(min(N_SAMPLED_PAIRS, 20 * n * n))
    i, j = _sample_distinct_pairs(n, m_pairs, rng)
    B_ij = _pair_dots(W, i, j)
    BB_ij = _pair_dots(ZN, i, j, Z)
    ai, aj = a[i], a[j]
    yi, yj = y[i], y[j]
    Bii, Bjj = dB[i], dB[j]
    Byi, Byj = By[i], By[j]
    Bai, Baj = Ba[i], Ba[j]
    Bsq = B_ij * B_ij
    t = ai * (Byi - B_ij * Byj) - ai * (yi * (Bii - Bsq) + yj * (B_ij - B_ij * Bjj))
    t += aj * (Byj - B_ij * Byi) - aj * (yj * (Bjj - Bsq) + yi * (B_ij - B_ij * Bii))
    t += ai * yj * ((n - 2.0) * B_ij - (BB_ij - Bii * B_ij - B_ij * Bjj))
    t += aj * yi * ((n - 2.0) * B_ij - (BB_ij - Bjj * B_ij - B_ij * Bii))
    t += yj * (Baj - Bai * B_ij) - yj * (ai * (B_ij - Bii * B_ij) + aj * (Bjj - Bsq))
    t += yi * (Bai - Baj * B_ij) - yi * (ai * (Bii - Bsq) + aj * (B_ij - Bjj * B_ij))
    t /= 6.0 * (n - 2.0)
    ksym_ij = 0.5 * (ai * yj + aj * yi) * B_ij
    k_part = (ksym_ij + (row[i] - ksym_ij + row[j] - ksym_ij) / (n - 2.0)) / 3.0
    sigma2 = float(np.var(k_part + t, ddof=1))

    m_triples = int(min(N_SAMPLED_TRIPLES, 20 * n * n))
    i, j, l = _sample_distinct_triples(n, m_triples, rng)
    B3 = {
        "ij": _pair_dots(W, i, j),
        "il": _pair_dots(W, i, l),
        "jl": _pair_dots(W, j, l),
    }
    vals = _kernel3_from_entries(a, y, i, j, l, B3)
    sigma3 = float(np.mean(vals**2))
    return sigma2, sigma3


def _pair_dots(U, i, j, V=None, block: int = 16384):
    """Row dots U[i] . V[j] for index arrays, chunked to bound copies."""
    V = U if V is None else V
    out = np.empty(len(i))
    for s in range(0, len(i), block):
        out[s:s + block] = np.einsum(
            "ij,ij->i", U[i[s:s + block]], V[j[s:s + block]]
        )
    return out


def _sample_distinct_pairs(n, m, rng):
    i = rng.integers(0, n, size=m)
    j = rng.integers(0, n - 1, size=m)
    j = np.where(j >= i, j + 1, j)
    return i, j


def _sample_distinct_triples(n, m, rng):
    i, j = _sample_distinct_pairs(n, m, rng)
    l = rng.integers(0, n - 2, size=m)
    lo = np.minimum(i, j)
    hi = np.maximum(i, j)
    l = np.where(l >= lo, l + 1, l)
    l = np.where(l >= hi, l + 1, l)
    return i, j, l


def _kernel3_from_entries(a, y, i, j, l, B3):
    """Symmetrized combined kernel at index triples, from pairwise B entries."""
    ai, aj, al = a[i], a[j], a[l]
    yi, yj, yl = y[i], y[j], y[l]
    Bij, Bil, Bjl = B3["ij"], B3["il"], B3["jl"]
    ksym = (
        0.5 * (ai * yj + aj * yi) * Bij
        + 0.5 * (ai * yl + al * yi) * Bil
        + 0.5 * (aj * yl + al * yj) * Bjl
    ) / 3.0
    t = (
        ai * yl * (Bil - Bij * Bjl)
        + ai * yj * (Bij - Bil * Bjl)
        + aj * yl * (Bjl - Bij * Bil)
        + aj * yi * (Bij - Bjl * Bil)
        + al * yj * (Bjl - Bil * Bij)
        + al * yi * (Bil - Bjl * Bij)
    ) / 6.0
    return ksym + t


# -- aggregation over fitted residual directions ------------------------------


@dataclass
class FittedDirection:
    """Linear-in-basis fit of residuals: f(x) = z(x)' beta."""

    beta: np.ndarray
    basis: Optional[object] = None

    def values(self, Z: np.ndarray) -> np.ndarray:
        return np.asarray(Z, dtype=float) @ self.beta

    def __call__(self, X: np.ndarray) -> np.ndarray:
        if self.basis is None:
            raise ConfigError("fitted direction has no basis attached; use .values(Z)")
        from .basis import eval_basis

        return eval_basis(self.basis, X) @ self.beta


def fit_fhat(resid_a_sel, Z_sel, gram: GramOperator, basis=None) -> FittedDirection:
    """Regression of selection-split residuals on the dictionary.

    beta = G * mean(z(X_i) resid_i); the fitted direction is f(x) = z(x)' beta.
    """
    resid_a_sel = np.asarray(resid_a_sel, dtype=float)
    Z_sel = np.asarray(Z_sel, dtype=float)
    n = len(resid_a_sel)
    if Z_sel.shape[0] != n:
        raise ConfigError("resid/Z length mismatch in fit_fhat")
    beta = apply_inverse(gram, Z_sel.T @ resid_a_sel / n)
    return FittedDirection(beta=beta, basis=basis)


def if22_aggregate(
    resid_a_est,
    F,
    omega_f: GramOperator,
    se_method: str = "auto",
    rng: Optional[np.random.Generator] = None,
) -> UStatResult:
    """Order-2 statistic over fitted directions evaluated on the estimation split.

    ``F`` is the n x m matrix of direction values; ``omega_f`` their exact
    second-moment operator under the known covariate density.  A singular
    ``omega_f`` (all directions degenerate) raises DegenerateAggregateError.
    """
    try:
        omega_f.chol
    except SingularGramError as exc:
        raise DegenerateAggregateError(
            f"aggregate second-moment operator is singular (lambda_min={exc.lambda_min})"
        ) from exc
    resid_a_est = np.asarray(resid_a_est, dtype=float)
    return if22(
        resid_a_est,
        resid_a_est,
        F,
        omega_f,
        se_method=se_method,
        rng=rng,
        kernel_kind="kbw",
    )


def aggregate_gram(
    betas, basis, density="uniform", quad_points: Optional[int] = None
) -> GramOperator:
    """Exact second-moment operator of fitted directions.

    For orthonormal families under the uniform density the integrals collapse
    to coefficient inner products; otherwise tensor quadrature resolves the
    direction products (node count scales with the dictionary frequency).
    """
    from .basis import eval_basis
    from .quadrature import density_values, tensor_grid

    B = np.column_stack([np.asarray(b, dtype=float) for b in betas])
    uniform = density is None or density == "uniform"
    if uniform and basis.is_orthonormal_uniform:
        M = B.T @ B
    else:
        if quad_points is None:
            quad_points = max(200, 2 * basis.k + 64)
        pts, wts = tensor_grid(quad_points, basis.d)
        g = density_values(density, pts)
        Fg = eval_basis(basis, pts) @ B
        M = (Fg * (wts * g)[:, None]).T @ Fg
    return GramOperator((M + M.T) / 2.0, kind="exact", meta={"aggregate": True})


def aggregate_diagnostics(
    resid_a_sel,
    Z_sel,
    gram: GramOperator,
    f_true_sel=None,
    bias_k: Optional[float] = None,
) -> dict:
    """Selection-split decomposition of the aggregated statistic's conditional mean.

    Requires the simulation oracle: ``f_true_sel`` holds the values of the
    population projection of p - p_hat on the dictionary at the selection
    points, and ``bias_k`` the oracle truncated bias.  Returns delta_num,
    delta_denom, and the conditional-mean ratio
    (bias_k^2 + delta_num) / (bias_k + delta_denom).
    """
    if f_true_sel is None or bias_k is None:
        raise OracleUnavailableError(
            "aggregate diagnostics need the simulation oracle (f_true_sel, bias_k)"
        )
    resid_a_sel = np.asarray(resid_a_sel, dtype=float)
    n = len(resid_a_sel)
    s_hat = float(np.mean(resid_a_sel * np.asarray(f_true_sel, dtype=float)))
    delta_num = s_hat**2 - bias_k**2
    u2 = u_statistic_estimate(resid_a_sel, resid_a_sel, Z_sel, gram)
    q = gram.row_quadforms(np.asarray(Z_sel, dtype=float))
    delta_denom = u2 - bias_k + float(np.sum(resid_a_sel**2 * q)) / n**2
    denom = bias_k + delta_denom
    ratio = (bias_k**2 + delta_num) / denom if denom != 0 else np.inf
    return {
        "delta_num": delta_num,
        "delta_denom": delta_denom,
        "conditional_mean_ratio": ratio,
    }
