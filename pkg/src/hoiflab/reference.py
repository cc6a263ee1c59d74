"""Naive loop implementations of the U-statistics, for validation only.

These enumerate index tuples in Python with an explicitly inverted Gram, so
they are independent of the factorized paths in :mod:`hoiflab.hoif`.  A
budget guard refuses problem sizes beyond NAIVE_PAIR_BUDGET (n^2 * k) for
pair statistics and NAIVE_TRIPLE_BUDGET (n^3 * k) for triple statistics
unless ``force=True``.
"""

from __future__ import annotations

from itertools import permutations
from math import comb

import numpy as np

from .errors import BudgetError

NAIVE_PAIR_BUDGET = 2e8
NAIVE_TRIPLE_BUDGET = 2e9


def _guard(cost: float, budget: float, force: bool, what: str):
    if cost > budget and not force:
        raise BudgetError(
            f"naive {what} would cost ~{cost:.2e} kernel flops, above the "
            f"documented limit {budget:.0e}; pass force=True to override"
        )


def naive_if22(resid_a, resid_y, Z, gram_matrix, force: bool = False) -> float:
    """Double-loop 1/(n(n-1)) sum_{i != j} a_i z_i' Omega^{-1} z_j y_j."""
    a = np.asarray(resid_a, dtype=float)
    y = np.asarray(resid_y, dtype=float)
    Z = np.asarray(Z, dtype=float)
    n, k = Z.shape
    _guard(n * n * k, NAIVE_PAIR_BUDGET, force, "if22")
    G = np.linalg.inv(np.asarray(gram_matrix, dtype=float))
    GZt = G @ Z.T
    total = 0.0
    for i in range(n):
        for j in range(n):
            if i != j:
                total += a[i] * float(Z[i] @ GZt[:, j]) * y[j]
    return total / (n * (n - 1))


def naive_if33(resid_a, resid_y, Z, emp_gram_matrix, force: bool = False) -> float:
    """Triple-loop order-3 statistic with the Gram-centering kernel.

    Enumerates every distinct (i, j, l); the kernel's middle matrix depends
    only on j and is hoisted out of the inner loops.
    """
    a = np.asarray(resid_a, dtype=float)
    y = np.asarray(resid_y, dtype=float)
    Z = np.asarray(Z, dtype=float)
    n, k = Z.shape
    _guard(n**3 * k, NAIVE_TRIPLE_BUDGET, force, "if33")
    C = np.asarray(emp_gram_matrix, dtype=float)
    G = np.linalg.inv(C)
    u2 = naive_if22(a, y, Z, C, force=force)
    total = 0.0
    for j in range(n):
        M = G @ (C - np.outer(Z[j], Z[j])) @ G
        W = Z @ M
        for i in range(n):
            if i == j:
                continue
            for l in range(n):
                if l != i and l != j:
                    total += a[i] * float(W[i] @ Z[l]) * y[l]
    return u2 + total / (n * (n - 1) * (n - 2))


def naive_if22_aggregate(resid_a, F, omega_f_matrix, force: bool = False) -> float:
    """Double loop over fitted-direction values."""
    return naive_if22(resid_a, resid_a, F, omega_f_matrix, force=force)


def naive_order2_variance(resid_a, resid_y, Z, gram_matrix, force: bool = False) -> float:
    """Brute-force order-2 Hoeffding plug-in variance (same definition as hoif)."""
    a = np.asarray(resid_a, dtype=float)
    y = np.asarray(resid_y, dtype=float)
    Z = np.asarray(Z, dtype=float)
    n, k = Z.shape
    _guard(n * n * k, NAIVE_PAIR_BUDGET, force, "order-2 variance")
    G = np.linalg.inv(np.asarray(gram_matrix, dtype=float))
    K = np.array([[a[i] * float(Z[i] @ G @ Z[j]) * y[j] for j in range(n)] for i in range(n)])
    Ksym = (K + K.T) / 2.0
    h = np.array([(Ksym[i].sum() - Ksym[i, i]) / (n - 1) for i in range(n)])
    mean_sq = np.mean([Ksym[i, j] ** 2 for i in range(n) for j in range(n) if i != j])
    return (4.0 / n) * float(np.var(h, ddof=1)) + (2.0 / (n * (n - 1))) * float(mean_sq)


def naive_order3_projections(resid_a, resid_y, Z, emp_gram_matrix, force: bool = False):
    """Brute-force Hoeffding levels of the combined order-3 kernel.

    Returns (h1, h2_pairs, kernel_values) with h1 the per-observation
    conditional means, h2_pairs the strict-upper-triangle pair means, and
    kernel_values the symmetrized kernel over all unordered triples.
    """
    a = np.asarray(resid_a, dtype=float)
    y = np.asarray(resid_y, dtype=float)
    Z = np.asarray(Z, dtype=float)
    n, k = Z.shape
    _guard(n**3 * k, NAIVE_TRIPLE_BUDGET, force, "order-3 projections")
    C = np.asarray(emp_gram_matrix, dtype=float)
    G = np.linalg.inv(C)
    B = Z @ G @ Z.T

    def kernel(i, j, l):
        ksym = (
            0.5 * (a[i] * y[j] + a[j] * y[i]) * B[i, j]
            + 0.5 * (a[i] * y[l] + a[l] * y[i]) * B[i, l]
            + 0.5 * (a[j] * y[l] + a[l] * y[j]) * B[j, l]
        ) / 3.0
        t = 0.0
        for p, q_, r in permutations((i, j, l)):
            t += a[p] * y[r] * (B[p, r] - B[p, q_] * B[q_, r])
        return ksym + t / 6.0

    h1 = np.zeros(n)
    for i in range(n):
        vals = [
            kernel(i, j, l)
            for j in range(n)
            for l in range(j + 1, n)
            if j != i and l != i
        ]
        h1[i] = np.mean(vals)
    h2 = []
    for i in range(n):
        for j in range(i + 1, n):
            vals = [kernel(i, j, l) for l in range(n) if l not in (i, j)]
            h2.append(np.mean(vals))
    kernel_vals = np.array(
        [
            kernel(i, j, l)
            for i in range(n)
            for j in range(i + 1, n)
            for l in range(j + 1, n)
        ]
    )
    return h1, np.array(h2), kernel_vals


def naive_order3_variance(resid_a, resid_y, Z, emp_gram_matrix, force: bool = False) -> float:
    """Exact-enumeration order-3 plug-in variance (sigma3 from all triples)."""
    n = len(resid_a)
    h1, h2, kv = naive_order3_projections(resid_a, resid_y, Z, emp_gram_matrix, force=force)
    sigma1 = float(np.var(h1, ddof=1))
    sigma2 = float(np.var(h2, ddof=1))
    sigma3 = float(np.mean(kv**2))
    return (3.0 * comb(n - 3, 2) * sigma1 + 3.0 * (n - 3) * sigma2 + sigma3) / comb(n, 3)
