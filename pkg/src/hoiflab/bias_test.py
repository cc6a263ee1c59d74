"""Assembly of U-statistics into surrogate-null bias tests.

One assembly serves all three tests: plug in the order-2 statistic with an
oracle Gram, the order-3 statistic with a training-sample Gram, or the
aggregated statistic over fitted directions.  The surrogate null states that
the truncated bias of the first-order estimate is at most delta first-order
standard errors.
"""

from __future__ import annotations

from dataclasses import dataclass

from scipy.special import ndtri

from .errors import ConfigError, DegenerateTestError
from .hoif import UStatResult


def z_upper(alpha_half: float) -> float:
    """Standard normal upper quantile; Cephes ndtri is accurate beyond 1e-9."""
    return float(-ndtri(alpha_half))


@dataclass(frozen=True)
class TestOutcome:
    statistic: float
    threshold: float
    reject: bool
    alpha: float
    delta: float
    components: dict

    def to_dict(self) -> dict:
        return {
            "statistic": self.statistic,
            "threshold": self.threshold,
            "reject": self.reject,
            "alpha": self.alpha,
            "delta": self.delta,
            "components": self.components,
        }


def surrogate_bias_test(
    if_result: UStatResult, psi1: UStatResult, alpha: float, delta: float
) -> TestOutcome:
    """Reject when |if_estimate| / se(psi1) - z_{alpha/2} se(if) / se(psi1) > delta."""
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must be in (0,1), got {alpha}")
    if delta < 0.0:
        raise ConfigError(f"delta must be >= 0, got {delta}")
    if psi1.order != 1:
        raise ConfigError("second argument must be the first-order result")
    if psi1.se == 0.0:
        raise DegenerateTestError("first-order standard error is zero")
    z = z_upper(alpha / 2.0)
    statistic = abs(if_result.estimate) / psi1.se - z * if_result.se / psi1.se
    return TestOutcome(
        statistic=float(statistic),
        threshold=float(delta),
        reject=bool(statistic > delta),
        alpha=alpha,
        delta=delta,
        components={
            "if_estimate": if_result.estimate,
            "if_se": if_result.se,
            "psi1_se": psi1.se,
            "z_alpha_half": z,
            "kernel_kind": if_result.kernel_kind,
        },
    )
