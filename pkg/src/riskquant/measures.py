"""Classical scalar risk measures on empirical loss distributions.

The empirical VaR follows the k-th worst convention with
k = max(1, floor((1-alpha)*S)) over the S unmerged observations, i.e. the
5th worst of 500 at alpha=0.99. ES averages all losses at or above VaR.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .distribution import EmpiricalDistribution

_COUNT_TOL = 1e-9


def _check_alpha(alpha: float) -> None:
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha!r}")


def value_at_risk(dist: EmpiricalDistribution, alpha: float) -> float:
    """The k-th worst loss, k = max(1, floor((1-alpha)*S))."""
    _check_alpha(alpha)
    s = dist.sample_size
    k = max(1, math.floor((1.0 - alpha) * s))
    # P(X >= v_i) * S, compared against k with a tolerance for float ties
    tail_counts = s * (1.0 - dist.cum_weights[:-1])
    idx = np.nonzero(tail_counts >= k - _COUNT_TOL)[0]
    return float(dist.values[idx[-1]])


def expected_shortfall(dist: EmpiricalDistribution, alpha: float) -> float:
    """Mass-weighted mean of losses >= VaR(alpha), ties at VaR fully included."""
    var = value_at_risk(dist, alpha)
    i = int(np.searchsorted(dist.values, var, side="left"))
    w = dist.weights[i:]
    return float(np.dot(w, dist.values[i:]) / w.sum())


def worst_case(dist: EmpiricalDistribution) -> float:
    """Largest observed loss (the essential supremum of the sample)."""
    return dist.max_value


def scale_horizon(var_one_day: float, h: int) -> float:
    """Square-root-of-time scaling: VaR(alpha, h) = VaR(alpha, 1) * sqrt(h)."""
    if not float(h).is_integer() or h < 1:
        raise ValueError(f"horizon must be an integer >= 1, got {h!r}")
    return var_one_day * math.sqrt(h)


@dataclass(frozen=True)
class RiskMeasureReport:
    """Reportable bundle of VaR, ES and worst case at their alphas."""

    var: float
    es: float
    worst_case: float
    alpha: float
    es_alpha: float
    horizon_days: int
    sample_size: int
    var_horizon: float

    def __post_init__(self) -> None:
        _check_alpha(self.alpha)
        _check_alpha(self.es_alpha)
        if self.horizon_days < 1:
            raise ValueError("horizon_days must be >= 1")
        if self.es_alpha == self.alpha and not (
            self.var <= self.es + 1e-12 and self.es <= self.worst_case + 1e-12
        ):
            raise ValueError("expected var <= es <= worst_case at a common alpha")

    def to_json_dict(self) -> dict:
        return {
            "var": self.var,
            "es": self.es,
            "worst_case": self.worst_case,
            "alpha": self.alpha,
            "es_alpha": self.es_alpha,
            "horizon_days": self.horizon_days,
            "sample_size": self.sample_size,
            "var_horizon": self.var_horizon,
        }


def compute_report(
    dist: EmpiricalDistribution,
    alpha: float,
    es_alpha: float | None = None,
    horizon_days: int = 1,
) -> RiskMeasureReport:
    """VaR/ES/worst-case report; ES level defaults to the VaR level."""
    es_alpha = alpha if es_alpha is None else es_alpha
    var = value_at_risk(dist, alpha)
    return RiskMeasureReport(
        var=var,
        es=expected_shortfall(dist, es_alpha),
        worst_case=worst_case(dist),
        alpha=alpha,
        es_alpha=es_alpha,
        horizon_days=int(horizon_days),
        sample_size=dist.sample_size,
        var_horizon=scale_horizon(var, int(horizon_days)),
    )
