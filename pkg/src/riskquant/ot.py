"""Entropically regularized optimal transport and the OT quantization route.

``sinkhorn`` is the classical alternating matrix-scaling iteration for fixed
marginals, with a log-domain variant (log-sum-exp updates, same fixed point)
that survives the tiny regularization strengths realistic loss scales need.

``quantize_via_ot`` searches codebooks {0, m1, m2} by differential evolution
on the regularized semi-discrete transport cost against the sample. The
codebook masses are left free: with a free column marginal the optimal plan
row-normalizes the kernel in closed form, and its column sums are exactly
the masses a fixed-marginal Sinkhorn run would reproduce.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .config import SolverConfig
from .de import DEConfig, de_minimize
from .distribution import EmpiricalDistribution
from .errors import InfeasibleConstraint, SupportTooSmall
from .quantize3 import (
    Quantizer3,
    _assemble,
    _require_support,
    de_bounds,
    solve_three_point,
)

logger = logging.getLogger(__name__)

_MARGINAL_SUM_TOL = 1e-9
# exp(-g/eps) underflows to exactly 0.0 beyond g ~ 745*eps; 800 adds margin
_UNDERFLOW_FACTOR = 800.0


@dataclass(frozen=True)
class TransportPlan:
    """Nonnegative coupling with its scaling vectors and convergence state."""

    plan: np.ndarray
    u: np.ndarray
    v: np.ndarray
    epsilon: float
    marginal_violation: float
    iterations: int
    cost: float
    converged: bool

    def to_csv(self, target) -> None:
        """Dump the coupling matrix for inspection, one row per line."""
        payload = "\n".join(",".join(repr(float(x)) for x in row) for row in self.plan) + "\n"
        if hasattr(target, "write"):
            target.write(payload)
        else:
            with open(target, "w", encoding="utf-8") as fh:
                fh.write(payload)


def _validate_marginals(p: np.ndarray, q: np.ndarray) -> None:
    for name, vec in (("p", p), ("q", q)):
        if np.any(vec < 0.0):
            raise ValueError(f"{name} must be nonnegative")
        if abs(vec.sum() - 1.0) > _MARGINAL_SUM_TOL:
            raise ValueError(f"{name} must sum to 1 within {_MARGINAL_SUM_TOL} (got {vec.sum()!r})")


def _violation(plan: np.ndarray, p: np.ndarray, q: np.ndarray) -> float:
    return float(np.abs(plan.sum(axis=1) - p).sum() + np.abs(plan.sum(axis=0) - q).sum())


def regularized_cost(plan: np.ndarray, cost: np.ndarray, epsilon: float) -> float:
    """<C, plan> + eps * sum(plan * (log(plan) - 1)), with 0 log 0 = 0."""
    linear = float((cost * plan).sum())
    pos = plan[plan > 0.0]
    entropy = float((pos * (np.log(pos) - 1.0)).sum())
    return linear + epsilon * entropy


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    out = m.squeeze(axis) + np.log(np.exp(a - m).sum(axis=axis))
    return out


def sinkhorn(
    p: np.ndarray,
    q: np.ndarray,
    cost: np.ndarray,
    epsilon: float,
    tau: float = 1e-9,
    max_iter: int = 10_000,
    log_domain: bool = True,
    warm_start: tuple[np.ndarray, np.ndarray] | None = None,
) -> TransportPlan:
    """Alternating scaling until the L1 marginal violation drops below tau.

    ``warm_start`` carries (u, v) from a previous run, which is how the
    annealed schedule hands scalings from one regularization stage to the
    next. Non-convergence is reported through ``converged=False`` together
    with the final violation, never by raising.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    cost = np.asarray(cost, dtype=float)
    if cost.shape != (p.size, q.size):
        raise ValueError("cost matrix shape must match the marginals")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix must be finite")
    if epsilon <= 0.0:
        raise ValueError("epsilon must be positive")
    _validate_marginals(p, q)

    if log_domain:
        log_k = -cost / epsilon
        with np.errstate(divide="ignore"):
            log_p = np.log(p)
            log_q = np.log(q)
        if warm_start is None:
            alpha = np.zeros(p.size)
            beta = np.zeros(q.size)
        else:
            with np.errstate(divide="ignore"):
                alpha = np.where(warm_start[0] > 0, np.log(warm_start[0]), -np.inf)
                beta = np.where(warm_start[1] > 0, np.log(warm_start[1]), -np.inf)
        plan = np.exp(alpha[:, None] + log_k + beta[None, :])
        violation = _violation(plan, p, q)
        it = 0
        while violation > tau and it < max_iter:
            alpha = log_p - _logsumexp(log_k + beta[None, :], axis=1)
            beta = log_q - _logsumexp(log_k + alpha[:, None], axis=0)
            plan = np.exp(alpha[:, None] + log_k + beta[None, :])
            violation = _violation(plan, p, q)
            it += 1
        u = np.exp(alpha)
        v = np.exp(beta)
    else:
        kernel = np.exp(-cost / epsilon)
        u = np.ones(p.size) if warm_start is None else warm_start[0].copy()
        v = np.ones(q.size) if warm_start is None else warm_start[1].copy()
        plan = u[:, None] * kernel * v[None, :]
        violation = _violation(plan, p, q)
        it = 0
        while violation > tau and it < max_iter:
            u = p / (kernel @ v)
            v = q / (kernel.T @ u)
            plan = u[:, None] * kernel * v[None, :]
            violation = _violation(plan, p, q)
            it += 1

    return TransportPlan(
        plan=plan,
        u=u,
        v=v,
        epsilon=epsilon,
        marginal_violation=violation,
        iterations=it,
        cost=regularized_cost(plan, cost, epsilon),
        converged=violation <= tau,
    )


def geometric_schedule(eps_start: float, eps_min: float, stages: int) -> np.ndarray:
    if stages < 1:
        raise ValueError("need at least one annealing stage")
    if stages == 1:
        return np.array([eps_min])
    return np.geomspace(eps_start, eps_min, stages)


def sinkhorn_annealed(
    p: np.ndarray,
    q: np.ndarray,
    cost: np.ndarray,
    eps_schedule: np.ndarray,
    tau: float = 1e-9,
    max_iter: int = 10_000,
    log_domain: bool = True,
) -> TransportPlan:
    """Run Sinkhorn down a decreasing epsilon ladder, warm-starting scalings."""
    warm = None
    result = None
    for eps in eps_schedule:
        result = sinkhorn(p, q, cost, float(eps), tau, max_iter, log_domain, warm_start=warm)
        warm = (result.u, result.v)
    return result


# -- semi-discrete route ------------------------------------------------------


def _codebook_costs(values: np.ndarray, m1: float, m2: float) -> np.ndarray:
    return np.column_stack([values**2, (values - m1) ** 2, (values - m2) ** 2])


def semidiscrete_plan(
    work: EmpiricalDistribution, m1: float, m2: float, epsilon: float
) -> tuple[TransportPlan, np.ndarray]:
    """Free-marginal entropic plan onto {0, m1, m2} and its column masses.

    With the codebook masses unconstrained, the minimizing coupling is the
    row-softmin normalization of the kernel; the masses are its column sums
    and the plan is simultaneously the fixed point of the two-marginal
    scaling iteration for those masses.
    """
    cost = _codebook_costs(work.values, m1, m2)
    log_k = -cost / epsilon
    log_z = _logsumexp(log_k, axis=1)
    plan = work.weights[:, None] * np.exp(log_k - log_z[:, None])
    q = plan.sum(axis=0)
    u = work.weights / np.exp(log_z)
    return (
        TransportPlan(
            plan=plan,
            u=u,
            v=np.ones(3),
            epsilon=epsilon,
            marginal_violation=_violation(plan, work.weights, q),
            iterations=0,
            cost=regularized_cost(plan, cost, epsilon),
            converged=True,
        ),
        q,
    )


def _entropy_offset(work: EmpiricalDistribution, epsilon: float) -> float:
    w = work.weights
    return epsilon * float((w * np.log(w)).sum()) - epsilon


def semidiscrete_cost(
    work: EmpiricalDistribution,
    m1: float,
    m2: float,
    epsilon: float,
    plogp: float | None = None,
) -> float:
    """Regularized free-marginal transport cost onto {0, m1, m2}.

    Equals E_p[softmin_eps of the three squared distances] plus an
    (m1, m2)-independent entropy offset. The softmin is evaluated as the
    exact cell distortion minus a correction that is nonzero only for atoms
    within the exp-underflow width of a cell boundary, so the evaluation
    stays O(log n) plus the boundary windows.
    """
    values = work.values
    weights = work.weights
    if plogp is None:
        plogp = float((weights * np.log(weights)).sum())
    offset = epsilon * plogp - epsilon
    lo, hi = (m1, m2) if m1 <= m2 else (m2, m1)

    reach = _UNDERFLOW_FACTOR * epsilon
    degenerate = lo <= 0.0 or lo * hi <= reach or hi * (hi - lo) <= reach
    if degenerate:
        cost = _codebook_costs(values, m1, m2)
        softmin = -epsilon * _logsumexp(-cost / epsilon, axis=1)
        return float(np.dot(weights, softmin)) + offset

    from .quantize2 import nearest_center_distortion

    base = nearest_center_distortion(work, np.array([0.0, lo, hi]))
    a1 = lo / 2.0
    a2 = (lo + hi) / 2.0
    r1 = reach / (2.0 * lo)
    r2 = reach / (2.0 * (hi - lo))
    i1 = int(np.searchsorted(values, a1 - r1, side="left"))
    j1 = int(np.searchsorted(values, a1 + r1, side="right"))
    i2 = int(np.searchsorted(values, a2 - r2, side="left"))
    j2 = int(np.searchsorted(values, a2 + r2, side="right"))
    if j1 >= i2:  # windows overlap: one span
        spans = [(i1, j2)]
    else:
        spans = [(i1, j1), (i2, j2)]
    correction = 0.0
    for i, j in spans:
        if i >= j:
            continue
        x = values[i:j]
        c = _codebook_costs(x, lo, hi)
        g = c - c.min(axis=1, keepdims=True)
        correction += float(np.dot(weights[i:j], np.log(np.exp(-g / epsilon).sum(axis=1))))
    return base - epsilon * correction + offset


def annealed_costs(
    work: EmpiricalDistribution, m1: float, m2: float, schedule: np.ndarray
) -> list[tuple[float, float, float]]:
    """(epsilon, linear cost, regularized cost) at each annealing stage."""
    out = []
    for eps in schedule:
        plan, _ = semidiscrete_plan(work, m1, m2, float(eps))
        cost = _codebook_costs(work.values, m1, m2)
        out.append((float(eps), float((cost * plan.plan).sum()), plan.cost))
    return out


def quantize_via_ot(
    dist: EmpiricalDistribution,
    var_floor: float | None = None,
    cfg: SolverConfig | None = None,
) -> Quantizer3:
    """Quantize through the transport objective: outer DE over (m1, m2).

    The inner objective is the regularized semi-discrete cost at the end of
    a geometric epsilon ladder from ``ot_eps_start_frac * Var(X)`` down to
    ``ot_eps_min_frac * Var(X)``; the free-marginal plan carries no state
    between stages, so the search evaluates the final stage directly and the
    full ladder is replayed once at the optimum for the monotonicity
    diagnostic. Reported masses come from the Voronoi cells at the final
    (m1, m2) for cross-method comparability.
    """
    cfg = cfg or SolverConfig()
    work = _require_support(dist)
    variance = work.variance()
    if variance <= 0.0:
        raise SupportTooSmall("transport quantization needs a dispersed sample")
    eps_min = cfg.ot_eps_min_frac * variance
    schedule = geometric_schedule(cfg.ot_eps_start_frac * variance, eps_min, cfg.ot_anneal_stages)
    plogp = float((work.weights * np.log(work.weights)).sum())

    if var_floor is not None:
        if not var_floor < work.max_value:
            raise InfeasibleConstraint(
                f"var floor {var_floor!r} must lie below the worst case {work.max_value!r}"
            )
        unconstrained = quantize_via_ot(dist, None, cfg)
        if unconstrained.m2 >= var_floor:
            from dataclasses import replace

            return replace(unconstrained, constrained=True, var_floor=var_floor)

    kappa = 1e6 * work.second_moment()
    delta = 1e-9 * work.max_value

    def objective(x: np.ndarray) -> float:
        m1, m2 = float(x[0]), float(x[1])
        penalty = kappa * max(0.0, m1 - m2 + delta) ** 2
        return semidiscrete_cost(work, m1, m2, eps_min, plogp) + penalty

    result = de_minimize(
        objective,
        DEConfig(
            bounds=de_bounds(work, var_floor),
            population_size=cfg.population_size,
            mutation_factor=cfg.mutation_factor,
            crossover_rate=cfg.crossover_rate,
            max_generations=cfg.max_generations,
            rel_tol=cfg.de_rel_tol,
            seed=cfg.seed,
        ),
    )
    m1, m2 = sorted(map(float, result.x_best))
    if m2 <= m1:
        m2 = m1 * (1.0 + 1e-9) + 1e-300

    stage_costs = annealed_costs(work, m1, m2, schedule)
    linear = [c for _, c, _ in stage_costs]
    if any(b > a + 1e-12 * max(abs(a), 1.0) for a, b in zip(linear, linear[1:])):
        logger.warning("linear transport cost not monotone along the epsilon ladder: %s", stage_costs)

    return _assemble(
        work,
        m1,
        m2,
        "ot",
        result.generations_used,
        result.converged,
        constrained=var_floor is not None,
        var_floor=var_floor,
    )


def final_plan(
    dist: EmpiricalDistribution, quantizer: Quantizer3, cfg: SolverConfig | None = None
) -> TransportPlan:
    """Recompute the converged plan at a quantizer's codebook for inspection."""
    cfg = cfg or SolverConfig()
    work = _require_support(dist)
    eps_min = cfg.ot_eps_min_frac * work.variance()
    plan, _ = semidiscrete_plan(work, quantizer.m1, quantizer.m2, eps_min)
    return plan
