"""Three-point constrained quantizer: codebook {0, m1, m2} with 0 < m1 < m2.

The Voronoi cells on the loss half-line are split at a1 = m1/2 and
a2 = (m1+m2)/2; atoms on a boundary belong to the lower cell. An optimal
pair solves the coupled conditional-mean equations

    m1 = E[X | a1 < X <= a2],      m2 = E[X | X > a2],

iterated here in damped Gauss-Seidel fashion. A VaR-floored variant pins
m2 >= floor through a differential-evolution search, and a directional
B-derivative check certifies criticality of reported optima despite the
piecewise-smooth objective.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .config import SolverConfig
from .de import DEConfig, de_minimize
from .distribution import EmpiricalDistribution
from .errors import EmptyConditioningEvent, InfeasibleConstraint, SupportTooSmall
from .quantize2 import nearest_center_distortion

_MAX_CELL_REPAIRS = 50
_CELL_SHRINK = 0.9
_OSCILLATION_WINDOW = 3
_FALLBACK_DAMPING = 0.5


def distortion3(dist: EmpiricalDistribution, m1: float, m2: float) -> float:
    """E[X^2 ^ (X-m1)^2 ^ (X-m2)^2] over the atoms, for 0 <= m1 < m2."""
    if not 0.0 <= m1 < m2:
        raise ValueError(f"need 0 <= m1 < m2, got ({m1!r}, {m2!r})")
    return nearest_center_distortion(dist, np.array([0.0, m1, m2]))


def voronoi_probabilities(dist: EmpiricalDistribution, m1: float, m2: float) -> tuple[float, float, float]:
    """Masses of the three cells split at m1/2 and (m1+m2)/2 (lower-closed)."""
    if not 0.0 < m1 < m2:
        raise ValueError(f"need 0 < m1 < m2, got ({m1!r}, {m2!r})")
    a1 = m1 / 2.0
    a2 = (m1 + m2) / 2.0
    p0 = dist.cdf(a1)
    p1 = dist.cdf(a2) - p0
    p2 = 1.0 - p0 - p1
    return p0, p1, max(p2, 0.0)


@dataclass(frozen=True)
class Quantizer3:
    """Three-point summary with thresholds, cell masses and distortion."""

    m1: float
    m2: float
    p0: float
    p1: float
    p2: float
    a1: float
    a2: float
    distortion: float
    method: str
    constrained: bool
    residuals: tuple[float, float]
    iterations: int
    converged: bool
    var_floor: float | None = None
    starts: tuple | None = None  # per-start (m1, m2, distortion, converged) diagnostics

    def to_json_dict(self) -> dict:
        out = {
            "m1": self.m1,
            "m2": self.m2,
            "p0": self.p0,
            "p1": self.p1,
            "p2": self.p2,
            "distortion": self.distortion,
            "method": self.method,
            "constrained": self.constrained,
        }
        if self.constrained:
            out["var_floor"] = self.var_floor
        return out


@dataclass(frozen=True)
class CriticalityReport:
    """Directional-derivative audit of a candidate (m1, m2)."""

    directions_tested: int
    min_directional_derivative: float
    excluded_point_checks: tuple
    is_critical: bool


def _positive_part(dist: EmpiricalDistribution) -> EmpiricalDistribution:
    mask = dist.values > 0.0
    w = dist.weights[mask]
    return EmpiricalDistribution(dist.values[mask], w / w.sum(), dist.sample_size)


def _fixed_point_residuals(work: EmpiricalDistribution, m1: float, m2: float) -> tuple[float, float]:
    a1, a2 = m1 / 2.0, (m1 + m2) / 2.0
    try:
        r1 = abs(m1 - work.conditional_mean(a1, a2))
    except EmptyConditioningEvent:
        r1 = np.inf
    try:
        r2 = abs(m2 - work.conditional_mean(a2, np.inf))
    except EmptyConditioningEvent:
        r2 = np.inf
    return r1, r2


def _iterate_pair(
    work: EmpiricalDistribution,
    start: tuple[float, float],
    tol_abs: float,
    cfg: SolverConfig,
) -> tuple[float, float, int, tuple[float, float], bool, bool]:
    """Damped Gauss-Seidel iteration of the two conditional-mean equations.

    Returns (m1, m2, iterations, residuals, converged, needs_de_failover).
    """
    m1, m2 = start
    lam = cfg.damping
    repairs = 0
    signs: list[float] = []
    residuals = (np.inf, np.inf)
    for it in range(1, cfg.max_iter + 1):
        a1 = m1 / 2.0
        a2 = (m1 + m2) / 2.0
        try:
            t1 = work.conditional_mean(a1, a2)
        except EmptyConditioningEvent:
            repairs += 1
            if repairs > _MAX_CELL_REPAIRS:
                return m1, m2, it, residuals, False, True
            m2 = m1 + _CELL_SHRINK * (m2 - m1)
            continue
        r1_signed = m1 - t1
        m1 = (1.0 - lam) * m1 + lam * t1

        a2 = (m1 + m2) / 2.0
        try:
            t2 = work.conditional_mean(a2, np.inf)
        except EmptyConditioningEvent:
            repairs += 1
            if repairs > _MAX_CELL_REPAIRS:
                return m1, m2, it, residuals, False, True
            m2 = m1 + _CELL_SHRINK * (m2 - m1)
            continue
        m2 = (1.0 - lam) * m2 + lam * t2

        residuals = _fixed_point_residuals(work, m1, m2)
        if max(residuals) < tol_abs:
            return m1, m2, it, residuals, True, False
        signs.append(np.sign(r1_signed))
        if len(signs) >= _OSCILLATION_WINDOW:
            tail = signs[-_OSCILLATION_WINDOW:]
            if all(tail[i] != 0 and tail[i] == -tail[i + 1] for i in range(len(tail) - 1)):
                lam = _FALLBACK_DAMPING
    return m1, m2, cfg.max_iter, residuals, False, False


def _assemble(
    work: EmpiricalDistribution,
    m1: float,
    m2: float,
    method: str,
    iterations: int,
    converged: bool,
    constrained: bool = False,
    var_floor: float | None = None,
    starts: tuple | None = None,
) -> Quantizer3:
    p0, p1, p2 = voronoi_probabilities(work, m1, m2)
    return Quantizer3(
        m1=m1,
        m2=m2,
        p0=p0,
        p1=p1,
        p2=p2,
        a1=m1 / 2.0,
        a2=(m1 + m2) / 2.0,
        distortion=distortion3(work, m1, m2),
        method=method,
        constrained=constrained,
        residuals=_fixed_point_residuals(work, m1, m2),
        iterations=iterations,
        converged=converged,
        var_floor=var_floor,
        starts=starts,
    )


def _require_support(dist: EmpiricalDistribution) -> EmpiricalDistribution:
    work = dist.clamp_profits()
    if work.n_atoms < 3:
        raise SupportTooSmall("three-point quantizer needs at least 3 distinct support points")
    return work


def _start_points(work: EmpiricalDistribution, count: int) -> list[tuple[float, float]]:
    pos = _positive_part(work)
    mean = work.mean()
    raw = [
        (pos.quantile(0.5), pos.quantile(0.9)),
        (mean / 2.0, 2.0 * mean),
        (pos.quantile(0.25), pos.quantile(0.99)),
    ]
    out = []
    for m1, m2 in raw[: max(count, 1)]:
        if not m1 > 0.0:
            m1 = work.max_value * 1e-6
        if not m2 > m1:
            m2 = 2.0 * m1
        out.append((m1, m2))
    return out


def solve_three_point(dist: EmpiricalDistribution, cfg: SolverConfig | None = None) -> Quantizer3:
    """Fixed-point solution of the coupled conditional-mean equations.

    Runs ``cfg.multistart`` initializations (optionally in parallel, capped
    by RISKQUANT_THREADS) and keeps the lowest-distortion fixed point, ties
    broken by the smaller m1. A start whose middle cell cannot be repaired
    fails over to the DE route.
    """
    cfg = cfg or SolverConfig()
    work = _require_support(dist)
    tol_abs = cfg.tol * work.mean()
    starts = _start_points(work, cfg.multistart)

    def run(start: tuple[float, float]) -> Quantizer3:
        m1, m2, iters, _, ok, failover = _iterate_pair(work, start, tol_abs, cfg)
        if failover:
            return solve_three_point_de(dist, cfg)
        return _assemble(work, m1, m2, "fixed-point", iters, ok)

    threads = cfg.resolved_threads()
    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            candidates = list(pool.map(run, starts))
    else:
        candidates = [run(s) for s in starts]

    converged = [c for c in candidates if c.converged]
    pool_ = converged if converged else candidates
    best = min(pool_, key=lambda c: (c.distortion, c.m1))
    diagnostics = tuple((c.m1, c.m2, c.distortion, c.converged) for c in candidates)
    return replace(best, starts=diagnostics)


def _raw_min3_distortion(work: EmpiricalDistribution, x1: float, x2: float) -> float:
    # symmetric in (x1, x2); valid for any codebook pair by sorting
    lo, hi = (x1, x2) if x1 <= x2 else (x2, x1)
    return nearest_center_distortion(work, np.array([0.0, lo, hi]))


def penalized_distortion_objective(work: EmpiricalDistribution):
    """Distortion objective with a quadratic penalty enforcing m1 < m2."""
    kappa = 1e6 * work.second_moment()
    delta = 1e-9 * work.max_value

    def objective(x: np.ndarray) -> float:
        m1, m2 = float(x[0]), float(x[1])
        penalty = kappa * max(0.0, m1 - m2 + delta) ** 2
        return _raw_min3_distortion(work, m1, m2) + penalty

    return objective


def de_bounds(work: EmpiricalDistribution, var_floor: float | None) -> tuple:
    worst = work.max_value
    lo = 1e-9 * worst
    if var_floor is None:
        return ((lo, worst), (lo, worst))
    if not var_floor < worst:
        raise InfeasibleConstraint(
            f"var floor {var_floor!r} must lie below the worst case {worst!r}"
        )
    lo_m1 = min(lo, 0.5 * var_floor)
    return ((lo_m1, var_floor), (var_floor, worst))


def solve_three_point_de(
    dist: EmpiricalDistribution,
    cfg: SolverConfig | None = None,
    var_floor: float | None = None,
) -> Quantizer3:
    """Global DE search over (m1, m2), optionally floored at m2 >= var_floor."""
    cfg = cfg or SolverConfig()
    work = _require_support(dist)
    bounds = de_bounds(work, var_floor)
    result = de_minimize(
        penalized_distortion_objective(work),
        DEConfig(
            bounds=bounds,
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
    return _assemble(
        work,
        m1,
        m2,
        "de",
        result.generations_used,
        result.converged,
        constrained=var_floor is not None,
        var_floor=var_floor,
    )


def solve_three_point_constrained(
    dist: EmpiricalDistribution,
    var_floor: float,
    cfg: SolverConfig | None = None,
) -> Quantizer3:
    """Minimize the distortion subject to m2 >= var_floor.

    The unconstrained fixed point is returned unchanged whenever it already
    clears the floor; otherwise the floored box is searched numerically.
    """
    cfg = cfg or SolverConfig()
    work = _require_support(dist)
    if not var_floor < work.max_value:
        raise InfeasibleConstraint(
            f"var floor {var_floor!r} must lie below the worst case {work.max_value!r}"
        )
    unconstrained = solve_three_point(dist, cfg)
    if unconstrained.m2 >= var_floor:
        return replace(unconstrained, constrained=True, var_floor=var_floor)
    return solve_three_point_de(dist, cfg, var_floor=var_floor)


# -- criticality ---------------------------------------------------------------


def directional_derivative(
    dist: EmpiricalDistribution, m1: float, m2: float, v: np.ndarray
) -> float:
    """Empirical one-sided derivative of the distortion at (m1, m2) along v.

    Per atom the derivative of min(x^2, (x-m1)^2, (x-m2)^2) is the minimum of
    the active branch gradients dotted with v; ties (atoms on cell
    boundaries) take the minimum over all active branches.
    """
    x = dist.values
    w = dist.weights
    h0 = x**2
    h1 = (x - m1) ** 2
    h2 = (x - m2) ** 2
    hmin = np.minimum(h0, np.minimum(h1, h2))
    scale = max(dist.max_value**2, m2**2, 1e-300)
    tol = 1e-9 * np.maximum(hmin, 1e-6 * scale)

    d0 = np.zeros_like(x)
    d1 = 2.0 * (m1 - x) * v[0]
    d2 = 2.0 * (m2 - x) * v[1]
    big = np.inf
    c0 = np.where(h0 <= hmin + tol, d0, big)
    c1 = np.where(h1 <= hmin + tol, d1, big)
    c2 = np.where(h2 <= hmin + tol, d2, big)
    return float(np.dot(w, np.minimum(c0, np.minimum(c1, c2))))


def _direction_set(n_directions: int, rng_seed: int) -> np.ndarray:
    canonical = np.array(
        [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (-1, -1), (1, -1), (-1, 1)],
        dtype=float,
    )
    canonical /= np.linalg.norm(canonical, axis=1, keepdims=True)
    extra = max(0, n_directions - len(canonical))
    rng = np.random.Generator(np.random.Philox(key=rng_seed))
    angles = rng.random(extra) * 2.0 * np.pi
    rand = np.column_stack([np.cos(angles), np.sin(angles)])
    return np.vstack([canonical[:n_directions], rand])


def criticality_check(
    dist: EmpiricalDistribution,
    m1: float,
    m2: float,
    n_directions: int = 64,
    rng_seed: int = 0,
    numeric_tol: float | None = None,
) -> CriticalityReport:
    """Audit (m1, m2) for criticality along a spread of unit directions.

    Also probes the structurally non-critical points (the origin and the
    axis points beyond twice the sample range, plus the 2x-atom corners for
    single-atom samples) and records a negative-derivative witness for each.
    """
    work = dist.clamp_profits()
    if numeric_tol is None:
        numeric_tol = 1e-9 * max(work.second_moment(), 1e-300)
    directions = _direction_set(n_directions, rng_seed)

    derivs = [directional_derivative(work, m1, m2, v) for v in directions]
    min_deriv = float(min(derivs))

    span = 2.5 * work.max_value
    probes = [(0.0, 0.0), (0.0, span), (span, 0.0)]
    if work.n_atoms == 1:
        x0 = work.max_value
        probes += [(0.0, 2.0 * x0), (2.0 * x0, 0.0), (2.0 * x0, 2.0 * x0)]
    checks = []
    for point in probes:
        vals = np.array([directional_derivative(work, point[0], point[1], v) for v in directions])
        witness = int(np.argmin(vals))
        checks.append((point, tuple(directions[witness]), float(vals[witness])))

    return CriticalityReport(
        directions_tested=len(directions),
        min_directional_derivative=min_deriv,
        excluded_point_checks=tuple(checks),
        is_critical=min_deriv >= -numeric_tol,
    )
