"""Two-point loss quantizer: one atom pinned at zero plus a loss magnitude m.

The optimal threshold a solves 2a = E[X | X > a]; the magnitude is m = 2a
with propensity p = P(X > a) and distortion E[min(X^2, (X-m)^2)].
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import SolverConfig
from .distribution import EmpiricalDistribution
from .errors import EmptyConditioningEvent, SupportTooSmall

_OSCILLATION_WINDOW = 3
_FALLBACK_DAMPING = 0.5


def nearest_center_distortion(dist: EmpiricalDistribution, centers: np.ndarray) -> float:
    """E[min_i (X - c_i)^2] for a sorted codebook, via prefix moments.

    Cell boundaries are the midpoints between consecutive centers; atoms on a
    boundary go to the lower cell (the squared error is identical either way).
    """
    centers = np.asarray(centers, dtype=float)
    mids = 0.5 * (centers[:-1] + centers[1:])
    edges = np.concatenate(([-np.inf], mids, [np.inf]))
    total = 0.0
    for c, lo, hi in zip(centers, edges[:-1], edges[1:]):
        mass, first, second = dist.interval_moments(lo, hi)
        total += second - 2.0 * c * first + c * c * mass
    return float(total)


def distortion_two_point(dist: EmpiricalDistribution, m: float) -> float:
    """Distortion of the codebook {0, m}: E[min(X^2, (X-m)^2)]."""
    if m < 0.0:
        raise ValueError("magnitude must be nonnegative")
    return nearest_center_distortion(dist, np.array([0.0, m]))


@dataclass(frozen=True)
class Quantizer2:
    """Two-point summary: magnitude m = 2a, propensity p = P(X > a)."""

    m: float
    p: float
    a: float
    distortion: float
    iterations: int
    residual: float
    converged: bool

    def to_json_dict(self) -> dict:
        return {
            "m": self.m,
            "p": self.p,
            "a": self.a,
            "distortion": self.distortion,
            "iterations": self.iterations,
            "residual": self.residual,
            "converged": self.converged,
        }


def _iterate_threshold(
    work: EmpiricalDistribution, a0: float, tol_abs: float, cfg: SolverConfig
) -> tuple[float, int, float, bool]:
    """Damped fixed-point iteration a <- E[X | X > a] / 2 from a0."""
    a = a0
    lam = cfg.damping
    signs: list[float] = []
    residual = np.inf
    max_atom = work.max_value
    for it in range(1, cfg.max_iter + 1):
        if a >= max_atom:
            # degenerate step on heavy-point samples: restart lower
            a = a0 / 2.0
            signs.clear()
            continue
        try:
            target = work.conditional_mean(a, np.inf)
        except EmptyConditioningEvent:
            a = a0 / 2.0
            signs.clear()
            continue
        r = 2.0 * a - target
        residual = abs(r)
        if residual < tol_abs:
            return a, it, residual, True
        signs.append(np.sign(r))
        if len(signs) >= _OSCILLATION_WINDOW:
            tail = signs[-_OSCILLATION_WINDOW:]
            if all(tail[i] != 0 and tail[i] == -tail[i + 1] for i in range(len(tail) - 1)):
                lam = _FALLBACK_DAMPING
        a = (1.0 - lam) * a + lam * (target / 2.0)
    return a, cfg.max_iter, residual, False


def solve_two_point(dist: EmpiricalDistribution, cfg: SolverConfig | None = None) -> Quantizer2:
    """Solve the two-point quantizer on the loss part of ``dist``.

    Multi-start picks the lowest-distortion fixed point when
    ``cfg.multistart > 1``; non-convergence returns the best iterate with
    ``converged=False``.
    """
    cfg = cfg or SolverConfig()
    work = dist.clamp_profits()
    if work.n_atoms < 2:
        raise SupportTooSmall("two-point quantizer needs at least 2 distinct support points")
    mean = work.mean()
    tol_abs = cfg.tol * mean

    starts = [mean / 2.0]
    for u in (0.5, 0.9, 0.25, 0.75):
        if len(starts) >= cfg.multistart:
            break
        starts.append(work.quantile(u) / 2.0)

    candidates = []
    for a0 in starts[: max(cfg.multistart, 1)]:
        a, iters, residual, ok = _iterate_threshold(work, a0, tol_abs, cfg)
        m = 2.0 * a
        candidates.append(
            Quantizer2(
                m=m,
                p=work.tail_probability(a),
                a=a,
                distortion=distortion_two_point(work, m),
                iterations=iters,
                residual=residual,
                converged=ok,
            )
        )
    converged = [c for c in candidates if c.converged]
    pool = converged if converged else candidates
    return min(pool, key=lambda c: (c.distortion, c.m))
